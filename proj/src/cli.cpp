#include "semab/cli.hpp"

#include "semab/error.hpp"
#include "semab/experiment.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace semab {

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
  std::size_t split = 0;
  std::size_t trial = 0;
  std::string variant;
  std::string model;
  std::string scorer = "msp";
  std::string scores;
  std::string flags;
  std::string curve;
  std::string record;
  std::string format = "markdown";
};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c == '\n' ? ' ' : c);
  }
  return out;
}

void error_line(std::ostream& err, const std::string& code, const std::string& message) {
  err << "error: code=" << code << " message=\"" << escape(message) << "\"\n";
}

ExperimentConfig config_from(const Options& o) {
  if (o.config.empty()) throw Error("missing_config", "--config is required");
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output_dir = o.out;
  return cfg;
}

const Variant& pick_variant(const ExperimentConfig& cfg, const std::string& name) {
  if (name.empty()) return cfg.variants.front();
  for (const Variant& v : cfg.variants)
    if (v.name == name) return v;
  throw Error("unknown_variant", "config has no variant '" + name + "'");
}

HoldOutSplit split_from(const ExperimentConfig& cfg, std::size_t k) {
  const auto [train_set, test_set] = load_datasets(cfg.dataset, cfg.seed);
  return make_holdout_split(train_set, test_set, k, cfg.trials);
}

std::string default_model_path(const ExperimentConfig& cfg, const Variant& v, const Options& o) {
  return (cfg.output_dir / "models" /
          (v.name + "_split" + std::to_string(o.split) + "_trial" + std::to_string(o.trial) + ".semm"))
      .string();
}

int cmd_split(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = config_from(o);
  const auto [train_set, test_set] = load_datasets(cfg.dataset, cfg.seed);
  const auto splits = make_holdout_splits(train_set, test_set, cfg.trials);
  const std::filesystem::path dir = cfg.output_dir / "splits";
  std::filesystem::create_directories(dir);
  for (const HoldOutSplit& s : splits) {
    const std::string stem = "split" + std::to_string(s.held_out_class);
    write_raw_tensor(s.train, dir / (stem + "_train.semt"));
    LabeledDataset test;
    test.class_names = train_set.class_names;
    std::ostringstream flags;
    flags << "example_index,is_anomaly\n";
    for (std::size_t i = 0; i < s.test_examples.size(); ++i) {
      const TestExample& e = s.test_examples[i];
      test.images.push_back(e.image);
      test.labels.push_back(e.is_anomaly ? s.held_out_class : s.source_classes[*e.label]);
      flags << i << ',' << (e.is_anomaly ? 1 : 0) << '\n';
    }
    write_raw_tensor(test, dir / (stem + "_test.semt"));
    write_text(dir / (stem + "_flags.csv"), flags.str());
    Json line = {{"split", s.held_out_class},
                 {"held_out", s.held_out_name},
                 {"n_train", s.train.size()},
                 {"n_test", s.test_examples.size()},
                 {"skew", s.skew},
                 {"trials", s.trials}};
    out << line.dump() << '\n';
  }
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = config_from(o);
  const Variant& variant = pick_variant(cfg, o.variant);
  const HoldOutSplit split = split_from(cfg, o.split);
  if (o.trial >= cfg.trials) {
    throw Error("out_of_range", "trial " + std::to_string(o.trial) + " >= " + std::to_string(cfg.trials));
  }
  MultiHeadModel model = build_cell_model(cfg, variant, split, o.trial);
  const TrainLog log = train(model, split, cell_train_config(cfg, variant, o.split, o.trial));
  const std::string path = o.model.empty() ? default_model_path(cfg, variant, o) : o.model;
  if (std::filesystem::path(path).has_parent_path()) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  }
  save_model(model, path);
  Json epochs = Json::array();
  for (const EpochRecord& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"primary_loss", e.primary_loss},
                      {"aux_loss", e.aux_loss},
                      {"train_accuracy", e.train_accuracy}});
  }
  out << Json({{"model", path}, {"test_accuracy", test_accuracy(model, split)}, {"epochs", epochs}}).dump() << '\n';
  return 0;
}

int cmd_score(const Options& o, std::ostream& out) {
  const ExperimentConfig cfg = config_from(o);
  const HoldOutSplit split = split_from(cfg, o.split);
  ScorerSpec spec;
  bool found = false;
  for (const ScorerSpec& s : cfg.scorers) {
    if (s.name() == o.scorer) {
      spec = s;
      found = true;
    }
  }
  if (!found) spec = parse_config(Json{{"scorers", Json::array({o.scorer})}}).scorers.front();
  BatchScorer scorer;
  std::optional<MultiHeadModel> model;
  if (!spec.is_baseline()) {
    const std::string path = o.model.empty() ? default_model_path(cfg, pick_variant(cfg, o.variant), o) : o.model;
    model = load_model(path);
  }
  switch (spec.kind) {
    case ScorerKind::msp: scorer = make_msp_scorer(*model); break;
    case ScorerKind::odin: scorer = make_odin_scorer(*model, spec.odin); break;
    case ScorerKind::gmm: scorer = make_gmm_scorer(fit_pixel_gmm(split.train.images, spec.gmm_max_iters, spec.gmm_tol)); break;
    case ScorerKind::edge: scorer = make_edge_scorer(spec.polarity); break;
  }
  const auto scored = score_test_set(scorer, split);
  std::ostringstream csv;
  write_scores_csv(csv, scored);
  if (o.scores.empty()) {
    out << csv.str();
  } else {
    write_text(o.scores, csv.str());
  }
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.scores.empty()) throw Error("usage", "eval needs --scores");
  std::ifstream scores_in(o.scores);
  if (!scores_in) throw Error("io_error", "cannot read '" + o.scores + "'");
  std::vector<ScoredExample> scored = read_scores_csv(scores_in);
  if (!o.flags.empty()) {
    std::ifstream flags_in(o.flags);
    if (!flags_in) throw Error("io_error", "cannot read '" + o.flags + "'");
    const std::vector<bool> flags = read_flags_csv(flags_in);
    if (flags.size() != scored.size()) {
      throw Error("count_mismatch", "count mismatch: " + std::to_string(scored.size()) + " scores, " +
                                        std::to_string(flags.size()) + " flags");
    }
    for (std::size_t i = 0; i < flags.size(); ++i) scored[i].is_anomaly = flags[i];
  }
  const APResult ap = average_precision(scored);
  if (!o.curve.empty()) {
    std::ostringstream csv;
    write_pr_curve_csv(csv, pr_curve(scored));
    write_text(o.curve, csv.str());
  }
  out << Json({{"average_precision", ap.average_precision},
               {"skew", ap.skew},
               {"n_pos", ap.n_pos},
               {"n_neg", ap.n_neg}})
             .dump()
      << '\n';
  return 0;
}

int cmd_report(const Options& o, std::ostream& out) {
  std::filesystem::path path = o.record;
  if (path.empty()) path = std::filesystem::path(o.out.empty() ? "out" : o.out) / "record.json";
  Json record;
  try {
    record = Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("bad_record", "'" + path.string() + "' is not valid JSON: " + e.what());
  }
  out << emit_report(record, parse_report_format(o.format));
  return 0;
}

int cmd_run(const Options& o, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = config_from(o);
  RunOptions options;
  options.resume = o.resume;
  options.progress = &err;
  RunSummary summary;
  run_experiment(cfg, options, &summary);
  out << Json({{"output_dir", cfg.output_dir.string()},
               {"computed", summary.computed},
               {"reused", summary.reused},
               {"failed", summary.failed}})
             .dump()
      << '\n';
  return summary.failed == 0 ? 0 : 1;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semantic anomaly detection benchmark"};
  app.name("semab");
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;

  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (JSON)");
    sub->add_option("--seed", seed, "Override the root seed");
    sub->add_option("--out", o.out, "Output directory");
  };
  CLI::App* split = app.add_subcommand("split", "Export hold-out splits as SEMT files and flag CSVs");
  add_config(split);
  CLI::App* train_cmd = app.add_subcommand("train", "Train one (variant, split, trial) model and save it");
  add_config(train_cmd);
  CLI::App* score = app.add_subcommand("score", "Score a split's test set");
  add_config(score);
  CLI::App* eval = app.add_subcommand("eval", "Average precision of a scores CSV");
  CLI::App* report = app.add_subcommand("report", "Render an experiment record");
  CLI::App* run = app.add_subcommand("run", "Run a full experiment");
  add_config(run);
  run->add_flag("--resume", o.resume, "Reuse cells already on disk");
  for (CLI::App* sub : {train_cmd, score}) {
    sub->add_option("--split", o.split, "Held-out class id");
    sub->add_option("--trial", o.trial, "Trial index");
    sub->add_option("--variant", o.variant, "Variant name (default: first)");
    sub->add_option("--model", o.model, "Model checkpoint path");
  }
  score->add_option("--scorer", o.scorer, "msp, odin, gmm or edge");
  score->add_option("--scores", o.scores, "Write scores CSV here (default: stdout)");
  eval->add_option("--scores", o.scores, "Scores CSV")->required();
  eval->add_option("--flags", o.flags, "Flags CSV overriding is_anomaly");
  eval->add_option("--curve", o.curve, "Write the PR curve CSV here");
  report->add_option("--record", o.record, "Record JSON (default: <out>/record.json)");
  report->add_option("--out", o.out, "Output directory holding record.json");
  report->add_option("--format", o.format, "markdown or csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    error_line(err, "usage", e.what());
    err << app.help();
    return 2;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    const CLI::Option* opt = sub->get_option_no_throw("--seed");
    if (opt && opt->count() > 0) o.seed = seed;
  }

  try {
    if (split->parsed()) return cmd_split(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (score->parsed()) return cmd_score(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (report->parsed()) return cmd_report(o, out);
    if (run->parsed()) return cmd_run(o, out, err);
  } catch (const Error& e) {
    error_line(err, e.code(), e.what());
    return e.code() == "missing_config" || e.code() == "usage" ? 2 : 1;
  } catch (const std::exception& e) {
    error_line(err, "internal_error", e.what());
    return 1;
  }
  return 2;
}

}  // namespace semab
