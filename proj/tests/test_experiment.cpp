#include "doctest.h"

#include "semab/cli.hpp"
#include "semab/error.hpp"
#include "semab/experiment.hpp"

#include <set>
#include <sstream>

using namespace semab;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "semab_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Json tiny_config_doc() {
  return Json::parse(R"({
    "dataset": {"format": "synth_shapes", "classes": ["disk", "square", "cross"],
                "train_per_class": 6, "test_per_class": 3, "image_size": 16},
    "model": {"widths": [4, 8], "pooled_blocks": 1},
    "train": {"epochs": 1},
    "variants": [{"name": "plain"}, {"name": "rot", "train": {"aux_task": "rotation", "lambda": 0.25}}],
    "scorers": ["msp", "edge"],
    "trials": 1,
    "seed": 4
  })");
}

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "semab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

Json one_split_record(const Json& cell) {
  Json cfg = config_to_json(parse_config(Json::parse(R"({"scorers": ["msp"]})")));
  Json record;
  record["config"] = cfg;
  record["splits"] = Json::array({{{"split", 0}, {"held_out", "disk"}, {"skew", 0.25}}});
  Json entry = {{"split", 0}, {"held_out", "disk"}};
  entry.update(cell);
  record["aggregates"]["default"]["msp"] = {{"per_split", Json::array({entry})}, {"average", cell.value("mean", Json()).is_null() ? Json() : cell}};
  return record;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults fill in and survive a round trip") {
    const ExperimentConfig cfg = parse_config(Json::object());
    REQUIRE(cfg.variants.size() == 1);
    CHECK(cfg.variants[0].name == "default");
    REQUIRE(cfg.scorers.size() == 1);
    CHECK(cfg.scorers[0].name() == "msp");
    const Json canonical = config_to_json(cfg);
    CHECK(config_to_json(parse_config(canonical)) == canonical);
  }

  TEST_CASE("variant overrides merge over the shared training recipe") {
    const ExperimentConfig cfg = parse_config(tiny_config_doc());
    REQUIRE(cfg.variants.size() == 2);
    CHECK(cfg.variants[0].train.aux_task == AuxTask::none);
    CHECK(cfg.variants[1].train.aux_task == AuxTask::rotation);
    CHECK(cfg.variants[1].train.lambda == 0.25);
    CHECK(cfg.variants[1].train.epochs == 1);
  }

  TEST_CASE("unknown keys are rejected by name") {
    Json doc = tiny_config_doc();
    doc["train"]["epochz"] = 3;
    try {
      parse_config(doc);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == "invalid_config");
      CHECK(std::string(e.what()).find("epochz") != std::string::npos);
    }
  }

  TEST_CASE("bad values and duplicate variant names are rejected") {
    Json doc = tiny_config_doc();
    doc["trials"] = 0;
    CHECK(error_code([&] { parse_config(doc); }) == "invalid_config");
    doc = tiny_config_doc();
    doc["variants"][1]["name"] = "plain";
    CHECK(error_code([&] { parse_config(doc); }) == "invalid_config");
    doc = tiny_config_doc();
    doc["scorers"] = Json::array({"mahalanobis"});
    CHECK(error_code([&] { parse_config(doc); }) == "invalid_config");
  }

  TEST_CASE("missing config file") {
    CHECK(error_code([] { load_config("/nonexistent/c.json"); }) == "missing_config");
  }

  TEST_CASE("cell seeds differ across cells and ignore the variant") {
    std::set<std::uint64_t> seeds;
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t t = 0; t < 3; ++t) seeds.insert(cell_seed(9, s, t));
    CHECK(seeds.size() == 12);
    CHECK(cell_seed(9, 1, 2) == cell_seed(9, 1, 2));
    CHECK(cell_seed(9, 1, 2) != cell_seed(10, 1, 2));
  }
}

TEST_SUITE("runner") {
  TEST_CASE("record shape, reproducibility and resume") {
    ExperimentConfig cfg = parse_config(tiny_config_doc());
    cfg.output_dir = scratch("run_a");
    RunSummary first;
    const Json record = run_experiment(cfg, {}, &first);
    CHECK(first.computed == 6);
    CHECK(first.failed == 0);
    CHECK(record.at("splits").size() == 3);
    for (const char* v : {"plain", "rot"}) {
      for (const char* metric : {"msp", "edge", "test_accuracy"}) {
        const Json& block = record.at("aggregates").at(v).at(metric);
        CHECK(block.at("per_split").size() == 3);
        CHECK_FALSE(block.at("average").is_null());
      }
    }
    CHECK(std::filesystem::exists(cfg.output_dir / "cells" / "rot" / "split2_trial0.json"));
    CHECK(std::filesystem::exists(cfg.output_dir / "scores" / "plain" / "split0_trial0_msp.csv"));
    CHECK(std::filesystem::exists(cfg.output_dir / "report.md"));

    const std::string bytes = read_text(cfg.output_dir / "record.json");
    ExperimentConfig again = cfg;
    again.output_dir = scratch("run_b");
    run_experiment(again);
    CHECK(read_text(again.output_dir / "record.json") == bytes);

    RunSummary resumed;
    run_experiment(cfg, {true, nullptr}, &resumed);
    CHECK(resumed.computed == 0);
    CHECK(resumed.reused == 6);
    CHECK(read_text(cfg.output_dir / "record.json") == bytes);
  }

  TEST_CASE("failing cells are recorded and the run completes") {
    Json doc = tiny_config_doc();
    doc["scorers"] = Json::array({Json{{"name", "odin"}, {"temperature", -1.0}}});
    doc["variants"] = Json::array({Json{{"name", "plain"}}});
    doc["dataset"]["classes"] = Json::array({"disk", "square"});
    ExperimentConfig cfg;
    try {
      cfg = parse_config(doc);
    } catch (const Error&) {
      // negative temperatures may be rejected up front; then force a failure at run time
      doc["scorers"] = Json::array({"odin"});
      cfg = parse_config(doc);
      cfg.scorers[0].odin.temperature = -1.0;
    }
    cfg.output_dir = scratch("run_fail");
    RunSummary summary;
    const Json record = run_experiment(cfg, {}, &summary);
    CHECK(summary.failed == 2);
    CHECK(record.at("cells").size() == 2);
    CHECK(record.at("cells")[0].at("status") == "error");
    CHECK(record.at("aggregates").at("plain").at("odin").at("average").is_null());
    CHECK(read_text(cfg.output_dir / "report.md").find("—") != std::string::npos);
  }

  TEST_CASE("aggregates are recomputable from the cells") {
    ExperimentConfig cfg = parse_config(tiny_config_doc());
    cfg.trials = 2;
    cfg.variants.resize(1);
    cfg.scorers.resize(1);
    cfg.splits = {0, 2};
    cfg.output_dir = scratch("run_agg");
    const Json record = run_experiment(cfg);
    const Json& cells = record.at("cells");
    REQUIRE(cells.size() == 4);
    std::vector<double> split_means;
    for (std::size_t s : {0u, 2u}) {
      std::vector<double> values;
      for (const Json& c : cells)
        if (c.at("split") == s) values.push_back(c.at("average_precision").at("msp").get<double>());
      split_means.push_back(aggregate_trials(values).mean);
    }
    const Json& avg = record.at("aggregates").at("plain").at("msp").at("average");
    CHECK(avg.at("mean").get<double>() == doctest::Approx((split_means[0] + split_means[1]) / 2.0).epsilon(1e-15));
  }
}

TEST_SUITE("report") {
  TEST_CASE("mean 0.5 std 0 renders as 50.00 ± 0.00") {
    const std::string md = emit_report(one_split_record({{"mean", 0.5}, {"std", 0.0}, {"n_trials", 1}}), ReportFormat::markdown);
    CHECK(md.find("| disk | 50.00 ± 0.00 |") != std::string::npos);
    CHECK(md.find("| Average | 50.00 ± 0.00 |") != std::string::npos);
  }

  TEST_CASE("missing cells render as a dash") {
    const std::string md =
        emit_report(one_split_record({{"mean", nullptr}, {"std", nullptr}, {"n_trials", 0}}), ReportFormat::markdown);
    CHECK(md.find("| disk | — |") != std::string::npos);
    CHECK(md.find("| Average | — |") != std::string::npos);
  }

  TEST_CASE("csv carries 17 significant digits") {
    const double v = 1.0 / 3.0;
    const std::string csv = emit_report(one_split_record({{"mean", v}, {"std", 0.1}, {"n_trials", 3}}), ReportFormat::csv);
    std::istringstream in(csv);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "table,variant,metric,split,held_out,mean,std,n_trials");
    std::vector<std::string> cells;
    std::stringstream ss(row);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 8);
    CHECK(std::stod(cells[5]) == v);
    CHECK(cells[7] == "3");
  }

  TEST_CASE("skew column appears with baselines") {
    Json record = one_split_record({{"mean", 0.5}, {"std", 0.0}, {"n_trials", 1}});
    record["config"]["scorers"].push_back({{"name", "edge"}});
    const std::string md = emit_report(record, ReportFormat::markdown);
    CHECK(md.find("| Held-out class | Skew | edge | msp |") != std::string::npos);
    CHECK(md.find("| disk | 25.00 | — | 50.00 ± 0.00 |") != std::string::npos);
  }

  TEST_CASE("unknown format") {
    CHECK(error_code([] { parse_report_format("html"); }) == "unknown_format");
  }
}

TEST_SUITE("cli") {
  TEST_CASE("no subcommand or an unknown one is a usage error") {
    CHECK(run_cli({}).code == 2);
    const CliResult r = run_cli({"frobnicate"});
    CHECK(r.code == 2);
    CHECK(r.err.find("error: code=usage") == 0);
  }

  TEST_CASE("unknown flag is a usage error") {
    CHECK(run_cli({"run", "--bogus"}).code == 2);
  }

  TEST_CASE("missing config file exits 2 naming the path") {
    const CliResult r = run_cli({"run", "--config", "/nonexistent/cfg.json"});
    CHECK(r.code == 2);
    CHECK(r.err.find("code=missing_config") != std::string::npos);
    CHECK(r.err.find("/nonexistent/cfg.json") != std::string::npos);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
  }

  TEST_CASE("eval prints average precision from a scores CSV and a flags CSV") {
    const auto dir = scratch("cli_eval");
    write_text(dir / "s.csv", "example_index,score,is_anomaly\n0,0.9,0\n1,0.8,0\n2,0.7,0\n3,0.6,0\n");
    write_text(dir / "f.csv", "example_index,is_anomaly\n0,1\n1,0\n2,1\n3,0\n");
    const CliResult r = run_cli({"eval", "--scores", (dir / "s.csv").string(), "--flags", (dir / "f.csv").string(),
                                 "--curve", (dir / "pr.csv").string()});
    REQUIRE(r.code == 0);
    const Json j = Json::parse(r.out);
    CHECK(std::abs(j.at("average_precision").get<double>() - 5.0 / 6.0) < 1e-15);
    CHECK(read_text(dir / "pr.csv").rfind("threshold,precision,recall\n", 0) == 0);
  }

  TEST_CASE("eval with mismatched flag count") {
    const auto dir = scratch("cli_eval_bad");
    write_text(dir / "s.csv", "example_index,score,is_anomaly\n0,0.9,1\n");
    write_text(dir / "f.csv", "example_index,is_anomaly\n0,1\n1,0\n");
    const CliResult r = run_cli({"eval", "--scores", (dir / "s.csv").string(), "--flags", (dir / "f.csv").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("code=count_mismatch") != std::string::npos);
  }

  TEST_CASE("split, train, score, eval and run compose") {
    const auto dir = scratch("cli_flow");
    Json doc = tiny_config_doc();
    doc["variants"].erase(1);
    write_text(dir / "c.json", doc.dump());
    const std::string cfg = (dir / "c.json").string(), out = (dir / "out").string();

    const CliResult split = run_cli({"split", "--config", cfg, "--out", out});
    REQUIRE(split.code == 0);
    CHECK(std::filesystem::exists(dir / "out" / "splits" / "split1_train.semt"));
    const LabeledDataset exported = load_raw_tensor(dir / "out" / "splits" / "split1_train.semt");
    CHECK(exported.size() == 12);

    REQUIRE(run_cli({"train", "--config", cfg, "--out", out, "--split", "1"}).code == 0);
    CHECK(std::filesystem::exists(dir / "out" / "models" / "plain_split1_trial0.semm"));
    const std::string scores = (dir / "scores.csv").string();
    REQUIRE(run_cli({"score", "--config", cfg, "--out", out, "--split", "1", "--scorer", "msp", "--scores", scores})
                .code == 0);
    const CliResult eval = run_cli({"eval", "--scores", scores, "--flags",
                                    (dir / "out" / "splits" / "split1_flags.csv").string()});
    REQUIRE(eval.code == 0);
    CHECK(Json::parse(eval.out).at("skew").get<double>() == doctest::Approx(1.0 / 3.0));

    const CliResult run = run_cli({"run", "--config", cfg, "--out", out, "--seed", "4"});
    REQUIRE(run.code == 0);
    CHECK(Json::parse(run.out).at("computed") == 3);
    // the standalone train and score path reproduces the runner's cell
    CHECK(read_text(scores) == read_text(dir / "out" / "scores" / "plain" / "split1_trial0_msp.csv"));
    const CliResult resumed = run_cli({"run", "--config", cfg, "--out", out, "--resume"});
    CHECK(Json::parse(resumed.out).at("computed") == 0);
    const CliResult report = run_cli({"report", "--out", out, "--format", "csv"});
    REQUIRE(report.code == 0);
    CHECK(report.out.rfind("table,variant,metric", 0) == 0);
  }
}
