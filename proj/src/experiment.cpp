#include "semab/experiment.hpp"

#include "semab/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace semab {

namespace {

[[noreturn]] void bad_config(const std::string& where, const std::string& what) {
  throw Error("invalid_config", where + ": " + what);
}

// Walks one JSON object, remembering which keys were consumed so that
// leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad_config(where_, "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const Json& at(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) bad_config(path(key), "expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) bad_config(path(key), "expected a string");
        out = v.get<std::string>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) bad_config(path(key), "expected a number");
        out = v.get<T>();
        if (!std::isfinite(out)) bad_config(path(key), "expected a finite number");
      } else {
        if (!v.is_number_unsigned()) bad_config(path(key), "expected a non-negative integer");
        out = v.get<T>();
      }
    } catch (const nlohmann::json::exception& e) {
      bad_config(path(key), e.what());
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) bad_config(path(key), "unknown key");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename F>
auto checked(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    bad_config(where, e.what());
  }
}

std::vector<std::filesystem::path> read_paths(ObjectReader& r, const std::string& key) {
  std::vector<std::filesystem::path> out;
  if (!r.has(key)) return out;
  const Json& v = r.at(key);
  if (v.is_string()) return {v.get<std::string>()};
  if (!v.is_array()) bad_config(r.path(key), "expected a path or a list of paths");
  for (const Json& p : v) {
    if (!p.is_string()) bad_config(r.path(key), "expected a path or a list of paths");
    out.emplace_back(p.get<std::string>());
  }
  return out;
}

DatasetSpec parse_dataset(const Json& j) {
  ObjectReader r(j, "dataset");
  DatasetSpec d;
  std::string format = "synth_shapes";
  r.get("format", format);
  if (format == "synth_shapes") {
    d.format = DatasetFormat::synth_shapes;
    if (r.has("classes")) {
      const Json& cls = r.at("classes");
      if (!cls.is_array() || cls.size() < 2) bad_config("dataset.classes", "expected at least two shape names");
      d.classes.clear();
      for (const Json& c : cls) {
        if (!c.is_string()) bad_config("dataset.classes", "expected shape names");
        d.classes.push_back(checked("dataset.classes", [&] { return parse_shape_kind(c.get<std::string>()); }));
      }
    }
    r.get("train_per_class", d.train_per_class);
    r.get("test_per_class", d.test_per_class);
    r.get("image_size", d.image_size);
    if (d.image_size < 16) bad_config("dataset.image_size", "must be at least 16");
    if (d.train_per_class == 0 || d.test_per_class == 0) bad_config("dataset", "per-class counts must be positive");
  } else if (format == "cifar" || format == "idx" || format == "raw") {
    d.format = format == "cifar" ? DatasetFormat::cifar : (format == "idx" ? DatasetFormat::idx : DatasetFormat::raw);
    d.train_files = read_paths(r, "train");
    d.test_files = read_paths(r, "test");
    const std::size_t need = d.format == DatasetFormat::idx ? 2 : 1;
    for (const auto* files : {&d.train_files, &d.test_files}) {
      if (files->size() < need || (d.format != DatasetFormat::cifar && files->size() != need)) {
        bad_config("dataset", format == "idx" ? "idx needs [images, labels] for train and test"
                                              : format + " needs train and test files");
      }
    }
  } else {
    bad_config("dataset.format", "unknown format '" + format + "'");
  }
  r.finish();
  return d;
}

Json dataset_to_json(const DatasetSpec& d) {
  Json j;
  switch (d.format) {
    case DatasetFormat::synth_shapes: {
      j["format"] = "synth_shapes";
      Json cls = Json::array();
      for (ShapeKind k : d.classes) cls.push_back(std::string(to_string(k)));
      j["classes"] = cls;
      j["train_per_class"] = d.train_per_class;
      j["test_per_class"] = d.test_per_class;
      j["image_size"] = d.image_size;
      return j;
    }
    case DatasetFormat::cifar: j["format"] = "cifar"; break;
    case DatasetFormat::idx: j["format"] = "idx"; break;
    case DatasetFormat::raw: j["format"] = "raw"; break;
  }
  Json train = Json::array(), test = Json::array();
  for (const auto& p : d.train_files) train.push_back(p.string());
  for (const auto& p : d.test_files) test.push_back(p.string());
  j["train"] = train;
  j["test"] = test;
  return j;
}

ArchConfig parse_arch(const Json& j) {
  ObjectReader r(j, "model");
  ArchConfig a;
  r.get("in_channels", a.in_channels);
  if (r.has("widths")) {
    const Json& w = r.at("widths");
    if (!w.is_array() || w.empty()) bad_config("model.widths", "expected a non-empty list of integers");
    a.widths.clear();
    for (const Json& v : w) {
      if (!v.is_number_unsigned() || v.get<std::size_t>() == 0) bad_config("model.widths", "expected positive integers");
      a.widths.push_back(v.get<std::size_t>());
    }
  }
  r.get("pooled_blocks", a.pooled_blocks);
  r.get("norm_eps", a.norm_eps);
  r.get("norm_momentum", a.norm_momentum);
  if (a.norm_eps <= 0.0) bad_config("model.norm_eps", "must be positive");
  if (a.norm_momentum < 0.0 || a.norm_momentum > 1.0) bad_config("model.norm_momentum", "must lie in [0, 1]");
  r.finish();
  return a;
}

Json arch_to_json(const ArchConfig& a) {
  Json j;
  j["in_channels"] = a.in_channels;
  j["widths"] = a.widths;
  j["pooled_blocks"] = a.pooled_blocks;
  j["norm_eps"] = a.norm_eps;
  j["norm_momentum"] = a.norm_momentum;
  return j;
}

CpcConfig parse_cpc(const Json& j) {
  ObjectReader r(j, "cpc");
  CpcConfig c;
  r.get("rows", c.rows);
  r.get("cols", c.cols);
  r.get("patch", c.patch);
  r.get("stride", c.stride);
  r.get("pred_steps", c.pred_steps);
  r.get("negatives", c.negatives);
  r.get("encoder_blocks", c.encoder_blocks);
  r.finish();
  return c;
}

Json cpc_to_json(const CpcConfig& c) {
  Json j;
  j["rows"] = c.rows;
  j["cols"] = c.cols;
  j["patch"] = c.patch;
  j["stride"] = c.stride;
  j["pred_steps"] = c.pred_steps;
  j["negatives"] = c.negatives;
  j["encoder_blocks"] = c.encoder_blocks;
  return j;
}

TrainConfig parse_train(const Json& j, const std::string& where) {
  ObjectReader r(j, where);
  TrainConfig t;
  r.get("lambda", t.lambda);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("learning_rate", t.learning_rate);
  r.get("momentum", t.momentum);
  r.get("nesterov", t.nesterov);
  r.get("weight_decay", t.weight_decay);
  r.get("mask_augment", t.mask_augment);
  r.get("crop_pad", t.crop_pad);
  r.get("flip", t.flip);
  r.get("log_validation", t.log_validation);
  std::string aux = "none", mode = "all_four";
  r.get("aux_task", aux);
  r.get("rotation_mode", mode);
  t.aux_task = checked(r.path("aux_task"), [&] { return parse_aux_task(aux); });
  if (mode == "all_four") {
    t.rotation_mode = RotationMode::all_four;
  } else if (mode == "sampled") {
    t.rotation_mode = RotationMode::sampled;
  } else {
    bad_config(r.path("rotation_mode"), "expected 'all_four' or 'sampled'");
  }
  if (r.has("lr_schedule")) {
    const Json& s = r.at("lr_schedule");
    if (!s.is_array()) bad_config(r.path("lr_schedule"), "expected a list of [epoch, multiplier] pairs");
    for (const Json& e : s) {
      if (!e.is_array() || e.size() != 2 || !e[0].is_number_unsigned() || !e[1].is_number()) {
        bad_config(r.path("lr_schedule"), "expected a list of [epoch, multiplier] pairs");
      }
      t.lr_schedule.emplace_back(e[0].get<std::size_t>(), e[1].get<double>());
    }
  }
  if (t.batch_size == 0) bad_config(r.path("batch_size"), "must be positive");
  if (t.learning_rate <= 0.0) bad_config(r.path("learning_rate"), "must be positive");
  if (t.lambda < 0.0) bad_config(r.path("lambda"), "must be non-negative");
  if (t.momentum < 0.0 || t.momentum >= 1.0) bad_config(r.path("momentum"), "must lie in [0, 1)");
  if (t.weight_decay < 0.0) bad_config(r.path("weight_decay"), "must be non-negative");
  r.finish();
  return t;
}

Json train_to_json(const TrainConfig& t) {
  Json j;
  j["aux_task"] = std::string(to_string(t.aux_task));
  j["lambda"] = t.lambda;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["learning_rate"] = t.learning_rate;
  Json sched = Json::array();
  for (const auto& [epoch, mult] : t.lr_schedule) sched.push_back(Json::array({epoch, mult}));
  j["lr_schedule"] = sched;
  j["momentum"] = t.momentum;
  j["nesterov"] = t.nesterov;
  j["weight_decay"] = t.weight_decay;
  j["rotation_mode"] = t.rotation_mode == RotationMode::all_four ? "all_four" : "sampled";
  j["mask_augment"] = t.mask_augment;
  j["crop_pad"] = t.crop_pad;
  j["flip"] = t.flip;
  j["log_validation"] = t.log_validation;
  return j;
}

ScorerSpec parse_scorer(const Json& j) {
  ScorerSpec s;
  std::string name;
  if (j.is_string()) {
    name = j.get<std::string>();
  } else {
    ObjectReader r(j, "scorers[]");
    r.get("name", name);
    r.get("temperature", s.odin.temperature);
    r.get("epsilon", s.odin.epsilon);
    r.get("max_iters", s.gmm_max_iters);
    r.get("tol", s.gmm_tol);
    std::string polarity = "low_is_anomalous";
    r.get("polarity", polarity);
    s.polarity = checked("scorers[].polarity", [&] { return parse_edge_polarity(polarity); });
    r.finish();
  }
  if (name == "msp") {
    s.kind = ScorerKind::msp;
  } else if (name == "odin") {
    s.kind = ScorerKind::odin;
  } else if (name == "gmm") {
    s.kind = ScorerKind::gmm;
  } else if (name == "edge") {
    s.kind = ScorerKind::edge;
  } else {
    bad_config("scorers", "unknown scorer '" + name + "'");
  }
  if (s.odin.temperature <= 0.0) bad_config("scorers[].temperature", "must be positive");
  if (s.odin.epsilon < 0.0) bad_config("scorers[].epsilon", "must be non-negative");
  return s;
}

Json scorer_to_json(const ScorerSpec& s) {
  Json j;
  j["name"] = s.name();
  switch (s.kind) {
    case ScorerKind::msp: break;
    case ScorerKind::odin:
      j["temperature"] = s.odin.temperature;
      j["epsilon"] = s.odin.epsilon;
      break;
    case ScorerKind::gmm:
      j["max_iters"] = s.gmm_max_iters;
      j["tol"] = s.gmm_tol;
      break;
    case ScorerKind::edge:
      j["polarity"] = s.polarity == EdgePolarity::low_is_anomalous ? "low_is_anomalous" : "high_is_anomalous";
      break;
  }
  return j;
}

bool filename_safe(const std::string& s) {
  if (s.empty() || s == "." || s == "..") return false;
  return std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
  });
}

std::string cell_stem(std::size_t split, std::size_t trial) {
  return "split" + std::to_string(split) + "_trial" + std::to_string(trial);
}

std::filesystem::path cell_path(const ExperimentConfig& cfg, const std::string& variant, std::size_t split,
                                std::size_t trial) {
  return cfg.output_dir / "cells" / variant / (cell_stem(split, trial) + ".json");
}

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string ScorerSpec::name() const {
  switch (kind) {
    case ScorerKind::msp: return "msp";
    case ScorerKind::odin: return "odin";
    case ScorerKind::gmm: return "gmm";
    case ScorerKind::edge: return "edge";
  }
  return "unknown";
}

ExperimentConfig parse_config(const Json& doc) {
  ObjectReader r(doc, "");
  ExperimentConfig cfg;
  if (r.has("dataset")) cfg.dataset = parse_dataset(r.at("dataset"));
  if (r.has("model")) cfg.arch = parse_arch(r.at("model"));
  if (r.has("cpc")) cfg.cpc = parse_cpc(r.at("cpc"));
  Json base_train = Json::object();
  if (r.has("train")) {
    base_train = r.at("train");
    parse_train(base_train, "train");
  }
  if (r.has("variants")) {
    const Json& vs = r.at("variants");
    if (!vs.is_array() || vs.empty()) bad_config("variants", "expected a non-empty list");
    std::set<std::string> names;
    for (const Json& v : vs) {
      ObjectReader vr(v, "variants[]");
      Variant variant;
      vr.get("name", variant.name);
      if (!filename_safe(variant.name)) {
        bad_config("variants[].name", "'" + variant.name + "' must be non-empty and use only letters, digits, '-', '_' or '.'");
      }
      if (!names.insert(variant.name).second) bad_config("variants[].name", "duplicate variant '" + variant.name + "'");
      Json merged = base_train;
      if (vr.has("train")) {
        const Json& over = vr.at("train");
        if (!over.is_object()) bad_config("variants[].train", "expected an object");
        for (const auto& [k, val] : over.items()) merged[k] = val;
      }
      vr.finish();
      variant.train = parse_train(merged, "variants[" + variant.name + "].train");
      cfg.variants.push_back(std::move(variant));
    }
  } else {
    cfg.variants.push_back({"default", parse_train(base_train, "train")});
  }
  if (r.has("scorers")) {
    const Json& ss = r.at("scorers");
    if (!ss.is_array() || ss.empty()) bad_config("scorers", "expected a non-empty list");
    std::set<std::string> names;
    for (const Json& s : ss) {
      cfg.scorers.push_back(parse_scorer(s));
      if (!names.insert(cfg.scorers.back().name()).second) {
        bad_config("scorers", "duplicate scorer '" + cfg.scorers.back().name() + "'");
      }
    }
  } else {
    cfg.scorers.push_back({});
  }
  r.get("trials", cfg.trials);
  if (cfg.trials == 0) bad_config("trials", "must be positive");
  r.get("seed", cfg.seed);
  std::string out = cfg.output_dir.string();
  r.get("output_dir", out);
  cfg.output_dir = out;
  if (r.has("splits")) {
    const Json& s = r.at("splits");
    if (!s.is_array()) bad_config("splits", "expected a list of class ids");
    for (const Json& k : s) {
      if (!k.is_number_unsigned()) bad_config("splits", "expected a list of class ids");
      cfg.splits.push_back(k.get<std::size_t>());
    }
  }
  r.finish();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing_config", "config file '" + path.string() + "' not found");
  Json doc;
  try {
    doc = Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("invalid_config", "config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

Json config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["dataset"] = dataset_to_json(cfg.dataset);
  j["model"] = arch_to_json(cfg.arch);
  j["cpc"] = cpc_to_json(cfg.cpc);
  Json variants = Json::array();
  for (const Variant& v : cfg.variants) {
    Json vj;
    vj["name"] = v.name;
    vj["train"] = train_to_json(v.train);
    variants.push_back(vj);
  }
  j["variants"] = variants;
  Json scorers = Json::array();
  for (const ScorerSpec& s : cfg.scorers) scorers.push_back(scorer_to_json(s));
  j["scorers"] = scorers;
  j["trials"] = cfg.trials;
  j["seed"] = cfg.seed;
  j["splits"] = cfg.splits;
  return j;
}

std::pair<LabeledDataset, LabeledDataset> load_datasets(const DatasetSpec& spec, std::uint64_t seed) {
  switch (spec.format) {
    case DatasetFormat::synth_shapes: {
      const Rng root(seed);
      return {synth_shapes(spec.train_per_class, spec.classes, spec.image_size, root.substream("data/train")),
              synth_shapes(spec.test_per_class, spec.classes, spec.image_size, root.substream("data/test"))};
    }
    case DatasetFormat::cifar: return {load_cifar_binary(spec.train_files), load_cifar_binary(spec.test_files)};
    case DatasetFormat::idx:
      return {load_idx(spec.train_files[0], spec.train_files[1]), load_idx(spec.test_files[0], spec.test_files[1])};
    case DatasetFormat::raw: return {load_raw_tensor(spec.train_files[0]), load_raw_tensor(spec.test_files[0])};
  }
  throw Error("invalid_config", "unknown dataset format");
}

Json cell_to_json(const CellResult& cell) {
  Json j;
  j["variant"] = cell.variant;
  j["split"] = cell.split;
  j["trial"] = cell.trial;
  j["status"] = cell.ok ? "ok" : "error";
  if (cell.ok) {
    j["test_accuracy"] = number_or_null(cell.test_accuracy);
    Json ap = Json::object();
    for (const auto& [name, v] : cell.ap) ap[name] = v;
    j["average_precision"] = ap;
  } else {
    j["error"] = {{"code", cell.error_code}, {"message", cell.error_message}};
  }
  return j;
}

CellResult cell_from_json(const Json& j) {
  try {
    CellResult c;
    c.variant = j.at("variant").get<std::string>();
    c.split = j.at("split").get<std::size_t>();
    c.trial = j.at("trial").get<std::size_t>();
    c.ok = j.at("status").get<std::string>() == "ok";
    if (c.ok) {
      const Json& acc = j.at("test_accuracy");
      c.test_accuracy = acc.is_null() ? std::numeric_limits<double>::quiet_NaN() : acc.get<double>();
      for (const auto& [name, v] : j.at("average_precision").items()) c.ap.emplace_back(name, v.get<double>());
    } else {
      c.error_code = j.at("error").at("code").get<std::string>();
      c.error_message = j.at("error").at("message").get<std::string>();
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_record", std::string("malformed cell: ") + e.what());
  }
}

std::uint64_t cell_seed(std::uint64_t root_seed, std::size_t split, std::size_t trial) {
  return Rng(root_seed).substream("cell/split", split).substream("cell/trial", trial).next_u64();
}

TrainConfig cell_train_config(const ExperimentConfig& cfg, const Variant& variant, std::size_t split,
                              std::size_t trial) {
  TrainConfig t = variant.train;
  t.seed = cell_seed(cfg.seed, split, trial);
  return t;
}

MultiHeadModel build_cell_model(const ExperimentConfig& cfg, const Variant& variant, const HoldOutSplit& split,
                                std::size_t trial) {
  const Rng init(cell_seed(cfg.seed, split.held_out_class, trial));
  ArchConfig arch = cfg.arch;
  const Shape shape = split.train.image_shape();
  if (!shape.empty()) arch.in_channels = shape[0];
  return build_model(arch, split.train.num_classes(), variant.train.aux_task, init.substream("init"), cfg.cpc);
}

CellResult run_cell(const ExperimentConfig& cfg, const Variant& variant, const HoldOutSplit& split,
                    std::size_t trial, MultiHeadModel* model_out, std::vector<std::vector<ScoredExample>>* scores_out,
                    TrainLog* log_out, GmmCache* gmm_cache) {
  CellResult cell;
  cell.variant = variant.name;
  cell.split = split.held_out_class;
  cell.trial = trial;
  try {
    const bool needs_model = std::any_of(cfg.scorers.begin(), cfg.scorers.end(),
                                         [](const ScorerSpec& s) { return !s.is_baseline(); });
    std::optional<MultiHeadModel> model;
    cell.test_accuracy = std::numeric_limits<double>::quiet_NaN();
    if (needs_model) {
      model = build_cell_model(cfg, variant, split, trial);
      TrainLog log = train(*model, split, cell_train_config(cfg, variant, split.held_out_class, trial));
      cell.test_accuracy = test_accuracy(*model, split);
      if (log_out) *log_out = std::move(log);
    }
    for (const ScorerSpec& s : cfg.scorers) {
      BatchScorer scorer;
      switch (s.kind) {
        case ScorerKind::msp: scorer = make_msp_scorer(*model); break;
        case ScorerKind::odin: scorer = make_odin_scorer(*model, s.odin); break;
        case ScorerKind::gmm: {
          const auto fit = [&] { return fit_pixel_gmm(split.train.images, s.gmm_max_iters, s.gmm_tol); };
          if (!gmm_cache) {
            scorer = make_gmm_scorer(fit());
            break;
          }
          const auto key = std::make_pair(split.held_out_class, s.name());
          auto it = gmm_cache->find(key);
          if (it == gmm_cache->end()) it = gmm_cache->emplace(key, fit()).first;
          scorer = make_gmm_scorer(it->second);
          break;
        }
        case ScorerKind::edge: scorer = make_edge_scorer(s.polarity); break;
      }
      std::vector<ScoredExample> scored = score_test_set(scorer, split);
      cell.ap.emplace_back(s.name(), average_precision(scored).average_precision);
      if (scores_out) scores_out->push_back(std::move(scored));
    }
    if (model_out && model) *model_out = std::move(*model);
    cell.ok = true;
  } catch (const Error& e) {
    cell.ok = false;
    cell.error_code = e.code();
    cell.error_message = e.what();
  } catch (const std::exception& e) {
    cell.ok = false;
    cell.error_code = "internal_error";
    cell.error_message = e.what();
  }
  return cell;
}

namespace {

Json aggregate_to_json(const TrialAggregate& a) {
  return {{"mean", a.mean}, {"std", a.std}, {"n_trials", a.n_trials}};
}

// values[split_index][trial] with NaN for missing entries
Json aggregate_block(const std::vector<HoldOutSplit>& splits, const std::vector<std::vector<double>>& values) {
  Json per_split = Json::array();
  std::vector<double> split_means;
  bool complete = true;
  for (std::size_t s = 0; s < splits.size(); ++s) {
    std::vector<double> present;
    for (double v : values[s])
      if (std::isfinite(v)) present.push_back(v);
    Json entry;
    entry["split"] = splits[s].held_out_class;
    entry["held_out"] = splits[s].held_out_name;
    if (present.empty()) {
      complete = false;
      entry["mean"] = nullptr;
      entry["std"] = nullptr;
      entry["n_trials"] = 0;
    } else {
      const TrialAggregate a = aggregate_trials(present);
      split_means.push_back(a.mean);
      entry.update(aggregate_to_json(a));
    }
    per_split.push_back(entry);
  }
  Json out;
  out["per_split"] = per_split;
  if (!complete || splits.empty()) {
    out["average"] = nullptr;
    return out;
  }
  // grand average: unweighted mean of split means; spread: std over trials
  // of the cross-split average, using trials present in every split
  const std::size_t trials = values.front().size();
  std::vector<double> trial_averages;
  for (std::size_t t = 0; t < trials; ++t) {
    double acc = 0.0;
    bool all = true;
    for (std::size_t s = 0; s < splits.size(); ++s) {
      if (!std::isfinite(values[s][t])) {
        all = false;
        break;
      }
      acc += values[s][t];
    }
    if (all) trial_averages.push_back(acc / static_cast<double>(splits.size()));
  }
  TrialAggregate avg;
  avg.mean = aggregate_trials(split_means).mean;
  if (!trial_averages.empty()) {
    const TrialAggregate spread = aggregate_trials(trial_averages);
    avg.std = spread.std;
    avg.n_trials = spread.n_trials;
  }
  out["average"] = aggregate_to_json(avg);
  return out;
}

}  // namespace

Json build_record(const ExperimentConfig& cfg, const std::vector<HoldOutSplit>& splits,
                  const std::vector<CellResult>& cells) {
  Json record;
  record["schema_version"] = 1;
  record["config"] = config_to_json(cfg);
  Json split_info = Json::array();
  for (const HoldOutSplit& s : splits) {
    split_info.push_back({{"split", s.held_out_class},
                          {"held_out", s.held_out_name},
                          {"skew", s.skew},
                          {"n_train", s.train.size()},
                          {"n_test", s.test_examples.size()}});
  }
  record["splits"] = split_info;
  Json cell_list = Json::array();
  for (const CellResult& c : cells) cell_list.push_back(cell_to_json(c));
  record["cells"] = cell_list;

  std::map<std::size_t, std::size_t> split_index;
  for (std::size_t i = 0; i < splits.size(); ++i) split_index[splits[i].held_out_class] = i;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Json aggregates;
  for (const Variant& v : cfg.variants) {
    Json vj;
    for (const ScorerSpec& s : cfg.scorers) {
      std::vector<std::vector<double>> values(splits.size(), std::vector<double>(cfg.trials, nan));
      for (const CellResult& c : cells) {
        if (c.variant != v.name || !c.ok || !split_index.count(c.split) || c.trial >= cfg.trials) continue;
        for (const auto& [name, ap] : c.ap)
          if (name == s.name()) values[split_index[c.split]][c.trial] = ap;
      }
      vj[s.name()] = aggregate_block(splits, values);
    }
    std::vector<std::vector<double>> acc(splits.size(), std::vector<double>(cfg.trials, nan));
    for (const CellResult& c : cells) {
      if (c.variant != v.name || !c.ok || !split_index.count(c.split) || c.trial >= cfg.trials) continue;
      acc[split_index[c.split]][c.trial] = c.test_accuracy;
    }
    vj["test_accuracy"] = aggregate_block(splits, acc);
    aggregates[v.name] = vj;
  }
  record["aggregates"] = aggregates;
  return record;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("io_error", "cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw Error("io_error", "failed writing '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("io_error", "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

namespace {

std::string cells_csv(const std::vector<CellResult>& cells, const std::vector<ScorerSpec>& scorers) {
  std::ostringstream out;
  out << "variant,split,trial,status,test_accuracy";
  for (const ScorerSpec& s : scorers) out << ",ap_" << s.name();
  out << '\n';
  for (const CellResult& c : cells) {
    out << c.variant << ',' << c.split << ',' << c.trial << ',' << (c.ok ? "ok" : "error") << ',';
    if (c.ok && std::isfinite(c.test_accuracy)) out << format_g17(c.test_accuracy);
    for (const ScorerSpec& s : scorers) {
      out << ',';
      for (const auto& [name, ap] : c.ap)
        if (name == s.name()) out << format_g17(ap);
    }
    out << '\n';
  }
  return out.str();
}

std::string train_log_json(const TrainLog& log) {
  Json epochs = Json::array();
  for (const EpochRecord& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"primary_loss", number_or_null(e.primary_loss)},
                      {"aux_loss", number_or_null(e.aux_loss)},
                      {"train_accuracy", number_or_null(e.train_accuracy)},
                      {"validation_accuracy", number_or_null(e.validation_accuracy)}});
  }
  return Json({{"epochs", epochs}}).dump(2) + "\n";
}

}  // namespace

Json run_experiment(const ExperimentConfig& cfg, const RunOptions& options, RunSummary* summary) {
  RunSummary local;
  RunSummary& stats = summary ? *summary : local;
  stats = {};
  const auto [train_set, test_set] = load_datasets(cfg.dataset, cfg.seed);
  std::vector<HoldOutSplit> splits;
  if (cfg.splits.empty()) {
    splits = make_holdout_splits(train_set, test_set, cfg.trials);
  } else {
    for (std::size_t k : cfg.splits) splits.push_back(make_holdout_split(train_set, test_set, k, cfg.trials));
  }
  std::filesystem::create_directories(cfg.output_dir);
  write_text(cfg.output_dir / "config.json", config_to_json(cfg).dump(2) + "\n");

  std::vector<CellResult> cells;
  GmmCache gmm_cache;
  for (const Variant& variant : cfg.variants) {
    for (const HoldOutSplit& split : splits) {
      for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
        const auto path = cell_path(cfg, variant.name, split.held_out_class, trial);
        if (options.resume && std::filesystem::exists(path)) {
          CellResult cached = cell_from_json(Json::parse(read_text(path)));
          if (cached.ok) {
            cells.push_back(std::move(cached));
            ++stats.reused;
            continue;
          }
        }
        std::vector<std::vector<ScoredExample>> scores;
        TrainLog log;
        CellResult cell = run_cell(cfg, variant, split, trial, nullptr, &scores, &log, &gmm_cache);
        ++stats.computed;
        const std::string stem = cell_stem(split.held_out_class, trial);
        if (cell.ok) {
          for (std::size_t s = 0; s < scores.size(); ++s) {
            std::ostringstream csv;
            write_scores_csv(csv, scores[s]);
            write_text(cfg.output_dir / "scores" / variant.name / (stem + "_" + cfg.scorers[s].name() + ".csv"),
                       csv.str());
          }
          if (!log.epochs.empty()) write_text(cfg.output_dir / "logs" / variant.name / (stem + ".json"), train_log_json(log));
        } else {
          ++stats.failed;
        }
        write_text(path, cell_to_json(cell).dump(2) + "\n");
        if (options.progress) {
          *options.progress << "cell " << variant.name << " " << stem << ": ";
          if (cell.ok) {
            *options.progress << "accuracy=" << cell.test_accuracy;
            for (const auto& [name, ap] : cell.ap) *options.progress << " ap_" << name << "=" << ap;
          } else {
            *options.progress << "error code=" << cell.error_code << " message=\"" << cell.error_message << "\"";
          }
          *options.progress << std::endl;
        }
        cells.push_back(std::move(cell));
      }
    }
  }
  Json record = build_record(cfg, splits, cells);
  write_text(cfg.output_dir / "record.json", record.dump(2) + "\n");
  write_text(cfg.output_dir / "cells.csv", cells_csv(cells, cfg.scorers));
  write_text(cfg.output_dir / "report.md", emit_report(record, ReportFormat::markdown));
  write_text(cfg.output_dir / "report.csv", emit_report(record, ReportFormat::csv));
  return record;
}

}  // namespace semab
