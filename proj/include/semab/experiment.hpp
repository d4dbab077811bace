#pragma once

#include "semab/data.hpp"
#include "semab/metrics.hpp"
#include "semab/model.hpp"
#include "semab/scorers.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace semab {

using Json = nlohmann::ordered_json;

enum class DatasetFormat { synth_shapes, cifar, idx, raw };

struct DatasetSpec {
  DatasetFormat format = DatasetFormat::synth_shapes;
  // synth_shapes
  std::vector<ShapeKind> classes{ShapeKind::disk, ShapeKind::square, ShapeKind::cross, ShapeKind::bar};
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 50;
  std::size_t image_size = 16;
  // file formats: cifar takes one or more batch files per side, idx takes
  // an images file and a labels file per side, raw takes one file per side
  std::vector<std::filesystem::path> train_files;
  std::vector<std::filesystem::path> test_files;
};

enum class ScorerKind { msp, odin, gmm, edge };

struct ScorerSpec {
  ScorerKind kind = ScorerKind::msp;
  OdinConfig odin;
  std::size_t gmm_max_iters = 500;
  double gmm_tol = 1e-7;
  EdgePolarity polarity = EdgePolarity::low_is_anomalous;

  /// Column name in records and reports.
  std::string name() const;
  /// Scorers that ignore the trained model.
  bool is_baseline() const { return kind == ScorerKind::gmm || kind == ScorerKind::edge; }
};

/// One training recipe evaluated on every (split, trial) cell.
struct Variant {
  std::string name;
  TrainConfig train;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  ArchConfig arch;
  CpcConfig cpc;
  std::vector<Variant> variants;
  std::vector<ScorerSpec> scorers;
  std::size_t trials = 3;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  /// Held-out classes to run; empty runs every class.
  std::vector<std::size_t> splits;
};

/// Parses and validates a config document. Unknown keys and bad values
/// throw Error("invalid_config") naming the offending key.
ExperimentConfig parse_config(const Json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical form with every default filled in.
Json config_to_json(const ExperimentConfig& cfg);

/// Train and test datasets named by the config.
std::pair<LabeledDataset, LabeledDataset> load_datasets(const DatasetSpec& spec, std::uint64_t seed);

/// Result of one (variant, split, trial) cell.
struct CellResult {
  std::string variant;
  std::size_t split = 0;
  std::size_t trial = 0;
  bool ok = false;
  double test_accuracy = 0.0;
  /// (scorer name, average precision) in config order.
  std::vector<std::pair<std::string, double>> ap;
  std::string error_code;
  std::string error_message;
};

Json cell_to_json(const CellResult& cell);
CellResult cell_from_json(const Json& j);

/// Seed shared by every variant of a (split, trial) cell, so variants are
/// compared from the same initialization and data order.
std::uint64_t cell_seed(std::uint64_t root_seed, std::size_t split, std::size_t trial);

/// Pixel GMM fits keyed by (held-out class, scorer name). The fit depends
/// only on the split's training images, so cells of one run can share it.
using GmmCache = std::map<std::pair<std::size_t, std::string>, PixelGmm>;

/// Trains (when a model scorer is configured) and scores one cell.
/// `model_out`, when given, receives the trained model.
CellResult run_cell(const ExperimentConfig& cfg, const Variant& variant, const HoldOutSplit& split,
                    std::size_t trial, MultiHeadModel* model_out = nullptr,
                    std::vector<std::vector<ScoredExample>>* scores_out = nullptr, TrainLog* log_out = nullptr,
                    GmmCache* gmm_cache = nullptr);

/// Builds the model a cell trains, before training.
MultiHeadModel build_cell_model(const ExperimentConfig& cfg, const Variant& variant, const HoldOutSplit& split,
                                std::size_t trial);
/// The config's training recipe for a cell, with its derived seed.
TrainConfig cell_train_config(const ExperimentConfig& cfg, const Variant& variant, std::size_t split,
                              std::size_t trial);

struct RunOptions {
  bool resume = false;
  /// Progress lines go here when set.
  std::ostream* progress = nullptr;
};

struct RunSummary {
  std::size_t computed = 0;
  std::size_t reused = 0;
  std::size_t failed = 0;
};

/// Runs every (variant, split, trial) cell, persisting each under
/// <output_dir>/cells before moving on, then writes record.json, cells.csv
/// and report.md. With `resume`, cells already on disk are not recomputed.
Json run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {}, RunSummary* summary = nullptr);

/// Record from a config snapshot, split skews and cells: aggregates are
/// recomputed from the cells.
Json build_record(const ExperimentConfig& cfg, const std::vector<HoldOutSplit>& splits,
                  const std::vector<CellResult>& cells);

enum class ReportFormat { markdown, csv };

ReportFormat parse_report_format(std::string_view name);

/// Table-style rendering of a record: per-split "mean ± std" cells in
/// percent, an Average row, and a Skew column when baselines are present.
/// Cells without results read "—".
std::string emit_report(const Json& record, ReportFormat format);

/// Writes text to a file, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace semab
