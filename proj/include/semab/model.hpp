#pragma once

#include "semab/data.hpp"
#include "semab/graph.hpp"
#include "semab/optim.hpp"
#include "semab/rng.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace semab {

enum class AuxTask { none, rotation, cpc };

AuxTask parse_aux_task(std::string_view name);
std::string_view to_string(AuxTask task);

/// Small convolutional trunk: one block per width (3x3 conv, batch normalization,
/// ReLU, and a 2x2 max-pool after each of the first `pooled_blocks`
/// blocks) followed by global average pooling.
struct ArchConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> widths{16, 32, 64, 64};
  std::size_t pooled_blocks = 3;
  double norm_eps = 1e-5;
  /// Weight of the newest batch in the running normalization statistics.
  double norm_momentum = 0.1;
};

/// Patch grid and prediction horizon for the contrastive auxiliary task.
struct CpcConfig {
  std::size_t rows = 3;
  std::size_t cols = 3;
  std::size_t patch = 8;
  std::size_t stride = 4;
  std::size_t pred_steps = 1;
  /// Negatives per prediction, drawn from the same image; 0 uses every
  /// other patch of the image.
  std::size_t negatives = 0;
  /// Leading trunk blocks that form the patch encoder.
  std::size_t encoder_blocks = 3;
};

struct NormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // inference statistics, not trained by SGD
  Tensor running_var;
};

struct ConvBlock {
  Tensor kernel;                 // [out, in, 3, 3]
  std::vector<NormParams> norms;  // one scale/shift set per task
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

/// Shared trunk with a classification head and an optional auxiliary head.
///
/// Normalization parameter sets are indexed by task: set 0 serves the
/// classifier (and the rotation head, which sees whole images like the
/// classifier), set 1 exists only for the patch-based contrastive task.
/// Running statistics of a set are refreshed only by the training forward
/// pass of the task owning it: classification for set 0, the contrastive
/// task for set 1.
struct MultiHeadModel {
  ArchConfig arch;
  AuxTask aux_task = AuxTask::none;
  CpcConfig cpc;
  PadMode padding = PadMode::zero;
  std::size_t n_classes = 0;

  std::vector<ConvBlock> trunk;
  Linear class_head;
  std::optional<Linear> rot_head;
  std::vector<Tensor> cpc_predictors;  // one [D, D] map per prediction step
  bool frozen = false;

  std::size_t feature_dim() const { return arch.widths.back(); }
  std::size_t encoding_dim() const { return arch.widths.at(cpc.encoder_blocks - 1); }
  std::size_t norm_sets() const { return trunk.empty() ? 0 : trunk.front().norms.size(); }
  std::size_t head_count() const;

  /// Conv kernels of the first `blocks` trunk blocks plus their
  /// normalization set for `task`.
  std::vector<Tensor*> trunk_params(std::size_t task, std::size_t blocks);
  std::vector<Tensor*> class_params();
  std::vector<Tensor*> rot_params();
  std::vector<Tensor*> cpc_params();
  /// Every trainable parameter.
  std::vector<Tensor*> all_params();
  std::vector<const Tensor*> all_params() const;
  /// Running normalization statistics.
  std::vector<Tensor*> buffers();
  std::vector<const Tensor*> buffers() const;

  /// Disables gradient tracking on every parameter.
  void freeze();
};

/// Throws Error("invalid_config") for fewer than 2 classes or an empty trunk.
MultiHeadModel build_model(const ArchConfig& arch, std::size_t n_classes, AuxTask aux_task,
                           Rng rng, const CpcConfig& cpc = {});

// Forward passes. The non-const overloads are training passes: they bind
// parameters to the graph so that `backward` fills their gradients and
// normalize with batch statistics. The const overloads are inference passes
// that treat parameters as constants and use the running statistics.

Var trunk_features(Graph& g, MultiHeadModel& model, Var images, std::size_t task = 0);
Var trunk_features(Graph& g, const MultiHeadModel& model, Var images, std::size_t task = 0);
Var class_logits(Graph& g, MultiHeadModel& model, Var images);
Var class_logits(Graph& g, const MultiHeadModel& model, Var images);
Var rotation_logits(Graph& g, MultiHeadModel& model, Var images);
Var rotation_logits(Graph& g, const MultiHeadModel& model, Var images);

/// Class logits for a batch of images without gradient tracking,
/// evaluated in chunks. Returns [N, n_classes].
Tensor predict_logits(const MultiHeadModel& model, std::span<const Tensor> images,
                      std::size_t chunk = 128);
std::vector<std::size_t> predict_labels(const MultiHeadModel& model, std::span<const Tensor> images);

/// primary + lambda * auxiliary.
double combined_loss(double primary_loss, double aux_loss, double lambda);

/// Mean 4-way cross-entropy of the rotation head. Throws Error("missing_head").
Var rotation_loss(Graph& g, MultiHeadModel& model, const RotationBatch& batch);
double rotation_loss(const MultiHeadModel& model, const RotationBatch& batch);

/// Patches of one C x H x W image on the configured grid, row-major over
/// the grid: [rows * cols, C, patch, patch]. Throws Error("grid_too_small").
Tensor extract_patches(const Tensor& image, const CpcConfig& grid);

/// Contrastive loss over a batch of images: every patch with a patch d rows
/// below it (d = 1..pred_steps) predicts that patch's encoding through a
/// linear map, and the prediction must pick the true encoding among
/// negatives taken from the same image. Mean cross-entropy over all terms.
Var cpc_loss(Graph& g, MultiHeadModel& model, std::span<const Tensor> images, Rng& rng);
double cpc_loss(const MultiHeadModel& model, const Tensor& image, Rng& rng);
/// Number of (context, target) prediction terms per image.
std::size_t cpc_term_count(const CpcConfig& grid);

// --- checkpoints ------------------------------------------------------------

/// "SEMM" | u32 version = 1 | architecture descriptor (u32 fields, f64 eps
/// and momentum) | u64 value count | parameters then running statistics as
/// f64, all little-endian.
std::vector<std::uint8_t> serialize_model(const MultiHeadModel& model);
MultiHeadModel deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const MultiHeadModel& model, const std::filesystem::path& path);
MultiHeadModel load_model(const std::filesystem::path& path);

// --- training ---------------------------------------------------------------

struct TrainConfig {
  double lambda = 0.5;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  /// (epoch, multiplier) pairs applied cumulatively from that epoch on.
  /// Empty means scale down by 5 at 60% and 80% of the epoch budget.
  std::vector<std::pair<std::size_t, double>> lr_schedule;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 5e-4;
  AuxTask aux_task = AuxTask::none;
  RotationMode rotation_mode = RotationMode::all_four;
  bool mask_augment = false;
  std::size_t crop_pad = 2;
  bool flip = true;
  std::uint64_t seed = 0;
  bool log_validation = true;

  /// Learning rate in effect during `epoch` (0-based).
  double learning_rate_at(std::size_t epoch) const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double primary_loss = 0.0;
  double aux_loss = 0.0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;  // NaN when not logged
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

struct CpcBatch {
  std::vector<Tensor> images;
};

using AuxBatch = std::variant<std::monostate, RotationBatch, CpcBatch>;

/// Observer hook invoked around every alternating update (used by tests).
struct TrainObserver {
  virtual ~TrainObserver() = default;
  virtual void before_step(const MultiHeadModel&) {}
  virtual void after_primary(const MultiHeadModel&) {}
  virtual void after_aux(const MultiHeadModel&) {}
};

/// Optimizer state for the two alternating updates. Each update has its own
/// momentum buffers; the auxiliary update's loss and weight decay are both
/// scaled by lambda.
class AlternatingTrainer {
 public:
  AlternatingTrainer(MultiHeadModel& model, const TrainConfig& cfg, TrainObserver* observer = nullptr);

  void set_learning_rate(double lr);

  /// Update 1: trunk + class head on the clean batch. Update 2: trunk + the
  /// auxiliary head on the auxiliary batch. Returns the unscaled losses.
  std::pair<double, double> step(std::span<const Tensor> images, std::span<const std::size_t> labels,
                                 const AuxBatch& aux, Rng& aux_rng);

  const Sgd& primary_optimizer() const { return primary_; }
  const Sgd& aux_optimizer() const { return aux_; }
  /// Correct predictions in the last primary step.
  std::size_t last_correct() const { return last_correct_; }

 private:
  MultiHeadModel& model_;
  TrainConfig cfg_;
  Sgd primary_;
  Sgd aux_;
  TrainObserver* observer_;
  std::size_t last_correct_ = 0;
};

/// One alternating iteration with fresh optimizer state.
std::pair<double, double> train_step_alternating(MultiHeadModel& model, std::span<const Tensor> images,
                                                 std::span<const std::size_t> labels, const AuxBatch& aux,
                                                 const TrainConfig& cfg, Rng& aux_rng);

/// Trains on split.train. Deterministic given cfg.seed; the returned model
/// is frozen. Validation accuracy is measured on the split's normal test
/// examples and is only logged.
TrainLog train(MultiHeadModel& model, const HoldOutSplit& split, const TrainConfig& cfg,
               TrainObserver* observer = nullptr);

/// Fraction of normal test examples classified correctly.
double test_accuracy(const MultiHeadModel& model, const HoldOutSplit& split);

}  // namespace semab
