#include "semab/error.hpp"
#include "semab/model.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace semab {

double TrainConfig::learning_rate_at(std::size_t epoch) const {
  double lr = learning_rate;
  if (lr_schedule.empty()) {
    const auto e60 = static_cast<std::size_t>(std::floor(0.6 * static_cast<double>(epochs)));
    const auto e80 = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(epochs)));
    if (epoch >= e60) lr *= 0.2;
    if (epoch >= e80) lr *= 0.2;
    return lr;
  }
  for (const auto& [at, multiplier] : lr_schedule) {
    if (epoch >= at) lr *= multiplier;
  }
  return lr;
}

AlternatingTrainer::AlternatingTrainer(MultiHeadModel& model, const TrainConfig& cfg, TrainObserver* observer)
    : model_(model),
      cfg_(cfg),
      primary_({cfg.learning_rate, cfg.momentum, cfg.nesterov, cfg.weight_decay}),
      aux_({cfg.learning_rate, cfg.momentum, cfg.nesterov, cfg.weight_decay * cfg.lambda}),
      observer_(observer) {}

void AlternatingTrainer::set_learning_rate(double lr) {
  primary_.set_learning_rate(lr);
  aux_.set_learning_rate(lr);
}

std::pair<double, double> AlternatingTrainer::step(std::span<const Tensor> images,
                                                   std::span<const std::size_t> labels, const AuxBatch& aux,
                                                   Rng& aux_rng) {
  if (!std::holds_alternative<std::monostate>(aux) && model_.aux_task == AuxTask::none) {
    throw Error("unexpected_aux_batch", "auxiliary batch given to a model without an auxiliary task");
  }
  if (std::holds_alternative<RotationBatch>(aux) && model_.aux_task != AuxTask::rotation) {
    throw Error("config_mismatch", "rotation batch given to a model with auxiliary task '" +
                                       std::string(to_string(model_.aux_task)) + "'");
  }
  if (std::holds_alternative<CpcBatch>(aux) && model_.aux_task != AuxTask::cpc) {
    throw Error("config_mismatch", "contrastive batch given to a model with auxiliary task '" +
                                       std::string(to_string(model_.aux_task)) + "'");
  }
  if (observer_) observer_->before_step(model_);

  double primary_loss = 0.0;
  {
    Graph g;
    const Var logits = class_logits(g, model_, g.input(stack({images.begin(), images.end()})));
    const Var loss = cross_entropy(logits, labels);
    g.backward(loss);
    primary_loss = loss.value()[0];
    std::vector<Tensor*> params = model_.trunk_params(0, model_.trunk.size());
    for (Tensor* p : model_.class_params()) params.push_back(p);
    primary_.step(params);

    const std::size_t K = model_.n_classes;
    const Eigen::VectorXd& lv = logits.value().data;
    last_correct_ = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      Eigen::Index arg = 0;
      lv.segment(static_cast<Eigen::Index>(i * K), static_cast<Eigen::Index>(K)).maxCoeff(&arg);
      if (static_cast<std::size_t>(arg) == labels[i]) ++last_correct_;
    }
  }
  if (observer_) observer_->after_primary(model_);

  double aux_loss = 0.0;
  if (const auto* rot = std::get_if<RotationBatch>(&aux)) {
    Graph g;
    const Var loss = rotation_loss(g, model_, *rot);
    g.backward(scale(loss, cfg_.lambda));
    aux_loss = loss.value()[0];
    std::vector<Tensor*> params = model_.trunk_params(0, model_.trunk.size());
    for (Tensor* p : model_.rot_params()) params.push_back(p);
    aux_.step(params);
  } else if (const auto* cpc = std::get_if<CpcBatch>(&aux)) {
    Graph g;
    const Var loss = cpc_loss(g, model_, cpc->images, aux_rng);
    g.backward(scale(loss, cfg_.lambda));
    aux_loss = loss.value()[0];
    std::vector<Tensor*> params = model_.trunk_params(1, model_.cpc.encoder_blocks);
    for (Tensor* p : model_.cpc_params()) params.push_back(p);
    aux_.step(params);
  }
  if (observer_ && !std::holds_alternative<std::monostate>(aux)) observer_->after_aux(model_);
  return {primary_loss, aux_loss};
}

std::pair<double, double> train_step_alternating(MultiHeadModel& model, std::span<const Tensor> images,
                                                 std::span<const std::size_t> labels, const AuxBatch& aux,
                                                 const TrainConfig& cfg, Rng& aux_rng) {
  AlternatingTrainer trainer(model, cfg);
  return trainer.step(images, labels, aux, aux_rng);
}

double test_accuracy(const MultiHeadModel& model, const HoldOutSplit& split) {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  for (const TestExample& e : split.test_examples) {
    if (e.is_anomaly || !e.label) continue;
    images.push_back(e.image);
    labels.push_back(*e.label);
  }
  if (images.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto predicted = predict_labels(model, images);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

TrainLog train(MultiHeadModel& model, const HoldOutSplit& split, const TrainConfig& cfg, TrainObserver* observer) {
  const LabeledDataset& data = split.train;
  if (data.size() == 0) throw Error("empty_train", "train: split has no training examples");
  if (model.aux_task != cfg.aux_task) {
    throw Error("config_mismatch", "train: model auxiliary task '" + std::string(to_string(model.aux_task)) +
                                       "' differs from config '" + std::string(to_string(cfg.aux_task)) + "'");
  }
  if (model.n_classes != data.num_classes()) {
    throw Error("config_mismatch", "train: model has " + std::to_string(model.n_classes) + " outputs, split has " +
                                       std::to_string(data.num_classes()) + " classes");
  }
  if (cfg.batch_size == 0) throw Error("invalid_config", "train: batch_size must be positive");

  const Rng root(cfg.seed);
  AlternatingTrainer trainer(model, cfg, observer);
  TrainLog log;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t side = data.image_shape().at(1);
  const MaskGeometry mask = side >= 26 ? MaskGeometry{} : MaskGeometry::scaled_to(side);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    trainer.set_learning_rate(cfg.learning_rate_at(epoch));
    Rng shuffle = root.substream("train/shuffle", epoch);
    Rng augment = root.substream("train/augment", epoch);
    Rng aux_rng = root.substream("train/aux", epoch);
    shuffle.shuffle(std::span<std::size_t>(order));

    double primary_sum = 0.0, aux_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - first);
      std::vector<Tensor> images;
      std::vector<std::size_t> labels;
      images.reserve(count);
      for (std::size_t i = first; i < first + count; ++i) {
        Tensor img = data.images[order[i]];
        if (cfg.crop_pad > 0 || cfg.flip) {
          const auto top = static_cast<std::size_t>(augment.below(2 * cfg.crop_pad + 1));
          const auto left = static_cast<std::size_t>(augment.below(2 * cfg.crop_pad + 1));
          const bool flip = cfg.flip && augment.bernoulli(0.5);
          img = crop_flip(img, cfg.crop_pad, top, left, flip);
        }
        if (cfg.mask_augment) img = random_center_mask(img, augment, mask);
        images.push_back(std::move(img));
        labels.push_back(data.labels[order[i]]);
      }
      AuxBatch aux;
      if (cfg.aux_task == AuxTask::rotation) {
        aux = rotate_batch(images, aux_rng, cfg.rotation_mode);
      } else if (cfg.aux_task == AuxTask::cpc) {
        aux = CpcBatch{images};
      }
      const auto [p, a] = trainer.step(images, labels, aux, aux_rng);
      primary_sum += p * static_cast<double>(count);
      aux_sum += a * static_cast<double>(count);
      correct += trainer.last_correct();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.primary_loss = primary_sum / static_cast<double>(order.size());
    rec.aux_loss = aux_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    rec.validation_accuracy =
        cfg.log_validation ? test_accuracy(model, split) : std::numeric_limits<double>::quiet_NaN();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    log.epochs.push_back(rec);
  }
  model.freeze();
  return log;
}

}  // namespace semab
