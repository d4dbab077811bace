#include "doctest.h"

#include "semab/error.hpp"
#include "semab/model.hpp"

#include <array>
#include <cmath>
#include <numbers>

using namespace semab;

namespace {

ArchConfig tiny_arch() {
  ArchConfig a;
  a.widths = {4, 8};
  a.pooled_blocks = 1;
  return a;
}

CpcConfig tiny_grid() {
  CpcConfig c;
  c.encoder_blocks = 2;
  return c;
}

HoldOutSplit tiny_split(std::size_t per_class = 8) {
  const std::array<ShapeKind, 3> kinds{ShapeKind::disk, ShapeKind::square, ShapeKind::bar};
  const LabeledDataset train = synth_shapes(per_class, kinds, 16, Rng(1));
  const LabeledDataset test = synth_shapes(4, kinds, 16, Rng(2));
  return make_holdout_split(train, test, 2, 1);
}

std::vector<Tensor> snapshot(const std::vector<Tensor*>& params) {
  std::vector<Tensor> out;
  for (const Tensor* p : params) out.emplace_back(p->shape, p->data);
  return out;
}

bool same(const std::vector<Tensor>& a, const std::vector<Tensor*>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == *b[i])) return false;
  return true;
}

std::vector<Tensor> images_of(const HoldOutSplit& s, std::size_t n) {
  return {s.train.images.begin(), s.train.images.begin() + static_cast<std::ptrdiff_t>(n)};
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("head layout follows the auxiliary task") {
    const MultiHeadModel none = build_model(tiny_arch(), 3, AuxTask::none, Rng(1));
    CHECK(none.head_count() == 1);
    CHECK_FALSE(none.rot_head.has_value());
    const MultiHeadModel rot = build_model(tiny_arch(), 3, AuxTask::rotation, Rng(1));
    REQUIRE(rot.rot_head.has_value());
    CHECK(rot.rot_head->bias.size() == 4);
    const MultiHeadModel cpc = build_model(tiny_arch(), 3, AuxTask::cpc, Rng(1), tiny_grid());
    CHECK(cpc.norm_sets() == 2);
  }

  TEST_CASE("fewer than two classes is an invalid config") {
    CHECK_THROWS_AS(build_model(tiny_arch(), 1, AuxTask::none, Rng(1)), Error);
  }

  TEST_CASE("combined loss") {
    CHECK(combined_loss(1.0, 2.0, 0.5) == 2.0);
    CHECK(combined_loss(1.5, 7.0, 0.0) == 1.5);
    CHECK(combined_loss(0.0, 3.0, 1.0) == 3.0);
  }

  TEST_CASE("uniform rotation logits give ln 4") {
    MultiHeadModel m = build_model(tiny_arch(), 3, AuxTask::rotation, Rng(1));
    m.rot_head->weight.data.setZero();
    m.rot_head->bias.data.setZero();
    Rng rng(1);
    const auto batch = rotate_batch(images_of(tiny_split(), 2), rng, RotationMode::all_four);
    CHECK(rotation_loss(m, batch) == doctest::Approx(std::log(4.0)));
  }

  TEST_CASE("confident rotation logits drive the loss toward 0") {
    MultiHeadModel m = build_model(tiny_arch(), 3, AuxTask::rotation, Rng(1));
    m.rot_head->weight.data.setZero();
    m.rot_head->bias.data << 100.0, 0.0, 0.0, 0.0;
    RotationBatch batch;
    batch.images = images_of(tiny_split(), 2);
    batch.rotation_labels = {0, 0};
    CHECK(rotation_loss(m, batch) < 1e-12);
  }

  TEST_CASE("rotation loss without a rotation head") {
    const MultiHeadModel m = build_model(tiny_arch(), 3, AuxTask::none, Rng(1));
    try {
      rotation_loss(m, RotationBatch{});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == "missing_head");
    }
  }

  TEST_CASE("contrastive task: term count, ln 2 at equal scores, non-negative") {
    CpcConfig grid = tiny_grid();
    CHECK(cpc_term_count(grid) == 6);
    grid.negatives = 1;
    MultiHeadModel m = build_model(tiny_arch(), 3, AuxTask::cpc, Rng(1), grid);
    const Tensor image = tiny_split().train.images.front();
    Rng rng(4);
    for (Tensor& p : m.cpc_predictors) p.data.setZero();
    CHECK(cpc_loss(m, image, rng) == doctest::Approx(std::log(2.0)));
    m = build_model(tiny_arch(), 3, AuxTask::cpc, Rng(1), grid);
    CHECK(cpc_loss(m, image, rng) >= 0.0);
  }

  TEST_CASE("grid too small for the prediction horizon") {
    CpcConfig grid = tiny_grid();
    grid.pred_steps = 3;
    CHECK_THROWS_AS(extract_patches(Tensor({3, 16, 16}), grid), Error);
  }

  TEST_CASE("patch extraction is row-major over the grid") {
    Tensor img({1, 16, 16});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
    const Tensor p = extract_patches(img, tiny_grid());
    CHECK(p.shape == Shape{9, 1, 8, 8});
    // patch (row 1, col 2) starts at pixel (4, 8)
    CHECK(p[5 * 64] == img.at(0, 4, 8));
  }

  TEST_CASE("one task's normalization set does not affect the other task") {
    MultiHeadModel m = build_model(tiny_arch(), 3, AuxTask::cpc, Rng(1), tiny_grid());
    const std::vector<Tensor> imgs = images_of(tiny_split(), 3);
    const Tensor before = predict_logits(m, imgs);
    for (ConvBlock& b : m.trunk) {
      b.norms[1].gamma.data.setConstant(3.0);
      b.norms[1].beta.data.setConstant(-1.0);
    }
    CHECK(predict_logits(m, imgs) == before);
  }

  TEST_CASE("checkpoint round trip preserves parameters, buffers and outputs") {
    MultiHeadModel m = build_model(tiny_arch(), 2, AuxTask::rotation, Rng(3));
    const HoldOutSplit split = tiny_split();
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.aux_task = AuxTask::rotation;
    train(m, split, cfg);
    const MultiHeadModel back = deserialize_model(serialize_model(m));
    CHECK(serialize_model(back) == serialize_model(m));
    CHECK(predict_logits(back, images_of(split, 4)) == predict_logits(m, images_of(split, 4)));
  }

  TEST_CASE("corrupt checkpoints are rejected") {
    const auto bytes = serialize_model(build_model(tiny_arch(), 3, AuxTask::none, Rng(3)));
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize_model(bad), Error);
    CHECK_THROWS_AS(deserialize_model(std::span(bytes).first(bytes.size() - 3)), Error);
  }
}

TEST_SUITE("training") {
  TEST_CASE("zero epochs leave the model at its initialization") {
    MultiHeadModel m = build_model(tiny_arch(), 2, AuxTask::none, Rng(5));
    const auto init = snapshot(m.all_params());
    TrainConfig cfg;
    cfg.epochs = 0;
    CHECK(train(m, tiny_split(), cfg).epochs.empty());
    CHECK(same(init, m.all_params()));
    CHECK(m.frozen);
  }

  TEST_CASE("first-epoch loss is finite and positive") {
    MultiHeadModel m = build_model(tiny_arch(), 2, AuxTask::none, Rng(5));
    TrainConfig cfg;
    cfg.epochs = 1;
    const TrainLog log = train(m, tiny_split(), cfg);
    REQUIRE(log.epochs.size() == 1);
    CHECK(std::isfinite(log.epochs[0].primary_loss));
    CHECK(log.epochs[0].primary_loss > 0.0);
  }

  TEST_CASE("the same seed fixes the log and the parameters") {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.aux_task = AuxTask::rotation;
    cfg.seed = 17;
    MultiHeadModel a = build_model(tiny_arch(), 2, AuxTask::rotation, Rng(5));
    MultiHeadModel b = build_model(tiny_arch(), 2, AuxTask::rotation, Rng(5));
    const TrainLog la = train(a, tiny_split(), cfg), lb = train(b, tiny_split(), cfg);
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(la.epochs[e].primary_loss == lb.epochs[e].primary_loss);
      CHECK(la.epochs[e].aux_loss == lb.epochs[e].aux_loss);
      CHECK(la.epochs[e].train_accuracy == lb.epochs[e].train_accuracy);
      CHECK(la.epochs[e].validation_accuracy == lb.epochs[e].validation_accuracy);
    }
    CHECK(serialize_model(a) == serialize_model(b));
  }

  TEST_CASE("auxiliary batch without an auxiliary task") {
    MultiHeadModel m = build_model(tiny_arch(), 2, AuxTask::none, Rng(5));
    const HoldOutSplit split = tiny_split();
    const std::vector<Tensor> imgs = images_of(split, 2);
    const std::vector<std::size_t> labels{split.train.labels[0], split.train.labels[1]};
    Rng rng(1);
    const RotationBatch rot = rotate_batch(imgs, rng, RotationMode::all_four);
    try {
      train_step_alternating(m, imgs, labels, rot, TrainConfig{}, rng);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == "unexpected_aux_batch");
    }
  }

  TEST_CASE("one alternating step: both steps move the trunk, each head only in its own step") {
    MultiHeadModel m = build_model(tiny_arch(), 2, AuxTask::rotation, Rng(5));
    const HoldOutSplit split = tiny_split();
    const std::vector<Tensor> imgs = images_of(split, 4);
    const std::vector<std::size_t> labels(split.train.labels.begin(), split.train.labels.begin() + 4);
    struct Probe : TrainObserver {
      std::vector<Tensor> trunk0, trunk1, trunk2, cls1, cls2, rot0, rot1;
      void before_step(const MultiHeadModel& m) override {
        trunk0 = {m.trunk[0].kernel};
        rot0 = {m.rot_head->weight, m.rot_head->bias};
      }
      void after_primary(const MultiHeadModel& m) override {
        trunk1 = {m.trunk[0].kernel};
        cls1 = {m.class_head.weight, m.class_head.bias};
        rot1 = {m.rot_head->weight, m.rot_head->bias};
      }
      void after_aux(const MultiHeadModel& m) override {
        trunk2 = {m.trunk[0].kernel};
        cls2 = {m.class_head.weight, m.class_head.bias};
      }
    } probe;
    TrainConfig cfg;
    cfg.aux_task = AuxTask::rotation;
    AlternatingTrainer trainer(m, cfg, &probe);
    Rng rng(1);
    trainer.step(imgs, labels, rotate_batch(imgs, rng, RotationMode::all_four), rng);
    CHECK_FALSE(probe.trunk0 == probe.trunk1);
    CHECK_FALSE(probe.trunk1 == probe.trunk2);
    CHECK(probe.cls1 == probe.cls2);
    CHECK(probe.rot0 == probe.rot1);
    CHECK(trainer.aux_optimizer().velocity(&m.class_head.weight) == nullptr);
    CHECK(trainer.primary_optimizer().velocity(&m.rot_head->weight) == nullptr);
  }

  TEST_CASE("lambda 0 reproduces the no-auxiliary trajectory exactly") {
    const HoldOutSplit split = tiny_split();
    TrainConfig base;
    base.epochs = 2;
    base.seed = 3;
    MultiHeadModel plain = build_model(tiny_arch(), 2, AuxTask::none, Rng(5));
    train(plain, split, base);
    TrainConfig zero = base;
    zero.aux_task = AuxTask::rotation;
    zero.lambda = 0.0;
    MultiHeadModel rot = build_model(tiny_arch(), 2, AuxTask::rotation, Rng(5));
    train(rot, split, zero);
    for (std::size_t i = 0; i < plain.trunk.size(); ++i) {
      CHECK(plain.trunk[i].kernel == rot.trunk[i].kernel);
      CHECK(plain.trunk[i].norms[0].gamma == rot.trunk[i].norms[0].gamma);
      CHECK(plain.trunk[i].norms[0].running_mean == rot.trunk[i].norms[0].running_mean);
      CHECK(plain.trunk[i].norms[0].running_var == rot.trunk[i].norms[0].running_var);
    }
    CHECK(plain.class_head.weight == rot.class_head.weight);
  }

  TEST_CASE("default schedule steps down by 5 at 60% and 80%") {
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.learning_rate = 1.0;
    CHECK(cfg.learning_rate_at(5) == 1.0);
    CHECK(cfg.learning_rate_at(6) == doctest::Approx(0.2));
    CHECK(cfg.learning_rate_at(8) == doctest::Approx(0.04));
  }
}
