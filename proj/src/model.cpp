#include "semab/model.hpp"

#include "semab/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <type_traits>

namespace semab {

AuxTask parse_aux_task(std::string_view name) {
  if (name == "none") return AuxTask::none;
  if (name == "rotation") return AuxTask::rotation;
  if (name == "cpc") return AuxTask::cpc;
  throw Error("unknown_aux_task", "unknown auxiliary task '" + std::string(name) + "'");
}

std::string_view to_string(AuxTask task) {
  switch (task) {
    case AuxTask::none: return "none";
    case AuxTask::rotation: return "rotation";
    case AuxTask::cpc: return "cpc";
  }
  return "unknown";
}

std::size_t MultiHeadModel::head_count() const {
  return 1 + (rot_head ? 1 : 0) + (cpc_predictors.empty() ? 0 : 1);
}

std::vector<Tensor*> MultiHeadModel::trunk_params(std::size_t task, std::size_t blocks) {
  std::vector<Tensor*> out;
  for (std::size_t i = 0; i < std::min(blocks, trunk.size()); ++i) {
    out.push_back(&trunk[i].kernel);
    out.push_back(&trunk[i].norms.at(task).gamma);
    out.push_back(&trunk[i].norms.at(task).beta);
  }
  return out;
}

std::vector<Tensor*> MultiHeadModel::class_params() { return {&class_head.weight, &class_head.bias}; }

std::vector<Tensor*> MultiHeadModel::rot_params() {
  if (!rot_head) return {};
  return {&rot_head->weight, &rot_head->bias};
}

std::vector<Tensor*> MultiHeadModel::cpc_params() {
  std::vector<Tensor*> out;
  for (Tensor& p : cpc_predictors) out.push_back(&p);
  return out;
}

std::vector<Tensor*> MultiHeadModel::all_params() {
  std::vector<Tensor*> out;
  for (ConvBlock& b : trunk) {
    out.push_back(&b.kernel);
    for (NormParams& n : b.norms) {
      out.push_back(&n.gamma);
      out.push_back(&n.beta);
    }
  }
  for (Tensor* p : class_params()) out.push_back(p);
  for (Tensor* p : rot_params()) out.push_back(p);
  for (Tensor* p : cpc_params()) out.push_back(p);
  return out;
}

std::vector<const Tensor*> MultiHeadModel::all_params() const {
  auto params = const_cast<MultiHeadModel*>(this)->all_params();
  return {params.begin(), params.end()};
}

std::vector<Tensor*> MultiHeadModel::buffers() {
  std::vector<Tensor*> out;
  for (ConvBlock& b : trunk) {
    for (NormParams& n : b.norms) {
      out.push_back(&n.running_mean);
      out.push_back(&n.running_var);
    }
  }
  return out;
}

std::vector<const Tensor*> MultiHeadModel::buffers() const {
  auto bufs = const_cast<MultiHeadModel*>(this)->buffers();
  return {bufs.begin(), bufs.end()};
}

void MultiHeadModel::freeze() {
  for (Tensor* p : all_params()) {
    p->requires_grad = false;
    p->grad.reset();
  }
  frozen = true;
}

namespace {

Tensor init_weights(Shape shape, std::size_t fan_in, double gain, Rng rng) {
  Tensor t(std::move(shape));
  const double std_dev = std::sqrt(gain / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std_dev * rng.truncated_normal();
  t.requires_grad = true;
  return t;
}

Tensor trainable(Tensor t) {
  t.requires_grad = true;
  return t;
}

Linear make_linear(std::size_t in, std::size_t out, Rng rng) {
  return {init_weights({in, out}, in, 1.0, rng), trainable(Tensor({out}))};
}

Var bind(Graph& g, Tensor& t) { return g.param(t); }
Var bind(Graph& g, const Tensor& t) { return g.input(Tensor(t.shape, t.data)); }

void update_running(NormParams& norm, const ChannelStats& stats, double momentum) {
  const double unbias = stats.count > 1 ? static_cast<double>(stats.count) / static_cast<double>(stats.count - 1) : 1.0;
  norm.running_mean.data = (1.0 - momentum) * norm.running_mean.data + momentum * stats.mean;
  norm.running_var.data = (1.0 - momentum) * norm.running_var.data + momentum * unbias * stats.var;
}

template <typename Model>
Var trunk_impl(Graph& g, Model& m, Var x, std::size_t task, std::size_t blocks, bool refresh_stats = false) {
  if (task >= m.norm_sets()) {
    throw Error("invalid_task", "model has no normalization set for task " + std::to_string(task));
  }
  if (x.shape().size() != 4 || x.shape()[1] != m.arch.in_channels) {
    throw Error("shape_mismatch", "trunk: expected [N, " + std::to_string(m.arch.in_channels) +
                                      ", H, W], got " + to_string(x.shape()));
  }
  for (std::size_t i = 0; i < blocks; ++i) {
    auto& block = m.trunk[i];
    x = conv2d(x, bind(g, block.kernel), {1, 1, m.padding});
    auto& norm = block.norms[task];
    if constexpr (std::is_const_v<Model>) {
      x = normalization(x, bind(g, norm.gamma), bind(g, norm.beta), norm.running_mean.data, norm.running_var.data,
                        m.arch.norm_eps);
    } else {
      ChannelStats stats;
      x = normalization(x, bind(g, norm.gamma), bind(g, norm.beta), m.arch.norm_eps, &stats);
      if (refresh_stats) update_running(norm, stats, m.arch.norm_momentum);
    }
    x = relu(x);
    if (i < m.arch.pooled_blocks && x.shape()[2] >= 2 && x.shape()[3] >= 2) x = maxpool2d(x, 2);
  }
  x = global_avgpool(x);
  return reshape(x, {x.shape()[0], x.shape()[1]});
}

template <typename L>
Var linear(Graph& g, L& layer, Var x) {
  return add(matmul(x, bind(g, layer.weight)), bind(g, layer.bias));
}

template <typename Model>
Var class_impl(Graph& g, Model& m, Var x) {
  return linear(g, m.class_head, trunk_impl(g, m, x, 0, m.trunk.size(), true));
}

template <typename Model>
Var rotation_impl(Graph& g, Model& m, Var x) {
  if (!m.rot_head) throw Error("missing_head", "model has no rotation head");
  return linear(g, *m.rot_head, trunk_impl(g, m, x, 0, m.trunk.size()));
}

void check_grid(const CpcConfig& grid, const Shape& image) {
  if (image.size() != 3) throw Error("shape_mismatch", "cpc: expected C x H x W, got " + to_string(image));
  if (grid.rows <= grid.pred_steps || grid.cols == 0 || grid.patch == 0 || grid.stride == 0) {
    throw Error("grid_too_small", "cpc: a " + std::to_string(grid.rows) + "-row grid cannot predict " +
                                      std::to_string(grid.pred_steps) + " steps ahead");
  }
  const std::size_t need_h = (grid.rows - 1) * grid.stride + grid.patch;
  const std::size_t need_w = (grid.cols - 1) * grid.stride + grid.patch;
  if (need_h > image[1] || need_w > image[2]) {
    throw Error("grid_too_small", "cpc: grid needs " + std::to_string(need_h) + " x " +
                                      std::to_string(need_w) + " pixels, image is " + to_string(image));
  }
}

template <typename Model>
Var cpc_impl(Graph& g, Model& m, std::span<const Tensor> images, Rng& rng) {
  if (m.aux_task != AuxTask::cpc || m.cpc_predictors.size() != m.cpc.pred_steps) {
    throw Error("missing_head", "model has no contrastive prediction head");
  }
  if (images.empty()) throw Error("empty_input", "cpc_loss: no images");
  const CpcConfig& grid = m.cpc;
  const std::size_t P = grid.rows * grid.cols;
  const std::size_t B = images.size();

  std::vector<Tensor> patch_sets;
  patch_sets.reserve(B);
  for (const Tensor& img : images) patch_sets.push_back(extract_patches(img, grid));
  Tensor all({B * P, images[0].dim(0), grid.patch, grid.patch});
  const auto per_image = static_cast<Eigen::Index>(patch_sets[0].size());
  for (std::size_t b = 0; b < B; ++b) all.data.segment(static_cast<Eigen::Index>(b) * per_image, per_image) = patch_sets[b].data;

  const Var z = trunk_impl(g, m, g.input(std::move(all)), 1, grid.encoder_blocks, true);
  const std::size_t D = z.shape()[1];
  const Var zt = transpose(z);
  const std::size_t candidates =
      (grid.negatives == 0 || grid.negatives >= P - 1) ? P : grid.negatives + 1;

  Var total;
  std::size_t terms = 0;
  std::vector<std::size_t> others;
  for (std::size_t d = 1; d <= grid.pred_steps; ++d) {
    std::vector<std::size_t> ctx_rows;
    std::vector<std::size_t> targets;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r + d < grid.rows; ++r)
        for (std::size_t c = 0; c < grid.cols; ++c) {
          ctx_rows.push_back(b * P + r * grid.cols + c);
          targets.push_back(b * P + (r + d) * grid.cols + c);
        }
    const std::size_t M = ctx_rows.size();
    std::vector<std::size_t> ctx_index;
    ctx_index.reserve(M * D);
    for (std::size_t row : ctx_rows)
      for (std::size_t k = 0; k < D; ++k) ctx_index.push_back(row * D + k);
    const Var ctx = gather(z, std::move(ctx_index), {M, D});
    const Var pred = matmul(ctx, bind(g, m.cpc_predictors[d - 1]));
    const Var scores = matmul(pred, zt);  // [M, B * P]

    std::vector<std::size_t> pick;
    pick.reserve(M * candidates);
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t image_base = (targets[i] / P) * P;
      const std::size_t row_base = i * B * P;
      pick.push_back(row_base + targets[i]);
      others.clear();
      for (std::size_t j = image_base; j < image_base + P; ++j)
        if (j != targets[i]) others.push_back(j);
      if (candidates - 1 < others.size()) {
        // partial Fisher-Yates: first (candidates - 1) entries are the sample
        for (std::size_t s = 0; s + 1 < candidates; ++s) {
          const std::size_t j = s + static_cast<std::size_t>(rng.below(others.size() - s));
          std::swap(others[s], others[j]);
        }
      }
      for (std::size_t s = 0; s + 1 < candidates; ++s) pick.push_back(row_base + others[s]);
    }
    const Var cand = gather(scores, std::move(pick), {M, candidates});
    std::vector<std::size_t> first(M);
    for (std::size_t i = 0; i < M; ++i) first[i] = i * candidates;
    const Var picked = sum(gather(log_softmax(cand), std::move(first), {M}));
    total = terms == 0 ? picked : add(total, picked);
    terms += M;
  }
  return scale(total, -1.0 / static_cast<double>(terms));
}

}  // namespace

MultiHeadModel build_model(const ArchConfig& arch, std::size_t n_classes, AuxTask aux_task, Rng rng,
                           const CpcConfig& cpc) {
  if (n_classes < 2) throw Error("invalid_config", "build_model: need at least 2 classes, got " + std::to_string(n_classes));
  if (arch.widths.empty()) throw Error("invalid_config", "build_model: trunk has no blocks");
  if (arch.norm_momentum < 0.0 || arch.norm_momentum > 1.0) {
    throw Error("invalid_config", "build_model: norm_momentum must lie in [0, 1]");
  }
  if (aux_task == AuxTask::cpc && (cpc.encoder_blocks == 0 || cpc.encoder_blocks > arch.widths.size())) {
    throw Error("invalid_config", "build_model: encoder_blocks must be in [1, " + std::to_string(arch.widths.size()) + "]");
  }
  MultiHeadModel m;
  m.arch = arch;
  m.aux_task = aux_task;
  m.cpc = cpc;
  m.n_classes = n_classes;
  m.padding = aux_task == AuxTask::cpc ? PadMode::symmetric : PadMode::zero;
  const std::size_t sets = aux_task == AuxTask::cpc ? 2 : 1;

  std::size_t in = arch.in_channels;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) {
    const std::size_t out = arch.widths[i];
    ConvBlock block;
    block.kernel = init_weights({out, in, 3, 3}, in * 9, 2.0, rng.substream("init/trunk", i));
    for (std::size_t s = 0; s < sets; ++s) {
      block.norms.push_back({trainable(Tensor::full({out}, 1.0)), trainable(Tensor({out})), Tensor({out}),
                             Tensor::full({out}, 1.0)});
    }
    m.trunk.push_back(std::move(block));
    in = out;
  }
  m.class_head = make_linear(m.feature_dim(), n_classes, rng.substream("init/class_head"));
  if (aux_task == AuxTask::rotation) m.rot_head = make_linear(m.feature_dim(), 4, rng.substream("init/rot_head"));
  if (aux_task == AuxTask::cpc) {
    const std::size_t D = m.encoding_dim();
    for (std::size_t d = 0; d < cpc.pred_steps; ++d) {
      m.cpc_predictors.push_back(init_weights({D, D}, D, 1.0, rng.substream("init/cpc_head", d)));
    }
  }
  return m;
}

Var trunk_features(Graph& g, MultiHeadModel& model, Var images, std::size_t task) {
  return trunk_impl(g, model, images, task, model.trunk.size());
}
Var trunk_features(Graph& g, const MultiHeadModel& model, Var images, std::size_t task) {
  return trunk_impl(g, model, images, task, model.trunk.size());
}
Var class_logits(Graph& g, MultiHeadModel& model, Var images) { return class_impl(g, model, images); }
Var class_logits(Graph& g, const MultiHeadModel& model, Var images) { return class_impl(g, model, images); }
Var rotation_logits(Graph& g, MultiHeadModel& model, Var images) { return rotation_impl(g, model, images); }
Var rotation_logits(Graph& g, const MultiHeadModel& model, Var images) { return rotation_impl(g, model, images); }

Tensor predict_logits(const MultiHeadModel& model, std::span<const Tensor> images, std::size_t chunk) {
  Tensor out({images.size(), model.n_classes});
  for (std::size_t first = 0; first < images.size(); first += chunk) {
    const std::size_t count = std::min(chunk, images.size() - first);
    Graph g;
    const Var logits = class_logits(
        g, model, g.input(stack({images.begin() + static_cast<std::ptrdiff_t>(first),
                                 images.begin() + static_cast<std::ptrdiff_t>(first + count)})));
    out.data.segment(static_cast<Eigen::Index>(first * model.n_classes),
                     static_cast<Eigen::Index>(count * model.n_classes)) = logits.value().data;
  }
  return out;
}

std::vector<std::size_t> predict_labels(const MultiHeadModel& model, std::span<const Tensor> images) {
  const Tensor logits = predict_logits(model, images);
  std::vector<std::size_t> labels(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    Eigen::Index arg = 0;
    logits.data.segment(static_cast<Eigen::Index>(i * model.n_classes), static_cast<Eigen::Index>(model.n_classes))
        .maxCoeff(&arg);
    labels[i] = static_cast<std::size_t>(arg);
  }
  return labels;
}

double combined_loss(double primary_loss, double aux_loss, double lambda) {
  return primary_loss + lambda * aux_loss;
}

Var rotation_loss(Graph& g, MultiHeadModel& model, const RotationBatch& batch) {
  if (!model.rot_head) throw Error("missing_head", "model has no rotation head");
  return cross_entropy(rotation_logits(g, model, g.input(stack(batch.images))), batch.rotation_labels);
}

double rotation_loss(const MultiHeadModel& model, const RotationBatch& batch) {
  if (!model.rot_head) throw Error("missing_head", "model has no rotation head");
  Graph g;
  return cross_entropy(rotation_logits(g, model, g.input(stack(batch.images))), batch.rotation_labels).value()[0];
}

Tensor extract_patches(const Tensor& image, const CpcConfig& grid) {
  check_grid(grid, image.shape);
  const std::size_t C = image.dim(0);
  Tensor out({grid.rows * grid.cols, C, grid.patch, grid.patch});
  std::size_t k = 0;
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t y = 0; y < grid.patch; ++y)
          for (std::size_t x = 0; x < grid.patch; ++x)
            out[k++] = image.at(ch, r * grid.stride + y, c * grid.stride + x);
  return out;
}

Var cpc_loss(Graph& g, MultiHeadModel& model, std::span<const Tensor> images, Rng& rng) {
  return cpc_impl(g, model, images, rng);
}

double cpc_loss(const MultiHeadModel& model, const Tensor& image, Rng& rng) {
  Graph g;
  return cpc_impl(g, model, std::span<const Tensor>(&image, 1), rng).value()[0];
}

std::size_t cpc_term_count(const CpcConfig& grid) {
  std::size_t n = 0;
  for (std::size_t d = 1; d <= grid.pred_steps && d < grid.rows; ++d) n += (grid.rows - d) * grid.cols;
  return n;
}

// --- checkpoints ------------------------------------------------------------

namespace {

class ByteWriter {
 public:
  void u32(std::uint64_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint64_t u32() { return read(4); }
  std::uint64_t u64() { return read(8); }
  double f64() { return std::bit_cast<double>(read(8)); }
  bool done() const { return at_ == bytes_.size(); }

 private:
  std::uint64_t read(std::size_t n) {
    if (at_ + n > bytes_.size()) throw Error("truncated_record", "model checkpoint is truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t{bytes_[at_ + i]} << (8 * i);
    at_ += n;
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t at_ = 0;
};

constexpr std::uint32_t kModelVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize_model(const MultiHeadModel& model) {
  ByteWriter w;
  w.raw("SEMM");
  w.u32(kModelVersion);
  w.u32(model.arch.in_channels);
  w.u32(model.arch.widths.size());
  for (std::size_t width : model.arch.widths) w.u32(width);
  w.u32(model.arch.pooled_blocks);
  w.f64(model.arch.norm_eps);
  w.f64(model.arch.norm_momentum);
  w.u32(model.n_classes);
  w.u32(static_cast<std::uint32_t>(model.aux_task));
  const CpcConfig& c = model.cpc;
  for (std::size_t v : {c.rows, c.cols, c.patch, c.stride, c.pred_steps, c.negatives, c.encoder_blocks}) w.u32(v);
  w.u32(model.frozen ? 1 : 0);
  std::size_t count = 0;
  auto params = model.all_params();
  for (const Tensor* b : model.buffers()) params.push_back(b);
  for (const Tensor* p : params) count += p->size();
  w.u64(count);
  for (const Tensor* p : params)
    for (std::size_t i = 0; i < p->size(); ++i) w.f64((*p)[i]);
  return w.take();
}

MultiHeadModel deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, "SEMM")) {
    throw Error("bad_magic", "model checkpoint does not start with 'SEMM'");
  }
  ByteReader r(bytes.subspan(4));
  const auto version = r.u32();
  if (version != kModelVersion) throw Error("bad_version", "unsupported checkpoint version " + std::to_string(version));
  ArchConfig arch;
  arch.in_channels = r.u32();
  arch.widths.resize(r.u32());
  for (auto& width : arch.widths) width = r.u32();
  arch.pooled_blocks = r.u32();
  arch.norm_eps = r.f64();
  arch.norm_momentum = r.f64();
  const std::size_t n_classes = r.u32();
  const auto aux = r.u32();
  if (aux > 2) throw Error("unknown_aux_task", "checkpoint has auxiliary task id " + std::to_string(aux));
  CpcConfig cpc;
  for (std::size_t* v : {&cpc.rows, &cpc.cols, &cpc.patch, &cpc.stride, &cpc.pred_steps, &cpc.negatives,
                         &cpc.encoder_blocks})
    *v = r.u32();
  const bool frozen = r.u32() != 0;
  MultiHeadModel m = build_model(arch, n_classes, static_cast<AuxTask>(aux), Rng(0), cpc);
  const std::size_t count = r.u64();
  std::vector<Tensor*> values = m.all_params();
  for (Tensor* b : m.buffers()) values.push_back(b);
  std::size_t expected = 0;
  for (Tensor* p : values) expected += p->size();
  if (count != expected) {
    throw Error("size_mismatch", "checkpoint stores " + std::to_string(count) + " parameters, architecture needs " +
                                     std::to_string(expected));
  }
  for (Tensor* p : values)
    for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = r.f64();
  if (!r.done()) throw Error("size_mismatch", "trailing bytes after model parameters");
  if (frozen) m.freeze();
  return m;
}

void save_model(const MultiHeadModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("io_error", "cannot write '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

MultiHeadModel load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

}  // namespace semab
