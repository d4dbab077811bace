#include "semab/graph.hpp"

#include "semab/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace semab {

namespace {

using ColMatrix = Eigen::MatrixXd;

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw Error("shape_mismatch", std::string(op) + ": " + detail);
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b) {
  shape_error(op, to_string(a) + " vs " + to_string(b));
}

Eigen::Map<const RowMatrix> as_matrix(const Eigen::VectorXd& v, std::size_t rows,
                                      std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::Map<RowMatrix> as_matrix(Eigen::VectorXd& v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

// Source index for one coordinate of a padded axis, or -1 for a zero pad.
// Symmetric padding mirrors about the border including the border pixel:
// index -1 reads 0, index n reads n - 1.
long padded_source(long i, long n, PadMode mode) {
  if (i >= 0 && i < n) return i;
  if (mode == PadMode::zero) return -1;
  return i < 0 ? -i - 1 : 2 * n - i - 1;
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, oh, ow;
  bool batched;
  std::size_t rows() const { return cin * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Shape& xs, const Shape& ks, const Conv2dOptions& o) {
  if (xs.size() != 3 && xs.size() != 4) shape_error("conv2d", "input must be rank 3 or 4, got " + to_string(xs));
  if (ks.size() != 4) shape_error("conv2d", "kernel must be rank 4, got " + to_string(ks));
  ConvGeometry g{};
  g.batched = xs.size() == 4;
  const std::size_t off = g.batched ? 1 : 0;
  g.batch = g.batched ? xs[0] : 1;
  g.cin = xs[off];
  g.h = xs[off + 1];
  g.w = xs[off + 2];
  g.cout = ks[0];
  g.kh = ks[2];
  g.kw = ks[3];
  if (ks[1] != g.cin) shape_error("conv2d", xs, ks);
  if (o.stride == 0) shape_error("conv2d", "stride must be positive");
  if (o.pad_mode == PadMode::symmetric && (o.padding >= g.h || o.padding >= g.w)) {
    shape_error("conv2d", "symmetric padding " + std::to_string(o.padding) +
                              " must be smaller than spatial dims of " + to_string(xs));
  }
  const std::size_t ph = g.h + 2 * o.padding;
  const std::size_t pw = g.w + 2 * o.padding;
  if (ph < g.kh || pw < g.kw) shape_error("conv2d", xs, ks);
  g.oh = (ph - g.kh) / o.stride + 1;
  g.ow = (pw - g.kw) / o.stride + 1;
  return g;
}

// For one image: source offset of every (row, position) entry of the
// unfolded matrix, or -1 where the window reads zero padding.
std::vector<long> unfold_map(const ConvGeometry& g, const Conv2dOptions& o) {
  std::vector<long> map(g.rows() * g.positions());
  const long pad = static_cast<long>(o.padding);
  std::size_t k = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx, ++k) {
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long sy = padded_source(static_cast<long>(oy * o.stride + ky) - pad,
                                        static_cast<long>(g.h), o.pad_mode);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long sx = padded_source(static_cast<long>(ox * o.stride + kx) - pad,
                                          static_cast<long>(g.w), o.pad_mode);
            map[k * g.positions() + oy * g.ow + ox] =
                (sy < 0 || sx < 0)
                    ? -1
                    : static_cast<long>(c * g.h * g.w) + sy * static_cast<long>(g.w) + sx;
          }
        }
      }
    }
  }
  return map;
}

ColMatrix unfold(const Eigen::VectorXd& x, const ConvGeometry& g, const std::vector<long>& map) {
  const std::size_t P = g.positions();
  const std::size_t image = g.cin * g.h * g.w;
  ColMatrix col(static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.batch * P));
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* src = x.data() + n * image;
    for (std::size_t p = 0; p < P; ++p) {
      double* dst = col.col(static_cast<Eigen::Index>(n * P + p)).data();
      for (std::size_t k = 0; k < g.rows(); ++k) {
        const long s = map[k * P + p];
        dst[k] = s < 0 ? 0.0 : src[s];
      }
    }
  }
  return col;
}

struct PoolGeometry {
  std::size_t lead, h, w, kh, kw, stride, oh, ow;
};

PoolGeometry pool_geometry(std::string_view op, const Shape& xs, std::size_t kernel,
                           std::size_t stride) {
  if (xs.size() < 3) shape_error(op, "input must have rank >= 3, got " + to_string(xs));
  PoolGeometry g{};
  g.h = xs[xs.size() - 2];
  g.w = xs[xs.size() - 1];
  g.lead = numel(xs) / (g.h * g.w);
  g.kh = kernel == 0 ? g.h : kernel;
  g.kw = kernel == 0 ? g.w : kernel;
  g.stride = stride == 0 ? std::max(g.kh, g.kw) : stride;
  if (g.kh > g.h || g.kw > g.w || g.kh == 0 || g.kw == 0) {
    shape_error(op, "window " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                        " does not fit " + to_string(xs));
  }
  g.oh = (g.h - g.kh) / g.stride + 1;
  g.ow = (g.w - g.kw) / g.stride + 1;
  return g;
}

Shape pooled_shape(const Shape& xs, const PoolGeometry& g) {
  Shape out = xs;
  out[out.size() - 2] = g.oh;
  out[out.size() - 1] = g.ow;
  return out;
}

std::size_t last_dim(std::string_view op, const Shape& s) {
  if (s.empty() || s.back() == 0) shape_error(op, "needs a non-empty last dimension, got " + to_string(s));
  return s.back();
}

}  // namespace

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::avgpool2d: return "avgpool2d";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::softmax: return "softmax";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::log: return "log";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::normalization: return "normalization";
    case OpKind::gather: return "gather";
  }
  return "unknown";
}

PadMode parse_pad_mode(std::string_view name) {
  if (name == "zero") return PadMode::zero;
  if (name == "symmetric") return PadMode::symmetric;
  throw Error("unknown_padding", "unknown padding mode '" + std::string(name) + "'");
}

std::string_view to_string(PadMode mode) {
  return mode == PadMode::zero ? "zero" : "symmetric";
}

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::needs_grad() const { return graph_->needs_grad(id_); }

Var Graph::input(Tensor t) {
  Node node;
  node.needs_grad = t.requires_grad;
  node.value = std::move(t);
  node.value.grad.reset();
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Graph::param(Tensor& t) {
  Node node;
  node.needs_grad = t.requires_grad;
  node.value = Tensor(t.shape, t.data);
  node.bound = &t;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Graph::record(OpKind kind, std::vector<Var> inputs, Tensor value, Backward backward) {
  Node node;
  node.kind = kind;
  node.value = std::move(value);
  for (const Var& v : inputs) {
    if (&v.graph() != this) throw Error("foreign_node", "op input belongs to another graph");
    node.inputs.push_back(v.id());
    node.needs_grad = node.needs_grad || nodes_[v.id()].needs_grad;
  }
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

void Graph::backward(Var root) {
  if (&root.graph() != this) throw Error("foreign_node", "backward: root belongs to another graph");
  const Tensor& rv = nodes_.at(root.id()).value;
  if (rv.size() != 1) {
    throw Error("non_scalar_root", "backward: root must be scalar, got shape " + to_string(rv.shape));
  }
  for (Node& n : nodes_) n.grad.resize(0);
  nodes_[root.id()].grad = Eigen::VectorXd::Ones(1);

  std::vector<Eigen::VectorXd*> grad_in;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.needs_grad || node.grad.size() == 0) continue;
    if (node.kind == OpKind::leaf) {
      if (node.bound) {
        if (!node.bound->grad) node.bound->grad = Eigen::VectorXd::Zero(node.grad.size());
        *node.bound->grad += node.grad;
      }
      continue;
    }
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      Node& in = nodes_[node.inputs[i]];
      if (!in.needs_grad) continue;
      if (in.grad.size() == 0) in.grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(in.value.size()));
      grad_in[i] = &in.grad;
    }
    node.backward(node.grad, grad_in);
  }
}

Eigen::VectorXd Graph::grad(Var v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.size() == 0) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(node.value.size()));
  return node.grad;
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) shape_error("matmul", as, bs);
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor out({m, n});
  as_matrix(out.data, m, n).noalias() =
      as_matrix(a.value().data, m, k) * as_matrix(b.value().data, k, n);
  Graph* g = &a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g->record(OpKind::matmul, {a, b}, std::move(out),
                   [g, ia, ib, m, k, n](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                     const auto dy = as_matrix(go, m, n);
                     if (gi[0]) as_matrix(*gi[0], m, k).noalias() += dy * as_matrix(g->value(ib).data, k, n).transpose();
                     if (gi[1]) as_matrix(*gi[1], k, n).noalias() += as_matrix(g->value(ia).data, m, k).transpose() * dy;
                   });
}

Var conv2d(Var x, Var kernel, const Conv2dOptions& opts) {
  const ConvGeometry geo = conv_geometry(x.shape(), kernel.shape(), opts);
  auto map = std::make_shared<const std::vector<long>>(unfold_map(geo, opts));
  const ColMatrix col = unfold(x.value().data, geo, *map);
  const auto W = as_matrix(kernel.value().data, geo.cout, geo.rows());
  const ColMatrix y = W * col;

  const std::size_t P = geo.positions();
  Shape out_shape = geo.batched ? Shape{geo.batch, geo.cout, geo.oh, geo.ow}
                                : Shape{geo.cout, geo.oh, geo.ow};
  Tensor out(out_shape);
  for (std::size_t n = 0; n < geo.batch; ++n) {
    as_matrix(out.data, geo.batch * geo.cout, P).middleRows(static_cast<Eigen::Index>(n * geo.cout),
                                                            static_cast<Eigen::Index>(geo.cout)) =
        y.middleCols(static_cast<Eigen::Index>(n * P), static_cast<Eigen::Index>(P));
  }

  Graph* g = &x.graph();
  const std::size_t ix = x.id(), ik = kernel.id();
  return g->record(
      OpKind::conv2d, {x, kernel}, std::move(out),
      [g, ix, ik, geo, map](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
        const std::size_t P = geo.positions();
        ColMatrix dy(static_cast<Eigen::Index>(geo.cout), static_cast<Eigen::Index>(geo.batch * P));
        const auto go_rows = as_matrix(go, geo.batch * geo.cout, P);
        for (std::size_t n = 0; n < geo.batch; ++n) {
          dy.middleCols(static_cast<Eigen::Index>(n * P), static_cast<Eigen::Index>(P)) =
              go_rows.middleRows(static_cast<Eigen::Index>(n * geo.cout), static_cast<Eigen::Index>(geo.cout));
        }
        if (gi[1]) {
          const ColMatrix col = unfold(g->value(ix).data, geo, *map);
          as_matrix(*gi[1], geo.cout, geo.rows()).noalias() += dy * col.transpose();
        }
        if (gi[0]) {
          const ColMatrix dcol = as_matrix(g->value(ik).data, geo.cout, geo.rows()).transpose() * dy;
          const std::size_t image = geo.cin * geo.h * geo.w;
          double* dx = gi[0]->data();
          for (std::size_t n = 0; n < geo.batch; ++n) {
            for (std::size_t p = 0; p < P; ++p) {
              const double* src = dcol.col(static_cast<Eigen::Index>(n * P + p)).data();
              for (std::size_t k = 0; k < geo.rows(); ++k) {
                const long s = (*map)[k * P + p];
                if (s >= 0) dx[n * image + static_cast<std::size_t>(s)] += src[k];
              }
            }
          }
        }
      });
}

Var avgpool2d(Var x, std::size_t kernel, std::size_t stride) {
  const PoolGeometry geo = pool_geometry("avgpool2d", x.shape(), kernel, stride);
  Tensor out(pooled_shape(x.shape(), geo));
  const double inv = 1.0 / static_cast<double>(geo.kh * geo.kw);
  const Eigen::VectorXd& xv = x.value().data;
  for (std::size_t l = 0; l < geo.lead; ++l) {
    for (std::size_t oy = 0; oy < geo.oh; ++oy) {
      for (std::size_t ox = 0; ox < geo.ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < geo.kh; ++ky)
          for (std::size_t kx = 0; kx < geo.kw; ++kx)
            acc += xv[static_cast<Eigen::Index>((l * geo.h + oy * geo.stride + ky) * geo.w + ox * geo.stride + kx)];
        out.data[static_cast<Eigen::Index>((l * geo.oh + oy) * geo.ow + ox)] = acc * inv;
      }
    }
  }
  return x.graph().record(OpKind::avgpool2d, {x}, std::move(out),
                          [geo, inv](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            Eigen::VectorXd& dx = *gi[0];
                            for (std::size_t l = 0; l < geo.lead; ++l)
                              for (std::size_t oy = 0; oy < geo.oh; ++oy)
                                for (std::size_t ox = 0; ox < geo.ow; ++ox) {
                                  const double d = go[static_cast<Eigen::Index>((l * geo.oh + oy) * geo.ow + ox)] * inv;
                                  for (std::size_t ky = 0; ky < geo.kh; ++ky)
                                    for (std::size_t kx = 0; kx < geo.kw; ++kx)
                                      dx[static_cast<Eigen::Index>((l * geo.h + oy * geo.stride + ky) * geo.w + ox * geo.stride + kx)] += d;
                                }
                          });
}

Var maxpool2d(Var x, std::size_t kernel, std::size_t stride) {
  const PoolGeometry geo = pool_geometry("maxpool2d", x.shape(), kernel, stride);
  Tensor out(pooled_shape(x.shape(), geo));
  auto winners = std::make_shared<std::vector<std::size_t>>(out.size());
  const Eigen::VectorXd& xv = x.value().data;
  for (std::size_t l = 0; l < geo.lead; ++l) {
    for (std::size_t oy = 0; oy < geo.oh; ++oy) {
      for (std::size_t ox = 0; ox < geo.ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        for (std::size_t ky = 0; ky < geo.kh; ++ky)
          for (std::size_t kx = 0; kx < geo.kw; ++kx) {
            const std::size_t s = (l * geo.h + oy * geo.stride + ky) * geo.w + ox * geo.stride + kx;
            if (xv[static_cast<Eigen::Index>(s)] > best) {
              best = xv[static_cast<Eigen::Index>(s)];
              arg = s;
            }
          }
        const std::size_t o = (l * geo.oh + oy) * geo.ow + ox;
        out.data[static_cast<Eigen::Index>(o)] = best;
        (*winners)[o] = arg;
      }
    }
  }
  return x.graph().record(OpKind::maxpool2d, {x}, std::move(out),
                          [winners](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            for (std::size_t o = 0; o < winners->size(); ++o)
                              (*gi[0])[static_cast<Eigen::Index>((*winners)[o])] += go[static_cast<Eigen::Index>(o)];
                          });
}

Var global_avgpool(Var x) { return avgpool2d(x, 0); }

Var relu(Var x) {
  Tensor out(x.shape(), x.value().data.cwiseMax(0.0));
  Graph* g = &x.graph();
  const std::size_t ix = x.id();
  return g->record(OpKind::relu, {x}, std::move(out),
                   [g, ix](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                     const Eigen::VectorXd& xv = g->value(ix).data;
                     *gi[0] += (xv.array() > 0.0).select(go, 0.0);
                   });
}

Var add(Var a, Var b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as == bs) {
    Tensor out(as, a.value().data + b.value().data);
    return a.graph().record(OpKind::add, {a, b}, std::move(out),
                            [](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                              if (gi[0]) *gi[0] += go;
                              if (gi[1]) *gi[1] += go;
                            });
  }
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    shape_error("add", as, bs);
  }
  const std::size_t inner = numel(bs);
  const std::size_t outer = numel(as) / inner;
  Tensor out(as);
  as_matrix(out.data, outer, inner) =
      as_matrix(a.value().data, outer, inner).rowwise() + b.value().data.transpose();
  return a.graph().record(OpKind::add, {a, b}, std::move(out),
                          [outer, inner](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            if (gi[0]) *gi[0] += go;
                            if (gi[1]) *gi[1] += as_matrix(go, outer, inner).colwise().sum().transpose();
                          });
}

Var mul(Var a, Var b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor out(a.shape(), a.value().data.cwiseProduct(b.value().data));
  Graph* g = &a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g->record(OpKind::mul, {a, b}, std::move(out),
                   [g, ia, ib](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                     if (gi[0]) *gi[0] += go.cwiseProduct(g->value(ib).data);
                     if (gi[1]) *gi[1] += go.cwiseProduct(g->value(ia).data);
                   });
}

Var scale(Var x, double factor) {
  Tensor out(x.shape(), x.value().data * factor);
  return x.graph().record(OpKind::scale, {x}, std::move(out),
                          [factor](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            *gi[0] += go * factor;
                          });
}

Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.value().size()) shape_error("reshape", x.shape(), shape);
  Tensor out(std::move(shape), x.value().data);
  return x.graph().record(OpKind::reshape, {x}, std::move(out),
                          [](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) { *gi[0] += go; });
}

Var transpose(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 2) shape_error("transpose", "needs rank 2, got " + to_string(s));
  const std::size_t r = s[0], c = s[1];
  Tensor out({c, r});
  as_matrix(out.data, c, r) = as_matrix(x.value().data, r, c).transpose();
  return x.graph().record(OpKind::transpose, {x}, std::move(out),
                          [r, c](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            as_matrix(*gi[0], r, c) += as_matrix(go, c, r).transpose();
                          });
}

Var softmax(Var x) {
  const std::size_t L = last_dim("softmax", x.shape());
  const std::size_t R = x.value().size() / L;
  Tensor out(x.shape());
  auto y = as_matrix(out.data, R, L);
  const auto xv = as_matrix(x.value().data, R, L);
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(R); ++r) {
    const double m = xv.row(r).maxCoeff();
    y.row(r) = (xv.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  Graph* g = &x.graph();
  const std::size_t self = g->size();
  return g->record(OpKind::softmax, {x}, std::move(out),
                   [g, self, R, L](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                     const auto yv = as_matrix(g->value(self).data, R, L);
                     const auto dy = as_matrix(go, R, L);
                     const Eigen::VectorXd dots = yv.cwiseProduct(dy).rowwise().sum();
                     as_matrix(*gi[0], R, L) +=
                         (yv.array() * (dy.colwise() - dots).array()).matrix();
                   });
}

Var log_softmax(Var x) {
  const std::size_t L = last_dim("log_softmax", x.shape());
  const std::size_t R = x.value().size() / L;
  Tensor out(x.shape());
  auto y = as_matrix(out.data, R, L);
  const auto xv = as_matrix(x.value().data, R, L);
  for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(R); ++r) {
    const double m = xv.row(r).maxCoeff();
    const double lse = m + std::log((xv.row(r).array() - m).exp().sum());
    y.row(r) = xv.row(r).array() - lse;
  }
  Graph* g = &x.graph();
  const std::size_t self = g->size();
  return g->record(OpKind::log_softmax, {x}, std::move(out),
                   [g, self, R, L](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                     const auto yv = as_matrix(g->value(self).data, R, L);
                     const auto dy = as_matrix(go, R, L);
                     const Eigen::VectorXd totals = dy.rowwise().sum();
                     as_matrix(*gi[0], R, L) +=
                         dy - (yv.array().exp().colwise() * totals.array()).matrix();
                   });
}

Var log(Var x) {
  Tensor out(x.shape(), x.value().data.array().log().matrix());
  Graph* g = &x.graph();
  const std::size_t ix = x.id();
  return g->record(OpKind::log, {x}, std::move(out),
                   [g, ix](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                     *gi[0] += go.cwiseQuotient(g->value(ix).data);
                   });
}

Var sum(Var x) {
  Tensor out({1}, {x.value().data.sum()});
  return x.graph().record(OpKind::sum, {x}, std::move(out),
                          [](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            gi[0]->array() += go[0];
                          });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) shape_error("mean", "empty input " + to_string(x.shape()));
  Tensor out({1}, {x.value().data.sum() / n});
  return x.graph().record(OpKind::mean, {x}, std::move(out),
                          [n](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            gi[0]->array() += go[0] / n;
                          });
}

namespace {

void check_norm_shapes(Var x, Var gamma, Var beta) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) shape_error("normalization", "input must have rank >= 2, got " + to_string(xs));
  if (gamma.shape() != Shape{xs[1]}) shape_error("normalization", xs, gamma.shape());
  if (beta.shape() != Shape{xs[1]}) shape_error("normalization", xs, beta.shape());
}

// x viewed as N*C rows of S entries; row n*C + c belongs to channel c.
Var normalize_with(Var x, Var gamma, Var beta, const Eigen::VectorXd& mean, const Eigen::VectorXd& inv_std,
                   bool batch_mode) {
  const Shape& xs = x.shape();
  const std::size_t N = xs[0], C = xs[1];
  const std::size_t S = N * C != 0 ? x.value().size() / (N * C) : 0;
  const auto c = static_cast<Eigen::Index>(C);
  auto xhat = std::make_shared<Eigen::VectorXd>(x.value().size());
  {
    const auto xv = as_matrix(x.value().data, N * C, S);
    auto xh = as_matrix(*xhat, N * C, S);
    for (std::size_t n = 0; n < N; ++n) {
      const auto r = static_cast<Eigen::Index>(n * C);
      xh.middleRows(r, c) = (xv.middleRows(r, c).array().colwise() - mean.array()).colwise() * inv_std.array();
    }
  }
  Tensor out(xs);
  {
    const Eigen::VectorXd& gv = gamma.value().data;
    const Eigen::VectorXd& bv = beta.value().data;
    auto o = as_matrix(out.data, N * C, S);
    const auto xh = as_matrix(*xhat, N * C, S);
    for (std::size_t n = 0; n < N; ++n) {
      const auto r = static_cast<Eigen::Index>(n * C);
      o.middleRows(r, c) = (xh.middleRows(r, c).array().colwise() * gv.array()).colwise() + bv.array();
    }
  }
  Graph* g = &x.graph();
  const std::size_t ig = gamma.id();
  return g->record(
      OpKind::normalization, {x, gamma, beta}, std::move(out),
      [g, ig, N, C, S, c, xhat, inv_std, batch_mode](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
        const auto dy = as_matrix(go, N * C, S);
        const auto xh = as_matrix(*xhat, N * C, S);
        Eigen::VectorXd dgamma = Eigen::VectorXd::Zero(c);
        Eigen::VectorXd dbeta = Eigen::VectorXd::Zero(c);
        for (std::size_t n = 0; n < N; ++n) {
          const auto r = static_cast<Eigen::Index>(n * C);
          dgamma += dy.middleRows(r, c).cwiseProduct(xh.middleRows(r, c)).rowwise().sum();
          dbeta += dy.middleRows(r, c).rowwise().sum();
        }
        if (gi[1]) *gi[1] += dgamma;
        if (gi[2]) *gi[2] += dbeta;
        if (!gi[0]) return;
        const Eigen::VectorXd& gv = g->value(ig).data;
        const Eigen::VectorXd scale_c = gv.cwiseProduct(inv_std);
        auto dx = as_matrix(*gi[0], N * C, S);
        if (!batch_mode) {
          for (std::size_t n = 0; n < N; ++n) {
            const auto r = static_cast<Eigen::Index>(n * C);
            dx.middleRows(r, c) += (dy.middleRows(r, c).array().colwise() * scale_c.array()).matrix();
          }
          return;
        }
        // d xhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        // with means over batch and positions; sum(dy) = dbeta and sum(dy * xhat) = dgamma
        const double count = static_cast<double>(N * S);
        const Eigen::ArrayXd m1 = dbeta.array() / count;
        const Eigen::ArrayXd m2 = dgamma.array() / count;
        for (std::size_t n = 0; n < N; ++n) {
          const auto r = static_cast<Eigen::Index>(n * C);
          dx.middleRows(r, c) +=
              (((dy.middleRows(r, c).array().colwise() - m1) - xh.middleRows(r, c).array().colwise() * m2)
                   .colwise() *
               scale_c.array())
                  .matrix();
        }
      });
}

}  // namespace

Var normalization(Var x, Var gamma, Var beta, double eps, ChannelStats* batch_stats) {
  check_norm_shapes(x, gamma, beta);
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const std::size_t S = N * C != 0 ? x.value().size() / (N * C) : 0;
  if (N * S == 0) shape_error("normalization", "batch statistics need at least one entry per channel");
  const auto xv = as_matrix(x.value().data, N * C, S);
  const auto c = static_cast<Eigen::Index>(C);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(c);
  for (std::size_t n = 0; n < N; ++n) mean += xv.middleRows(static_cast<Eigen::Index>(n * C), c).rowwise().sum();
  mean /= static_cast<double>(N * S);
  Eigen::VectorXd var = Eigen::VectorXd::Zero(c);
  for (std::size_t n = 0; n < N; ++n) {
    var += (xv.middleRows(static_cast<Eigen::Index>(n * C), c).array().colwise() - mean.array())
               .square()
               .rowwise()
               .sum()
               .matrix();
  }
  var /= static_cast<double>(N * S);
  const Eigen::VectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  if (batch_stats) *batch_stats = {mean, var, N * S};
  return normalize_with(x, gamma, beta, mean, inv_std, true);
}

Var normalization(Var x, Var gamma, Var beta, const Eigen::VectorXd& mean, const Eigen::VectorXd& var, double eps) {
  check_norm_shapes(x, gamma, beta);
  const auto C = static_cast<Eigen::Index>(x.shape()[1]);
  if (mean.size() != C || var.size() != C) {
    shape_error("normalization", x.shape(), Shape{static_cast<std::size_t>(mean.size())});
  }
  const Eigen::VectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  return normalize_with(x, gamma, beta, mean, inv_std, false);
}

Var gather(Var x, std::vector<std::size_t> indices, Shape shape) {
  if (numel(shape) != indices.size()) {
    shape_error("gather", "output shape " + to_string(shape) + " needs " +
                              std::to_string(numel(shape)) + " indices, got " +
                              std::to_string(indices.size()));
  }
  const std::size_t n = x.value().size();
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= n) {
      shape_error("gather", "index " + std::to_string(indices[i]) + " out of range for " + to_string(x.shape()));
    }
    out.data[static_cast<Eigen::Index>(i)] = x.value().data[static_cast<Eigen::Index>(indices[i])];
  }
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(indices));
  return x.graph().record(OpKind::gather, {x}, std::move(out),
                          [idx](const Eigen::VectorXd& go, std::span<Eigen::VectorXd*> gi) {
                            for (std::size_t i = 0; i < idx->size(); ++i)
                              (*gi[0])[static_cast<Eigen::Index>((*idx)[i])] += go[static_cast<Eigen::Index>(i)];
                          });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size() || s[0] == 0) {
    shape_error("cross_entropy", "logits " + to_string(s) + " with " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t L = s[1];
  std::vector<std::size_t> picks(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= L) shape_error("cross_entropy", "label " + std::to_string(labels[r]) + " >= " + std::to_string(L));
    picks[r] = r * L + labels[r];
  }
  return scale(mean(gather(log_softmax(logits), std::move(picks), {labels.size()})), -1.0);
}

Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  const auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw Error("arity", std::string(to_string(kind)) + ": expected " + std::to_string(n) +
                               " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::conv2d:
      need(2);
      return conv2d(inputs[0], inputs[1], {attrs.stride, attrs.padding, attrs.pad_mode});
    case OpKind::avgpool2d: need(1); return avgpool2d(inputs[0], attrs.kernel, attrs.stride == 1 ? 0 : attrs.stride);
    case OpKind::maxpool2d: need(1); return maxpool2d(inputs[0], attrs.kernel, attrs.stride == 1 ? 0 : attrs.stride);
    case OpKind::relu: need(1); return relu(inputs[0]);
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::scale: need(1); return scale(inputs[0], attrs.factor);
    case OpKind::reshape: need(1); return reshape(inputs[0], attrs.shape);
    case OpKind::transpose: need(1); return transpose(inputs[0]);
    case OpKind::softmax: need(1); return softmax(inputs[0]);
    case OpKind::log_softmax: need(1); return log_softmax(inputs[0]);
    case OpKind::log: need(1); return log(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::mean: need(1); return mean(inputs[0]);
    case OpKind::normalization:
      need(3);
      if (attrs.mean.size() != 0 || attrs.var.size() != 0) {
        return normalization(inputs[0], inputs[1], inputs[2], attrs.mean, attrs.var, attrs.eps);
      }
      return normalization(inputs[0], inputs[1], inputs[2], attrs.eps);
    case OpKind::gather: need(1); return gather(inputs[0], attrs.indices, attrs.shape);
    case OpKind::leaf: break;
  }
  throw Error("unknown_op", "forward_op: cannot dispatch '" + std::string(to_string(kind)) + "'");
}

}  // namespace semab
