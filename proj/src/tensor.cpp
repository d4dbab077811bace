#include "semab/tensor.hpp"

#include "semab/error.hpp"

#include <functional>
#include <numeric>

namespace semab {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape s)
    : shape(std::move(s)),
      data(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(numel(shape)))) {}

Tensor::Tensor(Shape s, Eigen::VectorXd values) : shape(std::move(s)), data(std::move(values)) {
  if (numel(shape) != static_cast<std::size_t>(data.size())) {
    throw Error("shape_mismatch", "tensor: shape " + to_string(shape) + " holds " +
                                      std::to_string(numel(shape)) + " values, got " +
                                      std::to_string(data.size()));
  }
}

Tensor::Tensor(Shape s, std::initializer_list<double> values)
    : Tensor(std::move(s), Eigen::Map<const Eigen::VectorXd>(
                               values.begin(), static_cast<Eigen::Index>(values.size()))) {}

Tensor Tensor::full(Shape s, double value) {
  Tensor t(std::move(s));
  t.data.setConstant(value);
  return t;
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw Error("empty_input", "stack: no tensors");
  const Shape& inner = items.front().shape;
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(shape);
  const auto n = static_cast<Eigen::Index>(numel(inner));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape != inner) {
      throw Error("shape_mismatch", "stack: " + to_string(inner) + " vs " +
                                        to_string(items[i].shape));
    }
    out.data.segment(static_cast<Eigen::Index>(i) * n, n) = items[i].data;
  }
  return out;
}

Tensor slice_leading(const Tensor& batch, std::size_t first, std::size_t count) {
  if (batch.rank() == 0 || first + count > batch.shape[0]) {
    throw Error("out_of_range", "slice_leading: [" + std::to_string(first) + ", " +
                                    std::to_string(first + count) + ") of " +
                                    to_string(batch.shape));
  }
  Shape shape = batch.shape;
  shape[0] = count;
  const auto n = static_cast<Eigen::Index>(numel(shape) / std::max<std::size_t>(count, 1));
  Tensor out(shape);
  if (count) out.data = batch.data.segment(static_cast<Eigen::Index>(first) * n,
                                           static_cast<Eigen::Index>(count) * n);
  return out;
}

}  // namespace semab
