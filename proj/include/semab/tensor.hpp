#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

namespace semab {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major array of doubles with an optional gradient buffer.
struct Tensor {
  Shape shape;
  Eigen::VectorXd data;
  bool requires_grad = false;
  std::optional<Eigen::VectorXd> grad;

  Tensor() = default;
  /// Zero-filled tensor.
  explicit Tensor(Shape s);
  /// Throws Error("shape_mismatch") when the data length disagrees with the shape.
  Tensor(Shape s, Eigen::VectorXd values);
  Tensor(Shape s, std::initializer_list<double> values);

  static Tensor full(Shape s, double value);

  std::size_t size() const { return static_cast<std::size_t>(data.size()); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[static_cast<Eigen::Index>(i)]; }
  double operator[](std::size_t i) const { return data[static_cast<Eigen::Index>(i)]; }

  /// Element of a C x H x W tensor.
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[static_cast<Eigen::Index>((c * shape[1] + y) * shape[2] + x)];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[static_cast<Eigen::Index>((c * shape[1] + y) * shape[2] + x)];
  }

  void zero_grad() { grad.reset(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
  }
};

/// Stack equally-shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& items);
/// Slice `count` entries starting at `first` along the leading axis.
Tensor slice_leading(const Tensor& batch, std::size_t first, std::size_t count);

}  // namespace semab
