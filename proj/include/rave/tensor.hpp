#pragma once

#include <Eigen/Dense>

#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rave {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor: a shape plus a flat Eigen array.
template <typename Scalar>
struct Tensor {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(Array::Zero(shape_size(shape))) {}
  Tensor(Shape s, Array values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_size(shape)) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor constant(Shape s, Scalar v) {
    const Index n = shape_size(s);
    return Tensor(std::move(s), Array::Constant(n, v));
  }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, Array::Constant(1, v)); }
  static Tensor from_vector(const Vector<Scalar>& v) { return Tensor(Shape{v.size()}, v.array()); }
  static Tensor from_matrix(const RowMatrix<Scalar>& m) {
    return Tensor(Shape{m.rows(), m.cols()},
                  Eigen::Map<const Array>(m.data(), m.size()));
  }

  Index size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  Index dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  Scalar item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape));
    return data(0);
  }

  Eigen::Map<RowMatrix<Scalar>> matrix(Index rows, Index cols) {
    if (rows * cols != data.size()) throw ShapeError("matrix view size mismatch");
    return {data.data(), rows, cols};
  }
  Eigen::Map<const RowMatrix<Scalar>> matrix(Index rows, Index cols) const {
    if (rows * cols != data.size()) throw ShapeError("matrix view size mismatch");
    return {data.data(), rows, cols};
  }
  /// Rank-2 view.
  Eigen::Map<RowMatrix<Scalar>> matrix() { return matrix(dim(0), dim(1)); }
  Eigen::Map<const RowMatrix<Scalar>> matrix() const { return matrix(dim(0), dim(1)); }

  Vector<Scalar> vector() const { return data.matrix(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }
};

}  // namespace rave
