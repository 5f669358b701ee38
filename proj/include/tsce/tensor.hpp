#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tsce/errors.hpp"

namespace tsce {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor of arbitrary rank. Activations flowing through a
/// network are always rank 3 with layout (batch, channels, time); parameters
/// use whatever rank is natural (conv kernels are (out, in, kernel), dense
/// weights (out, in), biases rank 1).
template <typename Scalar>
class BasicTensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Array::Constant(shape_size(shape_), fill)) {}
  BasicTensor(std::initializer_list<Index> shape, Scalar fill = Scalar(0))
      : BasicTensor(Shape(shape), fill) {}

  static BasicTensor from_values(Shape shape, const std::vector<Scalar>& values) {
    if (static_cast<Index>(values.size()) != shape_size(shape))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_string(shape));
    BasicTensor t(std::move(shape));
    for (std::size_t i = 0; i < values.size(); ++i) t.data_[Index(i)] = values[i];
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return Index(shape_.size()); }
  Index dim(Index i) const { return shape_.at(std::size_t(i)); }
  Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.size() == 0; }

  Array& values() noexcept { return data_; }
  const Array& values() const noexcept { return data_; }
  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // Rank-3 accessors.
  Index batch() const { return dim(0); }
  Index channels() const { return dim(1); }
  Index time() const { return dim(2); }
  Scalar& operator()(Index b, Index c, Index t) {
    return data_[(b * shape_[1] + c) * shape_[2] + t];
  }
  Scalar operator()(Index b, Index c, Index t) const {
    return data_[(b * shape_[1] + c) * shape_[2] + t];
  }

  void reshape(Shape shape) {
    if (shape_size(shape) != size())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    shape_ = std::move(shape);
  }

  bool all_finite() const { return data_.isFinite().all(); }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Shape shape_;
  Array data_;
};

using Tensor = BasicTensor<double>;

/// Row-major matrix view of the tensor's storage.
template <typename Scalar>
Eigen::Map<RowMajorMatrix<Scalar>> as_matrix(BasicTensor<Scalar>& t, Index rows, Index cols) {
  if (rows * cols != t.size()) throw ShapeError("matrix view does not cover tensor");
  return Eigen::Map<RowMajorMatrix<Scalar>>(t.data(), rows, cols);
}

template <typename Scalar>
Eigen::Map<const RowMajorMatrix<Scalar>> as_matrix(const BasicTensor<Scalar>& t, Index rows,
                                                   Index cols) {
  if (rows * cols != t.size()) throw ShapeError("matrix view does not cover tensor");
  return Eigen::Map<const RowMajorMatrix<Scalar>>(t.data(), rows, cols);
}

/// (channels x time) view of one sample of a rank-3 tensor.
template <typename Scalar>
Eigen::Map<RowMajorMatrix<Scalar>> sample_matrix(BasicTensor<Scalar>& t, Index b) {
  return Eigen::Map<RowMajorMatrix<Scalar>>(t.data() + b * t.channels() * t.time(),
                                            t.channels(), t.time());
}

template <typename Scalar>
Eigen::Map<const RowMajorMatrix<Scalar>> sample_matrix(const BasicTensor<Scalar>& t, Index b) {
  return Eigen::Map<const RowMajorMatrix<Scalar>>(t.data() + b * t.channels() * t.time(),
                                                  t.channels(), t.time());
}

template <typename Scalar>
BasicTensor<Scalar> zeros_like(const BasicTensor<Scalar>& t) {
  return BasicTensor<Scalar>(t.shape());
}

template <typename Scalar>
Scalar max_abs_difference(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.shape() != b.shape()) throw ShapeError("shape mismatch in comparison");
  if (a.size() == 0) return Scalar(0);
  return (a.values() - b.values()).abs().maxCoeff();
}

}  // namespace tsce
