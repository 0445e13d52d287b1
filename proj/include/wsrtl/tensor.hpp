#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsrtl {

using Shape = std::vector<int>;

inline std::int64_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         [](std::int64_t a, int b) { return a * b; });
}

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Storage is an Eigen array so elementwise work
/// vectorizes; matrix views are exposed as row-major Eigen maps.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(shape_size(shape_))) {}
  Tensor(Shape shape, Scalar fill)
      : shape_(std::move(shape)), data_(Array::Constant(shape_size(shape_), fill)) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape " + shape_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator[](Eigen::Index i) { return data_[i]; }
  Scalar operator[](Eigen::Index i) const { return data_[i]; }

  Scalar& at(int i, int j) { return data_[static_cast<Eigen::Index>(i) * shape_[1] + j]; }
  Scalar at(int i, int j) const { return data_[static_cast<Eigen::Index>(i) * shape_[1] + j]; }
  Scalar& at(int i, int j, int k) { return data_[(static_cast<Eigen::Index>(i) * shape_[1] + j) * shape_[2] + k]; }
  Scalar at(int i, int j, int k) const {
    return data_[(static_cast<Eigen::Index>(i) * shape_[1] + j) * shape_[2] + k];
  }
  Scalar& at(int n, int c, int h, int w) {
    return data_[((static_cast<Eigen::Index>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(int n, int c, int h, int w) const {
    return data_[((static_cast<Eigen::Index>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Row-major view as rows x cols; rows*cols must equal size().
  MatrixMap matrix(Eigen::Index rows, Eigen::Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Eigen::Index rows, Eigen::Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }
  /// View with the last dimension as columns.
  MatrixMap matrix() { return matrix(size() / shape_.back(), shape_.back()); }
  ConstMatrixMap matrix() const { return matrix(size() / shape_.back(), shape_.back()); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw std::invalid_argument("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  void check_view(Eigen::Index rows, Eigen::Index cols) const {
    if (rows * cols != data_.size())
      throw std::invalid_argument("matrix view does not cover tensor " + shape_string(shape_));
  }

  Shape shape_;
  Array data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace wsrtl
