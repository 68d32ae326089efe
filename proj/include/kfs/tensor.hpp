#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kfs/rng.hpp"

namespace kfs {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("tensor shape has negative extent " + std::to_string(d));
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// Dense row-major n-d array. Rank-0 tensors hold a single scalar.
template <typename Scalar>
class Tensor {
 public:
  using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }

  static Tensor from(Shape shape, std::vector<Scalar> data) {
    Tensor t;
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
      throw Error("tensor data length " + std::to_string(data.size()) +
                  " does not match shape " + shape_str(shape));
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  static Tensor scalar(Scalar v) {
    Tensor t;
    t.data_.assign(1, v);
    return t;
  }

  // i.i.d. N(0, sigma^2) entries drawn from a named counter stream
  static Tensor gaussian(Shape shape, const CounterRng& rng, Scalar sigma = Scalar(1),
                         std::uint64_t counter_base = 0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i)
      t.data_[static_cast<std::size_t>(i)] =
          sigma * static_cast<Scalar>(rng.gaussian(counter_base + static_cast<std::uint64_t>(i)));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar item() const {
    if (size() != 1) throw Error("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Eigen::Map<ArrayX> array() { return {data_.data(), size()}; }
  Eigen::Map<const ArrayX> array() const { return {data_.data(), size()}; }
  Eigen::Map<VectorX> vec() { return {data_.data(), size()}; }
  Eigen::Map<const VectorX> vec() const { return {data_.data(), size()}; }
  Eigen::Map<MatrixR> mat(std::int64_t rows, std::int64_t cols) {
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const MatrixR> mat(std::int64_t rows, std::int64_t cols) const {
    return {data_.data(), rows, cols};
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw Error("reshape from " + shape_str(shape_) + " to incompatible " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> d(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<T>(data_[i]);
    Tensor<T> t = Tensor<T>::from(shape_, std::move(d));
    t.requires_grad = requires_grad;
    return t;
  }

  Tensor& set_requires_grad(bool rq = true) {
    requires_grad = rq;
    return *this;
  }

  bool requires_grad = false;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

template <typename Scalar>
bool bit_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b)) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (!a.same_shape(b)) throw Error("max_abs_diff: shape mismatch");
  if (a.size() == 0) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace kfs
