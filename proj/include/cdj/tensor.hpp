#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cdj {

#ifdef CDJ_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

/// Dense n-dimensional array of `real` values in row-major order.
/// Shapes are immutable after construction; data is a flat buffer whose
/// length always equals the product of the extents.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), real(0)) {}

  Tensor(std::vector<std::size_t> shape, std::vector<real> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_string());
    }
  }

  static Tensor scalar(real v) { return Tensor({1}, {v}); }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& flat() { return data_; }
  const std::vector<real>& flat() const { return data_; }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  // 2-d and 4-d accessors for the shapes this library actually uses.
  real& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  const real& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  real& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset4(n, c, h, w)];
  }
  const real& operator()(std::size_t n, std::size_t c, std::size_t h,
                         std::size_t w) const {
    return data_[offset4(n, c, h, w)];
  }

  std::size_t offset4(std::size_t n, std::size_t c, std::size_t h,
                      std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (real v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(real v) {
    for (real& x : data_) x = v;
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << 'x';
      os << shape_[i];
    }
    os << ']';
    return os.str();
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<real> data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                a.shape_string() + " vs " + b.shape_string());
  }
}

/// a += b, elementwise.
inline void add_inplace(Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add_inplace");
  real* pa = a.data();
  const real* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

inline void scale_inplace(Tensor& a, real s) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] *= s;
}

}  // namespace cdj
