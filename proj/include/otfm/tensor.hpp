#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "otfm/common.hpp"

namespace otfm::ad {

// Dense row-major tensor. Shapes are small (rank <= 4, NCHW for feature maps).
template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    d_.assign(static_cast<std::size_t>(numel_of(shape_)), S(0));
  }
  Tensor(std::vector<int> shape, std::vector<S> data)
      : shape_(std::move(shape)), d_(std::move(data)) {
    if (static_cast<std::int64_t>(d_.size()) != numel_of(shape_))
      throw ArgumentError("tensor: data length does not match shape");
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, S v) {
    Tensor t(std::move(shape));
    std::fill(t.d_.begin(), t.d_.end(), v);
    return t;
  }
  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(d_.size()); }
  bool empty() const { return d_.empty(); }

  S* data() { return d_.data(); }
  const S* data() const { return d_.data(); }
  std::vector<S>& vec() { return d_; }
  const std::vector<S>& vec() const { return d_; }

  S& operator[](std::int64_t i) { return d_[static_cast<std::size_t>(i)]; }
  S operator[](std::int64_t i) const { return d_[static_cast<std::size_t>(i)]; }

  // NCHW accessor.
  S& at4(int n, int c, int h, int w) {
    return d_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  S at4(int n, int c, int h, int w) const {
    return d_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) throw ArgumentError("tensor: reshape numel mismatch");
    return Tensor(std::move(shape), d_);
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (std::size_t i = 0; i < d_.size(); ++i) out.data()[i] = static_cast<T>(d_[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
  }

  static std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int s : shape) {
      if (s < 0) throw ArgumentError("tensor: negative dimension");
      n *= s;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<S> d_;
};

template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(static_cast<double>(t[i]))) return false;
  return true;
}

}  // namespace otfm::ad
