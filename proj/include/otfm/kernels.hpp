#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "otfm/common.hpp"

// Shared sampling/kernel helpers. Both the reference degradation operators and
// the differentiable blur inside the transport cost use these, so the two
// paths agree exactly.

namespace otfm {

// Symmetric (half-sample, edge-inclusive) boundary fold. Valid for any i.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int j = i % period;
  if (j < 0) j += period;
  return j < n ? j : period - 1 - j;
}

// Gaussian sigma whose frequency response hits `gain` at the Nyquist
// frequency of a grid coarsened by `ratio`.
inline double mtf_sigma(int ratio, double gain) {
  if (ratio < 1) throw ArgumentError("mtf_sigma: ratio must be >= 1");
  if (!(gain > 0.0 && gain < 1.0))
    throw ArgumentError("mtf_sigma: gain must lie in (0,1)");
  const double pi = 3.14159265358979323846;
  return std::sqrt(-2.0 * double(ratio) * double(ratio) * std::log(gain) / (pi * pi));
}

// Centered, unit-sum 1-D Gaussian taps. size must be odd.
inline std::vector<double> gaussian_kernel_1d(int size, double sigma) {
  if (size < 1 || size % 2 == 0)
    throw ArgumentError("gaussian_kernel_1d: size must be odd and positive");
  if (!(sigma > 0.0)) throw ArgumentError("gaussian_kernel_1d: sigma must be positive");
  std::vector<double> k(size);
  const int r = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    double x = double(i - r);
    k[i] = std::exp(-0.5 * x * x / (sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// One vertical separable-blur pass over an (H, W) plane with symmetric
// folds: dst(i, j) = sum_t k[t] * src(fold(i + t - r), j). Accumulates in
// double with taps ascending. The reference degradation operators and the
// differentiable blur both call these two passes, so the sensor model and
// its autodiff counterpart stay bitwise identical.
template <typename S>
void blur_pass_rows(const S* src, S* dst, int H, int W, const std::vector<double>& k) {
  const int ks = int(k.size()), r = ks / 2;
  thread_local std::vector<double> acc;
  acc.resize(std::size_t(W));
  for (int i = 0; i < H; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int t = 0; t < ks; ++t) {
      const double kt = k[std::size_t(t)];
      const S* srow = src + std::size_t(reflect_index(i + t - r, H)) * W;
      for (int j = 0; j < W; ++j) acc[std::size_t(j)] += kt * double(srow[j]);
    }
    S* drow = dst + std::size_t(i) * W;
    for (int j = 0; j < W; ++j) drow[j] = S(acc[std::size_t(j)]);
  }
}

// Horizontal counterpart; each row is copied into a reflect-padded scratch
// line so the tap loop reads contiguously.
template <typename S>
void blur_pass_cols(const S* src, S* dst, int H, int W, const std::vector<double>& k) {
  const int ks = int(k.size()), r = ks / 2;
  thread_local std::vector<S> pad;
  pad.resize(std::size_t(W) + 2 * std::size_t(r));
  for (int i = 0; i < H; ++i) {
    const S* srow = src + std::size_t(i) * W;
    for (int q = -r; q < 0; ++q) pad[std::size_t(q + r)] = srow[reflect_index(q, W)];
    for (int q = 0; q < W; ++q) pad[std::size_t(q + r)] = srow[q];
    for (int q = W; q < W + r; ++q) pad[std::size_t(q + r)] = srow[reflect_index(q, W)];
    S* drow = dst + std::size_t(i) * W;
    for (int j = 0; j < W; ++j) {
      double a = 0.0;
      const S* pp = pad.data() + j;
      for (int t = 0; t < ks; ++t) a += k[std::size_t(t)] * double(pp[t]);
      drow[j] = S(a);
    }
  }
}

// Catmull-Rom cubic weight (a = -0.5), |x| in [0,2).
inline double cubic_weight(double x) {
  const double a = -0.5;
  x = std::fabs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

}  // namespace otfm
