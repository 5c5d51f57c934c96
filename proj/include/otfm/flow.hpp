#pragma once

#include "otfm/tensor.hpp"

// Flow-path substrate. Convention: t = 1 sits at the prior end (upsampled
// LRMS), t = 0 at the data end (HRMS); sampling integrates t from 1 down to 0.

namespace otfm::flow {

using ad::Tensor;

template <typename S>
Tensor<S> interpolate(const Tensor<S>& y0, const Tensor<S>& y1, S t) {
  if (!y0.same_shape(y1)) throw ArgumentError("interpolate: shape mismatch");
  if (t < S(0) || t > S(1)) throw ArgumentError("interpolate: t outside [0,1]");
  Tensor<S> out(y0.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = t * y0[i] + (S(1) - t) * y1[i];
  return out;
}

// Per-sample t over the leading dimension.
template <typename S>
Tensor<S> interpolate(const Tensor<S>& y0, const Tensor<S>& y1, const Tensor<S>& t) {
  if (!y0.same_shape(y1)) throw ArgumentError("interpolate: shape mismatch");
  const int n = y0.dim(0);
  if (t.rank() != 1 || t.dim(0) != n)
    throw ArgumentError("interpolate: t must have one value per sample");
  const std::int64_t per = y0.numel() / n;
  Tensor<S> out(y0.shape());
  for (int s = 0; s < n; ++s) {
    const S ts = t[s];
    if (ts < S(0) || ts > S(1)) throw ArgumentError("interpolate: t outside [0,1]");
    for (std::int64_t i = s * per; i < (s + 1) * per; ++i)
      out[i] = ts * y0[i] + (S(1) - ts) * y1[i];
  }
  return out;
}

template <typename S>
Tensor<S> velocity_target(const Tensor<S>& y0, const Tensor<S>& y1) {
  if (!y0.same_shape(y1)) throw ArgumentError("velocity_target: shape mismatch");
  Tensor<S> out(y0.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = y1[i] - y0[i];
  return out;
}

template <typename S>
Tensor<S> reconstruct_endpoint(const Tensor<S>& y_t, S t, const Tensor<S>& v_hat) {
  if (!y_t.same_shape(v_hat))
    throw ArgumentError("reconstruct_endpoint: shape mismatch");
  Tensor<S> out(y_t.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = y_t[i] + t * v_hat[i];
  return out;
}

template <typename S>
Tensor<S> reconstruct_endpoint(const Tensor<S>& y_t, const Tensor<S>& t,
                               const Tensor<S>& v_hat) {
  if (!y_t.same_shape(v_hat))
    throw ArgumentError("reconstruct_endpoint: shape mismatch");
  const int n = y_t.dim(0);
  if (t.rank() != 1 || t.dim(0) != n)
    throw ArgumentError("reconstruct_endpoint: t must have one value per sample");
  const std::int64_t per = y_t.numel() / n;
  Tensor<S> out(y_t.shape());
  for (int s = 0; s < n; ++s)
    for (std::int64_t i = s * per; i < (s + 1) * per; ++i)
      out[i] = y_t[i] + t[s] * v_hat[i];
  return out;
}

// model(y, t, cond) -> velocity tensor of y's shape. steps = 1 reproduces the
// one-step map y0 + model(y0, 1, cond) exactly.
template <typename S, typename Model, typename Cond>
Tensor<S> euler_sample(Model&& model, const Tensor<S>& y0, const Cond& cond,
                       int steps) {
  if (steps < 1) throw ArgumentError("euler_sample: steps must be >= 1");
  Tensor<S> y = y0;
  const S dt = S(1) / S(steps);
  S t = S(1);
  for (int k = 0; k < steps; ++k) {
    Tensor<S> v = model(y, t, cond);
    if (!v.same_shape(y))
      throw ArgumentError("euler_sample: model returned mismatched shape");
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += dt * v[i];
    t -= dt;
  }
  return y;
}

}  // namespace otfm::flow
