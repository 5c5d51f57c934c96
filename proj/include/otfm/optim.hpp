#pragma once

#include <cmath>
#include <vector>

#include "otfm/networks.hpp"

namespace otfm::train {

using ad::Tensor;
using ad::Var;

// Adaptive moments with decoupled weight decay. Moment arithmetic runs in
// double regardless of the parameter scalar so update order is the only
// source of rounding, keeping runs bit-reproducible.
template <typename S>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor<S>> m, v;
  std::int64_t t = 0;

  void init(const nn::Params<S>& p) {
    m.clear();
    v.clear();
    t = 0;
    for (const auto& w : p.values) {
      m.push_back(Tensor<S>(w.shape()));
      v.push_back(Tensor<S>(w.shape()));
    }
  }

  void step(nn::Params<S>& p, const std::vector<Tensor<S>>& grads, double lr,
            double weight_decay) {
    if (grads.size() != p.values.size() || m.size() != p.values.size())
      throw ArgumentError("adamw: gradient/state count mismatch");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      Tensor<S>& w = p.values[i];
      if (!grads[i].same_shape(w)) throw ArgumentError("adamw: gradient shape mismatch");
      for (std::int64_t j = 0; j < w.numel(); ++j) {
        const double g = double(grads[i][j]);
        const double mi = beta1 * double(m[i][j]) + (1.0 - beta1) * g;
        const double vi = beta2 * double(v[i][j]) + (1.0 - beta2) * g * g;
        m[i][j] = S(mi);
        v[i][j] = S(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
        w[j] = S(double(w[j]) - lr * (update + weight_decay * double(w[j])));
      }
    }
  }
};

// Gradients of bound parameter leaves, zeros where no gradient flowed.
template <typename S>
std::vector<Tensor<S>> collect_grads(const std::vector<Var<S>>& leaves) {
  std::vector<Tensor<S>> out;
  out.reserve(leaves.size());
  for (const auto& l : leaves)
    out.push_back(l->g.empty() ? Tensor<S>(l->v.shape()) : l->g);
  return out;
}

// Scales grads in place so their global L2 norm is at most max_norm.
// Returns the pre-clip norm (accumulated in double).
template <typename S>
double clip_global_norm(std::vector<Tensor<S>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (std::int64_t i = 0; i < g.numel(); ++i) sq += double(g[i]) * double(g[i]);
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm && norm > 0.0) {
    const S s = S(max_norm / norm);
    for (auto& g : grads)
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= s;
  }
  return norm;
}

}  // namespace otfm::train
