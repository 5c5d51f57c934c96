#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "otfm/tensor.hpp"

// Reverse-mode autodiff on a dynamically built tape. Single-threaded by
// design: gradient accumulation order is fixed, so runs are bit-reproducible.

namespace otfm::ad {

template <typename S>
struct Node;

template <typename S>
using Var = std::shared_ptr<Node<S>>;

template <typename S>
struct Node {
  Tensor<S> v;               // forward value
  Tensor<S> g;               // gradient, allocated lazily
  bool needs = false;        // does any leaf below require gradients?
  std::vector<Var<S>> in;
  std::function<void(Node<S>&)> back;  // pulls this->g into in[i]->g

  void ensure_grad() {
    if (g.empty() && v.numel() > 0) g = Tensor<S>(v.shape());
  }
};

template <typename S>
Var<S> leaf(Tensor<S> value, bool needs_grad = false) {
  auto n = std::make_shared<Node<S>>();
  n->v = std::move(value);
  n->needs = needs_grad;
  return n;
}

template <typename S>
Var<S> make_node(Tensor<S> value, std::vector<Var<S>> inputs,
                 std::function<void(Node<S>&)> back) {
  auto n = std::make_shared<Node<S>>();
  n->v = std::move(value);
  n->in = std::move(inputs);
  for (const auto& i : n->in)
    if (i->needs) n->needs = true;
  if (n->needs) n->back = std::move(back);
  return n;
}

// Backward pass from a scalar root. Iterative post-order topological sort.
template <typename S>
void backward(const Var<S>& root) {
  if (root->v.numel() != 1) throw ArgumentError("backward: root must be scalar");
  std::vector<Node<S>*> topo;
  std::unordered_set<Node<S>*> seen;
  struct Frame {
    Node<S>* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  if (root->needs) stack.push_back({root.get(), 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next == 0) {
      if (seen.count(f.n)) {
        stack.pop_back();
        continue;
      }
      seen.insert(f.n);
    }
    if (f.next < f.n->in.size()) {
      Node<S>* child = f.n->in[f.next++].get();
      if (child->needs && !seen.count(child)) stack.push_back({child, 0});
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->g[0] = S(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node<S>* n = *it;
    if (n->back) n->back(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  if (!a->v.same_shape(b->v))
    throw ArgumentError(std::string(op) + ": shape mismatch " + a->v.shape_str() +
                        " vs " + b->v.shape_str());
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a, b, "add");
  Tensor<S> out(a->v.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->v[i] + b->v[i];
  return make_node<S>(std::move(out), {a, b}, [](Node<S>& self) {
    for (int k = 0; k < 2; ++k)
      if (self.in[k]->needs) {
        self.in[k]->ensure_grad();
        Tensor<S>& gi = self.in[k]->g;
        for (std::int64_t i = 0; i < self.g.numel(); ++i) gi[i] += self.g[i];
      }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a, b, "sub");
  Tensor<S> out(a->v.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->v[i] - b->v[i];
  return make_node<S>(std::move(out), {a, b}, [](Node<S>& self) {
    if (self.in[0]->needs) {
      self.in[0]->ensure_grad();
      for (std::int64_t i = 0; i < self.g.numel(); ++i) self.in[0]->g[i] += self.g[i];
    }
    if (self.in[1]->needs) {
      self.in[1]->ensure_grad();
      for (std::int64_t i = 0; i < self.g.numel(); ++i) self.in[1]->g[i] -= self.g[i];
    }
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a, b, "mul");
  Tensor<S> out(a->v.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->v[i] * b->v[i];
  return make_node<S>(std::move(out), {a, b}, [](Node<S>& self) {
    const Tensor<S>& av = self.in[0]->v;
    const Tensor<S>& bv = self.in[1]->v;
    if (self.in[0]->needs) {
      self.in[0]->ensure_grad();
      for (std::int64_t i = 0; i < self.g.numel(); ++i)
        self.in[0]->g[i] += self.g[i] * bv[i];
    }
    if (self.in[1]->needs) {
      self.in[1]->ensure_grad();
      for (std::int64_t i = 0; i < self.g.numel(); ++i)
        self.in[1]->g[i] += self.g[i] * av[i];
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out(a->v.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->v[i] * c;
  return make_node<S>(std::move(out), {a}, [c](Node<S>& self) {
    self.in[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.g.numel(); ++i) self.in[0]->g[i] += self.g[i] * c;
  });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S c) {
  Tensor<S> out(a->v.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->v[i] + c;
  return make_node<S>(std::move(out), {a}, [](Node<S>& self) {
    self.in[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.g.numel(); ++i) self.in[0]->g[i] += self.g[i];
  });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return scale(a, S(-1));
}

// f(z) = exp(clamp(z, -bound, bound)); finite by construction.
template <typename S>
Var<S> exp_clamp(const Var<S>& a, S bound) {
  if (!(bound > S(0))) throw ArgumentError("exp_clamp: bound must be positive");
  Tensor<S> out(a->v.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    S z = std::min(std::max(a->v[i], -bound), bound);
    out[i] = std::exp(z);
  }
  return make_node<S>(std::move(out), {a}, [bound](Node<S>& self) {
    self.in[0]->ensure_grad();
    const Tensor<S>& av = self.in[0]->v;
    for (std::int64_t i = 0; i < self.g.numel(); ++i) {
      bool inside = av[i] > -bound && av[i] < bound;
      if (inside) self.in[0]->g[i] += self.g[i] * self.v[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
Var<S> leaky_relu(const Var<S>& a, S slope) {
  Tensor<S> out(a->v.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->v[i] > S(0) ? a->v[i] : slope * a->v[i];
  return make_node<S>(std::move(out), {a}, [slope](Node<S>& self) {
    self.in[0]->ensure_grad();
    const Tensor<S>& av = self.in[0]->v;
    for (std::int64_t i = 0; i < self.g.numel(); ++i)
      self.in[0]->g[i] += self.g[i] * (av[i] > S(0) ? S(1) : slope);
  });
}

// Activations run in the scalar's own precision: the float instantiation uses
// float libm (the elementwise transcendentals dominate CPU training time),
// the double instantiation keeps full precision for finite-difference checks.
template <typename S>
Var<S> gelu(const Var<S>& a) {
  // The erf from the forward is cached so the backward only pays for the
  // Gaussian pdf; activations dominate elementwise CPU time during training.
  constexpr S kInvSqrt2 = S(0.70710678118654752440);
  Tensor<S> out(a->v.shape());
  auto cdf = std::make_shared<std::vector<S>>(std::size_t(out.numel()));
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const S x = a->v[i];
    const S erfv = std::erf(x * kInvSqrt2);
    out[i] = S(0.5) * x * (S(1) + erfv);
    (*cdf)[std::size_t(i)] = S(0.5) * (S(1) + erfv);
  }
  return make_node<S>(std::move(out), {a}, [cdf](Node<S>& self) {
    constexpr S kInvSqrt2Pi = S(0.39894228040143267794);
    self.in[0]->ensure_grad();
    const Tensor<S>& av = self.in[0]->v;
    for (std::int64_t i = 0; i < self.g.numel(); ++i) {
      const S x = av[i];
      const S pdf = kInvSqrt2Pi * std::exp(S(-0.5) * x * x);
      self.in[0]->g[i] += self.g[i] * S((*cdf)[std::size_t(i)] + x * pdf);
    }
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  // Sigmoid cached from the forward; the backward is then exp-free.
  Tensor<S> out(a->v.shape());
  auto sigv = std::make_shared<std::vector<S>>(std::size_t(out.numel()));
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const S x = a->v[i];
    const S e = std::exp(-x);
    out[i] = x / (S(1) + e);
    (*sigv)[std::size_t(i)] = S(1) / (S(1) + e);
  }
  return make_node<S>(std::move(out), {a}, [sigv](Node<S>& self) {
    self.in[0]->ensure_grad();
    const Tensor<S>& av = self.in[0]->v;
    for (std::int64_t i = 0; i < self.g.numel(); ++i) {
      const S x = av[i];
      const S sig = (*sigv)[std::size_t(i)];
      self.in[0]->g[i] += self.g[i] * (sig * (S(1) + x * (S(1) - sig)));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < a->v.numel(); ++i) acc += double(a->v[i]);
  return make_node<S>(Tensor<S>::scalar(S(acc)), {a}, [](Node<S>& self) {
    self.in[0]->ensure_grad();
    S g = self.g[0];
    for (std::int64_t i = 0; i < self.in[0]->g.numel(); ++i) self.in[0]->g[i] += g;
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  const std::int64_t n = a->v.numel();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += double(a->v[i]);
  return make_node<S>(Tensor<S>::scalar(S(acc / double(n))), {a}, [n](Node<S>& self) {
    self.in[0]->ensure_grad();
    S g = self.g[0] / S(n);
    for (std::int64_t i = 0; i < self.in[0]->g.numel(); ++i) self.in[0]->g[i] += g;
  });
}

// (N, ...) -> (N): mean over all trailing dimensions per leading index.
template <typename S>
Var<S> mean_per_sample(const Var<S>& a) {
  const int n = a->v.dim(0);
  const std::int64_t per = a->v.numel() / n;
  Tensor<S> out({n});
  for (int s = 0; s < n; ++s) {
    double acc = 0.0;
    const S* p = a->v.data() + s * per;
    for (std::int64_t i = 0; i < per; ++i) acc += double(p[i]);
    out[s] = S(acc / double(per));
  }
  return make_node<S>(std::move(out), {a}, [n, per](Node<S>& self) {
    self.in[0]->ensure_grad();
    for (int s = 0; s < n; ++s) {
      S g = self.g[s] / S(per);
      S* p = self.in[0]->g.data() + s * per;
      for (std::int64_t i = 0; i < per; ++i) p[i] += g;
    }
  });
}

// mean over trailing dims of (a-b)^2, computed fused: (N, ...) -> (N).
template <typename S>
Var<S> mse_per_sample(const Var<S>& a, const Var<S>& b) {
  check_same_shape(a, b, "mse_per_sample");
  const int n = a->v.dim(0);
  const std::int64_t per = a->v.numel() / n;
  Tensor<S> out({n});
  for (int s = 0; s < n; ++s) {
    double acc = 0.0;
    const S* pa = a->v.data() + s * per;
    const S* pb = b->v.data() + s * per;
    for (std::int64_t i = 0; i < per; ++i) {
      double d = double(pa[i]) - double(pb[i]);
      acc += d * d;
    }
    out[s] = S(acc / double(per));
  }
  return make_node<S>(std::move(out), {a, b}, [n, per](Node<S>& self) {
    const Tensor<S>& av = self.in[0]->v;
    const Tensor<S>& bv = self.in[1]->v;
    for (int k = 0; k < 2; ++k) {
      if (!self.in[k]->needs) continue;
      self.in[k]->ensure_grad();
      S sign = k == 0 ? S(1) : S(-1);
      for (int s = 0; s < n; ++s) {
        S c = sign * S(2) * self.g[s] / S(per);
        S* pg = self.in[k]->g.data() + s * per;
        const S* pa = av.data() + s * per;
        const S* pb = bv.data() + s * per;
        for (std::int64_t i = 0; i < per; ++i) pg[i] += c * (pa[i] - pb[i]);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Broadcast helpers
// ---------------------------------------------------------------------------

// x:(N,C,H,W) + b:(C)
template <typename S>
Var<S> add_bias(const Var<S>& x, const Var<S>& b) {
  const auto& sh = x->v.shape();
  if (x->v.rank() != 4 || b->v.rank() != 1 || b->v.dim(0) != sh[1])
    throw ArgumentError("add_bias: expected (N,C,H,W) and (C)");
  Tensor<S> out(sh);
  const int N = sh[0], C = sh[1];
  const std::int64_t hw = std::int64_t(sh[2]) * sh[3];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* px = x->v.data() + (std::int64_t(n) * C + c) * hw;
      S* po = out.data() + (std::int64_t(n) * C + c) * hw;
      const S bv = b->v[c];
      for (std::int64_t i = 0; i < hw; ++i) po[i] = px[i] + bv;
    }
  return make_node<S>(std::move(out), {x, b}, [N, C, hw](Node<S>& self) {
    if (self.in[0]->needs) {
      self.in[0]->ensure_grad();
      for (std::int64_t i = 0; i < self.g.numel(); ++i) self.in[0]->g[i] += self.g[i];
    }
    if (self.in[1]->needs) {
      self.in[1]->ensure_grad();
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
          const S* pg = self.g.data() + (std::int64_t(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) acc += double(pg[i]);
        }
        self.in[1]->g[c] += S(acc);
      }
    }
  });
}

// x:(N,C,H,W) + u:(N,C) broadcast over spatial dims.
template <typename S>
Var<S> add_per_channel(const Var<S>& x, const Var<S>& u) {
  const auto& sh = x->v.shape();
  if (x->v.rank() != 4 || u->v.rank() != 2 || u->v.dim(0) != sh[0] || u->v.dim(1) != sh[1])
    throw ArgumentError("add_per_channel: expected (N,C,H,W) and (N,C)");
  Tensor<S> out(sh);
  const int N = sh[0], C = sh[1];
  const std::int64_t hw = std::int64_t(sh[2]) * sh[3];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* px = x->v.data() + (std::int64_t(n) * C + c) * hw;
      S* po = out.data() + (std::int64_t(n) * C + c) * hw;
      const S uv = u->v[std::int64_t(n) * C + c];
      for (std::int64_t i = 0; i < hw; ++i) po[i] = px[i] + uv;
    }
  return make_node<S>(std::move(out), {x, u}, [N, C, hw](Node<S>& self) {
    if (self.in[0]->needs) {
      self.in[0]->ensure_grad();
      for (std::int64_t i = 0; i < self.g.numel(); ++i) self.in[0]->g[i] += self.g[i];
    }
    if (self.in[1]->needs) {
      self.in[1]->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const S* pg = self.g.data() + (std::int64_t(n) * C + c) * hw;
          double acc = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) acc += double(pg[i]);
          self.in[1]->g[std::int64_t(n) * C + c] += S(acc);
        }
    }
  });
}

// x:(N,B,H,W) * r:(N,1,H,W), r broadcast across bands.
template <typename S>
Var<S> mul_band_broadcast(const Var<S>& x, const Var<S>& r) {
  const auto& sh = x->v.shape();
  if (x->v.rank() != 4 || r->v.rank() != 4 || r->v.dim(1) != 1 ||
      r->v.dim(0) != sh[0] || r->v.dim(2) != sh[2] || r->v.dim(3) != sh[3])
    throw ArgumentError("mul_band_broadcast: expected (N,B,H,W) and (N,1,H,W)");
  Tensor<S> out(sh);
  const int N = sh[0], B = sh[1];
  const std::int64_t hw = std::int64_t(sh[2]) * sh[3];
  for (int n = 0; n < N; ++n)
    for (int b = 0; b < B; ++b) {
      const S* px = x->v.data() + (std::int64_t(n) * B + b) * hw;
      const S* pr = r->v.data() + std::int64_t(n) * hw;
      S* po = out.data() + (std::int64_t(n) * B + b) * hw;
      for (std::int64_t i = 0; i < hw; ++i) po[i] = px[i] * pr[i];
    }
  return make_node<S>(std::move(out), {x, r}, [N, B, hw](Node<S>& self) {
    const Tensor<S>& xv = self.in[0]->v;
    const Tensor<S>& rv = self.in[1]->v;
    if (self.in[0]->needs) {
      self.in[0]->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int b = 0; b < B; ++b) {
          S* pg = self.in[0]->g.data() + (std::int64_t(n) * B + b) * hw;
          const S* pr = rv.data() + std::int64_t(n) * hw;
          const S* pG = self.g.data() + (std::int64_t(n) * B + b) * hw;
          for (std::int64_t i = 0; i < hw; ++i) pg[i] += pG[i] * pr[i];
        }
    }
    if (self.in[1]->needs) {
      self.in[1]->ensure_grad();
      for (int n = 0; n < N; ++n) {
        S* pg = self.in[1]->g.data() + std::int64_t(n) * hw;
        for (int b = 0; b < B; ++b) {
          const S* px = xv.data() + (std::int64_t(n) * B + b) * hw;
          const S* pG = self.g.data() + (std::int64_t(n) * B + b) * hw;
          for (std::int64_t i = 0; i < hw; ++i) pg[i] += pG[i] * px[i];
        }
      }
    }
  });
}

// Fixed per-sample band combination: out[n,0,:,:] = sum_b w[n,b]*x[n,b,:,:] + bias[n].
// Weights are data (no gradient), e.g. spectral-matching coefficients.
template <typename S>
Var<S> band_combine(const Var<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  const auto& sh = x->v.shape();
  if (x->v.rank() != 4) throw ArgumentError("band_combine: expected (N,B,H,W)");
  const int N = sh[0], B = sh[1], H = sh[2], W = sh[3];
  if (w.rank() != 2 || w.dim(0) != N || w.dim(1) != B || bias.dim(0) != N)
    throw ArgumentError("band_combine: weight shape mismatch");
  Tensor<S> out({N, 1, H, W});
  const std::int64_t hw = std::int64_t(H) * W;
  for (int n = 0; n < N; ++n) {
    S* po = out.data() + std::int64_t(n) * hw;
    for (std::int64_t i = 0; i < hw; ++i) po[i] = bias[n];
    for (int b = 0; b < B; ++b) {
      const S* px = x->v.data() + (std::int64_t(n) * B + b) * hw;
      const S wv = w[std::int64_t(n) * B + b];
      for (std::int64_t i = 0; i < hw; ++i) po[i] += wv * px[i];
    }
  }
  Tensor<S> wc = w;
  return make_node<S>(std::move(out), {x}, [N, B, hw, wc](Node<S>& self) {
    self.in[0]->ensure_grad();
    for (int n = 0; n < N; ++n) {
      const S* pG = self.g.data() + std::int64_t(n) * hw;
      for (int b = 0; b < B; ++b) {
        S* pg = self.in[0]->g.data() + (std::int64_t(n) * B + b) * hw;
        const S wv = wc[std::int64_t(n) * B + b];
        for (std::int64_t i = 0; i < hw; ++i) pg[i] += wv * pG[i];
      }
    }
  });
}

// out[n] = base[n] + t[n] * s[n] with base, t as data. Endpoint reconstruction
// for a whole batch with per-sample interpolation times.
template <typename S>
Var<S> axpy_per_sample(const Tensor<S>& base, const Tensor<S>& t, const Var<S>& s) {
  const auto& sh = s->v.shape();
  if (!base.same_shape(s->v) || t.dim(0) != sh[0])
    throw ArgumentError("axpy_per_sample: shape mismatch");
  const int N = sh[0];
  const std::int64_t per = s->v.numel() / N;
  Tensor<S> out(sh);
  for (int n = 0; n < N; ++n) {
    const S tv = t[n];
    const S* pb = base.data() + n * per;
    const S* ps = s->v.data() + n * per;
    S* po = out.data() + n * per;
    for (std::int64_t i = 0; i < per; ++i) po[i] = pb[i] + tv * ps[i];
  }
  Tensor<S> tc = t;
  return make_node<S>(std::move(out), {s}, [N, per, tc](Node<S>& self) {
    self.in[0]->ensure_grad();
    for (int n = 0; n < N; ++n) {
      const S tv = tc[n];
      const S* pG = self.g.data() + n * per;
      S* pg = self.in[0]->g.data() + n * per;
      for (std::int64_t i = 0; i < per; ++i) pg[i] += tv * pG[i];
    }
  });
}

// Concatenate along the channel dimension.
template <typename S>
Var<S> concat_channels(const Var<S>& a, const Var<S>& b) {
  const auto& sa = a->v.shape();
  const auto& sb = b->v.shape();
  if (a->v.rank() != 4 || b->v.rank() != 4 || sa[0] != sb[0] || sa[2] != sb[2] ||
      sa[3] != sb[3])
    throw ArgumentError("concat_channels: incompatible shapes");
  const int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
  const std::int64_t hw = std::int64_t(H) * W;
  Tensor<S> out({N, Ca + Cb, H, W});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a->v.data() + std::int64_t(n) * Ca * hw, Ca * hw,
                out.data() + std::int64_t(n) * (Ca + Cb) * hw);
    std::copy_n(b->v.data() + std::int64_t(n) * Cb * hw, Cb * hw,
                out.data() + (std::int64_t(n) * (Ca + Cb) + Ca) * hw);
  }
  return make_node<S>(std::move(out), {a, b}, [N, Ca, Cb, hw](Node<S>& self) {
    for (int k = 0; k < 2; ++k) {
      if (!self.in[k]->needs) continue;
      self.in[k]->ensure_grad();
      const int Ck = k == 0 ? Ca : Cb;
      const int off = k == 0 ? 0 : Ca;
      for (int n = 0; n < N; ++n) {
        const S* pg = self.g.data() + (std::int64_t(n) * (Ca + Cb) + off) * hw;
        S* pi = self.in[k]->g.data() + std::int64_t(n) * Ck * hw;
        for (std::int64_t i = 0; i < Ck * hw; ++i) pi[i] += pg[i];
      }
    }
  });
}

// Stop-gradient: value copy that starts a fresh leaf.
template <typename S>
Var<S> detach(const Var<S>& a) {
  return leaf<S>(a->v, false);
}

}  // namespace otfm::ad
