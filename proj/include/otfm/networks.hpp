#pragma once

#include <string>

#include "otfm/nn_ops.hpp"

// Mapping (velocity) U-net and t-conditioned patch potential network. Both
// are defined over an ordered parameter registry so training, EMA shadows and
// checkpoints can treat parameters uniformly.

namespace otfm::nn {

using ad::Tensor;
using ad::Var;

template <typename S>
struct Params {
  std::vector<std::string> names;
  std::vector<Tensor<S>> values;

  int add(std::string name, Tensor<S> v) {
    names.push_back(std::move(name));
    values.push_back(std::move(v));
    return int(values.size()) - 1;
  }

  std::vector<Var<S>> bind(bool needs_grad) const {
    std::vector<Var<S>> out;
    out.reserve(values.size());
    for (const auto& v : values) out.push_back(ad::leaf<S>(v, needs_grad));
    return out;
  }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& v : values) n += v.numel();
    return n;
  }

  bool same_structure(const Params& other) const {
    if (values.size() != other.values.size()) return false;
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!values[i].same_shape(other.values[i])) return false;
    return true;
  }
};

// shadow <- decay*shadow + (1-decay)*live
template <typename S>
void ema_update(Params<S>& shadow, const Params<S>& live, S decay) {
  if (!(decay >= S(0) && decay < S(1)))
    throw ArgumentError("ema_update: decay must lie in [0,1)");
  if (!shadow.same_structure(live))
    throw ArgumentError("ema_update: parameter structure mismatch");
  for (std::size_t i = 0; i < shadow.values.size(); ++i) {
    Tensor<S>& sh = shadow.values[i];
    const Tensor<S>& lv = live.values[i];
    for (std::int64_t k = 0; k < sh.numel(); ++k)
      sh[k] = decay * sh[k] + (S(1) - decay) * lv[k];
  }
}

template <typename S>
Tensor<S> uniform_init(Rng& rng, std::vector<int> shape, std::int64_t fan_in) {
  Tensor<S> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(double(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t[i] = S(rng.uniform(-bound, bound));
  return t;
}

// Sinusoidal embedding of per-sample timesteps, base frequency 10000.
template <typename S>
Tensor<S> time_embedding(const Tensor<S>& t, int dim) {
  if (t.rank() != 1) throw ArgumentError("time_embedding: t must be (N)");
  if (dim < 2 || dim % 2 != 0)
    throw ArgumentError("time_embedding: dim must be even and >= 2");
  const int n = t.dim(0), half = dim / 2;
  Tensor<S> out({n, dim});
  for (int s = 0; s < n; ++s)
    for (int j = 0; j < half; ++j) {
      const double freq = std::pow(10000.0, -double(j) / half);
      const double arg = double(t[s]) * freq;
      out[std::int64_t(s) * dim + j] = S(std::sin(arg));
      out[std::int64_t(s) * dim + half + j] = S(std::cos(arg));
    }
  return out;
}

struct ConvRef {
  int w = -1, b = -1;
  int stride = 1, pad = 0;
};
struct LinRef {
  int w = -1, b = -1;
};

template <typename S>
ConvRef make_conv(Params<S>& ps, const std::string& name, int cin, int cout, int k,
                  int stride, int pad, Rng& rng, bool zero = false) {
  ConvRef c;
  c.stride = stride;
  c.pad = pad;
  const std::int64_t fan = std::int64_t(cin) * k * k;
  c.w = ps.add(name + ".w", zero ? Tensor<S>::zeros({cout, cin, k, k})
                                 : uniform_init<S>(rng, {cout, cin, k, k}, fan));
  c.b = ps.add(name + ".b",
               zero ? Tensor<S>::zeros({cout}) : uniform_init<S>(rng, {cout}, fan));
  return c;
}

template <typename S>
LinRef make_linear(Params<S>& ps, const std::string& name, int din, int dout,
                   Rng& rng, bool zero = false) {
  LinRef l;
  l.w = ps.add(name + ".w", zero ? Tensor<S>::zeros({dout, din})
                                 : uniform_init<S>(rng, {dout, din}, din));
  l.b = ps.add(name + ".b",
               zero ? Tensor<S>::zeros({dout}) : uniform_init<S>(rng, {dout}, din));
  return l;
}

template <typename S>
Var<S> apply_conv(const std::vector<Var<S>>& P, const ConvRef& c, const Var<S>& x) {
  return ad::conv2d(x, P[c.w], P[c.b], c.stride, c.pad);
}

template <typename S>
Var<S> apply_linear(const std::vector<Var<S>>& P, const LinRef& l, const Var<S>& x) {
  return ad::linear(x, P[l.w], P[l.b]);
}

// x + gamma .* ((1 + alpha) .* u + beta), the gated residual modulation.
template <typename S>
Var<S> adaln_modulate(const Var<S>& x, const Var<S>& alpha, const Var<S>& beta,
                      const Var<S>& gamma, const Var<S>& u) {
  auto x_op = ad::add(ad::mul(ad::add_scalar(alpha, S(1)), u), beta);
  return ad::add(x, ad::mul(gamma, x_op));
}

// One conditioned sub-block: alpha, beta, gamma are produced per position
// from the level's condition features plus the time embedding; the gating
// projection starts at zero so the block is the identity at initialization.
template <typename S>
struct AdaLnBlock {
  bool attention = false;
  int channels = 0, heads = 1, window = 7;
  ConvRef q, k, v, o;
  ConvRef f1, f2, f3;
  ConvRef cproj, zproj;
  LinRef tproj;

  AdaLnBlock() = default;
  AdaLnBlock(Params<S>& ps, const std::string& prefix, int channels_, int cond_ch,
             int temb_dim, bool attention_, int heads_, int window_, Rng& rng)
      : attention(attention_), channels(channels_), heads(heads_), window(window_) {
    if (attention && channels % heads != 0)
      throw ArgumentError("AdaLnBlock: heads must divide channels");
    if (attention) {
      q = make_conv(ps, prefix + ".q", channels, channels, 1, 1, 0, rng);
      k = make_conv(ps, prefix + ".k", channels, channels, 1, 1, 0, rng);
      v = make_conv(ps, prefix + ".v", channels, channels, 1, 1, 0, rng);
      o = make_conv(ps, prefix + ".o", channels, channels, 1, 1, 0, rng);
    } else {
      f1 = make_conv(ps, prefix + ".f1", channels, 2 * channels, 1, 1, 0, rng);
      f2 = make_conv(ps, prefix + ".f2", 2 * channels, 2 * channels, 1, 1, 0, rng);
      f3 = make_conv(ps, prefix + ".f3", 2 * channels, channels, 1, 1, 0, rng);
    }
    cproj = make_conv(ps, prefix + ".cproj", cond_ch, channels, 1, 1, 0, rng);
    tproj = make_linear(ps, prefix + ".tproj", temb_dim, channels, rng);
    zproj = make_conv(ps, prefix + ".zproj", channels, 3 * channels, 1, 1, 0, rng,
                      /*zero=*/true);
  }

  Var<S> forward(const std::vector<Var<S>>& P, const Var<S>& x, const Var<S>& cond,
                 const Var<S>& temb) const {
    auto c = apply_conv(P, cproj, ad::layer_norm_ch(cond));
    c = ad::add_per_channel(c, apply_linear(P, tproj, temb));
    c = ad::silu(c);
    auto z = apply_conv(P, zproj, c);
    auto alpha = ad::channel_slice(z, 0, channels);
    auto beta = ad::channel_slice(z, channels, channels);
    auto gamma = ad::channel_slice(z, 2 * channels, channels);

    Var<S> u;
    if (attention) {
      u = ad::neighborhood_attention(apply_conv(P, q, x), apply_conv(P, k, x),
                                     apply_conv(P, v, x), heads, window);
      u = apply_conv(P, o, u);
    } else {
      u = apply_conv(P, f3, ad::gelu(apply_conv(P, f2, ad::gelu(apply_conv(P, f1, x)))));
    }
    return adaln_modulate(x, alpha, beta, gamma, u);
  }
};

struct MappingNetConfig {
  int base_channels = 16;
  int levels = 2;
  int blocks_per_level = 2;
  int attention_window = 7;
  int heads = 4;
  int cond_bands = 5;  // B + 1
  int out_bands = 4;   // B; also the band count of y_t
  int time_embed_dim = 0;  // 0 selects 4 * base_channels

  int temb_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }

  void validate() const {
    if (base_channels < 1 || levels < 1 || blocks_per_level < 1)
      throw ArgumentError("mapping config: positive sizes required");
    if (attention_window < 1 || attention_window % 2 == 0)
      throw ArgumentError("mapping config: attention_window must be odd");
    if (heads < 1 || base_channels % heads != 0)
      throw ArgumentError("mapping config: heads must divide base_channels");
    if (cond_bands != out_bands + 1)
      throw ArgumentError("mapping config: cond_bands must equal out_bands + 1");
    if (temb_dim() % 2 != 0)
      throw ArgumentError("mapping config: time embedding dim must be even");
  }
};

// Conditional velocity U-net. Output is zero at initialization (zero head),
// so the untrained one-step map returns the upsampled LRMS unchanged.
template <typename S>
class MappingNet {
 public:
  MappingNetConfig cfg;
  Params<S> params;

  MappingNet(const MappingNetConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const int B = cfg.base_channels;
    stem_ = make_conv(params, "stem", cfg.out_bands, B, 3, 1, 1, rng);
    cond1_ = make_conv(params, "cond1", cfg.cond_bands, B, 3, 1, 1, rng);
    cond2_ = make_conv(params, "cond2", B, B, 3, 1, 1, rng);
    enc_.resize(cfg.levels);
    for (int l = 0; l < cfg.levels; ++l) {
      const int C = B << l;
      for (int bk = 0; bk < cfg.blocks_per_level; ++bk) {
        const std::string p = "enc" + std::to_string(l) + ".b" + std::to_string(bk);
        enc_[l].push_back(AdaLnBlock<S>(params, p + ".attn", C, B, cfg.temb_dim(),
                                        true, cfg.heads, cfg.attention_window, rng));
        enc_[l].push_back(AdaLnBlock<S>(params, p + ".ffn", C, B, cfg.temb_dim(),
                                        false, cfg.heads, cfg.attention_window, rng));
      }
      if (l + 1 < cfg.levels)
        down_.push_back(
            make_conv(params, "down" + std::to_string(l), C, 2 * C, 3, 2, 1, rng));
    }
    dec_.resize(cfg.levels - 1);
    for (int l = cfg.levels - 2; l >= 0; --l) {
      const int C = B << l;
      up_.push_back(make_conv(params, "up" + std::to_string(l), 2 * C, C, 3, 1, 1, rng));
      fuse_.push_back(
          make_conv(params, "fuse" + std::to_string(l), 2 * C, C, 3, 1, 1, rng));
      for (int bk = 0; bk < cfg.blocks_per_level; ++bk) {
        const std::string p = "dec" + std::to_string(l) + ".b" + std::to_string(bk);
        dec_[l].push_back(AdaLnBlock<S>(params, p + ".attn", C, B, cfg.temb_dim(),
                                        true, cfg.heads, cfg.attention_window, rng));
        dec_[l].push_back(AdaLnBlock<S>(params, p + ".ffn", C, B, cfg.temb_dim(),
                                        false, cfg.heads, cfg.attention_window, rng));
      }
    }
    head_ = make_conv(params, "head", B, cfg.out_bands, 3, 1, 1, rng, /*zero=*/true);
  }

  // y_t: (N, out_bands, H, W); t: (N); cond: (N, cond_bands, H, W).
  Var<S> forward(const std::vector<Var<S>>& P, const Var<S>& y_t, const Tensor<S>& t,
                 const Var<S>& cond) const {
    const auto& sh = y_t->v.shape();
    if (y_t->v.rank() != 4 || sh[1] != cfg.out_bands)
      throw ArgumentError("mapping forward: y_t must be (N, out_bands, H, W)");
    if (cond->v.rank() != 4 || cond->v.dim(1) != cfg.cond_bands ||
        cond->v.dim(0) != sh[0] || cond->v.dim(2) != sh[2] || cond->v.dim(3) != sh[3])
      throw ArgumentError("mapping forward: condition shape mismatch");
    if (t.rank() != 1 || t.dim(0) != sh[0])
      throw ArgumentError("mapping forward: t must have one value per sample");
    const int div = 1 << (cfg.levels - 1);
    if (sh[2] % div != 0 || sh[3] % div != 0)
      throw ArgumentError("mapping forward: resolution must divide by 2^(levels-1)");

    auto temb = ad::leaf<S>(time_embedding(t, cfg.temb_dim()));
    auto ce = apply_conv(P, cond2_, ad::silu(apply_conv(P, cond1_, cond)));
    std::vector<Var<S>> cond_lvls{ce};
    for (int l = 1; l < cfg.levels; ++l)
      cond_lvls.push_back(ad::avgpool2(cond_lvls.back()));

    auto x = apply_conv(P, stem_, y_t);
    std::vector<Var<S>> skips;
    for (int l = 0; l < cfg.levels; ++l) {
      for (const auto& blk : enc_[l]) x = blk.forward(P, x, cond_lvls[l], temb);
      if (l + 1 < cfg.levels) {
        skips.push_back(x);
        x = apply_conv(P, down_[l], x);
      }
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
      const int ui = cfg.levels - 2 - l;  // construction order of up_/fuse_
      x = apply_conv(P, up_[ui], ad::upsample_nearest2(x));
      x = apply_conv(P, fuse_[ui], ad::concat_channels(x, skips[l]));
      for (const auto& blk : dec_[l]) x = blk.forward(P, x, cond_lvls[l], temb);
    }
    return apply_conv(P, head_, x);
  }

 private:
  ConvRef stem_, head_, cond1_, cond2_;
  std::vector<ConvRef> down_, up_, fuse_;
  std::vector<std::vector<AdaLnBlock<S>>> enc_, dec_;
};

struct PotentialNetConfig {
  int channels = 64;
  int blocks = 3;
  int in_bands = 4;
  int time_embed_dim = 0;  // 0 selects 4 * channels

  int temb_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * channels; }

  void validate() const {
    if (channels < 1 || blocks < 1 || in_bands < 1)
      throw ArgumentError("potential config: positive sizes required");
    if (temb_dim() % 2 != 0)
      throw ArgumentError("potential config: time embedding dim must be even");
  }
};

// Patch critic: strided Conv+BN+LReLU blocks, timestep added after the first
// block, features averaged to one scalar per sample.
template <typename S>
class PotentialNet {
 public:
  PotentialNetConfig cfg;
  Params<S> params;
  std::vector<ad::BatchNormState<S>> bn;

  PotentialNet(const PotentialNetConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    int cin = cfg.in_bands;
    for (int i = 0; i < cfg.blocks; ++i) {
      const int cout = cfg.channels << i;
      const int stride = i + 1 < cfg.blocks ? 2 : 1;
      conv_.push_back(make_conv(params, "blk" + std::to_string(i) + ".conv", cin,
                                cout, 4, stride, 1, rng));
      gamma_.push_back(params.add("blk" + std::to_string(i) + ".bn.g",
                                  Tensor<S>::full({cout}, S(1))));
      beta_.push_back(params.add("blk" + std::to_string(i) + ".bn.b",
                                 Tensor<S>::zeros({cout})));
      bn.emplace_back(cout);
      cin = cout;
    }
    tproj_ = make_linear(params, "tproj", cfg.temb_dim(), cfg.channels, rng);
  }

  // y: (N, in_bands, H, W); t: (N). Training mode updates BN running stats.
  Var<S> forward(const std::vector<Var<S>>& P, const Var<S>& y, const Tensor<S>& t,
                 bool training) {
    if (y->v.rank() != 4 || y->v.dim(1) != cfg.in_bands)
      throw ArgumentError("potential forward: y must be (N, in_bands, H, W)");
    if (t.rank() != 1 || t.dim(0) != y->v.dim(0))
      throw ArgumentError("potential forward: t must have one value per sample");
    auto temb = ad::leaf<S>(time_embedding(t, cfg.temb_dim()));
    Var<S> x = y;
    for (int i = 0; i < cfg.blocks; ++i) {
      x = apply_conv(P, conv_[i], x);
      x = ad::batch_norm(x, P[gamma_[i]], P[beta_[i]], &bn[i], training);
      x = ad::leaky_relu(x, S(0.2));
      if (i == 0) x = ad::add_per_channel(x, apply_linear(P, tproj_, temb));
    }
    return ad::mean_per_sample(x);
  }

 private:
  std::vector<ConvRef> conv_;
  std::vector<int> gamma_, beta_;
  LinRef tproj_;
};

}  // namespace otfm::nn
