#pragma once

#include <utility>
#include <vector>

#include "otfm/autodiff.hpp"
#include "otfm/degradation.hpp"
#include "otfm/kernels.hpp"
#include "otfm/nn_ops.hpp"
#include "otfm/raster.hpp"

// Transport cost between the upsampled observation and a fused candidate,
// regularized by how well the candidate explains the PAN and LRMS
// measurements, plus the two adversarial objectives built on it. All
// reductions are means so magnitudes are independent of batch and patch size.

namespace otfm::uot {

using ad::Tensor;
using ad::Var;

enum class SpectralVariant {
  observation,   // degrade the candidate to LR and compare against lrms
  detail_ratio,  // detail-removed candidate vs the upsampled lrms
};

struct CostConfig {
  double lambda_base = 1.0;      // quadratic distance to the upsampled lrms
  double lambda_spatial = 1.0;   // pan vs band combination of the candidate
  double lambda_spectral = 1.0;  // spectral consistency per spectral_variant
  SpectralVariant spectral_variant = SpectralVariant::observation;
  double exp_clamp = 30.0;       // bound on the argument of f(z) = exp(z)

  void validate() const {
    if (lambda_base < 0 || lambda_spatial < 0 || lambda_spectral < 0)
      throw ArgumentError("cost config: weights must be >= 0");
    if (!(exp_clamp > 0))
      throw ArgumentError("cost config: exp_clamp must be positive");
  }
};

struct CostTerms {
  double base = 0.0;
  double spatial = 0.0;
  double spectral = 0.0;
};

struct LossBreakdown {
  double flow = 0.0;
  double mapping = 0.0;
  double potential = 0.0;
  CostTerms cost_terms;  // raw (unweighted) batch means; zero-weight terms stay 0
};

// ---------------------------------------------------------------------------
// Raster <-> tensor bridging
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> to_tensor(const RasterImage& img) {
  Tensor<S> t({img.bands, img.height, img.width});
  for (std::size_t i = 0; i < img.data.size(); ++i) t[std::int64_t(i)] = S(img.data[i]);
  return t;
}

template <typename S>
RasterImage to_raster(const Tensor<S>& t) {
  if (t.rank() != 3) throw ArgumentError("to_raster: expected (bands, H, W)");
  RasterImage img(t.dim(0), t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = double(t[std::int64_t(i)]);
  return img;
}

// ---------------------------------------------------------------------------
// Per-sample preparation
// ---------------------------------------------------------------------------

// Everything derived from one triplet ahead of training/inference: the bicubic
// start image, the stacked condition, and the constants of the transport cost
// (least-squares band combination, detail-ratio map). The triplet's own ratio
// overrides mtf.ratio so blur strength matches the data's scale factor.
template <typename S>
struct PreparedSample {
  Tensor<S> y0;          // (B, H, W) clipped bicubic upsampling of lrms
  Tensor<S> y1;          // (B, H, W) reference; empty when the triplet has none
  Tensor<S> cond;        // (B+1, H, W) = [y0 | pan]
  Tensor<S> pan;         // (1, H, W)
  Tensor<S> m_lr;        // (B, h, w); cost prep only
  Tensor<S> ratio_map;   // (1, H, W) p_hat / max(lowpass(p_hat), eps); cost prep only
  Tensor<S> sm_weights;  // (B) pan ~ y0 combination weights; cost prep only
  S sm_bias = S(0);
  int ratio = 1;
};

template <typename S>
PreparedSample<S> prepare_sample(const SampleTriplet& s, const MtfSpec& mtf,
                                 bool with_cost) {
  s.validate();
  MtfSpec spec = mtf;
  spec.ratio = s.ratio;

  const int B = s.lrms.bands, H = s.pan.height, W = s.pan.width;
  PreparedSample<S> out;
  out.ratio = s.ratio;

  RasterImage up = bicubic_resize(s.lrms, H, W);
  out.y0 = to_tensor<S>(up);
  out.pan = to_tensor<S>(s.pan);
  out.cond = Tensor<S>({B + 1, H, W});
  std::copy(out.y0.data(), out.y0.data() + out.y0.numel(), out.cond.data());
  std::copy(out.pan.data(), out.pan.data() + out.pan.numel(),
            out.cond.data() + out.y0.numel());
  if (s.hrms_ref) out.y1 = to_tensor<S>(*s.hrms_ref);

  if (with_cost) {
    out.m_lr = to_tensor<S>(s.lrms);
    auto [w, p_hat] = spectral_match(s.pan, up);
    out.sm_weights = Tensor<S>({B});
    for (int b = 0; b < B; ++b) out.sm_weights[b] = S(w.weights[std::size_t(b)]);
    out.sm_bias = S(w.bias);
    RasterImage low = pan_lowpass(p_hat, spec);
    out.ratio_map = Tensor<S>({1, H, W});
    for (std::size_t i = 0; i < p_hat.data.size(); ++i)
      out.ratio_map[std::int64_t(i)] =
          S(p_hat.data[i] / std::max(low.data[i], kDivisionEps));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

// Constant (non-differentiated) inputs of the cost for one batch.
template <typename S>
struct CostBatch {
  Tensor<S> y0_up;       // (N, B, H, W)
  Tensor<S> pan;         // (N, 1, H, W)
  Tensor<S> m_lr;        // (N, B, h, w)
  Tensor<S> ratio_map;   // (N, 1, H, W)
  Tensor<S> sm_weights;  // (N, B)
  Tensor<S> sm_bias;     // (N)
  std::vector<std::vector<double>> blur_taps;  // per band; one entry = shared
  int ratio = 1;
};

template <typename S>
struct TrainBatch {
  Tensor<S> y0;    // (N, B, H, W)
  Tensor<S> y1;    // (N, B, H, W); empty unless references requested
  Tensor<S> cond;  // (N, B+1, H, W)
  CostBatch<S> cost;
};

namespace detail {

template <typename S>
Tensor<S> stack(const std::vector<const PreparedSample<S>*>& batch,
                const Tensor<S> PreparedSample<S>::*field) {
  const auto& first = (*batch[0]).*field;
  std::vector<int> shape = first.shape();
  shape.insert(shape.begin(), int(batch.size()));
  Tensor<S> out(shape);
  S* dst = out.data();
  for (const auto* s : batch) {
    const Tensor<S>& t = s->*field;
    if (!t.same_shape(first))
      throw ArgumentError("gather_batch: samples have mixed shapes");
    std::copy(t.data(), t.data() + t.numel(), dst);
    dst += t.numel();
  }
  return out;
}

}  // namespace detail

template <typename S>
TrainBatch<S> gather_batch(const std::vector<const PreparedSample<S>*>& batch,
                           const MtfSpec& mtf, bool with_cost,
                           bool need_reference) {
  if (batch.empty()) throw ArgumentError("gather_batch: empty batch");
  const int N = int(batch.size());
  const int ratio = batch[0]->ratio;
  for (const auto* s : batch)
    if (s->ratio != ratio)
      throw ArgumentError("gather_batch: samples have mixed ratios");

  TrainBatch<S> out;
  out.y0 = detail::stack(batch, &PreparedSample<S>::y0);
  out.cond = detail::stack(batch, &PreparedSample<S>::cond);
  if (need_reference) {
    for (const auto* s : batch)
      if (s->y1.empty())
        throw DataError("gather_batch: training requires reference images");
    out.y1 = detail::stack(batch, &PreparedSample<S>::y1);
  }

  if (with_cost) {
    for (const auto* s : batch)
      if (s->m_lr.empty())
        throw ArgumentError("gather_batch: samples were prepared without cost data");
    CostBatch<S>& c = out.cost;
    c.y0_up = out.y0;
    c.pan = detail::stack(batch, &PreparedSample<S>::pan);
    c.m_lr = detail::stack(batch, &PreparedSample<S>::m_lr);
    c.ratio_map = detail::stack(batch, &PreparedSample<S>::ratio_map);
    const int B = out.y0.dim(1);
    c.sm_weights = Tensor<S>({N, B});
    c.sm_bias = Tensor<S>({N});
    for (int n = 0; n < N; ++n) {
      for (int b = 0; b < B; ++b)
        c.sm_weights[std::int64_t(n) * B + b] = batch[std::size_t(n)]->sm_weights[b];
      c.sm_bias[n] = batch[std::size_t(n)]->sm_bias;
    }
    c.ratio = ratio;

    MtfSpec spec = mtf;
    spec.ratio = ratio;
    const std::vector<double> gains = spec.gains_for(B);
    bool shared = true;
    for (double g : gains) shared = shared && g == gains[0];
    const int nk = shared ? 1 : B;
    for (int b = 0; b < nk; ++b)
      c.blur_taps.push_back(
          gaussian_kernel_1d(spec.kernel_size, mtf_sigma(ratio, gains[std::size_t(b)])));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cost
// ---------------------------------------------------------------------------

// Mean of squared differences: the quadratic transport cost at image scale.
template <typename S>
double quadratic_cost(const Tensor<S>& x, const Tensor<S>& y) {
  if (!x.same_shape(y))
    throw ArgumentError("quadratic_cost: shape mismatch " + x.shape_str() + " vs " +
                        y.shape_str());
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double d = double(x[i]) - double(y[i]);
    acc += d * d;
  }
  return acc / double(x.numel());
}

// Separable MTF blur of a batched map; taps come from gather_batch.
template <typename S>
Var<S> blur_bands(const Var<S>& x, const std::vector<std::vector<double>>& taps) {
  if (taps.empty()) throw ArgumentError("blur_bands: no kernels");
  if (taps.size() == 1)
    return ad::conv1d_axis_sym(ad::conv1d_axis_sym(x, taps[0], 2), taps[0], 3);
  const int B = x->v.dim(1);
  if (int(taps.size()) != B)
    throw ArgumentError("blur_bands: kernel count does not match bands");
  Var<S> out;
  for (int b = 0; b < B; ++b) {
    Var<S> band = ad::channel_slice(x, b, 1);
    band = ad::conv1d_axis_sym(ad::conv1d_axis_sym(band, taps[std::size_t(b)], 2),
                               taps[std::size_t(b)], 3);
    out = out ? ad::concat_channels(out, band) : band;
  }
  return out;
}

template <typename S>
struct CostResult {
  Var<S> per_sample;  // (N), differentiable in the candidate
  CostTerms terms;    // raw batch means of the terms actually computed
};

namespace detail {

template <typename S>
double batch_mean(const Tensor<S>& per_sample) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < per_sample.numel(); ++i) acc += double(per_sample[i]);
  return acc / double(per_sample.numel());
}

}  // namespace detail

// c~(y0_up, y_hat) = lambda_base * mean||y_hat - y0_up||^2
//                  + lambda_spatial * mean||pan - (W y_hat + b)||^2
//                  + lambda_spectral * spectral term per cfg.spectral_variant.
// Zero-weight terms are skipped entirely (their reported mean stays 0).
template <typename S>
CostResult<S> regularized_cost(const Var<S>& y_hat, const CostBatch<S>& data,
                               const CostConfig& cfg) {
  cfg.validate();
  if (y_hat->v.rank() != 4)
    throw ArgumentError("regularized_cost: candidate must be (N, B, H, W)");
  if (!y_hat->v.same_shape(data.y0_up))
    throw ArgumentError("regularized_cost: candidate shape " + y_hat->v.shape_str() +
                        " does not match prepared batch " + data.y0_up.shape_str());

  CostResult<S> res;
  std::vector<std::pair<Var<S>, double>> active;

  if (cfg.lambda_base > 0) {
    Var<S> base = ad::mse_per_sample(y_hat, ad::leaf<S>(data.y0_up));
    res.terms.base = detail::batch_mean(base->v);
    active.push_back({std::move(base), cfg.lambda_base});
  }
  if (cfg.lambda_spatial > 0) {
    Var<S> combined = ad::band_combine(y_hat, data.sm_weights, data.sm_bias);
    Var<S> spatial = ad::mse_per_sample(combined, ad::leaf<S>(data.pan));
    res.terms.spatial = detail::batch_mean(spatial->v);
    active.push_back({std::move(spatial), cfg.lambda_spatial});
  }
  if (cfg.lambda_spectral > 0) {
    Var<S> blurred = blur_bands(y_hat, data.blur_taps);
    Var<S> spectral;
    if (cfg.spectral_variant == SpectralVariant::observation) {
      Var<S> lr = ad::decimate_ad(blurred, data.ratio);
      spectral = ad::mse_per_sample(lr, ad::leaf<S>(data.m_lr));
    } else {
      Var<S> detail_removed =
          ad::sub(y_hat, ad::mul_band_broadcast(blurred, ad::leaf<S>(data.ratio_map)));
      spectral = ad::mse_per_sample(detail_removed, ad::leaf<S>(data.y0_up));
    }
    res.terms.spectral = detail::batch_mean(spectral->v);
    active.push_back({std::move(spectral), cfg.lambda_spectral});
  }

  if (active.empty()) {
    res.per_sample = ad::leaf<S>(Tensor<S>({y_hat->v.dim(0)}));
    return res;
  }
  Var<S> total;
  for (auto& [term, lam] : active) {
    Var<S> weighted = lam == 1.0 ? term : ad::scale(term, S(lam));
    total = total ? ad::add(total, weighted) : weighted;
  }
  res.per_sample = std::move(total);
  return res;
}

// ---------------------------------------------------------------------------
// Dual objectives
// ---------------------------------------------------------------------------

// L_T = mean_n [ c~_n - v_n ]. The potential values must come from a forward
// pass whose parameters were bound without gradients, so only the candidate
// (through both arguments) receives gradient.
template <typename S>
Var<S> mapping_loss(const Var<S>& cost_per_sample, const Var<S>& potential_per_sample) {
  if (cost_per_sample->v.rank() != 1 ||
      !cost_per_sample->v.same_shape(potential_per_sample->v))
    throw ArgumentError("mapping_loss: expected matching per-sample vectors");
  if (!ad::all_finite(potential_per_sample->v))
    throw NumericError("mapping_loss: potential produced non-finite values");
  return ad::mean_all(ad::sub(cost_per_sample, potential_per_sample));
}

// L_v = mean f(v_fake - c~) + mean f(-v_real) with f(z) = exp(clamp(z)).
// cost_values are plain data: the mapping graph has already been released.
template <typename S>
Var<S> potential_loss(const Tensor<S>& cost_values, const Var<S>& v_fake,
                      const Var<S>& v_real, const CostConfig& cfg) {
  cfg.validate();
  if (cost_values.rank() != 1 || !cost_values.same_shape(v_fake->v))
    throw ArgumentError("potential_loss: cost and v_fake must be matching vectors");
  if (v_real->v.rank() != 1)
    throw ArgumentError("potential_loss: v_real must be a per-sample vector");
  const S bound = S(cfg.exp_clamp);
  Var<S> fake = ad::mean_all(
      ad::exp_clamp(ad::sub(v_fake, ad::leaf<S>(cost_values)), bound));
  Var<S> real = ad::mean_all(ad::exp_clamp(ad::neg(v_real), bound));
  return ad::add(fake, real);
}

}  // namespace otfm::uot
