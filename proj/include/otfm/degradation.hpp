#pragma once

#include <vector>

#include "otfm/kernels.hpp"
#include "otfm/raster.hpp"

namespace otfm {

// Sensor MTF model: Gaussian blur whose frequency response at the Nyquist
// frequency of the ratio-reduced grid equals the configured gain.
struct MtfSpec {
  std::vector<double> ms_gains{0.29};  // broadcast across bands when length 1
  double pan_gain = 0.15;
  int kernel_size = 41;
  int ratio = 4;

  // Per-band gains for an image: one band uses the PAN gain, multiband uses
  // the MS gains (broadcast when a single value is configured).
  std::vector<double> gains_for(int bands) const;
};

struct SpectralMatchWeights {
  std::vector<double> weights;
  double bias = 0.0;
  bool rank_deficient = false;
};

// size x size isotropic Gaussian kernel, unit sum, row-major.
std::vector<double> mtf_kernel(double gain, int ratio, int size);

// Separable per-band convolution, symmetric boundary handling.
RasterImage blur(const RasterImage& img, const MtfSpec& mtf);

// Keep one pixel per ratio x ratio block at offset (ratio/2, ratio/2).
RasterImage decimate(const RasterImage& img, int ratio);

// Observation model for LRMS: decimate(blur(y)).
RasterImage degrade_spatial(const RasterImage& y, const MtfSpec& mtf);

// Least-squares fit of pan by a band combination of lrms_up; p_hat is the fit
// re-standardized to pan's mean/std and clipped to [0,1].
std::pair<SpectralMatchWeights, RasterImage> spectral_match(const RasterImage& pan,
                                                            const RasterImage& lrms_up);

// Full degradation-restoration cycle at PAN resolution: MTF blur with the PAN
// gain, decimate, bicubic-upsample back.
RasterImage pan_lowpass(const RasterImage& p_hat, const MtfSpec& mtf);

// Detail-removal estimate m_tilde = y - blur(y) .* (p_hat / max(p_L, eps)).
// Output is full resolution and may leave [0,1]; it is derived data, not an
// I/O image.
RasterImage degrade_spectral(const RasterImage& y, const RasterImage& p_hat,
                             const RasterImage& p_L, const MtfSpec& mtf);

// Catmull-Rom bicubic to an explicit size, edge clamping, output clipped to
// [0,1].
RasterImage bicubic_resize(const RasterImage& img, int out_h, int out_w);

// Factor form; the scaled dimensions must come out integral.
RasterImage bicubic_resize_factor(const RasterImage& img, double factor);

constexpr double kDivisionEps = 1e-4;  // floor for the p_hat / p_L ratio

}  // namespace otfm
