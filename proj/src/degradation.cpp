#include "otfm/degradation.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace otfm {

std::vector<double> MtfSpec::gains_for(int bands) const {
  if (bands < 1) throw ArgumentError("gains_for: bands must be positive");
  if (bands == 1) return {pan_gain};
  if (int(ms_gains.size()) == bands) return ms_gains;
  if (ms_gains.size() == 1) return std::vector<double>(bands, ms_gains[0]);
  throw ArgumentError("gains_for: configured " + std::to_string(ms_gains.size()) +
                      " MS gains for " + std::to_string(bands) + " bands");
}

std::vector<double> mtf_kernel(double gain, int ratio, int size) {
  const std::vector<double> k1 = gaussian_kernel_1d(size, mtf_sigma(ratio, gain));
  std::vector<double> k2(std::size_t(size) * size);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) k2[std::size_t(i) * size + j] = k1[i] * k1[j];
  return k2;
}

namespace {

// Separable blur via the shared passes; tmp holds the vertical intermediate.
void blur_band(const double* src, double* dst, int H, int W,
               const std::vector<double>& k1, std::vector<double>& tmp) {
  blur_pass_rows(src, tmp.data(), H, W, k1);
  blur_pass_cols(tmp.data(), dst, H, W, k1);
}

}  // namespace

RasterImage blur(const RasterImage& img, const MtfSpec& mtf) {
  const std::vector<double> gains = mtf.gains_for(img.bands);
  RasterImage out(img.bands, img.height, img.width);
  out.sensor_tag = img.sensor_tag;
  std::vector<double> tmp(img.pixel_count());
  for (int b = 0; b < img.bands; ++b) {
    const std::vector<double> k1 =
        gaussian_kernel_1d(mtf.kernel_size, mtf_sigma(mtf.ratio, gains[b]));
    blur_band(img.data.data() + b * img.pixel_count(),
              out.data.data() + b * img.pixel_count(), img.height, img.width, k1,
              tmp);
  }
  return out;
}

RasterImage decimate(const RasterImage& img, int ratio) {
  if (ratio < 1) throw ArgumentError("decimate: ratio must be >= 1");
  if (img.height % ratio != 0 || img.width % ratio != 0)
    throw ArgumentError("decimate: dimensions must divide by ratio");
  const int h = img.height / ratio, w = img.width / ratio, off = ratio / 2;
  RasterImage out(img.bands, h, w);
  out.sensor_tag = img.sensor_tag;
  for (int b = 0; b < img.bands; ++b)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out.at(b, i, j) = img.at(b, i * ratio + off, j * ratio + off);
  return out;
}

RasterImage degrade_spatial(const RasterImage& y, const MtfSpec& mtf) {
  return decimate(blur(y, mtf), mtf.ratio);
}

std::pair<SpectralMatchWeights, RasterImage> spectral_match(
    const RasterImage& pan, const RasterImage& lrms_up) {
  if (pan.bands != 1) throw ArgumentError("spectral_match: pan must be single band");
  if (pan.height != lrms_up.height || pan.width != lrms_up.width)
    throw ArgumentError("spectral_match: lrms_up must be at PAN resolution");
  const int B = lrms_up.bands;
  const std::size_t n = pan.pixel_count();

  Eigen::MatrixXd A(n, B + 1);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int b = 0; b < B; ++b) A(i, b) = lrms_up.data[b * n + i];
    A(i, B) = 1.0;
    y(i) = pan.data[i];
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
  Eigen::VectorXd x = cod.solve(y);

  SpectralMatchWeights w;
  w.weights.assign(x.data(), x.data() + B);
  w.bias = x(B);
  w.rank_deficient = cod.rank() < B + 1;

  Eigen::VectorXd fit = A * x;
  const double mu_fit = fit.mean();
  const double var_fit = (fit.array() - mu_fit).square().sum() / double(n);
  const double mu_pan = y.mean();
  const double var_pan = (y.array() - mu_pan).square().sum() / double(n);
  const double sd_fit = std::sqrt(var_fit), sd_pan = std::sqrt(var_pan);

  RasterImage p_hat(1, pan.height, pan.width);
  p_hat.sensor_tag = pan.sensor_tag;
  for (std::size_t i = 0; i < n; ++i) {
    double v = sd_fit > 1e-12 ? (fit(i) - mu_fit) / sd_fit * sd_pan + mu_pan : mu_pan;
    p_hat.data[i] = std::min(1.0, std::max(0.0, v));
  }
  return {w, p_hat};
}

RasterImage pan_lowpass(const RasterImage& p_hat, const MtfSpec& mtf) {
  if (p_hat.bands != 1) throw ArgumentError("pan_lowpass: expected single band");
  MtfSpec pan_spec = mtf;
  pan_spec.ms_gains = {mtf.pan_gain};
  RasterImage low = decimate(blur(p_hat, pan_spec), mtf.ratio);
  return bicubic_resize(low, p_hat.height, p_hat.width);
}

RasterImage degrade_spectral(const RasterImage& y, const RasterImage& p_hat,
                             const RasterImage& p_L, const MtfSpec& mtf) {
  if (p_hat.bands != 1 || p_L.bands != 1)
    throw ArgumentError("degrade_spectral: p_hat and p_L must be single band");
  if (p_hat.height != y.height || p_hat.width != y.width ||
      p_L.height != y.height || p_L.width != y.width)
    throw ArgumentError("degrade_spectral: all inputs must share HR resolution");
  RasterImage yb = blur(y, mtf);
  RasterImage out(y.bands, y.height, y.width);
  out.sensor_tag = y.sensor_tag;
  const std::size_t n = y.pixel_count();
  for (int b = 0; b < y.bands; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const double ratio = p_hat.data[i] / std::max(p_L.data[i], kDivisionEps);
      out.data[b * n + i] = y.data[b * n + i] - yb.data[b * n + i] * ratio;
    }
  return out;
}

RasterImage bicubic_resize(const RasterImage& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1)
    throw ArgumentError("bicubic_resize: output dimensions must be positive");
  const int H = img.height, W = img.width;
  const double sy = double(H) / out_h, sx = double(W) / out_w;
  RasterImage out(img.bands, out_h, out_w);
  out.sensor_tag = img.sensor_tag;

  auto clampi = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
  std::vector<double> row(4);

  for (int b = 0; b < img.bands; ++b)
    for (int oi = 0; oi < out_h; ++oi) {
      const double fy = (oi + 0.5) * sy - 0.5;
      const int iy = int(std::floor(fy));
      const double dy = fy - iy;
      double wy[4];
      for (int t = 0; t < 4; ++t) wy[t] = cubic_weight(dy - (t - 1));
      for (int oj = 0; oj < out_w; ++oj) {
        const double fx = (oj + 0.5) * sx - 0.5;
        const int ix = int(std::floor(fx));
        const double dx = fx - ix;
        double wx[4];
        for (int t = 0; t < 4; ++t) wx[t] = cubic_weight(dx - (t - 1));
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) {
          const int yy = clampi(iy + t - 1, H);
          double r = 0.0;
          for (int s = 0; s < 4; ++s)
            r += wx[s] * img.at(b, yy, clampi(ix + s - 1, W));
          acc += wy[t] * r;
        }
        out.at(b, oi, oj) = std::min(1.0, std::max(0.0, acc));
      }
    }
  return out;
}

RasterImage bicubic_resize_factor(const RasterImage& img, double factor) {
  if (!(factor > 0.0)) throw ArgumentError("bicubic_resize_factor: factor must be positive");
  const double oh = img.height * factor, ow = img.width * factor;
  if (std::fabs(oh - std::round(oh)) > 1e-9 || std::fabs(ow - std::round(ow)) > 1e-9)
    throw ArgumentError("bicubic_resize_factor: factor must yield integer dimensions");
  return bicubic_resize(img, int(std::lround(oh)), int(std::lround(ow)));
}

}  // namespace otfm
