#include "otfm/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace otfm::metrics {
namespace {

constexpr double kEps = 1e-12;
constexpr double kPi = 3.14159265358979323846;

void check_same(const RasterImage& a, const RasterImage& b, const char* who) {
  if (a.bands != b.bands)
    throw ArgumentError(std::string(who) + ": band count mismatch");
  if (a.height != b.height || a.width != b.width)
    throw ArgumentError(std::string(who) + ": resolution mismatch");
}

// Laplacian detail with edge replication.
std::vector<double> highpass(const RasterImage& img, int band) {
  const int H = img.height, W = img.width;
  std::vector<double> out(std::size_t(H) * W);
  auto at = [&](int i, int j) {
    i = std::clamp(i, 0, H - 1);
    j = std::clamp(j, 0, W - 1);
    return img.at(band, i, j);
  };
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      out[std::size_t(i) * W + j] = 4.0 * at(i, j) - at(i - 1, j) -
                                    at(i + 1, j) - at(i, j - 1) - at(i, j + 1);
  return out;
}

struct Tiling {
  int win_h = 0, win_w = 0;
  std::vector<std::pair<int, int>> origins;
};

// window x window tiles with stride = window; trailing remainders are
// dropped. Images smaller than the window become one whole-image tile.
Tiling make_tiling(int H, int W, int window) {
  Tiling t;
  if (H < window || W < window) {
    t.win_h = H;
    t.win_w = W;
    t.origins.emplace_back(0, 0);
    return t;
  }
  t.win_h = t.win_w = window;
  for (int i = 0; i + window <= H; i += window)
    for (int j = 0; j + window <= W; j += window) t.origins.emplace_back(i, j);
  return t;
}

// Universal-quality-index case split shared by uiqi and q2n: full formula
// where both denominators live, luminance-only where the contrast term is
// degenerate, and 1 for jointly empty windows.
double q_value(double cov_mod, double mean_mod1, double mean_mod2,
               double var_sum) {
  const double d2 = mean_mod1 * mean_mod1 + mean_mod2 * mean_mod2;
  if (var_sum > kEps && d2 > kEps)
    return 4.0 * cov_mod * mean_mod1 * mean_mod2 / (var_sum * d2);
  if (d2 > kEps) return 2.0 * mean_mod1 * mean_mod2 / d2;
  return 1.0;
}

int next_pow2(int b) {
  int p = 1;
  while (p < b) p <<= 1;
  return p;
}

// Cayley-Dickson product of two 2^k-ons: (a,b)(c,d) = (ac - d*b, da + bc*).
std::vector<double> cd_mult(const std::vector<double>& x,
                            const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n == 1) return {x[0] * y[0]};
  const std::size_t h = n / 2;
  auto conj = [](std::vector<double> v) {
    for (std::size_t i = 1; i < v.size(); ++i) v[i] = -v[i];
    return v;
  };
  std::vector<double> a(x.begin(), x.begin() + std::ptrdiff_t(h));
  std::vector<double> b(x.begin() + std::ptrdiff_t(h), x.end());
  std::vector<double> c(y.begin(), y.begin() + std::ptrdiff_t(h));
  std::vector<double> d(y.begin() + std::ptrdiff_t(h), y.end());
  std::vector<double> ac = cd_mult(a, c);
  std::vector<double> db = cd_mult(conj(d), b);
  std::vector<double> da = cd_mult(d, a);
  std::vector<double> bc = cd_mult(b, conj(c));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < h; ++i) {
    out[i] = ac[i] - db[i];
    out[h + i] = da[i] + bc[i];
  }
  return out;
}

double modulus(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double sam(const RasterImage& fused, const RasterImage& ref) {
  check_same(fused, ref, "sam");
  if (fused.bands < 2) throw ArgumentError("sam: needs at least 2 bands");
  const std::size_t n = fused.pixel_count();
  double acc = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (int b = 0; b < fused.bands; ++b) {
      const double u = fused.data[std::size_t(b) * n + p];
      const double v = ref.data[std::size_t(b) * n + p];
      dot += u * v;
      nu += u * u;
      nv += v * v;
    }
    if (nu <= 0.0 || nv <= 0.0) continue;  // zero-norm pixels: angle 0
    acc += std::acos(std::clamp(dot / std::sqrt(nu * nv), -1.0, 1.0));
  }
  return acc / double(n) * (180.0 / kPi);
}

double ergas(const RasterImage& fused, const RasterImage& ref, int ratio) {
  check_same(fused, ref, "ergas");
  if (ratio < 1) throw ArgumentError("ergas: ratio must be >= 1");
  const std::size_t n = fused.pixel_count();
  double acc = 0.0;
  for (int b = 0; b < fused.bands; ++b) {
    double mse = 0.0, mean = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const double r = ref.data[std::size_t(b) * n + p];
      const double e = fused.data[std::size_t(b) * n + p] - r;
      mse += e * e;
      mean += r;
    }
    mse /= double(n);
    mean /= double(n);
    const double denom = std::max(std::abs(mean), kEps);
    acc += mse / (denom * denom);
  }
  return 100.0 / double(ratio) * std::sqrt(acc / double(fused.bands));
}

double scc(const RasterImage& fused, const RasterImage& ref,
           std::vector<int>* degenerate) {
  check_same(fused, ref, "scc");
  if (degenerate) degenerate->clear();
  const std::size_t n = fused.pixel_count();
  double acc = 0.0;
  for (int b = 0; b < fused.bands; ++b) {
    std::vector<double> hf = highpass(fused, b), hr = highpass(ref, b);
    double mf = 0.0, mr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mf += hf[i];
      mr += hr[i];
    }
    mf /= double(n);
    mr /= double(n);
    double cov = 0.0, vf = 0.0, vr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double df = hf[i] - mf, dr = hr[i] - mr;
      cov += df * dr;
      vf += df * df;
      vr += dr * dr;
    }
    if (vf <= kEps || vr <= kEps) {
      if (degenerate) degenerate->push_back(b);
      continue;  // constant detail contributes 0
    }
    acc += cov / std::sqrt(vf * vr);
  }
  return acc / double(fused.bands);
}

double uiqi(const RasterImage& a, const RasterImage& b, int window) {
  check_same(a, b, "uiqi");
  if (a.bands != 1) throw ArgumentError("uiqi: expects single-band images");
  if (window < 1) throw ArgumentError("uiqi: window must be positive");
  const Tiling tiling = make_tiling(a.height, a.width, window);
  double acc = 0.0;
  for (auto [oi, oj] : tiling.origins) {
    const double n = double(tiling.win_h) * tiling.win_w;
    double ma = 0.0, mb = 0.0;
    for (int i = 0; i < tiling.win_h; ++i)
      for (int j = 0; j < tiling.win_w; ++j) {
        ma += a.at(0, oi + i, oj + j);
        mb += b.at(0, oi + i, oj + j);
      }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (int i = 0; i < tiling.win_h; ++i)
      for (int j = 0; j < tiling.win_w; ++j) {
        const double da = a.at(0, oi + i, oj + j) - ma;
        const double db = b.at(0, oi + i, oj + j) - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
      }
    cov /= n;
    va /= n;
    vb /= n;
    // Signed covariance: q_value's modulus argument keeps the sign here so
    // anti-correlated windows score negative, as in the scalar index.
    const double d2 = ma * ma + mb * mb;
    double q;
    if (va + vb > kEps && d2 > kEps)
      q = 4.0 * cov * ma * mb / ((va + vb) * d2);
    else if (d2 > kEps)
      q = 2.0 * ma * mb / d2;
    else
      q = 1.0;
    acc += q;
  }
  return acc / double(tiling.origins.size());
}

double q2n(const RasterImage& fused, const RasterImage& ref, int window) {
  check_same(fused, ref, "q2n");
  if (window < 1) throw ArgumentError("q2n: window must be positive");
  const int B = fused.bands;
  const int D = next_pow2(B);  // zero-padded hypercomplex dimension
  const std::size_t n = fused.pixel_count();
  const Tiling tiling = make_tiling(fused.height, fused.width, window);

  auto pixel = [&](const RasterImage& img, int i, int j) {
    std::vector<double> z(std::size_t(D), 0.0);
    for (int b = 0; b < B; ++b)
      z[std::size_t(b)] = img.data[std::size_t(b) * n +
                                   std::size_t(i) * img.width + std::size_t(j)];
    return z;
  };
  auto conj = [](std::vector<double> v) {
    for (std::size_t i = 1; i < v.size(); ++i) v[i] = -v[i];
    return v;
  };

  double acc = 0.0;
  for (auto [oi, oj] : tiling.origins) {
    const double count = double(tiling.win_h) * tiling.win_w;
    std::vector<double> m1(std::size_t(D), 0.0), m2(std::size_t(D), 0.0);
    double p1 = 0.0, p2 = 0.0;  // mean |z|^2
    std::vector<double> cross(std::size_t(D), 0.0);
    for (int i = 0; i < tiling.win_h; ++i)
      for (int j = 0; j < tiling.win_w; ++j) {
        std::vector<double> z1 = pixel(fused, oi + i, oj + j);
        std::vector<double> z2 = pixel(ref, oi + i, oj + j);
        for (int d = 0; d < D; ++d) {
          m1[std::size_t(d)] += z1[std::size_t(d)];
          m2[std::size_t(d)] += z2[std::size_t(d)];
          p1 += z1[std::size_t(d)] * z1[std::size_t(d)];
          p2 += z2[std::size_t(d)] * z2[std::size_t(d)];
        }
        std::vector<double> zc = cd_mult(z1, conj(z2));
        for (int d = 0; d < D; ++d) cross[std::size_t(d)] += zc[std::size_t(d)];
      }
    for (int d = 0; d < D; ++d) {
      m1[std::size_t(d)] /= count;
      m2[std::size_t(d)] /= count;
      cross[std::size_t(d)] /= count;
    }
    p1 /= count;
    p2 /= count;
    std::vector<double> mm = cd_mult(m1, conj(m2));
    for (int d = 0; d < D; ++d) cross[std::size_t(d)] -= mm[std::size_t(d)];

    const double mod1 = modulus(m1), mod2 = modulus(m2);
    const double var1 = p1 - mod1 * mod1, var2 = p2 - mod2 * mod2;
    acc += q_value(modulus(cross), mod1, mod2, var1 + var2);
  }
  return acc / double(tiling.origins.size());
}

double d_lambda(const RasterImage& fused, const RasterImage& lrms,
                const MtfSpec& mtf) {
  RasterImage degraded = degrade_spatial(fused, mtf);
  check_same(degraded, lrms, "d_lambda");
  return std::clamp(1.0 - q2n(degraded, lrms), 0.0, 1.0);
}

double d_s(const RasterImage& fused, const RasterImage& lrms,
           const RasterImage& pan, const MtfSpec& mtf) {
  if (pan.bands != 1) throw ArgumentError("d_s: pan must be single-band");
  if (fused.bands != lrms.bands) throw ArgumentError("d_s: band count mismatch");
  if (fused.height != pan.height || fused.width != pan.width)
    throw ArgumentError("d_s: fused and pan resolutions differ");
  RasterImage pan_lr = degrade_spatial(pan, mtf);
  if (lrms.height != pan_lr.height || lrms.width != pan_lr.width)
    throw ArgumentError("d_s: lrms resolution inconsistent with the ratio");

  auto band_of = [](const RasterImage& img, int b) {
    RasterImage out(1, img.height, img.width);
    const std::size_t n = img.pixel_count();
    std::copy(img.data.begin() + std::ptrdiff_t(std::size_t(b) * n),
              img.data.begin() + std::ptrdiff_t(std::size_t(b + 1) * n),
              out.data.begin());
    return out;
  };

  double acc = 0.0;
  for (int b = 0; b < fused.bands; ++b)
    acc += std::abs(uiqi(band_of(fused, b), pan) - uiqi(band_of(lrms, b), pan_lr));
  return acc / double(fused.bands);
}

double hqnr(double d_lambda_value, double d_s_value) {
  if (d_lambda_value < 0.0 || d_lambda_value > 1.0 || d_s_value < 0.0 ||
      d_s_value > 1.0)
    throw ArgumentError("hqnr: distortions must lie in [0,1]");
  return (1.0 - d_lambda_value) * (1.0 - d_s_value);
}

void aggregate_report(MetricReport& report) {
  report.aggregate.clear();
  if (report.per_image.empty()) return;
  const double n = double(report.per_image.size());
  for (const auto& [name, first] : report.per_image.front()) {
    (void)first;
    double mean = 0.0;
    for (const auto& row : report.per_image) mean += row.at(name);
    mean /= n;
    double var = 0.0;
    for (const auto& row : report.per_image) {
      const double d = row.at(name) - mean;
      var += d * d;
    }
    report.aggregate[name] = {mean, std::sqrt(var / n)};
  }
}

namespace {

// Canonical printing order; map iteration would interleave protocols' names.
const char* kMetricOrder[] = {"sam", "ergas", "scc", "q2n", "d_lambda", "d_s", "hqnr"};

}  // namespace

std::string report_lines(const MetricReport& report) {
  std::ostringstream out;
  char buf[96];
  for (const char* name : kMetricOrder) {
    auto it = report.aggregate.find(name);
    if (it == report.aggregate.end()) continue;
    std::snprintf(buf, sizeof(buf), "metric=%s mean=%.9g std=%.9g\n", name,
                  it->second.first, it->second.second);
    out << buf;
  }
  return out.str();
}

std::string report_table(const MetricReport& report) {
  std::ostringstream out;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%-10s %12s %12s\n", "metric", "mean", "std");
  out << buf;
  for (const char* name : kMetricOrder) {
    auto it = report.aggregate.find(name);
    if (it == report.aggregate.end()) continue;
    std::snprintf(buf, sizeof(buf), "%-10s %12.6f %12.6f\n", name,
                  it->second.first, it->second.second);
    out << buf;
  }
  return out.str();
}

}  // namespace otfm::metrics
