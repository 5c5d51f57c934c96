#include "otfm/synth.hpp"

#include <cmath>

namespace otfm {

namespace {

struct Blob {
  double ci, cj, sigma, amp;
};

void add_blobs(std::vector<double>& field, int H, int W, const std::vector<Blob>& bs,
               double gain) {
  for (const Blob& b : bs) {
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double di = i - b.ci, dj = j - b.cj;
        field[std::size_t(i) * W + j] += gain * b.amp * std::exp(-(di * di + dj * dj) * inv);
      }
  }
}

std::vector<Blob> draw_blobs(Rng& rng, int n, int H, int W, double sig_lo,
                             double sig_hi, double amp_lo, double amp_hi) {
  std::vector<Blob> bs(n);
  for (Blob& b : bs) {
    b.ci = rng.uniform(0.0, double(H));
    b.cj = rng.uniform(0.0, double(W));
    b.sigma = rng.uniform(sig_lo, sig_hi);
    b.amp = rng.uniform(amp_lo, amp_hi);
  }
  return bs;
}

}  // namespace

SampleTriplet synth_scene(std::uint64_t seed, int bands, int hr_size, int ratio) {
  if (bands < 1) throw ArgumentError("synth_scene: bands must be >= 1");
  if (ratio < 2) throw ArgumentError("synth_scene: ratio must be >= 2");
  if (hr_size < ratio || hr_size % ratio != 0)
    throw ArgumentError("synth_scene: hr_size must be a positive multiple of ratio");

  // Fold every argument into the stream so distinct parameterizations draw
  // unrelated scenes.
  std::uint64_t mix[4] = {seed, std::uint64_t(bands), std::uint64_t(hr_size),
                          std::uint64_t(ratio)};
  Rng rng(fnv1a64(mix, sizeof(mix)));

  const int H = hr_size, W = hr_size;
  const std::size_t npx = std::size_t(H) * W;

  // Structure shared by all bands: coarse shapes plus fine detail that the
  // sensor blur removes from LRMS but PAN keeps.
  std::vector<double> coarse(npx, 0.0), fine(npx, 0.0);
  add_blobs(coarse, H, W, draw_blobs(rng, 6, H, W, H / 12.0, H / 5.0, 0.10, 0.30), 1.0);
  add_blobs(fine, H, W, draw_blobs(rng, 30, H, W, 1.2, 3.0, -0.25, 0.25), 1.0);

  RasterImage hrms(bands, H, W);
  for (int b = 0; b < bands; ++b) {
    const double wc = rng.uniform(0.55, 1.0);
    const double wf = rng.uniform(0.5, 1.0);
    std::vector<double> own(npx, 0.0);
    add_blobs(own, H, W, draw_blobs(rng, 4, H, W, H / 16.0, H / 6.0, -0.10, 0.10), 1.0);
    for (std::size_t i = 0; i < npx; ++i) {
      double v = 0.18 + wc * coarse[i] + wf * fine[i] + own[i];
      hrms.data[b * npx + i] = std::min(1.0, std::max(0.0, v));
    }
  }

  RasterImage pan(1, H, W);
  for (std::size_t i = 0; i < npx; ++i) {
    double mean = 0.0;
    for (int b = 0; b < bands; ++b) mean += hrms.data[b * npx + i];
    mean /= bands;
    double v = mean + kPanNoiseAmp * (2.0 * rng.uniform() - 1.0);
    pan.data[i] = std::min(1.0, std::max(0.0, v));
  }

  MtfSpec mtf;
  mtf.ratio = ratio;

  SampleTriplet t;
  t.ratio = ratio;
  t.pan = std::move(pan);
  t.lrms = degrade_spatial(hrms, mtf);
  t.hrms_ref = std::move(hrms);
  t.validate();
  return t;
}

}  // namespace otfm
