#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <vector>

#include "otfm/flow.hpp"
#include "otfm/synth.hpp"
#include "otfm/trainer.hpp"
#include "otfm/uot.hpp"

// Inference: run the trained mapping network as a one-step (or K-step Euler)
// fusion operator, plus wall-clock benchmarking of the whole fuse pipeline.

namespace otfm::sample {

struct FusionRequest {
  RasterImage pan;   // 1 x H x W
  RasterImage lrms;  // B x h x w; H = ratio * h must hold
  int steps = 1;
  bool use_ema = true;
};

// Fused image (B, H, W), values clipped to [0,1]. steps = 1 is the one-step
// map y0 + s(y0, 1, cond); steps > 1 runs Euler from t = 1 to 0 and is
// bitwise identical to steps = 1 when steps == 1. Deterministic: no RNG.
template <typename S>
RasterImage fuse(const FusionRequest& req, const train::CheckpointData<S>& ck) {
  if (req.steps < 1) throw ArgumentError("fuse: steps must be >= 1");
  if (req.lrms.bands != ck.mapping_cfg.out_bands)
    throw ArgumentError("fuse: checkpoint expects " +
                        std::to_string(ck.mapping_cfg.out_bands) +
                        " bands, input has " + std::to_string(req.lrms.bands));
  if (req.lrms.height < 1 || req.lrms.width < 1 ||
      req.pan.height % req.lrms.height != 0 ||
      req.pan.width % req.lrms.width != 0 ||
      req.pan.height / req.lrms.height != req.pan.width / req.lrms.width)
    throw ArgumentError("fuse: pan resolution must be an integer multiple of lrms");
  const int div = 1 << (ck.mapping_cfg.levels - 1);
  if (req.pan.height % div != 0 || req.pan.width % div != 0)
    throw ArgumentError("fuse: resolution must divide by 2^(levels-1)");

  SampleTriplet trip;
  trip.pan = req.pan;
  trip.lrms = req.lrms;
  trip.ratio = req.pan.height / req.lrms.height;
  uot::PreparedSample<S> prep = uot::prepare_sample<S>(trip, ck.mtf, false);

  const int B = req.lrms.bands, H = req.pan.height, W = req.pan.width;
  ad::Tensor<S> y0 = prep.y0.reshaped({1, B, H, W});
  ad::Tensor<S> cond = prep.cond.reshaped({1, B + 1, H, W});

  nn::MappingNet<S> net = train::mapping_from_checkpoint(ck, req.use_ema);
  auto P = net.params.bind(false);
  auto model = [&](const ad::Tensor<S>& y, S t, const ad::Tensor<S>& c) {
    ad::Tensor<S> ts({1});
    ts[0] = t;
    return net.forward(P, ad::leaf<S>(y), ts, ad::leaf<S>(c))->v;
  };

  ad::Tensor<S> out = flow::euler_sample(model, y0, cond, req.steps);
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::min(S(1), std::max(S(0), out[i]));
  RasterImage img = uot::to_raster(out.reshaped({B, H, W}));
  img.sensor_tag = req.lrms.sensor_tag;
  return img;
}

struct BenchEntry {
  int steps = 0;
  double median_seconds = 0.0;
  double cov = 0.0;  // stddev / mean over the timed repeats
};

// Times fuse() end to end (preparation + network evaluations + clipping) on a
// synthetic scene of the given HR size. One warm-up run per configuration is
// excluded; the median over `repeats` timed runs is reported. Median latency
// must be non-decreasing in the step count or a NumericError is raised.
template <typename S>
std::vector<BenchEntry> bench_latency(const train::CheckpointData<S>& ck,
                                      int hr_size,
                                      const std::vector<int>& steps_list,
                                      int repeats) {
  if (repeats < 3) throw ArgumentError("bench: repeats must be >= 3");
  if (steps_list.empty()) throw ArgumentError("bench: steps list is empty");
  for (int s : steps_list)
    if (s < 1) throw ArgumentError("bench: steps must be >= 1");
  const int ratio = ck.mtf.ratio;
  if (hr_size < ratio || hr_size % ratio != 0)
    throw ArgumentError("bench: hr_size must be a positive multiple of the ratio");

  SampleTriplet scene =
      synth_scene(0x9e3779b9u, ck.mapping_cfg.out_bands, hr_size, ratio);
  using clock = std::chrono::steady_clock;

  std::vector<BenchEntry> table;
  for (int steps : steps_list) {
    FusionRequest req;
    req.pan = scene.pan;
    req.lrms = scene.lrms;
    req.steps = steps;
    fuse(req, ck);  // warm-up, excluded

    std::vector<double> secs;
    for (int r = 0; r < repeats; ++r) {
      auto t0 = clock::now();
      fuse(req, ck);
      auto t1 = clock::now();
      secs.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::vector<double> sorted = secs;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median = (n % 2 == 1)
                              ? sorted[n / 2]
                              : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    double mean = 0.0;
    for (double v : secs) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (double v : secs) var += (v - mean) * (v - mean);
    var /= double(n);
    BenchEntry e;
    e.steps = steps;
    e.median_seconds = median;
    e.cov = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
    table.push_back(e);
  }

  std::vector<BenchEntry> by_steps = table;
  std::sort(by_steps.begin(), by_steps.end(),
            [](const BenchEntry& a, const BenchEntry& b) { return a.steps < b.steps; });
  for (std::size_t i = 1; i < by_steps.size(); ++i)
    if (by_steps[i].median_seconds < by_steps[i - 1].median_seconds)
      throw NumericError("bench: latency not monotone in step count");
  return table;
}

}  // namespace otfm::sample
