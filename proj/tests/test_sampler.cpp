#include <cmath>
#include <vector>

#include "doctest.h"
#include "otfm/degradation.hpp"
#include "otfm/sampler.hpp"
#include "otfm/synth.hpp"
#include "otfm/trainer.hpp"

using namespace otfm;
using ad::Tensor;
using sample::BenchEntry;
using sample::FusionRequest;
using train::CheckpointData;
using train::TrainConfig;
using train::Trainer;

namespace {

nn::MappingNetConfig small_mapping(int bands = 3, int levels = 2) {
  nn::MappingNetConfig cfg;
  cfg.base_channels = 8;
  cfg.levels = levels;
  cfg.blocks_per_level = 1;
  cfg.attention_window = 3;
  cfg.heads = 2;
  cfg.cond_bands = bands + 1;
  cfg.out_bands = bands;
  return cfg;
}

nn::PotentialNetConfig small_potential() {
  nn::PotentialNetConfig cfg;
  cfg.channels = 8;
  cfg.blocks = 2;
  cfg.in_bands = 0;
  return cfg;
}

// Checkpoint after `steps` training steps on a small synthetic set.
CheckpointData<float> trained_checkpoint(std::int64_t steps, int bands = 3,
                                         int levels = 2) {
  TrainConfig tcfg;
  tcfg.max_steps = steps;
  tcfg.batch_size = 2;
  tcfg.seed = 11;
  tcfg.checkpoint_every = 0;
  Trainer<float> t(small_mapping(bands, levels), small_potential(), tcfg, MtfSpec{});
  std::vector<SampleTriplet> data;
  for (int i = 0; i < 4; ++i)
    data.push_back(synth_scene(40 + std::uint64_t(i), bands, 16, 4));
  t.set_dataset(data);
  for (std::int64_t i = 0; i < steps; ++i) t.train_step();
  return t.checkpoint("");
}

bool same_raster(const RasterImage& a, const RasterImage& b) {
  if (a.bands != b.bands || a.height != b.height || a.width != b.width)
    return false;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

double mean_abs_diff(const RasterImage& a, const RasterImage& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    acc += std::abs(a.data[i] - b.data[i]);
  return acc / double(a.data.size());
}

}  // namespace

TEST_CASE("an untrained network fuses to the bicubic upsampling exactly") {
  CheckpointData<float> ck = trained_checkpoint(0);
  SampleTriplet s = synth_scene(77, 3, 16, 4);

  FusionRequest req;
  req.pan = s.pan;
  req.lrms = s.lrms;

  // The head convolution is zero-initialized, so every velocity is zero and
  // the trajectory never leaves the start image, regardless of step count.
  RasterImage up = bicubic_resize(s.lrms, s.pan.height, s.pan.width);
  RasterImage expected = uot::to_raster(uot::to_tensor<float>(up));

  req.steps = 1;
  CHECK(same_raster(sample::fuse(req, ck), expected));
  req.steps = 5;
  CHECK(same_raster(sample::fuse(req, ck), expected));
}

TEST_CASE("one-step fusion equals the explicit endpoint formula bitwise") {
  CheckpointData<float> ck = trained_checkpoint(6);
  SampleTriplet s = synth_scene(78, 3, 16, 4);

  FusionRequest req;
  req.pan = s.pan;
  req.lrms = s.lrms;
  req.steps = 1;
  RasterImage fused = sample::fuse(req, ck);
  CHECK(fused.bands == 3);
  CHECK(fused.height == 16);
  CHECK(fused.width == 16);

  // Replay y0 + s(y0, 1, cond) by hand through the same network.
  uot::PreparedSample<float> prep = uot::prepare_sample<float>(s, ck.mtf, false);
  nn::MappingNet<float> net = train::mapping_from_checkpoint(ck, true);
  auto P = net.params.bind(false);
  Tensor<float> t1({1});
  t1[0] = 1.0f;
  Tensor<float> v = net.forward(P, ad::leaf<float>(prep.y0.reshaped({1, 3, 16, 16})),
                                t1,
                                ad::leaf<float>(prep.cond.reshaped({1, 4, 16, 16})))
                        ->v;
  RasterImage manual(3, 16, 16);
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    float y = prep.y0[i] + v[i];
    manual.data[std::size_t(i)] = double(std::min(1.0f, std::max(0.0f, y)));
  }
  CHECK(same_raster(fused, manual));

  for (double x : fused.data) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
}

TEST_CASE("fusion is deterministic") {
  CheckpointData<float> ck = trained_checkpoint(4);
  SampleTriplet s = synth_scene(79, 3, 16, 4);
  FusionRequest req;
  req.pan = s.pan;
  req.lrms = s.lrms;
  req.steps = 3;
  CHECK(same_raster(sample::fuse(req, ck), sample::fuse(req, ck)));
  req.use_ema = false;
  CHECK(same_raster(sample::fuse(req, ck), sample::fuse(req, ck)));
}

TEST_CASE("EMA and live weights produce different outputs after training") {
  CheckpointData<float> ck = trained_checkpoint(8);
  SampleTriplet s = synth_scene(80, 3, 16, 4);
  FusionRequest req;
  req.pan = s.pan;
  req.lrms = s.lrms;
  req.use_ema = true;
  RasterImage ema = sample::fuse(req, ck);
  req.use_ema = false;
  RasterImage live = sample::fuse(req, ck);
  CHECK(mean_abs_diff(ema, live) > 0.0);
}

TEST_CASE("multi-step fusion differs boundedly from the one-step map") {
  CheckpointData<float> ck = trained_checkpoint(10);
  SampleTriplet s = synth_scene(81, 3, 16, 4);
  FusionRequest req;
  req.pan = s.pan;
  req.lrms = s.lrms;
  req.steps = 1;
  RasterImage one = sample::fuse(req, ck);
  req.steps = 8;
  RasterImage many = sample::fuse(req, ck);
  const double diff = mean_abs_diff(one, many);
  CHECK(diff > 0.0);
  CHECK(diff < 0.1);  // same trajectory family, finer discretization
}

TEST_CASE("fusion rejects invalid requests") {
  CheckpointData<float> ck = trained_checkpoint(0);
  SampleTriplet s = synth_scene(82, 3, 16, 4);

  FusionRequest req;
  req.pan = s.pan;
  req.lrms = s.lrms;
  req.steps = 0;
  CHECK_THROWS_AS(sample::fuse(req, ck), ArgumentError);

  req.steps = 1;
  req.lrms = RasterImage(4, 4, 4);  // wrong band count
  CHECK_THROWS_AS(sample::fuse(req, ck), ArgumentError);

  req.lrms = RasterImage(3, 5, 5);  // 16 not a multiple of 5
  CHECK_THROWS_AS(sample::fuse(req, ck), ArgumentError);

  req.lrms = RasterImage(3, 8, 4);  // anisotropic ratio
  CHECK_THROWS_AS(sample::fuse(req, ck), ArgumentError);

  // 10 is not divisible by 2^(levels-1) = 4 for a 3-level network.
  CheckpointData<float> deep = trained_checkpoint(0, 3, 3);
  SampleTriplet odd = synth_scene(83, 3, 10, 2);
  FusionRequest bad;
  bad.pan = odd.pan;
  bad.lrms = odd.lrms;
  CHECK_THROWS_AS(sample::fuse(bad, deep), ArgumentError);
}

TEST_CASE("latency benchmark reports medians and enforces preconditions") {
  CheckpointData<float> ck = trained_checkpoint(0);

  std::vector<BenchEntry> table = sample::bench_latency(ck, 16, {1, 4}, 3);
  REQUIRE(table.size() == 2);
  CHECK(table[0].steps == 1);
  CHECK(table[1].steps == 4);
  CHECK(table[0].median_seconds > 0.0);
  CHECK(table[1].median_seconds >= table[0].median_seconds);
  CHECK(table[0].cov >= 0.0);
  CHECK(table[1].cov >= 0.0);

  CHECK_THROWS_AS(sample::bench_latency(ck, 16, {1, 0}, 3), ArgumentError);
  CHECK_THROWS_AS(sample::bench_latency(ck, 16, {1}, 2), ArgumentError);
  CHECK_THROWS_AS(sample::bench_latency(ck, 16, {}, 3), ArgumentError);
  CHECK_THROWS_AS(sample::bench_latency(ck, 17, {1}, 3), ArgumentError);
}
