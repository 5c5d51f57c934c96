#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "otfm/synth.hpp"
#include "otfm/trainer.hpp"

using namespace otfm;
namespace fs = std::filesystem;
using ad::Tensor;
using train::CheckpointData;
using train::TrainConfig;
using train::Trainer;
using train::TrainStepRecord;

namespace {

fs::path temp_dir() {
  fs::path d = fs::temp_directory_path() / "otfm_trainer_test";
  fs::create_directories(d);
  return d;
}

nn::MappingNetConfig tiny_mapping(int bands = 3) {
  nn::MappingNetConfig cfg;
  cfg.base_channels = 8;
  cfg.levels = 2;
  cfg.blocks_per_level = 1;
  cfg.attention_window = 3;
  cfg.heads = 2;
  cfg.cond_bands = bands + 1;
  cfg.out_bands = bands;
  return cfg;
}

nn::PotentialNetConfig tiny_potential() {
  nn::PotentialNetConfig cfg;
  cfg.channels = 8;
  cfg.blocks = 2;
  cfg.in_bands = 0;  // resolved from the mapping config
  return cfg;
}

TrainConfig tiny_train(std::int64_t steps) {
  TrainConfig cfg;
  cfg.max_steps = steps;
  cfg.batch_size = 2;
  cfg.seed = 7;
  cfg.log_every = 1;
  cfg.checkpoint_every = 0;
  return cfg;
}

std::vector<SampleTriplet> tiny_dataset(int count = 4, int bands = 3, int hr = 16) {
  std::vector<SampleTriplet> out;
  for (int i = 0; i < count; ++i)
    out.push_back(synth_scene(1000 + std::uint64_t(i), bands, hr, 4));
  return out;
}

bool same_values(const nn::Params<float>& a, const nn::Params<float>& b) {
  if (a.values.size() != b.values.size()) return false;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (!a.values[i].same_shape(b.values[i])) return false;
    for (std::int64_t j = 0; j < a.values[i].numel(); ++j)
      if (a.values[i][j] != b.values[i][j]) return false;
  }
  return true;
}

bool same_records(const TrainStepRecord& a, const TrainStepRecord& b) {
  return a.step == b.step && a.failed == b.failed &&
         a.losses.flow == b.losses.flow && a.losses.mapping == b.losses.mapping &&
         a.losses.potential == b.losses.potential &&
         a.grad_norm_mapping == b.grad_norm_mapping &&
         a.grad_norm_potential == b.grad_norm_potential;
}

}  // namespace

TEST_CASE("adamw matches a scalar recursion oracle") {
  nn::Params<float> p;
  p.add("w", Tensor<float>({3}, {0.5f, -0.2f, 1.0f}));
  train::AdamW<float> opt;
  opt.init(p);

  // Independent replay of the update recursion in plain doubles.
  std::vector<double> w = {0.5, -0.2, 1.0}, m(3, 0.0), v(3, 0.0);
  const double lr = 1e-2, wd = 0.0;
  Rng rng(50);
  for (int step = 1; step <= 25; ++step) {
    Tensor<float> g({3});
    for (int i = 0; i < 3; ++i) g[i] = float(rng.uniform(-1.0, 1.0));
    opt.step(p, {g}, lr, wd);
    for (int i = 0; i < 3; ++i) {
      const double gi = double(g[i]);
      m[std::size_t(i)] = 0.9 * m[std::size_t(i)] + 0.1 * gi;
      v[std::size_t(i)] = 0.999 * v[std::size_t(i)] + 0.001 * gi * gi;
      const double mh = m[std::size_t(i)] / (1.0 - std::pow(0.9, step));
      const double vh = v[std::size_t(i)] / (1.0 - std::pow(0.999, step));
      w[std::size_t(i)] -= lr * (mh / (std::sqrt(vh) + 1e-8) + wd * w[std::size_t(i)]);
    }
  }
  for (int i = 0; i < 3; ++i)
    CHECK(double(p.values[0][i]) == doctest::Approx(w[std::size_t(i)]).epsilon(1e-5));

  // Decoupled decay: zero gradients still shrink the parameters.
  nn::Params<float> q;
  q.add("w", Tensor<float>({1}, {2.0f}));
  train::AdamW<float> opt2;
  opt2.init(q);
  opt2.step(q, {Tensor<float>({1})}, 0.1, 0.5);
  CHECK(q.values[0][0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-6));
}

TEST_CASE("gradient clipping caps the global norm and keeps direction") {
  std::vector<Tensor<float>> grads;
  grads.push_back(Tensor<float>({2}, {3.0f, 4.0f}));
  grads.push_back(Tensor<float>({1}, {12.0f}));  // norm = 13
  std::vector<Tensor<float>> orig = grads;

  const double pre = train::clip_global_norm(grads, 1.0);
  CHECK(pre == doctest::Approx(13.0).epsilon(1e-7));
  double post = 0.0;
  for (const auto& g : grads)
    for (std::int64_t i = 0; i < g.numel(); ++i) post += double(g[i]) * double(g[i]);
  CHECK(std::sqrt(post) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(double(grads[0][1]) / double(grads[0][0]) == doctest::Approx(4.0 / 3.0).epsilon(1e-6));

  // Below the threshold nothing moves.
  std::vector<Tensor<float>> small;
  small.push_back(Tensor<float>({2}, {0.3f, 0.4f}));
  train::clip_global_norm(small, 1.0);
  CHECK(small[0][0] == 0.3f);
  CHECK(small[0][1] == 0.4f);
}

TEST_CASE("two trainers with the same seed produce identical streams") {
  auto data = tiny_dataset();
  Trainer<float> a(tiny_mapping(), tiny_potential(), tiny_train(5), MtfSpec{});
  Trainer<float> b(tiny_mapping(), tiny_potential(), tiny_train(5), MtfSpec{});
  a.set_dataset(data);
  b.set_dataset(data);

  for (int i = 0; i < 5; ++i) {
    TrainStepRecord ra = a.train_step();
    TrainStepRecord rb = b.train_step();
    CHECK(same_records(ra, rb));
    CHECK_FALSE(ra.failed);
    CHECK(std::isfinite(ra.losses.flow));
    CHECK(std::isfinite(ra.losses.potential));
  }
  CHECK(same_values(a.mapping().params, b.mapping().params));
  CHECK(same_values(a.potential().params, b.potential().params));
  CHECK(same_values(a.mapping_ema(), b.mapping_ema()));
}

TEST_CASE("max_steps zero leaves the initialization untouched") {
  Trainer<float> t(tiny_mapping(), tiny_potential(), tiny_train(0), MtfSpec{});
  t.set_dataset(tiny_dataset());
  t.run([](const TrainStepRecord&) {}, [](const Trainer<float>&) {});
  CHECK(t.step_count() == 0);

  Trainer<float> fresh(tiny_mapping(), tiny_potential(), tiny_train(0), MtfSpec{});
  CHECK(same_values(t.mapping().params, fresh.mapping().params));
  CHECK(same_values(t.potential().params, fresh.potential().params));
}

TEST_CASE("disabling transport terms reproduces plain flow matching bitwise") {
  auto data = tiny_dataset();

  TrainConfig fm = tiny_train(8);
  fm.weight_mapping = 0.0;
  fm.lr_potential = 0.0;
  Trainer<float> plain(tiny_mapping(), tiny_potential(), fm, MtfSpec{});
  plain.set_dataset(data);

  TrainConfig frozen_map = tiny_train(8);
  frozen_map.weight_mapping = 0.0;  // potential still trains, mapping ignores it
  Trainer<float> with_pot(tiny_mapping(), tiny_potential(), frozen_map, MtfSpec{});
  with_pot.set_dataset(data);

  nn::Params<float> pot_init = with_pot.potential().params;
  for (int i = 0; i < 8; ++i) {
    TrainStepRecord ra = plain.train_step();
    TrainStepRecord rb = with_pot.train_step();
    CHECK(ra.losses.flow == rb.losses.flow);
    CHECK(ra.grad_norm_mapping == rb.grad_norm_mapping);
    CHECK(ra.losses.mapping == 0.0);
    CHECK(rb.losses.mapping == 0.0);
    CHECK(ra.losses.potential == 0.0);
    CHECK(std::isfinite(rb.losses.potential));
  }
  CHECK(same_values(plain.mapping().params, with_pot.mapping().params));
  CHECK(same_values(plain.mapping_ema(), with_pot.mapping_ema()));
  CHECK_FALSE(same_values(pot_init, with_pot.potential().params));
}

TEST_CASE("a frozen batch overfits: flow loss halves within 50 steps") {
  nn::MappingNetConfig mcfg;  // desk mapping at reduced resolution
  mcfg.base_channels = 16;
  mcfg.levels = 2;
  mcfg.blocks_per_level = 2;
  mcfg.cond_bands = 5;
  mcfg.out_bands = 4;
  nn::PotentialNetConfig pcfg;
  pcfg.channels = 32;
  pcfg.in_bands = 0;

  TrainConfig tcfg = tiny_train(50);
  tcfg.batch_size = 4;
  // The overfitting oracle isolates the regression pathway: with the
  // adversarial term active the equilibrium does not minimize the flow loss,
  // so the transport weight and critic are switched off here and the rate is
  // sized for a net this small.
  tcfg.weight_mapping = 0.0;
  tcfg.lr_potential = 0.0;
  tcfg.lr_mapping = 1e-3;
  Trainer<float> t(mcfg, pcfg, tcfg, MtfSpec{});
  t.set_dataset(tiny_dataset(4, 4, 32));

  double first = 0.0, last = 0.0;
  for (int i = 0; i < 50; ++i) {
    TrainStepRecord rec = t.train_step();
    REQUIRE_FALSE(rec.failed);
    if (i == 0) first = rec.losses.flow;
    last = rec.losses.flow;
  }
  CHECK(last <= 0.5 * first);
}

TEST_CASE("non-finite steps roll back and abort after the failure limit") {
  TrainConfig cfg = tiny_train(20);
  cfg.max_failed_steps = 3;
  Trainer<float> t(tiny_mapping(), tiny_potential(), cfg, MtfSpec{});
  t.set_dataset(tiny_dataset());

  t.mapping().params.values[0][0] = 1e30f;  // forward pass overflows

  nn::Params<float> before = t.mapping().params;
  TrainStepRecord rec = t.train_step();
  CHECK(rec.failed);
  CHECK(t.consecutive_failures() == 1);
  CHECK(same_values(t.mapping().params, before));

  CHECK_THROWS_AS(
      t.run([](const TrainStepRecord&) {}, [](const Trainer<float>&) {}),
      NumericError);
  CHECK(t.consecutive_failures() >= 3);
}

TEST_CASE("checkpoint files round trip and reject corruption") {
  auto data = tiny_dataset();
  Trainer<float> t(tiny_mapping(), tiny_potential(), tiny_train(3), MtfSpec{});
  t.set_dataset(data);
  for (int i = 0; i < 3; ++i) t.train_step();

  CheckpointData<float> ck = t.checkpoint("key = value");
  const fs::path path = temp_dir() / "roundtrip.otck";
  train::save_checkpoint(path.string(), ck);
  CheckpointData<float> back = train::load_checkpoint<float>(path.string());

  CHECK(back.config_echo == "key = value");
  CHECK(back.step == 3);
  CHECK(back.mapping_cfg.base_channels == 8);
  CHECK(back.potential_cfg.in_bands == 3);
  CHECK(back.train_cfg.batch_size == 2);
  CHECK(back.train_cfg.seed == 7);
  CHECK(same_values(back.map_live, ck.map_live));
  CHECK(same_values(back.map_ema, ck.map_ema));
  CHECK(same_values(back.pot_live, ck.pot_live));
  CHECK(back.adam_map.t == ck.adam_map.t);
  REQUIRE(back.adam_map.m.size() == ck.adam_map.m.size());
  for (std::size_t i = 0; i < ck.adam_map.m.size(); ++i)
    for (std::int64_t j = 0; j < ck.adam_map.m[i].numel(); ++j) {
      CHECK(back.adam_map.m[i][j] == ck.adam_map.m[i][j]);
      CHECK(back.adam_map.v[i][j] == ck.adam_map.v[i][j]);
    }
  REQUIRE(back.bn.size() == ck.bn.size());
  for (std::size_t i = 0; i < ck.bn.size(); ++i)
    for (std::int64_t j = 0; j < ck.bn[i].running_mean.numel(); ++j) {
      CHECK(back.bn[i].running_mean[j] == ck.bn[i].running_mean[j]);
      CHECK(back.bn[i].running_var[j] == ck.bn[i].running_var[j]);
    }
  CHECK(back.rng.state == ck.rng.state);
  CHECK(back.perm == ck.perm);
  CHECK(back.cursor == ck.cursor);

  // Precision tag, checksum, truncation, magic.
  CHECK_THROWS_AS(train::load_checkpoint<double>(path.string()), DataError);

  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  is.close();

  std::string flipped = bytes;
  flipped[flipped.size() / 2] = char(flipped[flipped.size() / 2] ^ 0x40);
  const fs::path bad = temp_dir() / "bad.otck";
  std::ofstream(bad, std::ios::binary).write(flipped.data(), std::streamsize(flipped.size()));
  CHECK_THROWS_AS(train::load_checkpoint<float>(bad.string()), DataError);

  std::ofstream(bad, std::ios::binary)
      .write(bytes.data(), std::streamsize(bytes.size() / 2));
  CHECK_THROWS_AS(train::load_checkpoint<float>(bad.string()), DataError);

  std::string wrong_magic = bytes;
  wrong_magic[0] = 'X';
  std::ofstream(bad, std::ios::binary)
      .write(wrong_magic.data(), std::streamsize(wrong_magic.size()));
  CHECK_THROWS_AS(train::load_checkpoint<float>(bad.string()), DataError);
}

TEST_CASE("resuming from a checkpoint matches the uninterrupted run bitwise") {
  auto data = tiny_dataset();

  Trainer<float> straight(tiny_mapping(), tiny_potential(), tiny_train(12), MtfSpec{});
  straight.set_dataset(data);
  std::vector<TrainStepRecord> tail;
  for (int i = 0; i < 12; ++i) {
    TrainStepRecord rec = straight.train_step();
    if (i >= 7) tail.push_back(rec);
  }

  Trainer<float> head(tiny_mapping(), tiny_potential(), tiny_train(12), MtfSpec{});
  head.set_dataset(data);
  for (int i = 0; i < 7; ++i) head.train_step();

  const fs::path path = temp_dir() / "resume.otck";
  train::save_checkpoint(path.string(), head.checkpoint(""));
  Trainer<float> resumed(train::load_checkpoint<float>(path.string()));
  resumed.set_dataset(data);
  CHECK(resumed.step_count() == 7);

  for (std::size_t i = 0; i < tail.size(); ++i) {
    TrainStepRecord rec = resumed.train_step();
    CHECK(same_records(rec, tail[i]));
  }
  CHECK(same_values(resumed.mapping().params, straight.mapping().params));
  CHECK(same_values(resumed.potential().params, straight.potential().params));
  CHECK(same_values(resumed.mapping_ema(), straight.mapping_ema()));
  CHECK(same_values(resumed.potential_ema(), straight.potential_ema()));
}

TEST_CASE("configuration and dataset errors") {
  TrainConfig bad = tiny_train(1);
  bad.lr_mapping = 0.0;
  CHECK_THROWS_AS(Trainer<float>(tiny_mapping(), tiny_potential(), bad, MtfSpec{}),
                  ArgumentError);

  bad = tiny_train(1);
  bad.ema_decay = 1.0;
  CHECK_THROWS_AS(Trainer<float>(tiny_mapping(), tiny_potential(), bad, MtfSpec{}),
                  ArgumentError);

  Trainer<float> t(tiny_mapping(), tiny_potential(), tiny_train(1), MtfSpec{});
  CHECK_THROWS_AS(t.train_step(), ArgumentError);  // dataset not set
  CHECK_THROWS_AS(t.set_dataset(tiny_dataset(1)), ArgumentError);  // batch > data
  CHECK_THROWS_AS(t.set_dataset({}), ArgumentError);

  // Potential band resolution: explicit mismatch rejected, conditioning grows it.
  nn::PotentialNetConfig wrong = tiny_potential();
  wrong.in_bands = 5;
  CHECK_THROWS_AS(Trainer<float>(tiny_mapping(), wrong, tiny_train(1), MtfSpec{}),
                  ArgumentError);

  TrainConfig conditioned = tiny_train(1);
  conditioned.condition_potential = true;
  Trainer<float> c(tiny_mapping(), tiny_potential(), conditioned, MtfSpec{});
  CHECK(c.potential().cfg.in_bands == 3 + 4);
  c.set_dataset(tiny_dataset());
  TrainStepRecord rec = c.train_step();
  CHECK_FALSE(rec.failed);
}

TEST_CASE("the manifest training loop logs and writes checkpoints") {
  const fs::path dir = temp_dir() / "loop";
  fs::create_directories(dir);
  DatasetManifest manifest;
  manifest.split = "train";
  manifest.ratio = 4;
  manifest.bands = 3;
  for (int i = 0; i < 3; ++i) {
    SampleTriplet s = synth_scene(77 + std::uint64_t(i), 3, 16, 4);
    const std::string stem = "scene_" + std::to_string(i);
    save_triplet(s, (dir / stem).string());
    manifest.entries.push_back(stem);
  }
  const fs::path mpath = dir / "train.txt";
  save_manifest(manifest, mpath.string());

  TrainConfig cfg = tiny_train(4);
  cfg.checkpoint_every = 2;
  const fs::path ck_path = dir / "model.otck";
  std::ostringstream log;
  CheckpointData<float> final_ck = train::train_loop<float>(
      mpath.string(), tiny_mapping(), tiny_potential(), cfg, MtfSpec{},
      ck_path.string(), "echo", &log);

  CHECK(final_ck.step == 4);
  CHECK(fs::exists(ck_path));
  CheckpointData<float> loaded = train::load_checkpoint<float>(ck_path.string());
  CHECK(loaded.step == 4);
  CHECK(loaded.config_echo == "echo");

  std::string line;
  std::istringstream lines(log.str());
  int count = 0;
  while (std::getline(lines, line)) {
    CHECK(line.rfind("step=", 0) == 0);
    CHECK(line.find("flow=") != std::string::npos);
    ++count;
  }
  CHECK(count == 4);  // log_every = 1
}
