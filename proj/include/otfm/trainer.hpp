#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "otfm/binio.hpp"
#include "otfm/degradation.hpp"
#include "otfm/flow.hpp"
#include "otfm/optim.hpp"
#include "otfm/raster.hpp"
#include "otfm/uot.hpp"

// Alternating two-network training: one mapping update on the flow +
// transport objective, then one potential update on the dual objective with
// the reconstructed endpoint detached. Single-threaded and bit-reproducible
// given (seed, config, dataset order).

namespace otfm::train {

struct TrainConfig {
  double lr_mapping = 2e-4;
  double lr_potential = 1e-4;  // 0 freezes the potential (plain flow matching)
  std::int64_t max_steps = 100000;
  int batch_size = 52;
  double ema_decay = 0.99;
  std::uint64_t seed = 0;
  uot::CostConfig cost;
  double weight_flow = 1.0;
  double weight_mapping = 1.0;
  std::int64_t checkpoint_every = 1000;  // 0 disables periodic checkpoints
  std::int64_t log_every = 100;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  int max_failed_steps = 10;
  bool condition_potential = false;  // feed [candidate | cond] to the potential

  void validate() const {
    if (!(lr_mapping > 0)) throw ArgumentError("train config: lr_mapping must be > 0");
    if (lr_potential < 0) throw ArgumentError("train config: lr_potential must be >= 0");
    if (max_steps < 0) throw ArgumentError("train config: max_steps must be >= 0");
    if (batch_size < 1) throw ArgumentError("train config: batch_size must be >= 1");
    if (!(ema_decay >= 0 && ema_decay < 1))
      throw ArgumentError("train config: ema_decay must lie in [0,1)");
    if (weight_flow < 0 || weight_mapping < 0)
      throw ArgumentError("train config: loss weights must be >= 0");
    if (!(grad_clip > 0)) throw ArgumentError("train config: grad_clip must be > 0");
    if (weight_decay < 0) throw ArgumentError("train config: weight_decay must be >= 0");
    if (checkpoint_every < 0 || log_every < 1)
      throw ArgumentError("train config: bad checkpoint/log interval");
    if (max_failed_steps < 1)
      throw ArgumentError("train config: max_failed_steps must be >= 1");
    cost.validate();
  }
};

struct TrainStepRecord {
  std::int64_t step = 0;
  uot::LossBreakdown losses;
  double grad_norm_mapping = 0.0;
  double grad_norm_potential = 0.0;
  double wall_time = 0.0;
  bool failed = false;
};

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

template <typename S>
struct CheckpointData {
  std::string config_echo;  // resolved config text, stored as provenance
  std::int64_t step = 0;
  nn::MappingNetConfig mapping_cfg;
  nn::PotentialNetConfig potential_cfg;
  MtfSpec mtf;
  TrainConfig train_cfg;
  nn::Params<S> map_live, map_ema, pot_live, pot_ema;
  AdamW<S> adam_map, adam_pot;
  std::vector<ad::BatchNormState<S>> bn;
  Rng::State rng{0, false, 0.0};
  std::vector<std::uint64_t> perm;
  std::uint64_t cursor = 0;
  int consecutive_failures = 0;
};

namespace detail {

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename S>
void put_scalar(std::string& b, S v) {
  if constexpr (sizeof(S) == 4)
    io::put_f32(b, float(v));
  else
    io::put_f64(b, double(v));
}

template <typename S>
S get_scalar(io::Reader& r) {
  if constexpr (sizeof(S) == 4)
    return S(r.get_f32());
  else
    return S(r.get_f64());
}

template <typename S>
void put_tensor(std::string& b, const ad::Tensor<S>& t) {
  io::put_u8(b, std::uint8_t(t.rank()));
  for (int i = 0; i < t.rank(); ++i) io::put_i32(b, t.dim(i));
  for (std::int64_t i = 0; i < t.numel(); ++i) put_scalar<S>(b, t[i]);
}

template <typename S>
ad::Tensor<S> get_tensor(io::Reader& r) {
  const int rank = r.get_u8();
  std::vector<int> shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) shape[std::size_t(i)] = r.get_i32();
  ad::Tensor<S> t(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = get_scalar<S>(r);
  return t;
}

template <typename S>
void put_params(std::string& b, const nn::Params<S>& p) {
  io::put_u32(b, std::uint32_t(p.values.size()));
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    io::put_str(b, p.names[i]);
    put_tensor(b, p.values[i]);
  }
}

template <typename S>
nn::Params<S> get_params(io::Reader& r) {
  nn::Params<S> p;
  const std::uint32_t n = r.get_u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.get_str();
    p.add(std::move(name), get_tensor<S>(r));
  }
  return p;
}

template <typename S>
void put_tensors(std::string& b, const std::vector<ad::Tensor<S>>& ts) {
  io::put_u32(b, std::uint32_t(ts.size()));
  for (const auto& t : ts) put_tensor(b, t);
}

template <typename S>
std::vector<ad::Tensor<S>> get_tensors(io::Reader& r) {
  std::vector<ad::Tensor<S>> out(std::size_t(r.get_u32()));
  for (auto& t : out) t = get_tensor<S>(r);
  return out;
}

template <typename S>
void put_adam(std::string& b, const AdamW<S>& a) {
  io::put_i64(b, a.t);
  put_tensors(b, a.m);
  put_tensors(b, a.v);
}

template <typename S>
AdamW<S> get_adam(io::Reader& r) {
  AdamW<S> a;
  a.t = r.get_i64();
  a.m = get_tensors<S>(r);
  a.v = get_tensors<S>(r);
  return a;
}

inline void put_mapping_cfg(std::string& b, const nn::MappingNetConfig& c) {
  io::put_i32(b, c.base_channels);
  io::put_i32(b, c.levels);
  io::put_i32(b, c.blocks_per_level);
  io::put_i32(b, c.attention_window);
  io::put_i32(b, c.heads);
  io::put_i32(b, c.cond_bands);
  io::put_i32(b, c.out_bands);
  io::put_i32(b, c.time_embed_dim);
}

inline nn::MappingNetConfig get_mapping_cfg(io::Reader& r) {
  nn::MappingNetConfig c;
  c.base_channels = r.get_i32();
  c.levels = r.get_i32();
  c.blocks_per_level = r.get_i32();
  c.attention_window = r.get_i32();
  c.heads = r.get_i32();
  c.cond_bands = r.get_i32();
  c.out_bands = r.get_i32();
  c.time_embed_dim = r.get_i32();
  return c;
}

inline void put_potential_cfg(std::string& b, const nn::PotentialNetConfig& c) {
  io::put_i32(b, c.channels);
  io::put_i32(b, c.blocks);
  io::put_i32(b, c.in_bands);
  io::put_i32(b, c.time_embed_dim);
}

inline nn::PotentialNetConfig get_potential_cfg(io::Reader& r) {
  nn::PotentialNetConfig c;
  c.channels = r.get_i32();
  c.blocks = r.get_i32();
  c.in_bands = r.get_i32();
  c.time_embed_dim = r.get_i32();
  return c;
}

inline void put_mtf(std::string& b, const MtfSpec& m) {
  io::put_u32(b, std::uint32_t(m.ms_gains.size()));
  for (double g : m.ms_gains) io::put_f64(b, g);
  io::put_f64(b, m.pan_gain);
  io::put_i32(b, m.kernel_size);
  io::put_i32(b, m.ratio);
}

inline MtfSpec get_mtf(io::Reader& r) {
  MtfSpec m;
  m.ms_gains.assign(std::size_t(r.get_u32()), 0.0);
  for (double& g : m.ms_gains) g = r.get_f64();
  m.pan_gain = r.get_f64();
  m.kernel_size = r.get_i32();
  m.ratio = r.get_i32();
  return m;
}

inline void put_train_cfg(std::string& b, const TrainConfig& c) {
  io::put_f64(b, c.lr_mapping);
  io::put_f64(b, c.lr_potential);
  io::put_i64(b, c.max_steps);
  io::put_i32(b, c.batch_size);
  io::put_f64(b, c.ema_decay);
  io::put_u64(b, c.seed);
  io::put_f64(b, c.cost.lambda_base);
  io::put_f64(b, c.cost.lambda_spatial);
  io::put_f64(b, c.cost.lambda_spectral);
  io::put_u8(b, std::uint8_t(c.cost.spectral_variant));
  io::put_f64(b, c.cost.exp_clamp);
  io::put_f64(b, c.weight_flow);
  io::put_f64(b, c.weight_mapping);
  io::put_i64(b, c.checkpoint_every);
  io::put_i64(b, c.log_every);
  io::put_f64(b, c.grad_clip);
  io::put_f64(b, c.weight_decay);
  io::put_i32(b, c.max_failed_steps);
  io::put_u8(b, c.condition_potential ? 1 : 0);
}

inline TrainConfig get_train_cfg(io::Reader& r) {
  TrainConfig c;
  c.lr_mapping = r.get_f64();
  c.lr_potential = r.get_f64();
  c.max_steps = r.get_i64();
  c.batch_size = r.get_i32();
  c.ema_decay = r.get_f64();
  c.seed = r.get_u64();
  c.cost.lambda_base = r.get_f64();
  c.cost.lambda_spatial = r.get_f64();
  c.cost.lambda_spectral = r.get_f64();
  c.cost.spectral_variant = uot::SpectralVariant(r.get_u8());
  c.cost.exp_clamp = r.get_f64();
  c.weight_flow = r.get_f64();
  c.weight_mapping = r.get_f64();
  c.checkpoint_every = r.get_i64();
  c.log_every = r.get_i64();
  c.grad_clip = r.get_f64();
  c.weight_decay = r.get_f64();
  c.max_failed_steps = r.get_i32();
  c.condition_potential = r.get_u8() != 0;
  return c;
}

}  // namespace detail

// Atomic write: serialize, write to a temp file, rename into place. The
// trailing fnv1a64 checksum covers the whole payload.
template <typename S>
void save_checkpoint(const std::string& path, const CheckpointData<S>& ck) {
  std::string payload;
  io::put_str(payload, ck.config_echo);
  io::put_i64(payload, ck.step);
  detail::put_mapping_cfg(payload, ck.mapping_cfg);
  detail::put_potential_cfg(payload, ck.potential_cfg);
  detail::put_mtf(payload, ck.mtf);
  detail::put_train_cfg(payload, ck.train_cfg);
  detail::put_params(payload, ck.map_live);
  detail::put_params(payload, ck.map_ema);
  detail::put_params(payload, ck.pot_live);
  detail::put_params(payload, ck.pot_ema);
  detail::put_adam(payload, ck.adam_map);
  detail::put_adam(payload, ck.adam_pot);
  io::put_u32(payload, std::uint32_t(ck.bn.size()));
  for (const auto& s : ck.bn) {
    detail::put_tensor(payload, s.running_mean);
    detail::put_tensor(payload, s.running_var);
  }
  io::put_u64(payload, ck.rng.state);
  io::put_u8(payload, ck.rng.have_cached ? 1 : 0);
  io::put_f64(payload, ck.rng.cached);
  io::put_u64(payload, std::uint64_t(ck.perm.size()));
  for (std::uint64_t v : ck.perm) io::put_u64(payload, v);
  io::put_u64(payload, ck.cursor);
  io::put_i32(payload, ck.consecutive_failures);

  std::string file;
  file.append("OTCK");
  io::put_u32(file, detail::kCheckpointVersion);
  io::put_u8(file, std::uint8_t(sizeof(S)));
  io::put_u64(file, payload.size());
  file.append(payload);
  io::put_u64(file, fnv1a64(payload.data(), payload.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open " + tmp);
    os.write(file.data(), std::streamsize(file.size()));
    if (!os) throw DataError("checkpoint: short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename S>
CheckpointData<S> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  std::string file((std::istreambuf_iterator<char>(is)),
                   std::istreambuf_iterator<char>());

  if (file.size() < 25 || file.compare(0, 4, "OTCK") != 0)
    throw DataError("checkpoint: bad magic in " + path);
  io::Reader hr(file);
  hr.get_u32();  // magic bytes, validated above
  if (hr.get_u32() != detail::kCheckpointVersion)
    throw DataError("checkpoint: unsupported version in " + path);
  if (hr.get_u8() != sizeof(S))
    throw DataError("checkpoint: precision mismatch in " + path);
  const std::uint64_t n = hr.get_u64();
  if (hr.remaining() != n + 8) throw DataError("checkpoint: truncated " + path);
  const std::string payload = file.substr(hr.pos(), n);
  const std::string tail = file.substr(file.size() - 8);
  io::Reader cr(tail);
  if (cr.get_u64() != fnv1a64(payload.data(), payload.size()))
    throw DataError("checkpoint: checksum mismatch in " + path);

  io::Reader p(payload);
  CheckpointData<S> ck;
  ck.config_echo = p.get_str();
  ck.step = p.get_i64();
  ck.mapping_cfg = detail::get_mapping_cfg(p);
  ck.potential_cfg = detail::get_potential_cfg(p);
  ck.mtf = detail::get_mtf(p);
  ck.train_cfg = detail::get_train_cfg(p);
  ck.map_live = detail::get_params<S>(p);
  ck.map_ema = detail::get_params<S>(p);
  ck.pot_live = detail::get_params<S>(p);
  ck.pot_ema = detail::get_params<S>(p);
  ck.adam_map = detail::get_adam<S>(p);
  ck.adam_pot = detail::get_adam<S>(p);
  ck.bn.assign(std::size_t(p.get_u32()), ad::BatchNormState<S>());
  for (auto& s : ck.bn) {
    s.running_mean = detail::get_tensor<S>(p);
    s.running_var = detail::get_tensor<S>(p);
  }
  ck.rng.state = p.get_u64();
  ck.rng.have_cached = p.get_u8() != 0;
  ck.rng.cached = p.get_f64();
  ck.perm.assign(std::size_t(p.get_u64()), 0);
  for (auto& v : ck.perm) v = p.get_u64();
  ck.cursor = p.get_u64();
  ck.consecutive_failures = p.get_i32();
  return ck;
}

// Mapping network rebuilt from a checkpoint; EMA weights are the inference
// default. Throws when the stored parameters do not fit the stored config.
template <typename S>
nn::MappingNet<S> mapping_from_checkpoint(const CheckpointData<S>& ck, bool use_ema) {
  Rng init_rng(0);
  nn::MappingNet<S> net(ck.mapping_cfg, init_rng);
  const nn::Params<S>& src = use_ema ? ck.map_ema : ck.map_live;
  if (!net.params.same_structure(src))
    throw DataError("checkpoint: mapping parameters do not match architecture");
  net.params = src;
  return net;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <typename S>
class Trainer {
 public:
  Trainer(const nn::MappingNetConfig& mcfg, nn::PotentialNetConfig pcfg,
          const TrainConfig& tcfg, const MtfSpec& mtf)
      : cfg_(tcfg), mtf_(mtf), rng_(tcfg.seed) {
    cfg_.validate();
    pcfg = resolve_potential_bands(mcfg, pcfg, cfg_.condition_potential);
    mapping_ = std::make_unique<nn::MappingNet<S>>(mcfg, rng_);
    potential_ = std::make_unique<nn::PotentialNet<S>>(pcfg, rng_);
    map_ema_ = mapping_->params;
    pot_ema_ = potential_->params;
    adam_map_.init(mapping_->params);
    adam_pot_.init(potential_->params);
  }

  explicit Trainer(const CheckpointData<S>& ck)
      : cfg_(ck.train_cfg), mtf_(ck.mtf), rng_(0) {
    cfg_.validate();
    Rng init_rng(cfg_.seed);
    mapping_ = std::make_unique<nn::MappingNet<S>>(ck.mapping_cfg, init_rng);
    potential_ = std::make_unique<nn::PotentialNet<S>>(ck.potential_cfg, init_rng);
    if (!mapping_->params.same_structure(ck.map_live) ||
        !potential_->params.same_structure(ck.pot_live))
      throw DataError("checkpoint: parameters do not match architecture");
    mapping_->params = ck.map_live;
    potential_->params = ck.pot_live;
    map_ema_ = ck.map_ema;
    pot_ema_ = ck.pot_ema;
    adam_map_ = ck.adam_map;
    adam_pot_ = ck.adam_pot;
    if (ck.bn.size() != potential_->bn.size())
      throw DataError("checkpoint: batch-norm state count mismatch");
    potential_->bn = ck.bn;
    rng_.load_state(ck.rng);
    perm_ = ck.perm;
    cursor_ = ck.cursor;
    consecutive_failures_ = ck.consecutive_failures;
    step_ = ck.step;
  }

  // Prepares every triplet up front. Resuming keeps the stored epoch state as
  // long as the dataset size is unchanged; the caller must supply the same
  // manifest order for bit-exact continuation.
  void set_dataset(const std::vector<SampleTriplet>& triplets) {
    if (triplets.empty()) throw ArgumentError("trainer: empty dataset");
    if (std::size_t(cfg_.batch_size) > triplets.size())
      throw ArgumentError("trainer: batch size exceeds dataset size");
    dataset_.clear();
    dataset_.reserve(triplets.size());
    for (const auto& t : triplets)
      dataset_.push_back(uot::prepare_sample<S>(t, mtf_, true));
    if (perm_.size() != dataset_.size()) {
      perm_.resize(dataset_.size());
      for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
      cursor_ = perm_.size();  // forces a shuffle before the first batch
    }
  }

  TrainStepRecord train_step() {
    if (dataset_.empty()) throw ArgumentError("trainer: dataset not set");
    const auto wall0 = std::chrono::steady_clock::now();
    TrainStepRecord rec;
    rec.step = step_ + 1;

    const bool need_cost = cfg_.weight_mapping > 0 || cfg_.lr_potential > 0;
    const bool need_lt = cfg_.weight_mapping > 0;
    const bool train_pot = cfg_.lr_potential > 0;

    std::vector<const uot::PreparedSample<S>*> ptrs;
    for (std::uint64_t i : next_batch()) ptrs.push_back(&dataset_[std::size_t(i)]);
    uot::TrainBatch<S> batch = uot::gather_batch<S>(ptrs, mtf_, need_cost, true);
    const int N = batch.y0.dim(0);

    ad::Tensor<S> t({N});
    for (int n = 0; n < N; ++n) t[n] = S(rng_.uniform());

    Snapshot snap = take_snapshot();
    try {
      ad::Tensor<S> y_t = flow::interpolate(batch.y0, batch.y1, t);
      ad::Tensor<S> v_star = flow::velocity_target(batch.y0, batch.y1);
      auto pm = mapping_->params.bind(true);
      ad::Var<S> s =
          mapping_->forward(pm, ad::leaf<S>(y_t), t, ad::leaf<S>(batch.cond));
      ad::Var<S> l_flow = ad::mean_all(ad::mse_per_sample(s, ad::leaf<S>(v_star)));
      rec.losses.flow = double(l_flow->v[0]);

      ad::Var<S> y1_hat;
      uot::CostResult<S> cost;
      if (need_cost) {
        y1_hat = ad::axpy_per_sample(y_t, t, s);
        cost = uot::regularized_cost(y1_hat, batch.cost, cfg_.cost);
        rec.losses.cost_terms = cost.terms;
      }
      ad::Var<S> total = ad::scale(l_flow, S(cfg_.weight_flow));
      if (need_lt) {
        auto pf = potential_->params.bind(false);
        ad::Var<S> v_fake =
            potential_->forward(pf, potential_input(y1_hat, batch), t, true);
        ad::Var<S> l_t = uot::mapping_loss(cost.per_sample, v_fake);
        rec.losses.mapping = double(l_t->v[0]);
        total = ad::add(total, ad::scale(l_t, S(cfg_.weight_mapping)));
      }
      ad::backward(total);
      auto grads = collect_grads(pm);
      rec.grad_norm_mapping = clip_global_norm(grads, cfg_.grad_clip);
      ensure_finite(rec.losses.flow, "flow loss");
      if (need_lt) ensure_finite(rec.losses.mapping, "mapping loss");
      ensure_finite(rec.grad_norm_mapping, "mapping gradients");
      adam_map_.step(mapping_->params, grads, cfg_.lr_mapping, cfg_.weight_decay);
      nn::ema_update(map_ema_, mapping_->params, S(cfg_.ema_decay));

      if (train_pot) {
        auto pf = potential_->params.bind(true);
        ad::Var<S> fake_in =
            potential_input(ad::leaf<S>(y1_hat->v), batch);  // endpoint detached
        ad::Var<S> v_fake = potential_->forward(pf, fake_in, t, true);
        ad::Var<S> v_real =
            potential_->forward(pf, potential_input(ad::leaf<S>(batch.y1), batch), t, true);
        ad::Var<S> l_v =
            uot::potential_loss(cost.per_sample->v, v_fake, v_real, cfg_.cost);
        rec.losses.potential = double(l_v->v[0]);
        ad::backward(l_v);
        auto pgrads = collect_grads(pf);
        rec.grad_norm_potential = clip_global_norm(pgrads, cfg_.grad_clip);
        ensure_finite(rec.losses.potential, "potential loss");
        ensure_finite(rec.grad_norm_potential, "potential gradients");
        adam_pot_.step(potential_->params, pgrads, cfg_.lr_potential, cfg_.weight_decay);
        nn::ema_update(pot_ema_, potential_->params, S(cfg_.ema_decay));
      }
      consecutive_failures_ = 0;
    } catch (const NumericError& e) {
      restore_snapshot(snap);
      rec.failed = true;
      last_failure_ = e.what();
      ++consecutive_failures_;
    }

    ++step_;
    rec.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    return rec;
  }

  // Drives train_step to max_steps. sink(record) sees every step;
  // checkpoint_sink(trainer) fires on checkpoint_every boundaries and is
  // skipped when the interval is 0.
  template <typename RecordSink, typename CheckpointSink>
  void run(RecordSink&& sink, CheckpointSink&& checkpoint_sink) {
    while (step_ < cfg_.max_steps) {
      TrainStepRecord rec = train_step();
      sink(rec);
      if (consecutive_failures_ >= cfg_.max_failed_steps)
        throw NumericError("training aborted after " +
                           std::to_string(consecutive_failures_) +
                           " consecutive failed steps; last: " + last_failure_);
      if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0)
        checkpoint_sink(*this);
    }
  }

  CheckpointData<S> checkpoint(std::string config_echo) const {
    CheckpointData<S> ck;
    ck.config_echo = std::move(config_echo);
    ck.step = step_;
    ck.mapping_cfg = mapping_->cfg;
    ck.potential_cfg = potential_->cfg;
    ck.mtf = mtf_;
    ck.train_cfg = cfg_;
    ck.map_live = mapping_->params;
    ck.map_ema = map_ema_;
    ck.pot_live = potential_->params;
    ck.pot_ema = pot_ema_;
    ck.adam_map = adam_map_;
    ck.adam_pot = adam_pot_;
    ck.bn = potential_->bn;
    ck.rng = rng_.save_state();
    ck.perm = perm_;
    ck.cursor = cursor_;
    ck.consecutive_failures = consecutive_failures_;
    return ck;
  }

  const nn::MappingNet<S>& mapping() const { return *mapping_; }
  const nn::PotentialNet<S>& potential() const { return *potential_; }
  nn::MappingNet<S>& mapping() { return *mapping_; }
  const nn::Params<S>& mapping_ema() const { return map_ema_; }
  const nn::Params<S>& potential_ema() const { return pot_ema_; }
  std::int64_t step_count() const { return step_; }
  int consecutive_failures() const { return consecutive_failures_; }
  const TrainConfig& config() const { return cfg_; }

  static nn::PotentialNetConfig resolve_potential_bands(
      const nn::MappingNetConfig& mcfg, nn::PotentialNetConfig pcfg,
      bool condition_potential) {
    const int expected =
        mcfg.out_bands + (condition_potential ? mcfg.cond_bands : 0);
    if (pcfg.in_bands == 0) pcfg.in_bands = expected;
    if (pcfg.in_bands != expected)
      throw ArgumentError("trainer: potential in_bands must be " +
                          std::to_string(expected));
    return pcfg;
  }

 private:
  struct Snapshot {
    std::vector<ad::Tensor<S>> map_p, pot_p, map_e, pot_e;
    AdamW<S> am, ap;
    std::vector<ad::BatchNormState<S>> bn;
  };

  Snapshot take_snapshot() const {
    return {mapping_->params.values, potential_->params.values, map_ema_.values,
            pot_ema_.values,         adam_map_,                 adam_pot_,
            potential_->bn};
  }

  void restore_snapshot(const Snapshot& s) {
    mapping_->params.values = s.map_p;
    potential_->params.values = s.pot_p;
    map_ema_.values = s.map_e;
    pot_ema_.values = s.pot_e;
    adam_map_ = s.am;
    adam_pot_ = s.ap;
    potential_->bn = s.bn;
  }

  std::vector<std::uint64_t> next_batch() {
    const std::size_t n = dataset_.size();
    const std::size_t b = std::size_t(cfg_.batch_size);
    if (cursor_ + b > n) {
      rng_.shuffle(perm_);
      cursor_ = 0;
    }
    std::vector<std::uint64_t> idx(perm_.begin() + std::ptrdiff_t(cursor_),
                                   perm_.begin() + std::ptrdiff_t(cursor_ + b));
    cursor_ += b;
    return idx;
  }

  ad::Var<S> potential_input(const ad::Var<S>& y, const uot::TrainBatch<S>& batch) {
    if (!cfg_.condition_potential) return y;
    return ad::concat_channels(y, ad::leaf<S>(batch.cond));
  }

  static void ensure_finite(double v, const char* what) {
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite ") + what);
  }

  TrainConfig cfg_;
  MtfSpec mtf_;
  Rng rng_;
  std::unique_ptr<nn::MappingNet<S>> mapping_;
  std::unique_ptr<nn::PotentialNet<S>> potential_;
  nn::Params<S> map_ema_, pot_ema_;
  AdamW<S> adam_map_, adam_pot_;
  std::vector<uot::PreparedSample<S>> dataset_;
  std::vector<std::uint64_t> perm_;
  std::uint64_t cursor_ = 0;
  std::int64_t step_ = 0;
  int consecutive_failures_ = 0;
  std::string last_failure_;
};

// One machine-parseable line per record.
inline std::string format_record(const TrainStepRecord& rec) {
  char buf[256];
  if (rec.failed) {
    std::snprintf(buf, sizeof(buf), "step=%lld failed=1",
                  static_cast<long long>(rec.step));
  } else {
    std::snprintf(buf, sizeof(buf), "step=%lld flow=%.9e map=%.9e pot=%.9e",
                  static_cast<long long>(rec.step), rec.losses.flow,
                  rec.losses.mapping, rec.losses.potential);
  }
  return buf;
}

// Loads every triplet named by the manifest, trains to max_steps, and writes
// the final checkpoint (plus periodic overwrites) to checkpoint_path when
// non-empty. Returns the final state.
template <typename S>
CheckpointData<S> train_loop(const std::string& manifest_path,
                             const nn::MappingNetConfig& mcfg,
                             const nn::PotentialNetConfig& pcfg,
                             const TrainConfig& tcfg, const MtfSpec& mtf,
                             const std::string& checkpoint_path,
                             const std::string& config_echo, std::ostream* log) {
  DatasetManifest manifest = load_manifest(manifest_path);
  if (manifest.entries.empty()) throw DataError("train: manifest has no entries");
  std::vector<SampleTriplet> triplets;
  triplets.reserve(manifest.entries.size());
  for (const auto& entry : manifest.entries)
    triplets.push_back(load_triplet(resolve_entry(manifest_path, entry)));

  Trainer<S> trainer(mcfg, pcfg, tcfg, mtf);
  trainer.set_dataset(triplets);
  trainer.run(
      [&](const TrainStepRecord& rec) {
        if (log && (rec.failed || rec.step == 1 || rec.step % tcfg.log_every == 0))
          *log << format_record(rec) << "\n";
      },
      [&](const Trainer<S>& t) {
        if (!checkpoint_path.empty())
          save_checkpoint(checkpoint_path, t.checkpoint(config_echo));
      });
  CheckpointData<S> final_ck = trainer.checkpoint(config_echo);
  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, final_ck);
  return final_ck;
}

}  // namespace otfm::train
