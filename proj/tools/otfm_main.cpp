#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "otfm/config.hpp"
#include "otfm/metrics.hpp"
#include "otfm/sampler.hpp"
#include "otfm/synth.hpp"
#include "otfm/trainer.hpp"

namespace fs = std::filesystem;
using namespace otfm;

namespace {

// Machine-parseable failure line; the exit code mirrors the error class.
void emit_error(const char* cls, const std::string& msg) {
  std::cerr << "error=" << cls << " message=\"" << msg << "\"\n";
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const ArgumentError& e) {
    emit_error("usage", e.what());
    return 2;
  } catch (const DataError& e) {
    emit_error("data", e.what());
    return 3;
  } catch (const NumericError& e) {
    emit_error("numeric", e.what());
    return 4;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 1;
  }
}

// Duplicates the log stream to console and file.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c != traits_type::eof()) {
      if (a_) a_->sputc(traits_type::to_char_type(c));
      if (b_) b_->sputc(traits_type::to_char_type(c));
    }
    return c;
  }
  int sync() override {
    if (a_) a_->pubsync();
    if (b_) b_->pubsync();
    return 0;
  }

 private:
  std::streambuf *a_, *b_;
};

std::string real_str(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

// Full effective configuration, every key explicit; written to run.txt and
// embedded in checkpoints so a run can be reproduced from either.
std::string resolved_config(const nn::MappingNetConfig& m,
                            const nn::PotentialNetConfig& p,
                            const train::TrainConfig& t, const MtfSpec& mtf) {
  config::ConfigFile cf;
  auto set = [&](const std::string& k, const std::string& v) {
    config::apply_override(cf, k + "=" + v);
  };
  set("mapping.base_channels", std::to_string(m.base_channels));
  set("mapping.levels", std::to_string(m.levels));
  set("mapping.blocks_per_level", std::to_string(m.blocks_per_level));
  set("mapping.attention_window", std::to_string(m.attention_window));
  set("mapping.heads", std::to_string(m.heads));
  set("mapping.time_embed_dim", std::to_string(m.time_embed_dim));
  set("potential.channels", std::to_string(p.channels));
  set("potential.blocks", std::to_string(p.blocks));
  set("potential.in_bands", std::to_string(p.in_bands));
  set("potential.time_embed_dim", std::to_string(p.time_embed_dim));
  set("train.lr_mapping", real_str(t.lr_mapping));
  set("train.lr_potential", real_str(t.lr_potential));
  set("train.max_steps", std::to_string(t.max_steps));
  set("train.batch_size", std::to_string(t.batch_size));
  set("train.ema_decay", real_str(t.ema_decay));
  set("train.seed", std::to_string(t.seed));
  set("train.weight_flow", real_str(t.weight_flow));
  set("train.weight_mapping", real_str(t.weight_mapping));
  set("train.checkpoint_every", std::to_string(t.checkpoint_every));
  set("train.log_every", std::to_string(t.log_every));
  set("train.grad_clip", real_str(t.grad_clip));
  set("train.weight_decay", real_str(t.weight_decay));
  set("train.max_failed_steps", std::to_string(t.max_failed_steps));
  set("train.condition_potential", t.condition_potential ? "true" : "false");
  set("cost.lambda_base", real_str(t.cost.lambda_base));
  set("cost.lambda_spatial", real_str(t.cost.lambda_spatial));
  set("cost.lambda_spectral", real_str(t.cost.lambda_spectral));
  set("cost.exp_clamp", real_str(t.cost.exp_clamp));
  set("cost.spectral_variant",
      t.cost.spectral_variant == uot::SpectralVariant::observation
          ? "observation"
          : "detail_ratio");
  std::string gains;
  for (std::size_t i = 0; i < mtf.ms_gains.size(); ++i)
    gains += (i ? "," : "") + real_str(mtf.ms_gains[i]);
  set("mtf.ms_gains", gains);
  set("mtf.pan_gain", real_str(mtf.pan_gain));
  set("mtf.kernel_size", std::to_string(mtf.kernel_size));
  set("mtf.ratio", std::to_string(mtf.ratio));
  return config::render_config(cf);
}

void reject_unknown_keys(const config::ConfigFile& cf) {
  auto leftover = cf.unconsumed();
  if (leftover.empty()) return;
  throw DataError("config: unknown key '" + leftover.front().first + "' (line " +
                  std::to_string(leftover.front().second) + ")");
}

// Precision byte of the checkpoint header: 4 = float, 8 = double.
int checkpoint_precision(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char head[9];
  f.read(head, 9);
  if (f.gcount() != 9 || std::memcmp(head, "OTCK", 4) != 0)
    throw DataError("not a checkpoint file: " + path);
  const int prec = int(static_cast<unsigned char>(head[8]));
  if (prec != 4 && prec != 8)
    throw DataError("unsupported checkpoint precision: " + path);
  return prec;
}

std::vector<int> parse_steps_list(const std::string& spec) {
  std::vector<int> out;
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ArgumentError("--steps expects a comma-separated integer list");
    }
  }
  if (out.empty()) throw ArgumentError("--steps list is empty");
  return out;
}

int manifest_bands(const std::string& manifest_path) {
  DatasetManifest m = load_manifest(manifest_path);
  if (m.bands > 0) return m.bands;
  if (m.entries.empty()) throw DataError("manifest has no entries");
  return load_triplet(resolve_entry(manifest_path, m.entries.front())).lrms.bands;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 0;
  int count = 8;
  int bands = 4;
  int hr_size = 64;
  int ratio = 4;
  std::string out_dir;
  bool force = false;
};

void cmd_synth(const SynthArgs& a) {
  if (a.count < 1) throw ArgumentError("--count must be >= 1");
  fs::path dir(a.out_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !a.force)
    throw DataError("output directory not empty (use --force): " + a.out_dir);
  fs::create_directories(dir);

  DatasetManifest manifest;
  manifest.ratio = a.ratio;
  manifest.bands = a.bands;
  for (int i = 0; i < a.count; ++i) {
    SampleTriplet t = synth_scene(a.seed + std::uint64_t(i), a.bands, a.hr_size, a.ratio);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "scene_%04d", i);
    save_triplet(t, (dir / stem).string());
    manifest.entries.push_back(stem);
  }
  save_manifest(manifest, (dir / "manifest.txt").string());
  std::cout << "wrote " << a.count << " triplets to " << a.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// degrade
// ---------------------------------------------------------------------------

struct DegradeArgs {
  std::string in_stem;
  std::string out_stem;
  int ratio = 0;  // 0 = use the pair's own scale factor
  std::string sensor;
};

void cmd_degrade(const DegradeArgs& a) {
  SampleTriplet in = load_triplet(a.in_stem);
  const int r = in.ratio;
  if (a.ratio != 0 && a.ratio != r)
    throw DataError("--ratio " + std::to_string(a.ratio) +
                    " does not match the input pair's scale factor " +
                    std::to_string(r));
  MtfSpec mtf;
  mtf.ratio = r;

  // Wald protocol: degrade the pair by its own ratio so the input MS becomes
  // the reference for the degraded pair.
  SampleTriplet out;
  out.ratio = r;
  out.pan = degrade_spatial(in.pan, mtf);
  out.lrms = degrade_spatial(in.lrms, mtf);
  out.hrms_ref = in.lrms;
  if (!a.sensor.empty()) {
    out.pan.sensor_tag = a.sensor;
    out.lrms.sensor_tag = a.sensor;
    out.hrms_ref->sensor_tag = a.sensor;
  }
  out.validate();
  save_triplet(out, a.out_stem);
  std::cout << "wrote reduced-resolution triplet " << a.out_stem << " (ratio "
            << r << ")\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string manifest;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::int64_t max_steps = -1;  // <0 = from config
  std::int64_t seed = -1;
  std::string sensor;
  std::string resume;
  std::string precision = "float";
};

template <typename S>
void train_fresh(const TrainArgs& a, config::ConfigFile& cf) {
  nn::MappingNetConfig mcfg = config::mapping_config(cf);
  nn::PotentialNetConfig pcfg = config::potential_config(cf);
  train::TrainConfig tcfg = config::train_config(cf);
  MtfSpec mtf = config::mtf_config(cf, a.sensor);
  reject_unknown_keys(cf);

  const int bands = manifest_bands(a.manifest);
  mcfg.out_bands = bands;
  mcfg.cond_bands = bands + 1;

  fs::create_directories(a.out_dir);
  const std::string echo = resolved_config(mcfg, pcfg, tcfg, mtf);
  {
    std::ofstream run((fs::path(a.out_dir) / "run.txt").string(), std::ios::trunc);
    if (!run) throw DataError("cannot write run.txt under " + a.out_dir);
    run << echo;
  }

  std::ofstream log_file((fs::path(a.out_dir) / "log.txt").string(), std::ios::trunc);
  if (!log_file) throw DataError("cannot write log.txt under " + a.out_dir);
  TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);

  const std::string ck_path = (fs::path(a.out_dir) / "checkpoint.otfm").string();
  train::train_loop<S>(a.manifest, mcfg, pcfg, tcfg, mtf, ck_path, echo, &log);
  std::cout << "checkpoint " << ck_path << "\n";
}

template <typename S>
void train_resume(const TrainArgs& a) {
  train::CheckpointData<S> ck = train::load_checkpoint<S>(a.resume);
  if (a.max_steps >= 0) {
    ck.train_cfg.max_steps = a.max_steps;
    // Keep the provenance echo in sync with the effective horizon.
    config::ConfigFile echo = config::parse_config(ck.config_echo);
    config::apply_override(echo,
                           "train.max_steps=" + std::to_string(a.max_steps));
    ck.config_echo = config::render_config(echo);
  }

  DatasetManifest manifest = load_manifest(a.manifest);
  if (manifest.entries.empty()) throw DataError("train: manifest has no entries");
  std::vector<SampleTriplet> triplets;
  for (const auto& entry : manifest.entries)
    triplets.push_back(load_triplet(resolve_entry(a.manifest, entry)));

  train::Trainer<S> trainer(ck);
  trainer.set_dataset(triplets);

  fs::create_directories(a.out_dir);
  {
    std::ofstream run((fs::path(a.out_dir) / "run.txt").string(), std::ios::trunc);
    if (!run) throw DataError("cannot write run.txt under " + a.out_dir);
    run << ck.config_echo;
  }
  std::ofstream log_file((fs::path(a.out_dir) / "log.txt").string(), std::ios::trunc);
  TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
  std::ostream log(&tee);

  const std::string ck_path = (fs::path(a.out_dir) / "checkpoint.otfm").string();
  trainer.run(
      [&](const train::TrainStepRecord& rec) {
        if (rec.failed || rec.step == 1 ||
            rec.step % ck.train_cfg.log_every == 0)
          log << train::format_record(rec) << "\n";
      },
      [&](const train::Trainer<S>& t) {
        save_checkpoint(ck_path, t.checkpoint(ck.config_echo));
      });
  save_checkpoint(ck_path, trainer.checkpoint(ck.config_echo));
  std::cout << "checkpoint " << ck_path << "\n";
}

void cmd_train(const TrainArgs& a) {
  if (!a.resume.empty()) {
    if (!a.config_path.empty() || !a.overrides.empty() || a.seed >= 0)
      throw ArgumentError(
          "--resume uses the checkpoint's embedded config; only --max-steps "
          "may be overridden");
    const int prec = checkpoint_precision(a.resume);
    if (prec == 4)
      train_resume<float>(a);
    else
      train_resume<double>(a);
    return;
  }

  config::ConfigFile cf;
  if (!a.config_path.empty()) cf = config::load_config(a.config_path);
  for (const std::string& o : a.overrides) config::apply_override(cf, o);
  if (a.max_steps >= 0)
    config::apply_override(cf, "train.max_steps=" + std::to_string(a.max_steps));
  if (a.seed >= 0)
    config::apply_override(cf, "train.seed=" + std::to_string(a.seed));

  if (a.precision == "float")
    train_fresh<float>(a, cf);
  else if (a.precision == "double")
    train_fresh<double>(a, cf);
  else
    throw ArgumentError("--precision must be float or double");
}

// ---------------------------------------------------------------------------
// fuse / eval / bench
// ---------------------------------------------------------------------------

struct FuseArgs {
  std::string checkpoint;
  std::string in_stem;
  std::string out_path;
  int steps = 1;
  bool live = false;
};

template <typename S>
void fuse_with(const FuseArgs& a) {
  train::CheckpointData<S> ck = train::load_checkpoint<S>(a.checkpoint);
  SampleTriplet t = load_triplet(a.in_stem);
  sample::FusionRequest req;
  req.pan = t.pan;
  req.lrms = t.lrms;
  req.steps = a.steps;
  req.use_ema = !a.live;
  RasterImage fused = sample::fuse(req, ck);
  save_raster(fused, a.out_path);
  std::cout << "fused " << a.in_stem << " -> " << a.out_path << " (steps "
            << a.steps << ")\n";
}

void cmd_fuse(const FuseArgs& a) {
  if (checkpoint_precision(a.checkpoint) == 4)
    fuse_with<float>(a);
  else
    fuse_with<double>(a);
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string protocol = "reduced";
  std::string out_dir;
};

template <typename S>
void eval_with(const EvalArgs& a) {
  metrics::Protocol protocol;
  if (a.protocol == "reduced")
    protocol = metrics::Protocol::reduced;
  else if (a.protocol == "full")
    protocol = metrics::Protocol::full;
  else
    throw ArgumentError("--protocol must be reduced or full");

  train::CheckpointData<S> ck = train::load_checkpoint<S>(a.checkpoint);
  metrics::MetricReport report = metrics::evaluate(a.manifest, ck, protocol);
  const std::string table = metrics::report_table(report);
  const std::string lines = metrics::report_lines(report);
  std::cout << table << lines;
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    std::ofstream f((fs::path(a.out_dir) / "report.txt").string(), std::ios::trunc);
    if (!f) throw DataError("cannot write report under " + a.out_dir);
    f << table << lines;
  }
}

void cmd_eval(const EvalArgs& a) {
  if (checkpoint_precision(a.checkpoint) == 4)
    eval_with<float>(a);
  else
    eval_with<double>(a);
}

struct BenchArgs {
  std::string checkpoint;
  int hr_size = 256;
  std::string steps = "1,25";
  int repeats = 5;
};

template <typename S>
void bench_with(const BenchArgs& a) {
  train::CheckpointData<S> ck = train::load_checkpoint<S>(a.checkpoint);
  auto table = sample::bench_latency(ck, a.hr_size, parse_steps_list(a.steps),
                                     a.repeats);
  for (const auto& row : table) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "steps=%d median=%.6f cov=%.4f\n", row.steps,
                  row.median_seconds, row.cov);
    std::cout << buf;
  }
}

void cmd_bench(const BenchArgs& a) {
  if (checkpoint_precision(a.checkpoint) == 4)
    bench_with<float>(a);
  else
    bench_with<double>(a);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multispectral/panchromatic fusion: one-step flow models "
               "trained with a transport-regularized objective"};
  app.require_subcommand(1);

  SynthArgs synth;
  CLI::App* s_synth = app.add_subcommand("synth", "Generate synthetic training triplets");
  s_synth->add_option("--seed", synth.seed, "Base RNG seed")->capture_default_str();
  s_synth->add_option("--count", synth.count, "Number of triplets")->capture_default_str();
  s_synth->add_option("--bands", synth.bands, "Multispectral band count")->capture_default_str();
  s_synth->add_option("--hr-size", synth.hr_size, "High-resolution edge length")->capture_default_str();
  s_synth->add_option("--ratio", synth.ratio, "Resolution ratio PAN:MS")->capture_default_str();
  s_synth->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  s_synth->add_flag("--force", synth.force, "Write into a non-empty directory");

  DegradeArgs degrade;
  CLI::App* s_degrade =
      app.add_subcommand("degrade", "Reduce a (pan, ms) pair for reference-based evaluation");
  s_degrade->add_option("--in", degrade.in_stem, "Input triplet stem")->required();
  s_degrade->add_option("--out", degrade.out_stem, "Output triplet stem")->required();
  s_degrade->add_option("--ratio", degrade.ratio,
                        "Expected scale factor (checked against the pair)");
  s_degrade->add_option("--sensor", degrade.sensor, "Sensor tag recorded on outputs");

  TrainArgs train_args;
  CLI::App* s_train = app.add_subcommand("train", "Train the fusion model");
  s_train->add_option("--config", train_args.config_path, "Config file (key = value)");
  s_train->add_option("--manifest", train_args.manifest, "Dataset manifest")->required();
  s_train->add_option("--out", train_args.out_dir, "Run directory")->required();
  s_train->add_option("--set", train_args.overrides, "Config override key=value");
  s_train->add_option("--max-steps", train_args.max_steps, "Override train.max_steps");
  s_train->add_option("--seed", train_args.seed, "Override train.seed");
  s_train->add_option("--sensor", train_args.sensor, "Sensor tag for the MTF table");
  s_train->add_option("--resume", train_args.resume, "Continue from a checkpoint");
  s_train->add_option("--precision", train_args.precision, "float or double")
      ->capture_default_str();

  FuseArgs fuse_args;
  CLI::App* s_fuse = app.add_subcommand("fuse", "Fuse one (pan, lrms) pair");
  s_fuse->add_option("--checkpoint", fuse_args.checkpoint, "Trained checkpoint")->required();
  s_fuse->add_option("--in", fuse_args.in_stem, "Input triplet stem")->required();
  s_fuse->add_option("--out", fuse_args.out_path, "Output raster path")->required();
  s_fuse->add_option("--steps", fuse_args.steps, "Euler steps (1 = one-step map)")
      ->capture_default_str();
  s_fuse->add_flag("--live", fuse_args.live, "Use live weights instead of EMA");

  EvalArgs eval_args;
  CLI::App* s_eval = app.add_subcommand("eval", "Score one-step fusion over a manifest");
  s_eval->add_option("--checkpoint", eval_args.checkpoint, "Trained checkpoint")->required();
  s_eval->add_option("--manifest", eval_args.manifest, "Evaluation manifest")->required();
  s_eval->add_option("--protocol", eval_args.protocol, "reduced or full")
      ->capture_default_str();
  s_eval->add_option("--out", eval_args.out_dir, "Directory for report.txt");

  BenchArgs bench;
  CLI::App* s_bench = app.add_subcommand("bench", "Measure fusion latency");
  s_bench->add_option("--checkpoint", bench.checkpoint, "Trained checkpoint")->required();
  s_bench->add_option("--hr-size", bench.hr_size, "High-resolution edge length")
      ->capture_default_str();
  s_bench->add_option("--steps", bench.steps, "Comma-separated step counts")
      ->capture_default_str();
  s_bench->add_option("--repeats", bench.repeats, "Timed runs per configuration")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  if (s_synth->parsed()) return guarded([&] { cmd_synth(synth); });
  if (s_degrade->parsed()) return guarded([&] { cmd_degrade(degrade); });
  if (s_train->parsed()) return guarded([&] { cmd_train(train_args); });
  if (s_fuse->parsed()) return guarded([&] { cmd_fuse(fuse_args); });
  if (s_eval->parsed()) return guarded([&] { cmd_eval(eval_args); });
  if (s_bench->parsed()) return guarded([&] { cmd_bench(bench); });
  return 2;
}
