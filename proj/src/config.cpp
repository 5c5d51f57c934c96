#include "otfm/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace otfm::config {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.')
      return false;
  return k.front() != '.' && k.back() != '.';
}

[[noreturn]] void fail(int line, const std::string& what) {
  throw DataError("config line " + std::to_string(line) + ": " + what);
}

void insert(ConfigFile& cf, const std::string& key, const std::string& value,
            int line) {
  if (!valid_key(key)) fail(line, "bad key '" + key + "'");
  if (cf.values.count(key))
    fail(line, "duplicate key '" + key + "' (first on line " +
                   std::to_string(cf.lines[key]) + ")");
  cf.values[key] = value;
  cf.lines[key] = line;
}

const std::string& require(ConfigFile& cf, const std::string& key) {
  cf.consumed.insert(key);
  return cf.values.at(key);
}

[[noreturn]] void bad_value(const ConfigFile& cf, const std::string& key,
                            const std::string& expect) {
  const int line = cf.lines.count(key) ? cf.lines.at(key) : 0;
  throw DataError("config line " + std::to_string(line) + ": key '" + key +
                  "' expects " + expect + ", got '" + cf.values.at(key) + "'");
}

}  // namespace

std::vector<std::pair<std::string, int>> ConfigFile::unconsumed() const {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& [k, v] : values) {
    (void)v;
    if (!consumed.count(k)) out.emplace_back(k, lines.at(k));
  }
  return out;
}

ConfigFile parse_config(const std::string& text) {
  ConfigFile cf;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string s = trim(raw);
    if (s.empty()) continue;
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) fail(line, "expected 'key = value'");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (value.empty()) fail(line, "empty value for key '" + key + "'");
    insert(cf, key, value, line);
  }
  return cf;
}

ConfigFile load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config(buf.str());
}

void apply_override(ConfigFile& cf, const std::string& spec) {
  const std::size_t eq = spec.find('=');
  if (eq == std::string::npos)
    throw ArgumentError("override must look like key=value: '" + spec + "'");
  const std::string key = trim(spec.substr(0, eq));
  const std::string value = trim(spec.substr(eq + 1));
  if (!valid_key(key)) throw ArgumentError("override: bad key '" + key + "'");
  if (value.empty()) throw ArgumentError("override: empty value for '" + key + "'");
  cf.values[key] = value;
  cf.lines[key] = 0;
}

std::string render_config(const ConfigFile& cf) {
  std::ostringstream out;
  for (const auto& [k, v] : cf.values) out << k << " = " << v << "\n";
  return out.str();
}

std::string get_string(ConfigFile& cf, const std::string& key,
                       const std::string& fallback) {
  if (!cf.has(key)) return fallback;
  return require(cf, key);
}

std::int64_t get_int(ConfigFile& cf, const std::string& key, std::int64_t fallback) {
  if (!cf.has(key)) return fallback;
  const std::string& v = require(cf, key);
  try {
    std::size_t used = 0;
    const long long parsed = std::stoll(v, &used);
    if (used != v.size()) bad_value(cf, key, "an integer");
    return parsed;
  } catch (const std::logic_error&) {
    bad_value(cf, key, "an integer");
  }
}

double get_real(ConfigFile& cf, const std::string& key, double fallback) {
  if (!cf.has(key)) return fallback;
  const std::string& v = require(cf, key);
  try {
    std::size_t used = 0;
    const double parsed = std::stod(v, &used);
    if (used != v.size()) bad_value(cf, key, "a real number");
    return parsed;
  } catch (const std::logic_error&) {
    bad_value(cf, key, "a real number");
  }
}

bool get_bool(ConfigFile& cf, const std::string& key, bool fallback) {
  if (!cf.has(key)) return fallback;
  std::string v = require(cf, key);
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(cf, key, "a boolean");
}

std::vector<double> get_reals(ConfigFile& cf, const std::string& key,
                              const std::vector<double>& fallback) {
  if (!cf.has(key)) return fallback;
  const std::string& v = require(cf, key);
  std::vector<double> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    const std::string t = trim(item);
    if (t.empty()) bad_value(cf, key, "a comma-separated list of reals");
    try {
      std::size_t used = 0;
      out.push_back(std::stod(t, &used));
      if (used != t.size()) bad_value(cf, key, "a comma-separated list of reals");
    } catch (const std::logic_error&) {
      bad_value(cf, key, "a comma-separated list of reals");
    }
  }
  if (out.empty()) bad_value(cf, key, "a comma-separated list of reals");
  return out;
}

nn::MappingNetConfig mapping_config(ConfigFile& cf) {
  nn::MappingNetConfig m;
  m.base_channels = int(get_int(cf, "mapping.base_channels", m.base_channels));
  m.levels = int(get_int(cf, "mapping.levels", m.levels));
  m.blocks_per_level = int(get_int(cf, "mapping.blocks_per_level", m.blocks_per_level));
  m.attention_window = int(get_int(cf, "mapping.attention_window", m.attention_window));
  m.heads = int(get_int(cf, "mapping.heads", m.heads));
  m.time_embed_dim = int(get_int(cf, "mapping.time_embed_dim", m.time_embed_dim));
  return m;
}

nn::PotentialNetConfig potential_config(ConfigFile& cf) {
  nn::PotentialNetConfig p;
  p.channels = int(get_int(cf, "potential.channels", p.channels));
  p.blocks = int(get_int(cf, "potential.blocks", p.blocks));
  p.in_bands = int(get_int(cf, "potential.in_bands", 0));  // 0 = data-derived
  p.time_embed_dim = int(get_int(cf, "potential.time_embed_dim", p.time_embed_dim));
  return p;
}

train::TrainConfig train_config(ConfigFile& cf) {
  train::TrainConfig t;
  t.lr_mapping = get_real(cf, "train.lr_mapping", t.lr_mapping);
  t.lr_potential = get_real(cf, "train.lr_potential", t.lr_potential);
  t.max_steps = get_int(cf, "train.max_steps", t.max_steps);
  t.batch_size = int(get_int(cf, "train.batch_size", t.batch_size));
  t.ema_decay = get_real(cf, "train.ema_decay", t.ema_decay);
  t.seed = std::uint64_t(get_int(cf, "train.seed", std::int64_t(t.seed)));
  t.weight_flow = get_real(cf, "train.weight_flow", t.weight_flow);
  t.weight_mapping = get_real(cf, "train.weight_mapping", t.weight_mapping);
  t.checkpoint_every = get_int(cf, "train.checkpoint_every", t.checkpoint_every);
  t.log_every = get_int(cf, "train.log_every", t.log_every);
  t.grad_clip = get_real(cf, "train.grad_clip", t.grad_clip);
  t.weight_decay = get_real(cf, "train.weight_decay", t.weight_decay);
  t.max_failed_steps = int(get_int(cf, "train.max_failed_steps", t.max_failed_steps));
  t.condition_potential =
      get_bool(cf, "train.condition_potential", t.condition_potential);

  t.cost.lambda_base = get_real(cf, "cost.lambda_base", t.cost.lambda_base);
  t.cost.lambda_spatial = get_real(cf, "cost.lambda_spatial", t.cost.lambda_spatial);
  t.cost.lambda_spectral =
      get_real(cf, "cost.lambda_spectral", t.cost.lambda_spectral);
  t.cost.exp_clamp = get_real(cf, "cost.exp_clamp", t.cost.exp_clamp);
  const std::string variant = get_string(cf, "cost.spectral_variant", "observation");
  if (variant == "observation")
    t.cost.spectral_variant = uot::SpectralVariant::observation;
  else if (variant == "detail_ratio")
    t.cost.spectral_variant = uot::SpectralVariant::detail_ratio;
  else
    bad_value(cf, "cost.spectral_variant", "'observation' or 'detail_ratio'");
  return t;
}

MtfSpec mtf_config(ConfigFile& cf, const std::string& sensor_tag) {
  MtfSpec mtf;
  mtf.ms_gains = get_reals(cf, "mtf.ms_gains", mtf.ms_gains);
  mtf.pan_gain = get_real(cf, "mtf.pan_gain", mtf.pan_gain);
  mtf.kernel_size = int(get_int(cf, "mtf.kernel_size", mtf.kernel_size));
  mtf.ratio = int(get_int(cf, "mtf.ratio", mtf.ratio));

  // Consume the whole sensor table; apply only the matching tag.
  const std::string prefix = "mtf.sensor.";
  std::vector<std::string> table;
  for (const auto& [k, v] : cf.values) {
    (void)v;
    if (k.rfind(prefix, 0) == 0) table.push_back(k);
  }
  for (const std::string& k : table) {
    const std::size_t dot = k.find('.', prefix.size());
    if (dot == std::string::npos)
      throw DataError("config line " + std::to_string(cf.lines.at(k)) +
                      ": sensor key must look like mtf.sensor.<TAG>.<field>");
    const std::string tag = k.substr(prefix.size(), dot - prefix.size());
    const std::string field = k.substr(dot + 1);
    if (field != "ms_gains" && field != "pan_gain")
      throw DataError("config line " + std::to_string(cf.lines.at(k)) +
                      ": unknown sensor field '" + field + "'");
    if (!sensor_tag.empty() && tag == sensor_tag) {
      if (field == "ms_gains")
        mtf.ms_gains = get_reals(cf, k, mtf.ms_gains);
      else
        mtf.pan_gain = get_real(cf, k, mtf.pan_gain);
    } else {
      cf.consumed.insert(k);
    }
  }
  return mtf;
}

}  // namespace otfm::config
