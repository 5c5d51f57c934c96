#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "otfm/degradation.hpp"
#include "otfm/trainer.hpp"

// Flat `key = value` config files (UTF-8, '#' comments, dotted section
// prefixes). Getters mark keys as consumed so callers can reject typos;
// flag overrides are applied on top of the parsed file and win.

namespace otfm::config {

struct ConfigFile {
  std::map<std::string, std::string> values;
  std::map<std::string, int> lines;  // 0 for overrides applied after parsing
  std::set<std::string> consumed;

  bool has(const std::string& key) const { return values.count(key) != 0; }

  // Every parsed key that no getter has touched, with its line number.
  std::vector<std::pair<std::string, int>> unconsumed() const;
};

// Parse failures carry 1-based line numbers in the message.
ConfigFile parse_config(const std::string& text);
ConfigFile load_config(const std::string& path);

// `key=value` override; malformed spec -> ArgumentError.
void apply_override(ConfigFile& cf, const std::string& spec);

// Canonical sorted `key = value` rendering (the provenance echo).
std::string render_config(const ConfigFile& cf);

std::string get_string(ConfigFile& cf, const std::string& key,
                       const std::string& fallback);
std::int64_t get_int(ConfigFile& cf, const std::string& key, std::int64_t fallback);
double get_real(ConfigFile& cf, const std::string& key, double fallback);
bool get_bool(ConfigFile& cf, const std::string& key, bool fallback);
std::vector<double> get_reals(ConfigFile& cf, const std::string& key,
                              const std::vector<double>& fallback);

// Builders for the module configs. Band counts are data-derived, so
// mapping_config leaves cond_bands/out_bands at their defaults for the
// caller to overwrite.
nn::MappingNetConfig mapping_config(ConfigFile& cf);
nn::PotentialNetConfig potential_config(ConfigFile& cf);
train::TrainConfig train_config(ConfigFile& cf);

// Base MTF keys plus an optional per-sensor table: `mtf.sensor.<TAG>.ms_gains`
// and `mtf.sensor.<TAG>.pan_gain` override the base gains when `sensor_tag`
// matches <TAG>. Unmatched sensor table entries are still consumed.
MtfSpec mtf_config(ConfigFile& cf, const std::string& sensor_tag = "");

}  // namespace otfm::config
