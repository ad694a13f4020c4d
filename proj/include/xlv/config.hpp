#pragma once

#include <map>
#include <string>
#include <vector>

#include "xlv/model.hpp"

namespace xlv {

/// Flat INI-style text: [section] headers, key = value lines, # or ;
/// comments. Strict about shape — a line that is neither is an error.
struct ConfigFile {
  std::map<std::string, std::map<std::string, std::string>> sections;

  const std::string* find(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    if (s == sections.end()) return nullptr;
    auto k = s->second.find(key);
    return k == s->second.end() ? nullptr : &k->second;
  }
};

ConfigFile parse_config_text(const std::string& text, const std::string& origin);
ConfigFile parse_config_file(const std::string& path);

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 0.01;
  std::string schedule = "cosine";  // or "constant"
  Index batch_size = 16;
  Index epochs = 10;
  std::uint64_t seed = 7;
  std::string train_data;  // path, CSV, or synth: URI
  std::string val_data;    // optional
  std::string out_dir = ".";
  std::string label_map_name;        // optional named class order
  std::vector<float> norm_mean, norm_std;  // optional, per channel

  void validate() const;
};

/// Builds a TrainConfig from parsed sections [model], [train], [data],
/// [output]. `[model] preset` seeds the geometry; individual keys override.
/// Unknown keys are rejected.
TrainConfig train_config_from(const ConfigFile& file);

}  // namespace xlv
