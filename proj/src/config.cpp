#include "xlv/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace xlv {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<float> parse_float_list(const std::string& v, const std::string& key) {
  std::vector<float> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty())
      throw std::invalid_argument("config: empty entry in " + key);
    out.push_back(std::stof(item));
  }
  return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw std::invalid_argument("config: " + key + " expects a boolean, got '" + v + "'");
}

}  // namespace

ConfigFile parse_config_text(const std::string& text, const std::string& origin) {
  ConfigFile file;
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3)
        throw std::invalid_argument("config: " + origin + ":" +
                                    std::to_string(lineno) + ": malformed section '" +
                                    t + "'");
      section = trim(t.substr(1, t.size() - 2));
      file.sections[section];  // a section may legitimately stay empty
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: " + origin + ":" + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + t + "'");
    std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: " + origin + ":" + std::to_string(lineno) +
                                  ": empty key");
    file.sections[section][key] = value;
  }
  return file;
}

ConfigFile parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

void TrainConfig::validate() const {
  model.validate();
  if (lr <= 0 || lr_min < 0 || lr_min > lr)
    throw std::invalid_argument("config: need 0 < lr and 0 <= lr_min <= lr");
  if (weight_decay < 0)
    throw std::invalid_argument("config: weight_decay must be nonnegative");
  if (schedule != "cosine" && schedule != "constant")
    throw std::invalid_argument("config: schedule must be cosine or constant, got " +
                                schedule);
  if (batch_size < 1 || epochs < 0)
    throw std::invalid_argument("config: batch_size must be >= 1 and epochs >= 0");
  if (train_data.empty())
    throw std::invalid_argument("config: no training data source given");
  if (norm_mean.size() != norm_std.size())
    throw std::invalid_argument("config: normalize_mean and normalize_std disagree");
}

TrainConfig train_config_from(const ConfigFile& file) {
  static const std::set<std::string> known_sections{"model", "train", "data",
                                                    "output"};
  static const std::set<std::string> model_keys{
      "preset",       "image_h",    "image_w",    "channels",
      "patch",        "embed_dim",  "depth",      "expansion",
      "head_count",   "forget_variant", "stabilized", "path_merge",
      "num_classes",  "precision"};
  static const std::set<std::string> train_keys{
      "lr", "lr_min", "weight_decay", "schedule", "batch_size", "epochs", "seed"};
  static const std::set<std::string> data_keys{"train", "val", "labels",
                                               "normalize_mean", "normalize_std"};
  static const std::set<std::string> output_keys{"dir"};

  for (const auto& [section, kv] : file.sections) {
    if (!known_sections.count(section))
      throw std::invalid_argument("config: unknown section [" + section + "]");
    const std::set<std::string>& keys =
        section == "model" ? model_keys
        : section == "train" ? train_keys
        : section == "data" ? data_keys
                            : output_keys;
    for (const auto& [k, v] : kv) {
      (void)v;
      if (!keys.count(k))
        throw std::invalid_argument("config: unknown key '" + k + "' in [" +
                                    section + "]");
    }
  }

  TrainConfig tc;
  if (const std::string* preset = file.find("model", "preset"))
    tc.model = ModelConfig::preset(*preset);
  auto get = [&file](const char* sec, const char* key) {
    return file.find(sec, key);
  };
  if (auto v = get("model", "image_h")) tc.model.image_h = std::stoll(*v);
  if (auto v = get("model", "image_w")) tc.model.image_w = std::stoll(*v);
  if (auto v = get("model", "channels")) tc.model.channels = std::stoll(*v);
  if (auto v = get("model", "patch")) tc.model.patch = std::stoll(*v);
  if (auto v = get("model", "embed_dim")) tc.model.embed_dim = std::stoll(*v);
  if (auto v = get("model", "depth")) tc.model.depth = std::stoll(*v);
  if (auto v = get("model", "expansion")) tc.model.expansion = std::stoll(*v);
  if (auto v = get("model", "head_count")) tc.model.head_count = std::stoll(*v);
  if (auto v = get("model", "num_classes")) tc.model.num_classes = std::stoll(*v);
  if (auto v = get("model", "precision")) tc.model.precision = *v;
  if (auto v = get("model", "forget_variant")) {
    if (*v == "sigmoid") tc.model.forget_variant = ForgetVariant::Sigmoid;
    else if (*v == "exponential") tc.model.forget_variant = ForgetVariant::Exponential;
    else throw std::invalid_argument("config: unknown forget_variant '" + *v + "'");
  }
  if (auto v = get("model", "stabilized"))
    tc.model.stabilized = parse_bool(*v, "stabilized");
  if (auto v = get("model", "path_merge")) {
    if (*v == "merged") tc.model.path_merge = PathMergeMode::Merged;
    else if (*v == "alternating") tc.model.path_merge = PathMergeMode::Alternating;
    else throw std::invalid_argument("config: unknown path_merge '" + *v + "'");
  }

  if (auto v = get("train", "lr")) tc.lr = std::stod(*v);
  if (auto v = get("train", "lr_min")) tc.lr_min = std::stod(*v);
  if (auto v = get("train", "weight_decay")) tc.weight_decay = std::stod(*v);
  if (auto v = get("train", "schedule")) tc.schedule = *v;
  if (auto v = get("train", "batch_size")) tc.batch_size = std::stoll(*v);
  if (auto v = get("train", "epochs")) tc.epochs = std::stoll(*v);
  if (auto v = get("train", "seed")) tc.seed = std::stoull(*v);

  if (auto v = get("data", "train")) tc.train_data = *v;
  if (auto v = get("data", "val")) tc.val_data = *v;
  if (auto v = get("data", "labels")) tc.label_map_name = *v;
  if (auto v = get("data", "normalize_mean"))
    tc.norm_mean = parse_float_list(*v, "normalize_mean");
  if (auto v = get("data", "normalize_std"))
    tc.norm_std = parse_float_list(*v, "normalize_std");

  if (auto v = get("output", "dir")) tc.out_dir = *v;
  return tc;
}

}  // namespace xlv
