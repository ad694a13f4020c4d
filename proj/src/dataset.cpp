#include "xlv/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "xlv/rng.hpp"

namespace fs = std::filesystem;

namespace xlv {

const LabelMap& label_map(const std::string& name) {
  static const LabelMap ck{"ck+", {"anger", "contempt", "disgust", "fear", "happy",
                                   "sadness", "surprise"}};
  static const LabelMap raf{"raf-db", {"surprise", "fear", "disgust", "happy",
                                       "sadness", "anger", "neutral"}};
  static const LabelMap fp{"ferplus", {"anger", "disgust", "fear", "happy", "sadness",
                                       "surprise", "neutral", "contempt"}};
  if (name == "ck+") return ck;
  if (name == "raf-db") return raf;
  if (name == "ferplus") return fp;
  throw std::invalid_argument("dataset: unknown label map '" + name +
                              "' (known: ck+, raf-db, ferplus)");
}

namespace {

bool image_file(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(),
                 [](unsigned char c) { return char(std::tolower(c)); });
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

Index class_index(const std::vector<std::string>& classes, const std::string& name,
                  const std::string& where) {
  auto it = std::find(classes.begin(), classes.end(), name);
  if (it == classes.end())
    throw std::runtime_error("dataset: unknown class name '" + name + "' at " + where);
  return static_cast<Index>(it - classes.begin());
}

void maybe_warn_split_size(DatasetManifest& m) {
  const auto& raf = label_map("raf-db").classes;
  if (m.split == "train" && m.classes.size() == raf.size() &&
      std::set<std::string>(m.classes.begin(), m.classes.end()) ==
          std::set<std::string>(raf.begin(), raf.end()) &&
      m.records.size() != 12271)
    m.warnings.push_back("train split has " + std::to_string(m.records.size()) +
                         " samples; the standard RAF-DB train split has 12271");
}

DatasetManifest load_tree(const fs::path& root, const LabelMap* declared,
                          const std::string& split) {
  DatasetManifest m;
  m.split = split;
  std::vector<std::string> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path().filename().string());
  std::sort(dirs.begin(), dirs.end());

  if (declared) {
    m.classes = declared->classes;
    for (const auto& d : dirs)
      (void)class_index(m.classes, d, (root / d).string());
  } else {
    m.classes = dirs;
  }

  for (const auto& d : dirs) {
    Index label = class_index(m.classes, d, (root / d).string());
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(root / d))
      if (e.is_regular_file() && image_file(e.path()))
        files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (auto& f : files) m.records.push_back({std::move(f), label});
  }
  std::sort(m.records.begin(), m.records.end(),
            [](const ManifestRecord& a, const ManifestRecord& b) {
              return a.path < b.path;
            });
  return m;
}

DatasetManifest load_csv(const fs::path& csv, const LabelMap* declared,
                         const std::string& split) {
  std::ifstream is(csv);
  if (!is) throw std::runtime_error("dataset: cannot open " + csv.string());
  DatasetManifest m;
  m.split = split;

  std::string line;
  if (!std::getline(is, line) || line.rfind("path,label", 0) != 0)
    throw std::runtime_error("dataset: " + csv.string() +
                             " must start with a 'path,label' header");

  std::vector<std::pair<std::string, std::string>> rows;
  std::set<std::string> labels, paths;
  const fs::path base = csv.parent_path();
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto comma = line.rfind(',');
    if (comma == std::string::npos)
      throw std::runtime_error("dataset: " + csv.string() + ":" +
                               std::to_string(lineno) + " is not 'path,label'");
    std::string p = line.substr(0, comma), lab = line.substr(comma + 1);
    fs::path full = fs::path(p).is_absolute() ? fs::path(p) : base / p;
    if (!paths.insert(full.string()).second)
      throw std::runtime_error("dataset: duplicate path " + full.string());
    rows.emplace_back(full.string(), lab);
    labels.insert(lab);
  }

  if (declared) {
    m.classes = declared->classes;
  } else {
    m.classes.assign(labels.begin(), labels.end());  // set iterates sorted
  }
  for (auto& [p, lab] : rows) {
    if (!fs::exists(p))
      throw std::runtime_error("dataset: manifest names unreadable file " + p);
    m.records.push_back({p, class_index(m.classes, lab, p)});
  }
  std::sort(m.records.begin(), m.records.end(),
            [](const ManifestRecord& a, const ManifestRecord& b) {
              return a.path < b.path;
            });
  return m;
}

}  // namespace

DatasetManifest load_manifest(const std::string& source, const LabelMap* declared,
                              const std::string& split) {
  fs::path p(source);
  if (!fs::exists(p))
    throw std::runtime_error("dataset: " + source + " does not exist");
  DatasetManifest m = fs::is_directory(p) ? load_tree(p, declared, split)
                                          : load_csv(p, declared, split);
  if (m.records.empty())
    throw std::runtime_error("dataset: " + source + " contains no samples");
  maybe_warn_split_size(m);
  return m;
}

namespace {

inline float luma(float r, float g, float b) {
  return 0.299f * r + 0.587f * g + 0.114f * b;
}

// Sampling position convention: dst pixel centers map to
// (dst + 0.5) * in/out - 0.5 in source coordinates, clamped to the frame.
// Positions and weights are computed in double; float32 coordinate rounding
// otherwise costs more than the documented 1e-6 fidelity.
float sample_bilinear(const std::vector<float>& src, Index h, Index w, Index c,
                      Index channels, double y, double x) {
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  Index y0 = Index(std::floor(y)), x0 = Index(std::floor(x));
  Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  double fy = y - double(y0), fx = x - double(x0);
  auto at = [&](Index r, Index col) {
    return double(src[std::size_t((r * w + col) * channels + c)]);
  };
  return float((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
               fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1)));
}

}  // namespace

Tensor<float> preprocess(const RawImage& raw, const PreprocessOptions& opt) {
  if (opt.channels != 1 && opt.channels != 3)
    throw std::invalid_argument("preprocess: target channels must be 1 or 3");
  if (raw.height < 1 || raw.width < 1 || raw.pixels.empty())
    throw std::invalid_argument("preprocess: empty image");
  if (!opt.mean.empty() && (Index(opt.mean.size()) != opt.channels ||
                            opt.stddev.size() != opt.mean.size()))
    throw std::invalid_argument(
        "preprocess: normalization constants must cover every target channel");

  // scale to [0,1] and settle the channel count first
  std::vector<float> chan(std::size_t(raw.height * raw.width * opt.channels));
  for (Index r = 0; r < raw.height; ++r)
    for (Index col = 0; col < raw.width; ++col) {
      float v[3];
      for (Index ch = 0; ch < raw.channels; ++ch)
        v[ch] = float(raw.at(r, col, ch)) / 255.0f;
      float out[3];
      if (opt.channels == Index(raw.channels)) {
        for (Index ch = 0; ch < opt.channels; ++ch) out[ch] = v[ch];
      } else if (opt.channels == 1) {
        out[0] = luma(v[0], v[1], v[2]);
      } else {
        out[0] = out[1] = out[2] = v[0];
      }
      for (Index ch = 0; ch < opt.channels; ++ch)
        chan[std::size_t((r * raw.width + col) * opt.channels + ch)] = out[ch];
    }

  Tensor<float> img = Tensor<float>::zeros({opt.height, opt.width, opt.channels});
  float* dst = img.mutable_data();
  const double sy = double(raw.height) / double(opt.height);
  const double sx = double(raw.width) / double(opt.width);
  for (Index r = 0; r < opt.height; ++r)
    for (Index col = 0; col < opt.width; ++col)
      for (Index ch = 0; ch < opt.channels; ++ch) {
        float v;
        if (raw.height == opt.height && raw.width == opt.width) {
          v = chan[std::size_t((r * raw.width + col) * opt.channels + ch)];
        } else if (opt.bilinear) {
          v = sample_bilinear(chan, raw.height, raw.width, ch, opt.channels,
                              (double(r) + 0.5) * sy - 0.5,
                              (double(col) + 0.5) * sx - 0.5);
        } else {
          Index srow = std::min(Index((double(r) + 0.5) * sy), raw.height - 1);
          Index scol = std::min(Index((double(col) + 0.5) * sx), raw.width - 1);
          v = chan[std::size_t((srow * raw.width + scol) * opt.channels + ch)];
        }
        if (!opt.mean.empty())
          v = (v - opt.mean[std::size_t(ch)]) / opt.stddev[std::size_t(ch)];
        dst[(r * opt.width + col) * opt.channels + ch] = v;
      }
  return img;
}

std::vector<std::string> synth_class_names(Index classes) {
  static const char* kind[3] = {"bar", "arc", "blob"};
  std::vector<std::string> names;
  for (Index c = 0; c < classes; ++c)
    names.push_back("c" + std::to_string(c) + "-" + kind[c % 3]);
  return names;
}

namespace {
constexpr double kPi = 3.141592653589793238462643;
}

std::vector<Sample> synth_dataset(const SynthSpec& spec) {
  if (spec.classes < 2 || spec.classes > 8)
    throw std::invalid_argument("synth: class count must be in [2,8], got " +
                                std::to_string(spec.classes));
  if (spec.per_class < 1 || spec.size < 8)
    throw std::invalid_argument("synth: need at least 1 sample per class and size 8");

  const Index n = spec.size;
  auto names = synth_class_names(spec.classes);
  Rng rng(spec.seed);
  std::vector<Sample> out;
  out.reserve(std::size_t(spec.classes * spec.per_class));

  for (Index c = 0; c < spec.classes; ++c) {
    // one fixed pattern per class; all per-sample variation is noise
    std::vector<float> pattern(std::size_t(n * n));
    const double phase = double(c) * 2.0 * kPi / double(spec.classes);
    for (Index r = 0; r < n; ++r)
      for (Index col = 0; col < n; ++col) {
        double y = (double(r) + 0.5) / double(n) - 0.5;
        double x = (double(col) + 0.5) / double(n) - 0.5;
        double v = 0;
        switch (c % 3) {
          case 0: {  // oriented stripes
            double t = x * std::cos(phase) + y * std::sin(phase);
            v = 0.5 + 0.5 * std::cos(2.0 * kPi * t * 4.0);
            break;
          }
          case 1: {  // ring segment around an off-center point
            double cx = 0.25 * std::cos(phase), cy = 0.25 * std::sin(phase);
            double d = std::hypot(x - cx, y - cy);
            v = std::exp(-std::pow((d - 0.22) / 0.06, 2.0));
            break;
          }
          default: {  // soft blob at an orbiting position
            double cx = 0.28 * std::cos(phase + 0.7), cy = 0.28 * std::sin(phase + 0.7);
            double d2 = std::pow(x - cx, 2.0) + std::pow(y - cy, 2.0);
            v = std::exp(-d2 / (2.0 * 0.012));
            break;
          }
        }
        pattern[std::size_t(r * n + col)] = float(v);
      }

    for (Index i = 0; i < spec.per_class; ++i) {
      Tensor<float> img = Tensor<float>::zeros({n, n, 1});
      float* d = img.mutable_data();
      for (Index px = 0; px < n * n; ++px) {
        double v = pattern[std::size_t(px)] + spec.noise * rng.normal(0.0, 1.0);
        d[px] = float(std::clamp(v, 0.0, 1.0));
      }
      out.push_back({img, c, "synth:" + names[std::size_t(c)] + "/" +
                                 std::to_string(i)});
    }
  }
  return out;
}

void write_synth_tree(const std::string& root, const std::vector<Sample>& samples,
                      const std::vector<std::string>& classes) {
  for (const auto& cls : classes) fs::create_directories(fs::path(root) / cls);
  std::vector<Index> counter(classes.size(), 0);
  for (const auto& s : samples) {
    const Shape& sh = s.image.shape();
    if (sh.size() != 3 || sh[2] != 1)
      throw std::invalid_argument("synth: tree writer expects single-channel images");
    RawImage raw;
    raw.height = sh[0];
    raw.width = sh[1];
    raw.channels = 1;
    raw.pixels.resize(std::size_t(raw.height * raw.width));
    for (Index i = 0; i < raw.height * raw.width; ++i)
      raw.pixels[std::size_t(i)] = static_cast<unsigned char>(
          std::lround(std::clamp(s.image.data()[i], 0.0f, 1.0f) * 255.0f));
    std::ostringstream name;
    name << std::setw(3) << std::setfill('0') << counter[std::size_t(s.label)]++
         << ".png";
    write_png((fs::path(root) / classes[std::size_t(s.label)] / name.str()).string(),
              raw);
  }
}

namespace {

SynthSpec parse_synth_uri(const std::string& uri) {
  SynthSpec spec;
  std::string rest = uri.substr(6);  // past "synth:"
  std::istringstream is(rest);
  std::string kv;
  while (std::getline(is, kv, ',')) {
    if (kv.empty()) continue;
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("synth: malformed option '" + kv + "' in " + uri);
    std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
    if (k == "k") spec.classes = std::stoll(v);
    else if (k == "n") spec.per_class = std::stoll(v);
    else if (k == "size") spec.size = std::stoll(v);
    else if (k == "seed") spec.seed = std::stoull(v);
    else if (k == "noise") spec.noise = std::stod(v);
    else throw std::invalid_argument("synth: unknown option '" + k + "' in " + uri);
  }
  return spec;
}

}  // namespace

LoadedDataset load_dataset(const std::string& source, const PreprocessOptions& opt,
                           const LabelMap* declared, const std::string& split) {
  LoadedDataset out;
  if (source.rfind("synth:", 0) == 0) {
    SynthSpec spec = parse_synth_uri(source);
    spec.size = opt.height;
    if (opt.height != opt.width || opt.channels != 1)
      throw std::invalid_argument(
          "synth: generator produces square single-channel images; requested " +
          std::to_string(opt.height) + "x" + std::to_string(opt.width) + "x" +
          std::to_string(opt.channels));
    out.classes = synth_class_names(spec.classes);
    out.samples = synth_dataset(spec);
    return out;
  }
  DatasetManifest m = load_manifest(source, declared, split);
  out.classes = m.classes;
  out.warnings = m.warnings;
  for (const auto& rec : m.records)
    out.samples.push_back(
        {preprocess(read_image(rec.path), opt), rec.label, rec.path});
  return out;
}

}  // namespace xlv
