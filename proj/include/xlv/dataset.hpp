#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xlv/image_io.hpp"
#include "xlv/tensor.hpp"

namespace xlv {

/// One training/eval example. Pixels live in [0,1] (before any optional
/// normalization); layout is {H, W, C}.
struct Sample {
  Tensor<float> image;
  Index label = 0;
  std::string source;
};

struct LabelMap {
  std::string name;
  std::vector<std::string> classes;
};

/// Named class orders matching the common FER dataset conventions:
/// "ck+" (7, includes contempt), "raf-db" (7), "ferplus" (8).
const LabelMap& label_map(const std::string& name);

struct ManifestRecord {
  std::string path;
  Index label = 0;
};

struct DatasetManifest {
  std::vector<std::string> classes;  // index == class id
  std::vector<ManifestRecord> records;
  std::string split = "train";
  std::vector<std::string> warnings;

  Index class_count() const { return static_cast<Index>(classes.size()); }
};

/// Reads either a directory-per-class tree or a CSV manifest (`path,label`
/// header, labels are class names, paths resolve relative to the CSV).
/// Ordering is lexicographic by path; `declared` pins the class order and
/// rejects strangers.
DatasetManifest load_manifest(const std::string& source,
                              const LabelMap* declared = nullptr,
                              const std::string& split = "train");

struct PreprocessOptions {
  Index height = 32, width = 32;
  Index channels = 1;  // 1 = grayscale (luma), 3 = RGB
  bool bilinear = true;
  // per-channel affine normalization applied after the [0,1] scaling;
  // empty = identity
  std::vector<float> mean, stddev;
};

/// 8-bit image -> float tensor: resize to target, scale to [0,1], convert
/// channels, then the optional normalization.
Tensor<float> preprocess(const RawImage& raw, const PreprocessOptions& opt);

struct SynthSpec {
  Index classes = 3;
  Index per_class = 32;
  Index size = 32;  // square, single channel
  std::uint64_t seed = 7;
  double noise = 0.08;
};

/// "c0-bar", "c1-arc", "c2-blob", ... — lexicographic order equals class id.
std::vector<std::string> synth_class_names(Index classes);

/// Deterministic geometric patterns (oriented bars / arcs / blobs cycling by
/// class) plus seeded pixel noise. Identical spec -> bitwise identical data;
/// noise 0 -> identical samples within a class.
std::vector<Sample> synth_dataset(const SynthSpec& spec);

/// Materializes samples as a directory-per-class PNG tree (grayscale 8-bit).
void write_synth_tree(const std::string& root, const std::vector<Sample>& samples,
                      const std::vector<std::string>& classes);

struct LoadedDataset {
  std::vector<std::string> classes;
  std::vector<Sample> samples;
  std::vector<std::string> warnings;
};

/// Unified entry point: `synth:k=3,n=32,size=32,seed=7,noise=0.08`, a
/// directory tree, or a CSV manifest. Files are decoded and preprocessed;
/// synth data is generated at `opt` geometry (synth is single-channel).
LoadedDataset load_dataset(const std::string& source, const PreprocessOptions& opt,
                           const LabelMap* declared = nullptr,
                           const std::string& split = "train");

}  // namespace xlv
