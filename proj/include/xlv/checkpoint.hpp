#pragma once

// Single-file checkpoint. Layout, all integers little-endian:
//   magic "XLVCKPT\n" | u32 version=1 | u32 scalar width (4|8)
//   u64 config length | config text (the ModelConfig canonical form)
//   i64 epoch | u64 seed | i64 opt_step
//   u64 tensor count
//   per tensor: u64 name length | name | u64 ndim | i64 dims...
//   raw value blobs, in index order
// Values round-trip bit-exactly; load verifies magic, version, scalar width,
// and (when loading into a model) the config text and every shape.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "xlv/model.hpp"

namespace xlv {

struct CheckpointMeta {
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;
  std::int64_t opt_step = 0;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'X', 'L', 'V', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}
inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}
inline void put_i64(std::ostream& os, std::int64_t v) {
  put_u64(os, static_cast<std::uint64_t>(v));
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}
inline std::int64_t get_i64(std::istream& is) {
  return static_cast<std::int64_t>(get_u64(is));
}

template <typename S>
void put_values(std::ostream& os, const S* p, Index n) {
  if constexpr (sizeof(S) == 8) {
    for (Index i = 0; i < n; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, p + i, 8);
      put_u64(os, bits);
    }
  } else {
    for (Index i = 0; i < n; ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, p + i, 4);
      put_u32(os, bits);
    }
  }
}

template <typename S>
void get_values(std::istream& is, S* p, Index n) {
  if constexpr (sizeof(S) == 8) {
    for (Index i = 0; i < n; ++i) {
      std::uint64_t bits = get_u64(is);
      std::memcpy(p + i, &bits, 8);
    }
  } else {
    for (Index i = 0; i < n; ++i) {
      std::uint32_t bits = get_u32(is);
      std::memcpy(p + i, &bits, 4);
    }
  }
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const std::vector<ParamGroup<S>>& tensors,
                     const CheckpointMeta& meta) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8, "unsupported scalar");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for write");
  using namespace detail;
  os.write(kCkptMagic, 8);
  put_u32(os, kCkptVersion);
  put_u32(os, sizeof(S));
  std::string text = cfg.canonical_text();
  put_u64(os, text.size());
  os.write(text.data(), std::streamsize(text.size()));
  put_i64(os, meta.epoch);
  put_u64(os, meta.seed);
  put_i64(os, meta.opt_step);
  put_u64(os, tensors.size());
  for (const auto& g : tensors) {
    put_u64(os, g.name.size());
    os.write(g.name.data(), std::streamsize(g.name.size()));
    put_u64(os, g.tensor.ndim());
    for (Index d : g.tensor.shape()) put_i64(os, d);
  }
  for (const auto& g : tensors) put_values(os, g.tensor.data(), g.tensor.size());
  if (!os) throw std::runtime_error("checkpoint: write to " + path + " failed");
}

template <typename S>
struct LoadedCheckpoint {
  ModelConfig config;
  CheckpointMeta meta;
  std::vector<std::string> order;  // tensor names as stored
  std::map<std::string, Tensor<S>> tensors;
};

/// Reads only the header and reports the stored scalar width as a precision
/// name ("float32" / "float64"), so callers can pick the right template.
inline std::string checkpoint_precision(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  using namespace detail;
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  std::uint32_t version = get_u32(is);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  std::uint32_t width = get_u32(is);
  if (width == 4) return "float32";
  if (width == 8) return "float64";
  throw std::runtime_error("checkpoint: unsupported scalar width " +
                           std::to_string(width));
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8, "unsupported scalar");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  using namespace detail;
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  std::uint32_t version = get_u32(is);
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  std::uint32_t width = get_u32(is);
  if (width != sizeof(S))
    throw std::runtime_error("checkpoint: stores " + std::to_string(width * 8) +
                             "-bit scalars, expected " +
                             std::to_string(sizeof(S) * 8) + "-bit");
  std::uint64_t tlen = get_u64(is);
  std::string text(tlen, '\0');
  if (!is.read(text.data(), std::streamsize(tlen)))
    throw std::runtime_error("checkpoint: truncated config text");
  LoadedCheckpoint<S> out;
  out.config = ModelConfig::from_canonical_text(text);
  out.meta.epoch = get_i64(is);
  out.meta.seed = get_u64(is);
  out.meta.opt_step = get_i64(is);
  std::uint64_t count = get_u64(is);
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> index;
  index.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t nlen = get_u64(is);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), std::streamsize(nlen)))
      throw std::runtime_error("checkpoint: truncated tensor name");
    std::uint64_t nd = get_u64(is);
    Shape shape(nd);
    for (auto& d : shape) d = get_i64(is);
    index.push_back({std::move(name), std::move(shape)});
  }
  for (auto& e : index) {
    Tensor<S> t = Tensor<S>::zeros(e.shape);
    get_values(is, t.mutable_data(), t.size());
    if (!out.tensors.emplace(e.name, t).second)
      throw std::runtime_error("checkpoint: duplicate tensor '" + e.name + "'");
    out.order.push_back(e.name);
  }
  return out;
}

/// Copies checkpoint values into an existing model's parameters. The stored
/// config must match the model's exactly; every model parameter must be
/// present with its exact shape. Entries outside the model (optimizer slots,
/// "opt.*") are left to the caller in the returned checkpoint.
template <typename S>
LoadedCheckpoint<S> load_into_model(const std::string& path, Model<S>& model) {
  LoadedCheckpoint<S> ck = load_checkpoint<S>(path);
  if (ck.config.canonical_text() != model.cfg.canonical_text())
    throw std::runtime_error(
        "checkpoint: stored config does not match the requested model "
        "configuration");
  for (auto& g : model.parameters()) {
    auto it = ck.tensors.find(g.name);
    if (it == ck.tensors.end())
      throw std::runtime_error("checkpoint: missing tensor '" + g.name + "'");
    if (it->second.shape() != g.tensor.shape())
      throw std::runtime_error("checkpoint: tensor '" + g.name + "' has shape " +
                               shape_str(it->second.shape()) + ", model expects " +
                               shape_str(g.tensor.shape()));
    std::memcpy(g.tensor.mutable_data(), it->second.data(),
                sizeof(S) * std::size_t(g.tensor.size()));
  }
  return ck;
}

}  // namespace xlv
