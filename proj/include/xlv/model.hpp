#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "xlv/block.hpp"
#include "xlv/gradcheck.hpp"
#include "xlv/mlstm.hpp"
#include "xlv/ops.hpp"
#include "xlv/patch_embed.hpp"
#include "xlv/path.hpp"
#include "xlv/rng.hpp"

namespace xlv {

/// How the four traversals combine: every block runs all four and merges them
/// with learned weights, or each block runs a single direction, cycling
/// through the four by depth.
enum class PathMergeMode { Merged, Alternating };

inline const char* to_string(PathMergeMode m) {
  return m == PathMergeMode::Merged ? "merged" : "alternating";
}

struct ModelConfig {
  Index image_h = 32, image_w = 32;
  Index channels = 1;
  Index patch = 4;
  Index embed_dim = 32;
  Index depth = 2;
  Index expansion = 2;  // sequence-branch width = expansion * embed_dim
  Index head_count = 4;
  ForgetVariant forget_variant = ForgetVariant::Sigmoid;
  bool stabilized = true;
  PathMergeMode path_merge = PathMergeMode::Merged;
  Index num_classes = 3;
  std::string precision = "float32";

  bool operator==(const ModelConfig&) const = default;

  Index grid_rows() const { return image_h / patch; }
  Index grid_cols() const { return image_w / patch; }
  Index token_count() const { return grid_rows() * grid_cols(); }
  Index patch_len() const { return patch * patch * channels; }
  Index d_inner() const { return expansion * embed_dim; }
  Index d_head() const { return d_inner() / head_count; }
  GateConfig gate_config() const { return {forget_variant, stabilized}; }

  void validate() const {
    if (image_h < 1 || image_w < 1 || channels < 1 || patch < 1 ||
        image_h % patch != 0 || image_w % patch != 0)
      throw std::invalid_argument("config: image " + std::to_string(image_h) + "x" +
                                  std::to_string(image_w) +
                                  " must divide by patch " + std::to_string(patch));
    if (embed_dim < 1 || depth < 1 || expansion < 1)
      throw std::invalid_argument("config: embed_dim, depth, expansion must be positive");
    if (head_count < 1 || d_inner() % head_count != 0)
      throw std::invalid_argument("config: inner width " + std::to_string(d_inner()) +
                                  " must split evenly over " +
                                  std::to_string(head_count) + " heads");
    if (num_classes < 2)
      throw std::invalid_argument("config: need at least 2 classes");
    if (precision != "float32" && precision != "float64")
      throw std::invalid_argument("config: precision must be float32 or float64, got " +
                                  precision);
  }

  /// Stable one-line-per-field form; the checkpoint header stores this text
  /// and load compares it verbatim.
  std::string canonical_text() const {
    std::ostringstream os;
    os << "image_h=" << image_h << "\nimage_w=" << image_w
       << "\nchannels=" << channels << "\npatch=" << patch
       << "\nembed_dim=" << embed_dim << "\ndepth=" << depth
       << "\nexpansion=" << expansion << "\nhead_count=" << head_count
       << "\nforget_variant=" << to_string(forget_variant)
       << "\nstabilized=" << (stabilized ? 1 : 0)
       << "\npath_merge=" << to_string(path_merge)
       << "\nnum_classes=" << num_classes << "\nprecision=" << precision << "\n";
    return os.str();
  }

  /// Inverse of canonical_text; strict (every field present, no strangers).
  static ModelConfig from_canonical_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    int seen = 0;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config: malformed line '" + line + "'");
      std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      ++seen;
      if (key == "image_h") c.image_h = std::stoll(val);
      else if (key == "image_w") c.image_w = std::stoll(val);
      else if (key == "channels") c.channels = std::stoll(val);
      else if (key == "patch") c.patch = std::stoll(val);
      else if (key == "embed_dim") c.embed_dim = std::stoll(val);
      else if (key == "depth") c.depth = std::stoll(val);
      else if (key == "expansion") c.expansion = std::stoll(val);
      else if (key == "head_count") c.head_count = std::stoll(val);
      else if (key == "forget_variant")
        c.forget_variant = val == "sigmoid" ? ForgetVariant::Sigmoid
                         : val == "exponential"
                             ? ForgetVariant::Exponential
                             : throw std::invalid_argument(
                                   "config: unknown forget_variant " + val);
      else if (key == "stabilized") c.stabilized = val == "1";
      else if (key == "path_merge")
        c.path_merge = val == "merged" ? PathMergeMode::Merged
                     : val == "alternating"
                         ? PathMergeMode::Alternating
                         : throw std::invalid_argument("config: unknown path_merge " +
                                                       val);
      else if (key == "num_classes") c.num_classes = std::stoll(val);
      else if (key == "precision") c.precision = val;
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
    if (seen != 13)
      throw std::invalid_argument("config: expected 13 fields, saw " +
                                  std::to_string(seen));
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    ModelConfig c;
    if (name == "desk-tiny") {
      // defaults above: 32x32x1, P=4, D=32, L=2, 4 heads
      return c;
    }
    if (name == "paper-xlstm-fer") {
      c.image_h = c.image_w = 224;
      c.channels = 3;
      c.patch = 16;
      c.embed_dim = 384;
      c.depth = 26;
      c.expansion = 2;  // q/k/v width 768
      c.head_count = 192;
      c.num_classes = 7;
      return c;
    }
    throw std::invalid_argument("config: unknown preset '" + name +
                                "' (try desk-tiny or paper-xlstm-fer)");
  }
};

/// Mean of the first and last token; the sequence-level feature the
/// classifier consumes. A single-token sequence aggregates to itself.
template <typename S>
Tensor<S> aggregate(const Tensor<S>& tokens) {
  if (tokens.ndim() != 2 || tokens.rows() < 1)
    throw std::invalid_argument("aggregate: expected a nonempty NxD sequence, got " +
                                shape_str(tokens.shape()));
  const Index n = tokens.rows();
  return scale(add(slice_rows(tokens, 0, 1), slice_rows(tokens, n - 1, n)), S(0.5));
}

/// -log softmax(logits)[label], assembled in the log domain (max-shifted
/// log-sum-exp) so extreme logits stay finite.
template <typename S>
Tensor<S> cross_entropy_logits(const Tensor<S>& logits, Index label) {
  if (logits.rows() != 1)
    throw std::invalid_argument("cross_entropy: expected one logit row, got " +
                                shape_str(logits.shape()));
  if (label < 0 || label >= logits.cols())
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                " out of range for " + std::to_string(logits.cols()) +
                                " classes");
  S m = logits.at(0, 0);
  for (Index j = 1; j < logits.cols(); ++j) m = std::max(m, logits.at(0, j));
  Tensor<S> lse = shift(log(sum(exp(shift(logits, -m)))), m);
  return sub(lse, slice(logits, 0, 1, label, label + 1));
}

template <typename S>
struct Model {
  ModelConfig cfg;
  Tensor<S> projection;  // {P*P*C, D}
  Tensor<S> pos;         // {N, D}
  std::vector<BlockParams<S>> blocks;
  std::vector<PathMergeParams<S>> merges;  // one per block in Merged mode
  Tensor<S> final_ln_scale, final_ln_shift;
  Tensor<S> classifier_w;  // {D, K}, zero-init: initial predictions are uniform
  Tensor<S> classifier_b;  // {K}

  static Model init(const ModelConfig& config, Rng& rng) {
    config.validate();
    Model m;
    m.cfg = config;
    auto tn = [&rng](Shape shape) {
      Tensor<S> t = Tensor<S>::zeros(std::move(shape));
      for (Index i = 0; i < t.size(); ++i)
        t.mutable_data()[i] = static_cast<S>(rng.trunc_normal(0.02));
      t.set_requires_grad(true);
      return t;
    };
    auto fill = [](Shape shape, S v) {
      Tensor<S> t = Tensor<S>::full(std::move(shape), v);
      t.set_requires_grad(true);
      return t;
    };
    m.projection = tn({config.patch_len(), config.embed_dim});
    m.pos = tn({config.token_count(), config.embed_dim});
    for (Index l = 0; l < config.depth; ++l) {
      m.blocks.push_back(init_block<S>(config.embed_dim, config.d_inner(),
                                       config.head_count, rng));
      if (config.path_merge == PathMergeMode::Merged)
        m.merges.push_back(PathMergeParams<S>{fill({4}, S(0))});
    }
    m.final_ln_scale = fill({config.embed_dim}, S(1));
    m.final_ln_shift = fill({config.embed_dim}, S(0));
    m.classifier_w = fill({config.embed_dim, config.num_classes}, S(0));
    m.classifier_b = fill({config.num_classes}, S(0));
    return m;
  }

  /// Stable hierarchical parameter registry; checkpoint keys and optimizer
  /// slots are keyed by these names.
  std::vector<ParamGroup<S>> parameters() {
    std::vector<ParamGroup<S>> ps;
    ps.push_back({"embed.projection", projection});
    ps.push_back({"embed.pos", pos});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      std::string b = "block" + std::to_string(l) + ".";
      BlockParams<S>& p = blocks[l];
      ps.push_back({b + "ln_scale", p.ln_scale});
      ps.push_back({b + "ln_shift", p.ln_shift});
      ps.push_back({b + "up", p.up});
      ps.push_back({b + "conv_kernel", p.conv_kernel});
      ps.push_back({b + "mlstm.wq", p.mlstm.wq});
      ps.push_back({b + "mlstm.wk", p.mlstm.wk});
      ps.push_back({b + "mlstm.wv", p.mlstm.wv});
      ps.push_back({b + "mlstm.bq", p.mlstm.bq});
      ps.push_back({b + "mlstm.bk", p.mlstm.bk});
      ps.push_back({b + "mlstm.bv", p.mlstm.bv});
      ps.push_back({b + "mlstm.wi", p.mlstm.wi});
      ps.push_back({b + "mlstm.wf", p.mlstm.wf});
      ps.push_back({b + "mlstm.bi", p.mlstm.bi});
      ps.push_back({b + "mlstm.bf", p.mlstm.bf});
      ps.push_back({b + "mlstm.wo", p.mlstm.wo});
      ps.push_back({b + "mlstm.bo", p.mlstm.bo});
      ps.push_back({b + "gn_scale", p.gn_scale});
      ps.push_back({b + "gn_shift", p.gn_shift});
      ps.push_back({b + "lambda", p.lambda});
      ps.push_back({b + "down", p.down});
      if (cfg.path_merge == PathMergeMode::Merged)
        ps.push_back({b + "merge", merges[l].logits});
    }
    ps.push_back({"final_ln.scale", final_ln_scale});
    ps.push_back({"final_ln.shift", final_ln_shift});
    ps.push_back({"classifier.w", classifier_w});
    ps.push_back({"classifier.b", classifier_b});
    return ps;
  }

  /// Gradient tracking toggle: off for inference/bench so intermediate graph
  /// nodes free as they fall out of scope.
  void set_training(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
  }

  /// Encoder output (after the final layer norm): {N, D}.
  Tensor<S> encode(const Tensor<S>& image) const {
    if (image.shape() != Shape{cfg.image_h, cfg.image_w, cfg.channels})
      throw std::invalid_argument("model: image " + shape_str(image.shape()) +
                                  " does not match configured " +
                                  shape_str({cfg.image_h, cfg.image_w, cfg.channels}));
    TokenSequence<S> ts = embed(patchify(image, cfg.patch), projection, pos);
    Tensor<S> x = ts.tokens;
    GateConfig gate = cfg.gate_config();
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      if (cfg.path_merge == PathMergeMode::Merged)
        x = block_forward_merged(x, blocks[l], gate, ts.grid_rows, ts.grid_cols,
                                 merges[l]);
      else
        x = block_forward(x, blocks[l], gate,
                          scan_order(ts.grid_rows, ts.grid_cols,
                                     kAllDirections[l % 4]));
    }
    return layer_norm(x, final_ln_scale, final_ln_shift);
  }

  /// {1, K} classifier outputs.
  Tensor<S> logits(const Tensor<S>& image) const {
    Tensor<S> feat = aggregate(encode(image));
    return add(matmul(feat, classifier_w), classifier_b);
  }

  Tensor<S> probabilities(const Tensor<S>& image) const { return softmax(logits(image)); }
};

}  // namespace xlv
