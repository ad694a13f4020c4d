#pragma once

#include <memory>
#include <string>
#include <vector>

#include "xlv/ops.hpp"
#include "xlv/tensor.hpp"

namespace xlv {

/// Non-overlapping P x P x C patches of an image, one flattened patch per
/// row, ordered row-major over the patch grid.
template <typename S>
struct PatchSequence {
  Tensor<S> tokens;  // N x (P*P*C)
  Index grid_rows = 0;
  Index grid_cols = 0;
};

/// Embedded tokens: N x D plus the grid geometry the path scans need to map
/// sequence position back to 2D location.
template <typename S>
struct TokenSequence {
  Tensor<S> tokens;  // N x D
  Index grid_rows = 0;
  Index grid_cols = 0;
};

/// Cuts an H x W x C image into a PatchSequence. Patch (r,c) lands at token
/// index r*grid_cols + c; within a token, elements run row-major over
/// (pixel row, pixel col, channel).
template <typename S>
PatchSequence<S> patchify(const Tensor<S>& image, Index patch) {
  if (image.ndim() != 3)
    throw std::invalid_argument("patchify: expected HxWxC image, got " +
                                shape_str(image.shape()));
  const Index h = image.shape()[0], w = image.shape()[1], c = image.shape()[2];
  if (patch < 1 || h % patch != 0 || w % patch != 0)
    throw std::invalid_argument("patchify: image " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by patch size " +
                                std::to_string(patch));
  const Index gr = h / patch, gc = w / patch;
  const Index n = gr * gc, plen = patch * patch * c;

  auto idx = std::make_shared<std::vector<Index>>();
  idx->reserve(n * plen);
  for (Index r = 0; r < gr; ++r)
    for (Index col = 0; col < gc; ++col)
      for (Index pr = 0; pr < patch; ++pr)
        for (Index pc = 0; pc < patch; ++pc)
          for (Index ch = 0; ch < c; ++ch)
            idx->push_back(((r * patch + pr) * w + (col * patch + pc)) * c + ch);

  PatchSequence<S> out;
  out.tokens = gather_flat(image, std::move(idx), Shape{n, plen});
  out.grid_rows = gr;
  out.grid_cols = gc;
  return out;
}

/// Linear projection to the model dimension plus a learnable positional
/// table: tokens = patches * projection + pos. The pos table is indexed by
/// grid position, so its row count must match the patch grid exactly.
template <typename S>
TokenSequence<S> embed(const PatchSequence<S>& patches, const Tensor<S>& projection,
                       const Tensor<S>& pos) {
  const Index n = patches.tokens.rows();
  if (projection.ndim() != 2 || projection.rows() != patches.tokens.cols())
    throw std::invalid_argument("embed: projection " + shape_str(projection.shape()) +
                                " does not accept patch length " +
                                std::to_string(patches.tokens.cols()));
  if (pos.ndim() != 2 || pos.rows() != n || pos.cols() != projection.cols())
    throw std::invalid_argument(
        "embed: positional table " + shape_str(pos.shape()) + " does not match " +
        std::to_string(n) + " tokens of width " + std::to_string(projection.cols()));
  TokenSequence<S> out;
  out.tokens = add(matmul(patches.tokens, projection), pos);
  out.grid_rows = patches.grid_rows;
  out.grid_cols = patches.grid_cols;
  return out;
}

}  // namespace xlv
