#pragma once

#include <array>
#include <string>
#include <vector>

#include "xlv/ops.hpp"
#include "xlv/tensor.hpp"

namespace xlv {

/// The four grid traversals. Row scans walk the row-major token order;
/// column scans walk column-major; backward variants reverse their forward
/// counterparts end to end.
enum class ScanDirection { RowForward, RowBackward, ColForward, ColBackward };

inline constexpr std::array<ScanDirection, 4> kAllDirections = {
    ScanDirection::RowForward, ScanDirection::RowBackward,
    ScanDirection::ColForward, ScanDirection::ColBackward};

inline const char* to_string(ScanDirection d) {
  switch (d) {
    case ScanDirection::RowForward: return "row_forward";
    case ScanDirection::RowBackward: return "row_backward";
    case ScanDirection::ColForward: return "col_forward";
    case ScanDirection::ColBackward: return "col_backward";
  }
  return "?";
}

/// Visit order over row-major token indices: position i of the result names
/// the token visited at sequence step i.
inline std::vector<Index> scan_order(Index rows, Index cols, ScanDirection dir) {
  if (rows < 1 || cols < 1)
    throw std::invalid_argument("scan_order: grid must be at least 1x1, got " +
                                std::to_string(rows) + "x" + std::to_string(cols));
  std::vector<Index> order;
  order.reserve(rows * cols);
  switch (dir) {
    case ScanDirection::RowForward:
      for (Index i = 0; i < rows * cols; ++i) order.push_back(i);
      break;
    case ScanDirection::RowBackward:
      for (Index i = rows * cols; i-- > 0;) order.push_back(i);
      break;
    case ScanDirection::ColForward:
      for (Index c = 0; c < cols; ++c)
        for (Index r = 0; r < rows; ++r) order.push_back(r * cols + c);
      break;
    case ScanDirection::ColBackward:
      for (Index c = cols; c-- > 0;)
        for (Index r = rows; r-- > 0;) order.push_back(r * cols + c);
      break;
  }
  return order;
}

/// Learnable merge weights over the four directions: weights = softmax(logits).
template <typename S>
struct PathMergeParams {
  Tensor<S> logits;  // {4}

  Tensor<S> weights() const { return softmax(logits); }
};

/// Softmax-weighted sum of the four directional outputs, which the caller has
/// already mapped back to original token order.
template <typename S>
Tensor<S> merge_paths(const std::vector<Tensor<S>>& outputs,
                      const PathMergeParams<S>& params) {
  if (outputs.size() != 4)
    throw std::invalid_argument("merge_paths: expected 4 path outputs, got " +
                                std::to_string(outputs.size()));
  if (params.logits.size() != 4)
    throw std::invalid_argument("merge_paths: expected 4 merge logits, got shape " +
                                shape_str(params.logits.shape()));
  for (int i = 1; i < 4; ++i)
    if (outputs[i].shape() != outputs[0].shape())
      throw std::invalid_argument("merge_paths: path output shapes differ, " +
                                  shape_str(outputs[0].shape()) + " vs " +
                                  shape_str(outputs[i].shape()));
  Tensor<S> w = params.weights();
  Tensor<S> acc = mul(outputs[0], slice(w, 0, 1, 0, 1));
  for (int i = 1; i < 4; ++i)
    acc = add(acc, mul(outputs[i], slice(w, 0, 1, i, i + 1)));
  return acc;
}

}  // namespace xlv
