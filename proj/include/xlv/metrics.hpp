#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xlv/tensor.hpp"

namespace xlv {

/// Rows are true classes, columns are predictions. Counts are integers so
/// accuracy == trace/total holds exactly.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(Index classes);

  void add(Index truth, Index predicted);
  Index classes() const { return k_; }
  std::int64_t at(Index truth, Index predicted) const;
  std::int64_t total() const;
  std::int64_t trace() const;
  double accuracy() const;
  /// diagonal / row total; rows with no samples report 0
  std::vector<double> per_class_accuracy() const;

  /// Header row of class names, then classes() rows of integer counts.
  std::string to_csv(const std::vector<std::string>& names) const;
  /// Self-contained heatmap for human reading.
  std::string to_svg(const std::vector<std::string>& names) const;

 private:
  Index k_;
  std::vector<std::int64_t> counts_;
};

struct MetricsRow {
  Index epoch = 0;
  double train_loss = 0, train_acc = 0, eval_acc = 0, seconds = 0;
};

/// Appends to `epoch,train_loss,train_acc,eval_acc,seconds`, creating the
/// file with its header when absent.
void append_metrics_csv(const std::string& path, const MetricsRow& row);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace xlv
