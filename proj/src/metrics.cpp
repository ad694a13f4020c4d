#include "xlv/metrics.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace xlv {

ConfusionMatrix::ConfusionMatrix(Index classes) : k_(classes) {
  if (classes < 1)
    throw std::invalid_argument("confusion: need at least one class");
  counts_.assign(std::size_t(k_ * k_), 0);
}

void ConfusionMatrix::add(Index truth, Index predicted) {
  if (truth < 0 || truth >= k_ || predicted < 0 || predicted >= k_)
    throw std::out_of_range("confusion: class pair (" + std::to_string(truth) +
                            "," + std::to_string(predicted) + ") outside " +
                            std::to_string(k_) + " classes");
  ++counts_[std::size_t(truth * k_ + predicted)];
}

std::int64_t ConfusionMatrix::at(Index truth, Index predicted) const {
  return counts_[std::size_t(truth * k_ + predicted)];
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (Index i = 0; i < k_; ++i) t += at(i, i);
  return t;
}

double ConfusionMatrix::accuracy() const {
  std::int64_t n = total();
  return n == 0 ? 0.0 : double(trace()) / double(n);
}

std::vector<double> ConfusionMatrix::per_class_accuracy() const {
  std::vector<double> acc(std::size_t(k_), 0.0);
  for (Index i = 0; i < k_; ++i) {
    std::int64_t row = 0;
    for (Index j = 0; j < k_; ++j) row += at(i, j);
    if (row > 0) acc[std::size_t(i)] = double(at(i, i)) / double(row);
  }
  return acc;
}

std::string ConfusionMatrix::to_csv(const std::vector<std::string>& names) const {
  if (Index(names.size()) != k_)
    throw std::invalid_argument("confusion: " + std::to_string(names.size()) +
                                " names for " + std::to_string(k_) + " classes");
  std::ostringstream os;
  for (Index j = 0; j < k_; ++j) os << (j ? "," : "") << names[std::size_t(j)];
  os << "\n";
  for (Index i = 0; i < k_; ++i) {
    for (Index j = 0; j < k_; ++j) os << (j ? "," : "") << at(i, j);
    os << "\n";
  }
  return os.str();
}

std::string ConfusionMatrix::to_svg(const std::vector<std::string>& names) const {
  if (Index(names.size()) != k_)
    throw std::invalid_argument("confusion: " + std::to_string(names.size()) +
                                " names for " + std::to_string(k_) + " classes");
  const int cell = 48, margin = 96;
  const int size = margin + int(k_) * cell + 8;
  std::int64_t peak = *std::max_element(counts_.begin(), counts_.end());
  if (peak == 0) peak = 1;

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size
     << "\" height=\"" << size << "\" font-family=\"monospace\" font-size=\"11\">\n";
  os << "<text x=\"8\" y=\"16\">rows: true, cols: predicted</text>\n";
  for (Index i = 0; i < k_; ++i) {
    os << "<text x=\"4\" y=\"" << margin + int(i) * cell + cell / 2 + 4
       << "\">" << names[std::size_t(i)] << "</text>\n";
    os << "<text x=\"" << margin + int(i) * cell + 4 << "\" y=\"" << margin - 8
       << "\" transform=\"rotate(-45 " << margin + int(i) * cell + 4 << " "
       << margin - 8 << ")\">" << names[std::size_t(i)] << "</text>\n";
  }
  for (Index i = 0; i < k_; ++i)
    for (Index j = 0; j < k_; ++j) {
      double frac = double(at(i, j)) / double(peak);
      int shade = int(255.0 - 205.0 * frac);
      os << "<rect x=\"" << margin + int(j) * cell << "\" y=\""
         << margin + int(i) * cell << "\" width=\"" << cell << "\" height=\""
         << cell << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" "
         << "stroke=\"#888\"/>\n";
      os << "<text x=\"" << margin + int(j) * cell + cell / 2 << "\" y=\""
         << margin + int(i) * cell + cell / 2 + 4
         << "\" text-anchor=\"middle\">" << at(i, j) << "</text>\n";
    }
  os << "</svg>\n";
  return os.str();
}

void append_metrics_csv(const std::string& path, const MetricsRow& row) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("metrics: cannot open " + path);
  if (fresh) os << "epoch,train_loss,train_acc,eval_acc,seconds\n";
  os << row.epoch << "," << row.train_loss << "," << row.train_acc << ","
     << row.eval_acc << "," << row.seconds << "\n";
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << content;
}

}  // namespace xlv
