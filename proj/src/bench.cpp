#include <chrono>
#include <sstream>

#include "xlv/mlstm.hpp"
#include "xlv/train.hpp"

namespace xlv {

namespace {

void freeze(MLstmParams<double>& p) {
  for (Tensor<double>* t : {&p.wq, &p.wk, &p.wv, &p.bq, &p.bk, &p.bv, &p.wi, &p.wf,
                            &p.bi, &p.bf, &p.wo, &p.bo})
    t->set_requires_grad(false);
}

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

std::vector<BenchRow> bench_mlstm(const std::vector<Index>& lengths, int reps,
                                  std::uint64_t seed) {
  if (lengths.empty() || reps < 1)
    throw std::invalid_argument("bench: need at least one length and one repetition");
  GateConfig gate;  // sigmoid forget, stabilized
  std::vector<BenchRow> rows;

  for (Index n : lengths) {
    if (n < 1) throw std::invalid_argument("bench: sequence length must be positive");
    Rng rng(seed ^ (0x9e3779b97f4a7c15ull * std::uint64_t(n)));
    MLstmParams<double> params = init_mlstm<double>(64, 4, 16, rng);
    freeze(params);
    Tensor<double> x = Tensor<double>::zeros({n, 64});
    for (Index i = 0; i < x.size(); ++i)
      x.mutable_data()[i] = rng.uniform(-1.0, 1.0);

    Tensor<double> rec = forward_recurrent(x, x, params, gate);  // warm both paths
    Tensor<double> par = forward_parallel(x, x, params, gate);
    double dev = 0;
    for (Index i = 0; i < rec.size(); ++i)
      dev = std::max(dev, std::abs(rec.data()[i] - par.data()[i]));

    auto timed = [&](const char* form, auto&& fn) {
      const std::size_t base = alloc_stats::current();
      alloc_stats::reset_peak();
      const double t0 = now_seconds();
      for (int r = 0; r < reps; ++r) {
        Tensor<double> out = fn();
        (void)out;
      }
      const double total = now_seconds() - t0;
      BenchRow row;
      row.form = form;
      row.n = n;
      row.reps = reps;
      row.seconds_total = total;
      row.seconds_per_token = total / (double(reps) * double(n));
      row.peak_bytes = alloc_stats::peak() - base;
      row.max_dev = dev;
      rows.push_back(row);
    };
    timed("recurrent", [&] { return forward_recurrent(x, x, params, gate); });
    timed("parallel", [&] { return forward_parallel(x, x, params, gate); });
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "form,n,reps,seconds_total,seconds_per_token,peak_bytes\n";
  for (const auto& r : rows)
    os << r.form << "," << r.n << "," << r.reps << "," << r.seconds_total << ","
       << r.seconds_per_token << "," << r.peak_bytes << "\n";
  return os.str();
}

}  // namespace xlv
