#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <vector>

#include "xlv/alloc_stats.hpp"
#include "xlv/checkpoint.hpp"
#include "xlv/config.hpp"
#include "xlv/dataset.hpp"
#include "xlv/metrics.hpp"
#include "xlv/model.hpp"

namespace xlv {

/// Raised when the loss leaves the finite range; the last completed epoch's
/// checkpoints stay on disk untouched.
struct TrainDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename S>
Tensor<S> to_scalar(const Tensor<float>& t) {
  Tensor<S> out = Tensor<S>::zeros(t.shape());
  for (Index i = 0; i < t.size(); ++i)
    out.mutable_data()[i] = static_cast<S>(t.data()[i]);
  return out;
}

/// Adaptive moments with decoupled weight decay. Decay touches only tensors
/// of rank >= 2 (projection matrices); biases, gains, and gates are exempt.
template <typename S>
class AdamW {
 public:
  AdamW(double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {}

  void attach(const std::vector<ParamGroup<S>>& params) {
    m_.clear();
    v_.clear();
    names_.clear();
    for (const auto& g : params) {
      m_.push_back(Tensor<S>::zeros(g.tensor.shape()));
      v_.push_back(Tensor<S>::zeros(g.tensor.shape()));
      names_.push_back(g.name);
    }
    t_ = 0;
  }

  void step(std::vector<ParamGroup<S>>& params, double lr_now) {
    if (params.size() != m_.size())
      throw std::logic_error("optimizer: attached to a different parameter set");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, double(t_));
    const double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& p = params[i].tensor;
      const Index n = p.size();
      S* pv = p.mutable_data();
      S* m = m_[i].mutable_data();
      S* v = v_[i].mutable_data();
      const bool decay = p.ndim() >= 2;
      for (Index j = 0; j < n; ++j) {
        const double g = p.has_grad() ? double(p.grad_at(j)) : 0.0;
        m[j] = S(beta1_ * double(m[j]) + (1.0 - beta1_) * g);
        v[j] = S(beta2_ * double(v[j]) + (1.0 - beta2_) * g * g);
        double update = (double(m[j]) / bc1) /
                        (std::sqrt(double(v[j]) / bc2) + eps_);
        if (decay) update += wd_ * double(pv[j]);
        pv[j] = S(double(pv[j]) - lr_now * update);
      }
    }
  }

  std::int64_t step_count() const { return t_; }

  /// Moment tensors under "opt.m.<name>" / "opt.v.<name>" for checkpoints.
  std::vector<ParamGroup<S>> state() {
    std::vector<ParamGroup<S>> out;
    for (std::size_t i = 0; i < m_.size(); ++i) {
      out.push_back({"opt.m." + names_[i], m_[i]});
      out.push_back({"opt.v." + names_[i], v_[i]});
    }
    return out;
  }

  void restore(const LoadedCheckpoint<S>& ck) {
    for (std::size_t i = 0; i < m_.size(); ++i) {
      auto load_slot = [&](const std::string& key, Tensor<S>& slot) {
        auto it = ck.tensors.find(key);
        if (it == ck.tensors.end())
          throw std::runtime_error("checkpoint: missing optimizer slot '" + key + "'");
        if (it->second.shape() != slot.shape())
          throw std::runtime_error("checkpoint: optimizer slot '" + key +
                                   "' shape mismatch");
        std::memcpy(slot.mutable_data(), it->second.data(),
                    sizeof(S) * std::size_t(slot.size()));
      };
      load_slot("opt.m." + names_[i], m_[i]);
      load_slot("opt.v." + names_[i], v_[i]);
    }
    t_ = ck.meta.opt_step;
  }

 private:
  double lr_, wd_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<Tensor<S>> m_, v_;
  std::vector<std::string> names_;
};

inline double scheduled_lr(const TrainConfig& cfg, double progress) {
  if (cfg.schedule == "constant") return cfg.lr;
  progress = std::clamp(progress, 0.0, 1.0);
  return cfg.lr_min +
         0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(progress * 3.14159265358979));
}

template <typename S>
struct EvalOutcome {
  double mean_loss = 0;
  ConfusionMatrix confusion;
};

template <typename S>
Index predict_label(const Tensor<S>& logits) {
  Index best = 0;
  for (Index j = 1; j < logits.cols(); ++j)
    if (logits.at(0, j) > logits.at(0, best)) best = j;
  return best;
}

/// Deterministic pass in inference mode (gradient tracking suspended so the
/// per-sample graphs free eagerly). Restores training mode on exit.
template <typename S>
EvalOutcome<S> evaluate_model(Model<S>& model, const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("eval: empty dataset");
  model.set_training(false);
  EvalOutcome<S> out{0, ConfusionMatrix(model.cfg.num_classes)};
  for (const auto& s : samples) {
    if (s.label >= model.cfg.num_classes)
      throw std::invalid_argument("eval: sample " + s.source + " has class " +
                                  std::to_string(s.label) + " but the model has " +
                                  std::to_string(model.cfg.num_classes));
    Tensor<S> logits = model.logits(to_scalar<S>(s.image));
    out.mean_loss += cross_entropy_logits(logits, s.label).item();
    out.confusion.add(s.label, predict_label(logits));
  }
  model.set_training(true);
  out.mean_loss /= double(samples.size());
  return out;
}

template <typename S>
struct TrainOutcome {
  std::vector<MetricsRow> history;
  std::string final_checkpoint;
  Index epochs_run = 0;
  double final_train_acc = 0;
  double final_eval_acc = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

template <typename S>
void save_train_checkpoint(const std::string& dir, const std::string& stem,
                           Model<S>& model, AdamW<S>& opt, Index epoch,
                           std::uint64_t seed) {
  auto groups = model.parameters();
  auto extra = opt.state();
  groups.insert(groups.end(), extra.begin(), extra.end());
  CheckpointMeta meta{epoch, seed, opt.step_count()};
  save_checkpoint((std::filesystem::path(dir) / stem).string(), model.cfg, groups,
                  meta);
}

inline std::string epoch_stem(Index epoch) {
  std::ostringstream os;
  os << "epoch-" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
  return os.str();
}

}  // namespace detail

/// Single-worker deterministic loop: seeded init, seeded shuffles, per-sample
/// backward with mean scaling, one optimizer step per batch. Writes
/// metrics.csv (fresh per run), a checkpoint per epoch, and final.ckpt after
/// every completed epoch. Stops early once a clean pass scores 100% on the
/// training set.
template <typename S>
TrainOutcome<S> train_model(const TrainConfig& cfg, const LoadedDataset& train_ds,
                            const LoadedDataset* val_ds, std::ostream& log) {
  cfg.validate();
  const Index k = cfg.model.num_classes;
  if (Index(train_ds.classes.size()) != k)
    throw std::invalid_argument("train: dataset has " +
                                std::to_string(train_ds.classes.size()) +
                                " classes but the model expects " + std::to_string(k));
  if (val_ds && Index(val_ds->classes.size()) != k)
    throw std::invalid_argument("train: validation set has " +
                                std::to_string(val_ds->classes.size()) +
                                " classes but the model expects " + std::to_string(k));
  std::filesystem::create_directories(cfg.out_dir);
  const std::string metrics_path =
      (std::filesystem::path(cfg.out_dir) / "metrics.csv").string();
  std::filesystem::remove(metrics_path);

  Rng rng(cfg.seed);
  Model<S> model = Model<S>::init(cfg.model, rng);
  AdamW<S> opt(cfg.lr, cfg.weight_decay);
  auto params = model.parameters();
  opt.attach(params);

  TrainOutcome<S> out;
  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&t_start]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
        .count();
  };

  // epoch 0: the untrained model, evaluated before any step
  {
    EvalOutcome<S> tr = evaluate_model(model, train_ds.samples);
    MetricsRow row;
    row.epoch = 0;
    row.train_loss = tr.mean_loss;
    row.train_acc = tr.confusion.accuracy();
    row.eval_acc = val_ds ? evaluate_model(model, val_ds->samples).confusion.accuracy()
                          : std::numeric_limits<double>::quiet_NaN();
    row.seconds = elapsed();
    append_metrics_csv(metrics_path, row);
    out.history.push_back(row);
    detail::save_train_checkpoint(cfg.out_dir, detail::epoch_stem(0), model, opt, 0,
                                  cfg.seed);
    detail::save_train_checkpoint(cfg.out_dir, "final.ckpt", model, opt, 0, cfg.seed);
    log << "epoch 0 loss " << row.train_loss << " acc " << row.train_acc << "\n";
  }

  const Index n = Index(train_ds.samples.size());
  const Index batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = double(std::max<Index>(1, cfg.epochs * batches));
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[std::size_t(i)] = i;
  std::int64_t step = 0;

  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double t_epoch = elapsed();
    // seeded Fisher-Yates; the only consumer of rng after init
    for (Index i = n - 1; i > 0; --i)
      std::swap(order[std::size_t(i)], order[std::size_t(rng.integer(0, i))]);

    double loss_sum = 0;
    Index correct = 0;
    for (Index b = 0; b < batches; ++b) {
      const Index lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      const double lr_now = scheduled_lr(cfg, double(step) / total_steps);
      for (auto& g : params) g.tensor.zero_grad();
      for (Index i = lo; i < hi; ++i) {
        const Sample& s = train_ds.samples[std::size_t(order[std::size_t(i)])];
        Tensor<S> logits = model.logits(to_scalar<S>(s.image));
        Tensor<S> loss = cross_entropy_logits(logits, s.label);
        const double l = double(loss.item());
        if (!std::isfinite(l))
          throw TrainDiverged("train: non-finite loss at epoch " +
                              std::to_string(epoch) + "; last-good checkpoint is " +
                              detail::epoch_stem(epoch - 1));
        loss_sum += l;
        correct += (predict_label(logits) == s.label);
        backward(scale(loss, S(1.0 / double(hi - lo))));
      }
      opt.step(params, lr_now);
      ++step;
    }

    MetricsRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / double(n);
    row.train_acc = double(correct) / double(n);
    row.eval_acc = val_ds ? evaluate_model(model, val_ds->samples).confusion.accuracy()
                          : std::numeric_limits<double>::quiet_NaN();
    row.seconds = elapsed() - t_epoch;
    append_metrics_csv(metrics_path, row);
    out.history.push_back(row);
    detail::save_train_checkpoint(cfg.out_dir, detail::epoch_stem(epoch), model, opt,
                                  epoch, cfg.seed);
    detail::save_train_checkpoint(cfg.out_dir, "final.ckpt", model, opt, epoch,
                                  cfg.seed);
    out.epochs_run = epoch;
    out.final_train_acc = row.train_acc;
    out.final_eval_acc = row.eval_acc;
    log << "epoch " << epoch << " loss " << row.train_loss << " acc "
        << row.train_acc << " eval " << row.eval_acc << " lr-step " << step << "\n";

    if (row.train_acc == 1.0) {
      EvalOutcome<S> clean = evaluate_model(model, train_ds.samples);
      if (clean.confusion.accuracy() == 1.0) {
        out.final_train_acc = 1.0;
        log << "training set fully memorized after epoch " << epoch
            << "; stopping early\n";
        break;
      }
    }
  }

  out.final_checkpoint =
      (std::filesystem::path(cfg.out_dir) / "final.ckpt").string();
  return out;
}

struct BenchRow {
  std::string form;
  Index n = 0;
  int reps = 0;
  double seconds_total = 0;      // summed over reps
  double seconds_per_token = 0;  // seconds_total / (reps * n)
  std::size_t peak_bytes = 0;
  double max_dev = 0;  // |parallel - recurrent| at this length
};

/// Times both mLSTM evaluation forms on a desk-tiny-shaped layer (float64,
/// inference mode) and cross-checks their outputs.
std::vector<BenchRow> bench_mlstm(const std::vector<Index>& lengths, int reps,
                                  std::uint64_t seed);

/// One line per row: form,n,reps,seconds_total,seconds_per_token,peak_bytes.
std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace xlv
