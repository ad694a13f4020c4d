// xlv — train, evaluate, and probe the xLSTM vision classifier.
//
// Exit codes: 0 success, 64 usage, 65 config, 66 io, 67 train-diverged,
// 68 gradcheck, 70 internal. Failures print one line to stderr:
//   error: category=<cat> <message>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xlv/checkpoint.hpp"
#include "xlv/config.hpp"
#include "xlv/dataset.hpp"
#include "xlv/image_io.hpp"
#include "xlv/train.hpp"

namespace fs = std::filesystem;
using namespace xlv;

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

int fail(const std::string& category, const std::string& message) {
  static const std::map<std::string, int> codes = {
      {"usage", 64},          {"config", 65}, {"io", 66},
      {"train-diverged", 67}, {"gradcheck", 68}, {"internal", 70}};
  std::cerr << "error: category=" << category << " " << one_line(message) << "\n";
  return codes.at(category);
}

std::string env_out_dir() {
  const char* v = std::getenv("XLV_OUT_DIR");
  return v ? std::string(v) : std::string();
}

void print_warnings(const LoadedDataset& ds) {
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
}

PreprocessOptions preprocess_for(const ModelConfig& m,
                                 const std::vector<float>& mean,
                                 const std::vector<float>& stddev) {
  PreprocessOptions opt;
  opt.height = m.image_h;
  opt.width = m.image_w;
  opt.channels = m.channels;
  opt.mean = mean;
  opt.stddev = stddev;
  return opt;
}

const LabelMap* declared_labels(const std::string& name, LabelMap& storage) {
  if (name.empty()) return nullptr;
  storage = label_map(name);
  return &storage;
}

std::vector<std::string> class_names_for(Index k, const std::string& labels_name) {
  if (!labels_name.empty()) {
    const LabelMap& m = label_map(labels_name);
    if (Index(m.classes.size()) != k)
      throw std::invalid_argument("label map '" + labels_name + "' has " +
                                  std::to_string(m.classes.size()) +
                                  " classes, checkpoint has " + std::to_string(k));
    return m.classes;
  }
  return synth_class_names(k);
}

// ---------------------------------------------------------------- train ----

struct TrainArgs {
  std::string config_path, preset, data, val_data, out, precision;
  Index epochs = -1, batch_size = -1;
  double lr = -1;
  std::int64_t seed = -1;
};

template <typename S>
int run_train(const TrainConfig& cfg) {
  LabelMap storage;
  const LabelMap* declared = declared_labels(cfg.label_map_name, storage);
  PreprocessOptions opt = preprocess_for(cfg.model, cfg.norm_mean, cfg.norm_std);
  LoadedDataset train_ds = load_dataset(cfg.train_data, opt, declared, "train");
  print_warnings(train_ds);
  LoadedDataset val_ds;
  if (!cfg.val_data.empty()) {
    val_ds = load_dataset(cfg.val_data, opt, declared, "val");
    print_warnings(val_ds);
  }
  auto out = train_model<S>(cfg, train_ds, cfg.val_data.empty() ? nullptr : &val_ds,
                            std::cout);
  std::cout << "trained " << out.epochs_run << " epochs, train acc "
            << out.final_train_acc;
  if (std::isfinite(out.final_eval_acc))
    std::cout << ", eval acc " << out.final_eval_acc;
  std::cout << "\nfinal checkpoint " << out.final_checkpoint << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config_path.empty())
    cfg = train_config_from(parse_config_file(a.config_path));
  if (!a.preset.empty()) cfg.model = ModelConfig::preset(a.preset);
  if (a.config_path.empty() && a.preset.empty())
    cfg.model = ModelConfig::preset("desk-tiny");
  if (!env_out_dir().empty()) cfg.out_dir = env_out_dir();
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (!a.data.empty()) cfg.train_data = a.data;
  if (!a.val_data.empty()) cfg.val_data = a.val_data;
  if (!a.precision.empty()) cfg.model.precision = a.precision;
  if (a.epochs >= 0) cfg.epochs = a.epochs;
  if (a.batch_size >= 0) cfg.batch_size = a.batch_size;
  if (a.lr >= 0) cfg.lr = a.lr;
  if (a.seed >= 0) cfg.seed = std::uint64_t(a.seed);
  if (cfg.train_data.empty())
    throw std::invalid_argument("no training data: pass --data or a config file");
  cfg.validate();
  return cfg.model.precision == "float64" ? run_train<double>(cfg)
                                          : run_train<float>(cfg);
}

// ----------------------------------------------------------------- eval ----

struct EvalArgs {
  std::string ckpt, data, labels, out;
  std::vector<float> mean, stddev;
};

template <typename S>
int run_eval(const EvalArgs& a) {
  LoadedCheckpoint<S> peek = load_checkpoint<S>(a.ckpt);
  Rng rng(0);
  Model<S> model = Model<S>::init(peek.config, rng);
  load_into_model(a.ckpt, model);

  LabelMap storage;
  const LabelMap* declared = declared_labels(a.labels, storage);
  PreprocessOptions opt = preprocess_for(model.cfg, a.mean, a.stddev);
  LoadedDataset ds = load_dataset(a.data, opt, declared, "test");
  print_warnings(ds);
  if (Index(ds.classes.size()) != model.cfg.num_classes)
    throw std::invalid_argument("dataset has " + std::to_string(ds.classes.size()) +
                                " classes but the checkpoint has " +
                                std::to_string(model.cfg.num_classes));

  EvalOutcome<S> out = evaluate_model(model, ds.samples);
  const std::string dir = a.out.empty() ? (env_out_dir().empty() ? "." : env_out_dir())
                                        : a.out;
  fs::create_directories(dir);
  write_text_file((fs::path(dir) / "confusion.csv").string(),
                  out.confusion.to_csv(ds.classes));
  write_text_file((fs::path(dir) / "confusion.svg").string(),
                  out.confusion.to_svg(ds.classes));

  std::cout << "samples " << out.confusion.total() << "\n";
  std::cout << "mean_loss " << out.mean_loss << "\n";
  std::cout << "accuracy " << out.confusion.accuracy() << " (" << out.confusion.trace()
            << "/" << out.confusion.total() << ")\n";
  auto per = out.confusion.per_class_accuracy();
  for (std::size_t i = 0; i < per.size(); ++i)
    std::cout << "class " << ds.classes[i] << " acc " << per[i] << "\n";
  std::cout << "confusion " << (fs::path(dir) / "confusion.csv").string() << "\n";
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  return checkpoint_precision(a.ckpt) == "float64" ? run_eval<double>(a)
                                                   : run_eval<float>(a);
}

// ---------------------------------------------------------------- infer ----

struct InferArgs {
  std::string ckpt, image, labels;
  std::vector<float> mean, stddev;
};

template <typename S>
int run_infer(const InferArgs& a) {
  LoadedCheckpoint<S> peek = load_checkpoint<S>(a.ckpt);
  Rng rng(0);
  Model<S> model = Model<S>::init(peek.config, rng);
  load_into_model(a.ckpt, model);
  model.set_training(false);

  RawImage raw = read_image(a.image);
  Tensor<float> img = preprocess(raw, preprocess_for(model.cfg, a.mean, a.stddev));
  Tensor<S> probs = model.probabilities(to_scalar<S>(img));

  const auto names = class_names_for(model.cfg.num_classes, a.labels);
  std::vector<Index> order(names.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = Index(i);
  std::sort(order.begin(), order.end(), [&](Index x, Index y) {
    return probs.at(0, x) > probs.at(0, y);
  });

  std::cout << "predicted " << names[std::size_t(order[0])] << "\n";
  std::cout << std::fixed << std::setprecision(6);
  for (Index i : order)
    std::cout << names[std::size_t(i)] << " " << double(probs.at(0, i)) << "\n";
  return 0;
}

int cmd_infer(const InferArgs& a) {
  return checkpoint_precision(a.ckpt) == "float64" ? run_infer<double>(a)
                                                   : run_infer<float>(a);
}

// ------------------------------------------------------------- gradcheck ---

struct GradcheckArgs {
  std::string preset = "desk-tiny";
  double eps = 1e-5;
  Index samples = 4;
  std::uint64_t seed = 17;
  double tol = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  ModelConfig mc = ModelConfig::preset(a.preset);
  mc.precision = "float64";
  Rng rng(a.seed);
  Model<double> model = Model<double>::init(mc, rng);

  // The classifier starts at zero, which silences every backbone gradient;
  // nudge all parameters off their init so the check exercises real values.
  auto params = model.parameters();
  for (auto& g : params) {
    double* p = g.tensor.mutable_data();
    for (Index i = 0; i < g.tensor.size(); ++i) p[i] += rng.normal(0.0, 0.1);
  }

  Tensor<double> image = Tensor<double>::zeros({mc.image_h, mc.image_w, mc.channels});
  for (Index i = 0; i < image.size(); ++i)
    image.mutable_data()[i] = rng.uniform(0.0, 1.0);
  const Index label = 1 % mc.num_classes;

  auto closure = [&]() { return cross_entropy_logits(model.logits(image), label); };
  GradReport report =
      grad_check<double>(closure, params, a.eps, a.samples, a.seed + 1);

  std::cout << std::left << std::setw(28) << "parameter" << std::right
            << std::setw(14) << "analytic" << std::setw(14) << "numeric"
            << std::setw(14) << "max_rel_err" << std::setw(9) << "checked\n";
  std::cout << std::scientific << std::setprecision(3);
  for (const auto& e : report.entries)
    std::cout << std::left << std::setw(28) << e.name << std::right << std::setw(14)
              << e.analytic_norm << std::setw(14) << e.numeric_norm << std::setw(14)
              << e.max_rel_err << std::setw(8) << e.checked << "\n";
  std::cout << "max_rel_err " << report.max_rel_err << " tolerance " << a.tol
            << "\n";
  if (!report.deterministic)
    return fail("gradcheck", "closure is not deterministic");
  if (!report.ok(a.tol)) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(3) << "max_rel_err "
       << report.max_rel_err << " exceeds tolerance " << a.tol;
    return fail("gradcheck", os.str());
  }
  std::cout << "gradcheck ok\n";
  return 0;
}

// ---------------------------------------------------------------- bench ----

struct BenchArgs {
  std::vector<Index> lengths = {49, 196, 784};
  int reps = 10;
  std::uint64_t seed = 7;
  std::string out;
};

int cmd_bench(const BenchArgs& a) {
  auto rows = bench_mlstm(a.lengths, a.reps, a.seed);
  const std::string csv = bench_csv(rows);
  std::cout << csv;
  for (const auto& r : rows)
    if (r.max_dev >= 1e-10)
      return fail("internal", "forms disagree at n=" + std::to_string(r.n));
  if (!a.out.empty()) write_text_file(a.out, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xLSTM vision classifier: patch-embedded images, matrix-memory "
               "recurrent blocks over four scan paths"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write checkpoints");
  train->add_option("--config", ta.config_path, "INI config file");
  train->add_option("--preset", ta.preset,
                    "Model preset (desk-tiny | paper-xlstm-fer); replaces the "
                    "config's [model] section");
  train->add_option("--data", ta.data, "Training data (dir, CSV, or synth:...)");
  train->add_option("--val-data", ta.val_data, "Validation data");
  train->add_option("--out", ta.out, "Output directory (default $XLV_OUT_DIR)");
  train->add_option("--epochs", ta.epochs, "Epoch count");
  train->add_option("--batch-size", ta.batch_size, "Batch size");
  train->add_option("--lr", ta.lr, "Peak learning rate");
  train->add_option("--seed", ta.seed, "RNG seed");
  train->add_option("--precision", ta.precision, "float32 | float64");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required();
  eval->add_option("--data", ea.data, "Dataset (dir, CSV, or synth:...)")->required();
  eval->add_option("--labels", ea.labels, "Named label map (ck+ | raf-db | ferplus)");
  eval->add_option("--out", ea.out, "Artifact directory for confusion.csv/.svg");
  eval->add_option("--normalize-mean", ea.mean, "Per-channel mean")->delimiter(',');
  eval->add_option("--normalize-std", ea.stddev, "Per-channel std")->delimiter(',');

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Classify a single image");
  infer->add_option("--ckpt", ia.ckpt, "Checkpoint file")->required();
  infer->add_option("--image", ia.image, "PNG or JPEG image")->required();
  infer->add_option("--labels", ia.labels, "Named label map for class names");
  infer->add_option("--normalize-mean", ia.mean, "Per-channel mean")->delimiter(',');
  infer->add_option("--normalize-std", ia.stddev, "Per-channel std")->delimiter(',');

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand(
      "gradcheck", "Compare backward() against central differences (float64)");
  gradcheck->add_option("--preset", ga.preset, "Model preset");
  gradcheck->add_option("--eps", ga.eps, "Finite-difference step");
  gradcheck->add_option("--samples", ga.samples,
                        "Elements sampled per parameter group (0 = all)");
  gradcheck->add_option("--seed", ga.seed, "RNG seed");
  gradcheck->add_option("--tol", ga.tol, "Max relative error accepted");

  BenchArgs ba;
  auto* bench = app.add_subcommand(
      "bench", "Time the recurrent vs parallel sequence-mixer forms");
  bench->add_option("--lengths", ba.lengths, "Sequence lengths")->delimiter(',');
  bench->add_option("--reps", ba.reps, "Repetitions per timing");
  bench->add_option("--seed", ba.seed, "RNG seed");
  bench->add_option("--out", ba.out, "Also write the CSV to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what());
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(ta);
    if (app.got_subcommand(eval)) return cmd_eval(ea);
    if (app.got_subcommand(infer)) return cmd_infer(ia);
    if (app.got_subcommand(gradcheck)) return cmd_gradcheck(ga);
    if (app.got_subcommand(bench)) return cmd_bench(ba);
    return fail("usage", "no subcommand given");
  } catch (const TrainDiverged& e) {
    return fail("train-diverged", e.what());
  } catch (const std::invalid_argument& e) {
    return fail("config", e.what());
  } catch (const std::out_of_range& e) {
    return fail("config", e.what());
  } catch (const std::runtime_error& e) {
    return fail("io", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
}
