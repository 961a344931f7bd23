#include "gradmask/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "gradmask/dataset_io.hpp"
#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"
#include "gradmask/rng.hpp"

namespace gradmask {

using ad::Tensor;
using nlohmann::json;

std::string to_string(SelectionMetric m) {
  return m == SelectionMetric::kMacroAuc ? "macro_auc" : "fmax";
}

SelectionMetric parse_selection_metric(const std::string& s) {
  if (s == "macro_auc") return SelectionMetric::kMacroAuc;
  if (s == "fmax") return SelectionMetric::kFmax;
  throw ValidationError("unknown selection metric '" + s + "' (macro_auc|fmax)");
}

std::string to_string(RunStatus s) {
  switch (s) {
    case RunStatus::kRunning: return "running";
    case RunStatus::kCompleted: return "completed";
    case RunStatus::kFailed: return "failed";
    case RunStatus::kCancelled: return "cancelled";
  }
  return "unknown";
}

namespace {

RunStatus parse_status(const std::string& s) {
  for (auto st : {RunStatus::kRunning, RunStatus::kCompleted, RunStatus::kFailed,
                  RunStatus::kCancelled}) {
    if (to_string(st) == s) return st;
  }
  throw ValidationError("unknown run status '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ValidationError("lr must be > 0");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
    throw ValidationError("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0)) throw ValidationError("eps must be > 0");
  if (!(lambda >= 0) || !std::isfinite(lambda)) {
    throw ValidationError("lambda must be finite and >= 0");
  }
  if (seeds.empty()) throw ValidationError("at least one seed required");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"batch_size", c.batch_size},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps", c.eps},
           {"epochs", c.epochs},
           {"lambda", c.lambda},
           {"seeds", c.seeds},
           {"selection_metric", to_string(c.selection)},
           {"reduction", c.reduction == Reduction::kMean ? "mean" : "sum"},
           {"train_window", c.train_window}};
}

void from_json(const json& j, TrainConfig& c) {
  require_known_keys(j,
                     {"lr", "batch_size", "beta1", "beta2", "eps", "epochs",
                      "lambda", "seeds", "selection_metric", "reduction",
                      "train_window"},
                     "train config");
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.epochs = j.value("epochs", c.epochs);
  c.lambda = j.value("lambda", c.lambda);
  c.seeds = j.value("seeds", c.seeds);
  if (j.contains("selection_metric")) {
    c.selection = parse_selection_metric(j.at("selection_metric").get<std::string>());
  }
  if (j.contains("reduction")) {
    const auto r = j.at("reduction").get<std::string>();
    if (r != "mean" && r != "sum") {
      throw ValidationError("reduction must be 'mean' or 'sum'");
    }
    c.reduction = r == "mean" ? Reduction::kMean : Reduction::kSum;
  }
  c.train_window = j.value("train_window", c.train_window);
}

AdamState AdamState::zeros_like(const ModelParams& params) {
  AdamState s;
  for (const auto& t : params.tensors()) {
    s.m.emplace_back(t.numel(), 0.0);
    s.v.emplace_back(t.numel(), 0.0);
  }
  return s;
}

void adam_step(ModelParams& params, const std::vector<Tensor>& grads,
               AdamState& state, const TrainConfig& config, const std::string& where) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  // Check everything first so a bad gradient leaves the parameters untouched.
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].numel() != params.tensor(i).numel()) {
      throw ShapeError("adam_step: gradient shape mismatch for " + params.name(i));
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) {
        throw NonFiniteError(where + "non-finite gradient in parameter '" +
                             params.name(i) + "'");
      }
    }
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params.tensor(i).mutable_data();
    const auto g = grads[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = config.beta1 * m[j] + (1 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1 - config.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      theta[j] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

json to_json(const RunManifest& m) {
  json epochs = json::array();
  for (const auto& e : m.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_macro_auc", e.val_macro_auc},
                      {"val_fmax", e.val_fmax},
                      {"selection_value", e.selection_value}});
  }
  return {{"version", m.version},
          {"run_id", m.run_id},
          {"status", to_string(m.status)},
          {"error", m.error},
          {"model_config", m.model_config},
          {"train_config", m.train_config},
          {"seed", m.seed},
          {"dataset_fingerprint", m.dataset_fingerprint},
          {"n_train", m.n_train},
          {"n_validation", m.n_validation},
          {"feedback_count", m.feedback_count},
          {"lambda", m.train_config.lambda},
          {"epochs_completed", m.epochs.size()},
          {"epochs", epochs},
          {"selected_epoch", m.selected_epoch},
          {"selected_checkpoint", m.selected_checkpoint},
          {"wall_clock_seconds", m.wall_clock_seconds},
          {"test_metrics", m.test_metrics}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.version = j.at("version").get<int>();
  if (m.version != 1) {
    throw ValidationError("run manifest: unsupported version " + std::to_string(m.version));
  }
  m.run_id = j.at("run_id").get<std::string>();
  m.status = parse_status(j.at("status").get<std::string>());
  m.error = j.value("error", "");
  m.model_config = j.at("model_config").get<ModelConfig>();
  m.train_config = j.at("train_config").get<TrainConfig>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
  m.n_train = j.at("n_train").get<std::size_t>();
  m.n_validation = j.at("n_validation").get<std::size_t>();
  m.feedback_count = j.at("feedback_count").get<std::size_t>();
  for (const auto& e : j.at("epochs")) {
    m.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("val_macro_auc").get<double>(), e.at("val_fmax").get<double>(),
                        e.at("selection_value").get<double>()});
  }
  m.selected_epoch = j.at("selected_epoch").get<std::size_t>();
  m.selected_checkpoint = j.value("selected_checkpoint", "");
  m.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  m.test_metrics = j.value("test_metrics", json());
  return m;
}

std::uint64_t init_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 1); }
std::uint64_t shuffle_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 2); }

namespace {

class RunWriter {
 public:
  explicit RunWriter(const TrainOptions& options) : options_(options) {}

  void manifest(const RunManifest& m) const {
    if (options_.run_dir) {
      write_file_atomic(*options_.run_dir / "manifest.json", to_json(m).dump(2) + "\n");
    }
  }
  void checkpoint(const Checkpoint& ck, const char* name) const {
    if (options_.run_dir) save_checkpoint(ck, *options_.run_dir / name);
  }

 private:
  const TrainOptions& options_;
};

double elapsed_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

RunResult train_run(const DatasetManifest& dataset, ModelConfig model_config,
                    const TrainConfig& config, std::uint64_t seed,
                    const TrainOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  const DatasetManifest data =
      config.train_window > 0 && config.train_window < dataset.samples
          ? truncate(dataset, config.train_window)
          : dataset;
  const auto train = data.split(Split::kTrain);
  const auto val = data.split(Split::kValidation);
  if (train.empty()) throw ValidationError("dataset has an empty train split");
  if (val.empty()) throw ValidationError("dataset has an empty validation split");
  if (model_config.in_leads != data.leads || model_config.n_classes != data.n_classes) {
    throw ValidationError("model expects " + std::to_string(model_config.in_leads) +
                          " leads and " + std::to_string(model_config.n_classes) +
                          " classes; dataset has " + std::to_string(data.leads) +
                          " and " + std::to_string(data.n_classes));
  }
  {
    bool scorable = false;
    for (std::size_t k = 0; k < data.n_classes && !scorable; ++k) {
      bool pos = false, neg = false;
      for (const auto* ex : val) (ex->labels[k] == 1 ? pos : neg) = true;
      scorable = pos && neg;
    }
    if (!scorable) {
      throw ValidationError(
          "validation split has no label with both a positive and a negative example");
    }
  }
  model_config.seed = init_seed(seed);

  RunResult result;
  RunManifest& man = result.manifest;
  man.run_id = options.run_id;
  man.model_config = model_config;
  man.train_config = config;
  man.seed = seed;
  man.dataset_fingerprint = fingerprint(dataset);
  man.n_train = train.size();
  man.n_validation = val.size();
  for (const auto* ex : train) man.feedback_count += ex->mask.has_value();

  ModelParams params = init_params(model_config);
  AdamState state = AdamState::zeros_like(params);
  const RunWriter writer(options);
  auto make_ckpt = [&](const ModelParams& p, std::size_t epoch) {
    return Checkpoint{model_config, p.clone(), {epoch, seed, config.lambda}};
  };
  result.last = make_ckpt(params, 0);
  result.best = make_ckpt(params, 0);
  writer.checkpoint(result.last, "ckpt-last.gmck");
  writer.manifest(man);

  const ObjectiveConfig objective{config.lambda, config.reduction};
  Rng shuffle_rng(shuffle_seed(seed));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  double best_value = -std::numeric_limits<double>::infinity();

  auto finish = [&](RunStatus status, std::string error) {
    man.status = status;
    man.error = std::move(error);
    man.wall_clock_seconds = elapsed_since(t0);
    writer.manifest(man);
  };

  try {
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      if (options.cancel && options.cancel->load()) {
        finish(RunStatus::kCancelled, "cancelled before epoch " + std::to_string(epoch));
        return result;
      }
      shuffle_rng.shuffle(std::span<std::size_t>(order));
      double loss_total = 0;
      std::size_t batch_index = 0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        std::vector<const SignalExample*> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
        const std::string where = "epoch " + std::to_string(epoch) + " batch " +
                                  std::to_string(batch_index) + ": ";
        const Tensor obj = objective_batch(as_logit_fn(model_config, params), batch, objective);
        const double value = obj.item();
        if (!std::isfinite(value)) throw NonFiniteError(where + "non-finite loss");
        const auto grads = ad::grad(obj, params.tensors());
        adam_step(params, grads, state, config, where);
        loss_total += config.reduction == Reduction::kMean
                          ? value * static_cast<double>(batch.size())
                          : value;
        ++batch_index;
      }

      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = loss_total / static_cast<double>(train.size());
      const ScoreMatrix sm = score_examples(model_config, params, val);
      rec.val_macro_auc = macro_auc(sm).macro;
      rec.val_fmax = fmax(sm).f;
      rec.selection_value =
          config.selection == SelectionMetric::kMacroAuc ? rec.val_macro_auc : rec.val_fmax;
      man.epochs.push_back(rec);

      result.last = make_ckpt(params, epoch);
      writer.checkpoint(result.last, "ckpt-last.gmck");
      // Strict improvement only, so ties keep the earliest epoch.
      if (rec.selection_value > best_value) {
        best_value = rec.selection_value;
        man.selected_epoch = epoch;
        man.selected_checkpoint = "ckpt-best.gmck";
        result.best = make_ckpt(params, epoch);
        writer.checkpoint(result.best, "ckpt-best.gmck");
      }
      man.wall_clock_seconds = elapsed_since(t0);
      writer.manifest(man);
      if (options.on_epoch) options.on_epoch(man);
    }
  } catch (const NonFiniteError& e) {
    finish(RunStatus::kFailed, e.what());
    throw;
  }
  finish(RunStatus::kCompleted, "");
  return result;
}

}  // namespace gradmask
