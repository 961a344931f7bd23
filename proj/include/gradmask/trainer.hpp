#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmask/checkpoint.hpp"
#include "gradmask/metrics.hpp"
#include "gradmask/model.hpp"
#include "gradmask/objective.hpp"
#include "gradmask/signal.hpp"

namespace gradmask {

enum class SelectionMetric { kMacroAuc, kFmax };

std::string to_string(SelectionMetric m);
SelectionMetric parse_selection_metric(const std::string& s);

struct TrainConfig {
  double lr = 0.002;
  std::size_t batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 30;
  double lambda = 0.1;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  SelectionMetric selection = SelectionMetric::kMacroAuc;
  Reduction reduction = Reduction::kMean;
  // Train and validate on the first `train_window` samples; 0 keeps all.
  std::size_t train_window = 0;

  void validate() const;
};

// Unknown keys are rejected; missing keys keep their current values, so a
// partial object works as an override.
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const ModelParams& params);
};

// One bias-corrected Adam update in place. A non-finite gradient throws
// NonFiniteError naming the parameter, prefixed with `where`.
void adam_step(ModelParams& params, const std::vector<ad::Tensor>& grads,
               AdamState& state, const TrainConfig& config,
               const std::string& where = "");

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_macro_auc = 0.0;
  double val_fmax = 0.0;
  double selection_value = 0.0;
};

enum class RunStatus { kRunning, kCompleted, kFailed, kCancelled };
std::string to_string(RunStatus s);

struct RunManifest {
  int version = 1;
  std::string run_id;
  RunStatus status = RunStatus::kRunning;
  std::string error;
  ModelConfig model_config;
  TrainConfig train_config;
  std::uint64_t seed = 0;
  std::string dataset_fingerprint;
  std::size_t n_train = 0;
  std::size_t n_validation = 0;
  std::size_t feedback_count = 0;
  std::vector<EpochRecord> epochs;
  std::size_t selected_epoch = 0;
  std::string selected_checkpoint;
  double wall_clock_seconds = 0.0;
  nlohmann::json test_metrics;  // filled by callers that evaluate
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

struct TrainOptions {
  std::string run_id = "run";
  // When set, manifest.json, ckpt-best.gmck and ckpt-last.gmck are written
  // here and refreshed after every epoch.
  std::optional<std::filesystem::path> run_dir;
  std::function<void(const RunManifest&)> on_epoch;
  const std::atomic<bool>* cancel = nullptr;
};

struct RunResult {
  RunManifest manifest;
  Checkpoint best;
  Checkpoint last;
};

// One seeded run. The seed drives both parameter init and per-epoch batch
// order. Throws ValidationError for unusable datasets; on a non-finite loss
// or gradient the run is marked failed, the last good checkpoint is kept on
// disk, and NonFiniteError propagates.
RunResult train_run(const DatasetManifest& dataset, ModelConfig model_config,
                    const TrainConfig& config, std::uint64_t seed,
                    const TrainOptions& options = {});

// Deterministic seed for parameter init and for batch shuffling.
std::uint64_t init_seed(std::uint64_t run_seed);
std::uint64_t shuffle_seed(std::uint64_t run_seed);

}  // namespace gradmask
