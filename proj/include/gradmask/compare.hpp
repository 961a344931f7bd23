#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmask/model.hpp"
#include "gradmask/saliency.hpp"
#include "gradmask/signal.hpp"
#include "gradmask/trainer.hpp"

namespace gradmask {

struct TestMetrics {
  double fmax = 0.0;
  double macro_auc = 0.0;
  // Mean share of saliency mass inside the mask, over test examples that
  // carry a mask.
  double mask_overlap = 0.0;
  std::size_t overlap_examples = 0;
};

// Scores the test split of `dataset` (truncated to the config's window).
TestMetrics evaluate_test(const DatasetManifest& dataset, const Checkpoint& ckpt,
                          const TrainConfig& config, const SaliencyOptions& saliency = {});

struct ArmRun {
  std::string arm;  // "normal" or "feedback"
  std::uint64_t seed = 0;
  TestMetrics test;
  RunManifest manifest;
};

struct CompareOptions {
  std::optional<std::filesystem::path> out_dir;
  SaliencyOptions saliency;
  std::function<void(const ArmRun&)> on_run;
};

struct CompareReport {
  double lambda = 0.0;
  std::vector<ArmRun> runs;  // normal/feedback pairs, seed-major

  std::vector<double> values(const std::string& arm, const std::string& metric) const;
  double mean(const std::string& arm, const std::string& metric) const;
};

// For each seed, trains Normal (lambda 0, masks stripped) and Feedback
// (config.lambda) from the same seed and evaluates both on the test split.
// Throws ValidationError when no training example carries a mask.
CompareReport run_compare(const DatasetManifest& dataset, const ModelConfig& model,
                          const TrainConfig& config, const CompareOptions& options = {});

nlohmann::json to_json(const CompareReport& r);

// Side-by-side boxplots of Fmax, macro-AUC and mask overlap per arm.
std::string render_boxplot_svg(const CompareReport& r);

}  // namespace gradmask
