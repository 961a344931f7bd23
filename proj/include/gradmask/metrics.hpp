#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmask/model.hpp"
#include "gradmask/signal.hpp"

namespace gradmask {

// N x K scores in [0, 1] with +/-1 truth, both row-major.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scores;
  std::vector<int> truth;

  double score(std::size_t i, std::size_t j) const { return scores[i * cols + j]; }
  bool positive(std::size_t i, std::size_t j) const { return truth[i * cols + j] == 1; }
  void validate() const;
};

// How per-sample precision and recall are combined into one F value.
//   kMeanSampleF: mean over samples (with at least one true label) of
//     F_i = 2 P_i R_i / (P_i + R_i).
//   kMacroPrecisionRecall: F of the sample-averaged P and R.
// An empty prediction has P_i = 1; samples without true labels are skipped
// for recall (and, under kMeanSampleF, entirely).
enum class FmaxConvention { kMeanSampleF, kMacroPrecisionRecall };

std::string to_string(FmaxConvention c);
FmaxConvention parse_fmax_convention(const std::string& s);

struct FmaxResult {
  double f = 0.0;
  double threshold = 0.0;
};

// Exact: thresholds are every distinct score plus 0 and 1 unless `grid` is
// given. A label is predicted when score >= t; ties go to the smallest t.
FmaxResult fmax(const ScoreMatrix& sm,
                FmaxConvention convention = FmaxConvention::kMeanSampleF,
                std::span<const double> grid = {});

// F at one threshold, computed directly. Used by fmax on explicit grids.
double f_at_threshold(const ScoreMatrix& sm, double t, FmaxConvention convention);

struct AucResult {
  double macro = 0.0;
  // NaN for skipped labels.
  std::vector<double> per_label;
  std::vector<std::size_t> skipped;
};

// Mann-Whitney AUC per label (ties count 1/2), averaged over labels that have
// both a positive and a negative.
AucResult macro_auc(const ScoreMatrix& sm);

struct EvaluationReport {
  std::size_t examples = 0;
  FmaxConvention convention = FmaxConvention::kMeanSampleF;
  FmaxResult fmax;
  AucResult auc;
  std::vector<std::string> label_names;
};

EvaluationReport evaluate(const ScoreMatrix& sm,
                          std::vector<std::string> label_names,
                          FmaxConvention convention = FmaxConvention::kMeanSampleF);
nlohmann::json to_json(const EvaluationReport& r);

// sigmoid(logits) for each example, evaluated without recording a graph.
ScoreMatrix score_examples(const ModelConfig& config, const ModelParams& params,
                           std::span<const SignalExample* const> examples,
                           std::size_t batch_size = 64);

}  // namespace gradmask
