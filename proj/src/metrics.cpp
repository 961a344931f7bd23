#include "gradmask/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gradmask/error.hpp"

namespace gradmask {

namespace {

// Incremental F over a descending threshold sweep can drift by a few ulps;
// values this close count as ties.
constexpr double kTieTolerance = 1e-12;

struct SampleCounts {
  std::size_t truth = 0;
  std::size_t predicted = 0;
  std::size_t hits = 0;
};

double precision(const SampleCounts& c) {
  return c.predicted == 0 ? 1.0
                          : static_cast<double>(c.hits) / static_cast<double>(c.predicted);
}

double recall(const SampleCounts& c) {
  return static_cast<double>(c.hits) / static_cast<double>(c.truth);
}

double f_measure(double p, double r) { return p + r == 0.0 ? 0.0 : 2 * p * r / (p + r); }

double combine(std::span<const SampleCounts> counts, FmaxConvention convention) {
  double p_sum = 0, r_sum = 0, f_sum = 0;
  std::size_t scored = 0;
  for (const auto& c : counts) {
    p_sum += precision(c);
    if (c.truth == 0) continue;
    ++scored;
    r_sum += recall(c);
    f_sum += f_measure(precision(c), recall(c));
  }
  if (convention == FmaxConvention::kMeanSampleF) {
    return scored == 0 ? 0.0 : f_sum / static_cast<double>(scored);
  }
  if (scored == 0) return 0.0;
  return f_measure(p_sum / static_cast<double>(counts.size()),
                   r_sum / static_cast<double>(scored));
}

}  // namespace

void ScoreMatrix::validate() const {
  if (rows == 0 || cols == 0) throw ValidationError("score matrix is empty");
  if (scores.size() != rows * cols || truth.size() != rows * cols) {
    throw ShapeError("score matrix: scores and truth must both be " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  for (double s : scores) {
    if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
      throw ValidationError("score matrix: score outside [0, 1]");
    }
  }
  for (int y : truth) {
    if (y != 1 && y != -1) throw ValidationError("score matrix: truth must be +/-1");
  }
}

std::string to_string(FmaxConvention c) {
  return c == FmaxConvention::kMeanSampleF ? "mean_sample_f" : "macro_precision_recall";
}

FmaxConvention parse_fmax_convention(const std::string& s) {
  if (s == "mean_sample_f") return FmaxConvention::kMeanSampleF;
  if (s == "macro_precision_recall") return FmaxConvention::kMacroPrecisionRecall;
  throw ValidationError("unknown fmax convention '" + s + "'");
}

double f_at_threshold(const ScoreMatrix& sm, double t, FmaxConvention convention) {
  std::vector<SampleCounts> counts(sm.rows);
  for (std::size_t i = 0; i < sm.rows; ++i) {
    for (std::size_t j = 0; j < sm.cols; ++j) {
      const bool pos = sm.positive(i, j), pred = sm.score(i, j) >= t;
      counts[i].truth += pos;
      counts[i].predicted += pred;
      counts[i].hits += pos && pred;
    }
  }
  return combine(counts, convention);
}

FmaxResult fmax(const ScoreMatrix& sm, FmaxConvention convention,
                std::span<const double> grid) {
  sm.validate();
  if (!grid.empty()) {
    std::vector<double> ts(grid.begin(), grid.end());
    std::sort(ts.begin(), ts.end());
    FmaxResult best{-1.0, 0.0};
    for (double t : ts) {
      const double f = f_at_threshold(sm, t, convention);
      if (f > best.f + kTieTolerance) best = {f, t};
    }
    return best;
  }

  // Sweep thresholds from high to low, admitting entries as t passes their
  // score and updating only the touched samples' contributions.
  const std::size_t n = sm.rows * sm.cols;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sm.scores[a] > sm.scores[b];
  });

  std::vector<SampleCounts> counts(sm.rows);
  std::size_t scored = 0;
  for (std::size_t i = 0; i < sm.rows; ++i) {
    for (std::size_t j = 0; j < sm.cols; ++j) counts[i].truth += sm.positive(i, j);
    scored += counts[i].truth > 0;
  }
  double p_sum = static_cast<double>(sm.rows), r_sum = 0, f_sum = 0;
  auto contribution = [&](const SampleCounts& c, double sign) {
    p_sum += sign * precision(c);
    if (c.truth == 0) return;
    r_sum += sign * recall(c);
    f_sum += sign * f_measure(precision(c), recall(c));
  };
  auto current_f = [&] {
    if (scored == 0) return 0.0;
    if (convention == FmaxConvention::kMeanSampleF) {
      return f_sum / static_cast<double>(scored);
    }
    return f_measure(p_sum / static_cast<double>(sm.rows),
                     r_sum / static_cast<double>(scored));
  };

  std::vector<double> thresholds;
  thresholds.push_back(1.0);
  for (std::size_t idx : order) {
    if (sm.scores[idx] < thresholds.back()) thresholds.push_back(sm.scores[idx]);
  }
  if (thresholds.back() > 0.0) thresholds.push_back(0.0);

  FmaxResult best{-1.0, 0.0};
  std::size_t next = 0;
  for (double t : thresholds) {
    while (next < n && sm.scores[order[next]] >= t) {
      const std::size_t idx = order[next++];
      auto& c = counts[idx / sm.cols];
      contribution(c, -1.0);
      ++c.predicted;
      c.hits += sm.truth[idx] == 1;
      contribution(c, 1.0);
    }
    const double f = current_f();
    if (f >= best.f - kTieTolerance) {
      // Later thresholds are smaller, so a tie moves the argmax down.
      best = {std::max(f, best.f), t};
    }
  }
  // Report the directly computed value at the chosen threshold so the result
  // carries no sweep drift.
  best.f = f_at_threshold(sm, best.threshold, convention);
  return best;
}

AucResult macro_auc(const ScoreMatrix& sm) {
  sm.validate();
  if (sm.rows < 2) throw ValidationError("macro_auc needs at least 2 examples");
  AucResult out;
  out.per_label.assign(sm.cols, std::numeric_limits<double>::quiet_NaN());
  double total = 0;
  std::size_t used = 0;
  std::vector<std::size_t> order(sm.rows);
  for (std::size_t j = 0; j < sm.cols; ++j) {
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < sm.rows; ++i) n_pos += sm.positive(i, j);
    const std::size_t n_neg = sm.rows - n_pos;
    if (n_pos == 0 || n_neg == 0) {
      out.skipped.push_back(j);
      continue;
    }
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return sm.score(a, j) < sm.score(b, j);
    });
    // Sum of 1-based ranks of positives, tied groups sharing the mean rank.
    double rank_sum = 0;
    for (std::size_t lo = 0; lo < sm.rows;) {
      std::size_t hi = lo;
      while (hi < sm.rows && sm.score(order[hi], j) == sm.score(order[lo], j)) ++hi;
      const double mean_rank = 0.5 * static_cast<double>(lo + 1 + hi);
      for (std::size_t r = lo; r < hi; ++r) {
        if (sm.positive(order[r], j)) rank_sum += mean_rank;
      }
      lo = hi;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    const double auc = (rank_sum - np * (np + 1) / 2) / (np * nn);
    out.per_label[j] = auc;
    total += auc;
    ++used;
  }
  if (used == 0) {
    throw ValidationError(
        "macro_auc: no label has both a positive and a negative example");
  }
  out.macro = total / static_cast<double>(used);
  return out;
}

EvaluationReport evaluate(const ScoreMatrix& sm, std::vector<std::string> label_names,
                          FmaxConvention convention) {
  EvaluationReport r;
  r.examples = sm.rows;
  r.convention = convention;
  r.fmax = fmax(sm, convention);
  r.auc = macro_auc(sm);
  r.label_names = std::move(label_names);
  return r;
}

nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json per_label = nlohmann::json::object();
  nlohmann::json skipped = nlohmann::json::array();
  for (std::size_t j = 0; j < r.auc.per_label.size(); ++j) {
    const std::string name =
        j < r.label_names.size() ? r.label_names[j] : std::to_string(j);
    if (std::isnan(r.auc.per_label[j])) {
      skipped.push_back(name);
    } else {
      per_label[name] = r.auc.per_label[j];
    }
  }
  return {{"examples", r.examples},
          {"fmax", r.fmax.f},
          {"fmax_threshold", r.fmax.threshold},
          {"fmax_convention", to_string(r.convention)},
          {"macro_auc", r.auc.macro},
          {"per_label_auc", per_label},
          {"skipped_labels", skipped}};
}

ScoreMatrix score_examples(const ModelConfig& config, const ModelParams& params,
                           std::span<const SignalExample* const> examples,
                           std::size_t batch_size) {
  if (examples.empty()) throw ValidationError("no examples to score");
  ad::NoGradGuard no_grad;
  ScoreMatrix sm;
  sm.rows = examples.size();
  sm.cols = config.n_classes;
  const std::size_t L = examples.front()->leads, T = examples.front()->samples;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<double> x;
    x.reserve((end - start) * L * T);
    for (std::size_t i = start; i < end; ++i) {
      const auto& ex = *examples[i];
      if (ex.leads != L || ex.samples != T) {
        throw ShapeError("score_examples: example '" + ex.id + "' has a different shape");
      }
      x.insert(x.end(), ex.signal.begin(), ex.signal.end());
      sm.truth.insert(sm.truth.end(), ex.labels.begin(), ex.labels.end());
    }
    const auto logits = ad::sigmoid(
        forward(config, params, ad::Tensor::constant({end - start, L, T}, std::move(x))));
    sm.scores.insert(sm.scores.end(), logits.data().begin(), logits.data().end());
  }
  return sm;
}

}  // namespace gradmask
