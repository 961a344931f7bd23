#include "gradmask/compare.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"
#include "gradmask/metrics.hpp"

namespace gradmask {

TestMetrics evaluate_test(const DatasetManifest& dataset, const Checkpoint& ckpt,
                          const TrainConfig& config, const SaliencyOptions& saliency) {
  const DatasetManifest data =
      config.train_window > 0 && config.train_window < dataset.samples
          ? truncate(dataset, config.train_window)
          : dataset;
  const auto test = data.split(Split::kTest);
  if (test.empty()) throw ValidationError("dataset has an empty test split");
  TestMetrics out;
  const ScoreMatrix sm = score_examples(ckpt.config, ckpt.params, test);
  out.fmax = fmax(sm).f;
  out.macro_auc = macro_auc(sm).macro;

  std::vector<const SignalExample*> masked;
  for (const auto* ex : test) {
    if (ex->mask) masked.push_back(ex);
  }
  const auto maps = compute_saliency_batch(ckpt.config, ckpt.params, masked, saliency);
  double total = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) total += mask_overlap(maps[i], *masked[i]->mask);
  out.overlap_examples = maps.size();
  out.mask_overlap = maps.empty() ? 0.0 : total / static_cast<double>(maps.size());
  return out;
}

std::vector<double> CompareReport::values(const std::string& arm,
                                          const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : runs) {
    if (r.arm != arm) continue;
    if (metric == "fmax") {
      out.push_back(r.test.fmax);
    } else if (metric == "macro_auc") {
      out.push_back(r.test.macro_auc);
    } else if (metric == "mask_overlap") {
      out.push_back(r.test.mask_overlap);
    } else {
      throw ValidationError("unknown metric '" + metric + "'");
    }
  }
  return out;
}

double CompareReport::mean(const std::string& arm, const std::string& metric) const {
  const auto v = values(arm, metric);
  if (v.empty()) return 0.0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

CompareReport run_compare(const DatasetManifest& dataset, const ModelConfig& model,
                          const TrainConfig& config, const CompareOptions& options) {
  config.validate();
  if (dataset.feedback_count(Split::kTrain) == 0) {
    throw ValidationError(
        "dataset has no masks on training examples; generate one with `gradmask synth` "
        "or collect feedback through `gradmask serve` first");
  }
  CompareReport report;
  report.lambda = config.lambda;
  const DatasetManifest stripped = strip_masks(dataset);
  TrainConfig normal_cfg = config;
  normal_cfg.lambda = 0.0;

  for (std::uint64_t seed : config.seeds) {
    for (const bool feedback : {false, true}) {
      ArmRun run;
      run.arm = feedback ? "feedback" : "normal";
      run.seed = seed;
      TrainOptions topts;
      topts.run_id = run.arm + "-seed" + std::to_string(seed);
      if (options.out_dir) topts.run_dir = *options.out_dir / "runs" / topts.run_id;
      const auto result = train_run(feedback ? dataset : stripped, model,
                                    feedback ? config : normal_cfg, seed, topts);
      // Evaluation always uses the original test masks.
      run.test = evaluate_test(dataset, result.best, config, options.saliency);
      run.manifest = result.manifest;
      run.manifest.test_metrics = {{"fmax", run.test.fmax},
                                   {"macro_auc", run.test.macro_auc},
                                   {"mask_overlap", run.test.mask_overlap}};
      if (topts.run_dir) {
        write_file_atomic(*topts.run_dir / "manifest.json",
                          to_json(run.manifest).dump(2) + "\n");
      }
      if (options.on_run) options.on_run(run);
      report.runs.push_back(std::move(run));
    }
  }
  if (options.out_dir) {
    write_file_atomic(*options.out_dir / "report.json", to_json(report).dump(2) + "\n");
    write_file_atomic(*options.out_dir / "boxplot.svg", render_boxplot_svg(report));
  }
  return report;
}

nlohmann::json to_json(const CompareReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    runs.push_back({{"arm", run.arm},
                    {"seed", run.seed},
                    {"run_id", run.manifest.run_id},
                    {"selected_epoch", run.manifest.selected_epoch},
                    {"feedback_count", run.manifest.feedback_count},
                    {"lambda", run.manifest.train_config.lambda},
                    {"fmax", run.test.fmax},
                    {"macro_auc", run.test.macro_auc},
                    {"mask_overlap", run.test.mask_overlap},
                    {"overlap_examples", run.test.overlap_examples},
                    {"wall_clock_seconds", run.manifest.wall_clock_seconds}});
  }
  nlohmann::json summary;
  for (const char* arm : {"normal", "feedback"}) {
    for (const char* metric : {"fmax", "macro_auc", "mask_overlap"}) {
      summary[arm][metric] = r.mean(arm, metric);
    }
  }
  return {{"version", 1}, {"lambda", r.lambda}, {"runs", runs}, {"mean", summary}};
}

namespace {

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(v.size() - 1, lo + 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

std::string render_boxplot_svg(const CompareReport& r) {
  constexpr double kPanelW = 260, kPanelH = 300, kTop = 40, kLeft = 50;
  const char* metrics[] = {"fmax", "macro_auc", "mask_overlap"};
  const char* titles[] = {"Fmax", "Macro AUC", "Mask overlap"};
  const char* arms[] = {"normal", "feedback"};
  const char* colors[] = {"#8fa8d8", "#e39a8f"};
  std::ostringstream svg;
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 3 * (kPanelW + kLeft) + 20
      << "\" height=\"" << kPanelH + kTop + 60
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  for (int p = 0; p < 3; ++p) {
    std::vector<double> all;
    for (const char* arm : arms) {
      const auto v = r.values(arm, metrics[p]);
      all.insert(all.end(), v.begin(), v.end());
    }
    if (all.empty()) continue;
    double lo = *std::min_element(all.begin(), all.end());
    double hi = *std::max_element(all.begin(), all.end());
    const double pad = std::max(1e-3, 0.1 * (hi - lo));
    lo -= pad;
    hi += pad;
    const double x0 = kLeft + p * (kPanelW + kLeft);
    auto ypos = [&](double v) { return kTop + kPanelH * (hi - v) / (hi - lo); };
    svg << "<g class=\"panel\" data-metric=\"" << metrics[p] << "\">\n";
    svg << "<text x=\"" << x0 + kPanelW / 2 << "\" y=\"24\" text-anchor=\"middle\">"
        << titles[p] << "</text>\n";
    svg << "<rect x=\"" << x0 << "\" y=\"" << kTop << "\" width=\"" << kPanelW
        << "\" height=\"" << kPanelH << "\" fill=\"none\" stroke=\"#999\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double v = lo + (hi - lo) * t / 4.0;
      svg << "<text x=\"" << x0 - 4 << "\" y=\"" << ypos(v) + 4
          << "\" text-anchor=\"end\" font-size=\"10\">" << std::round(v * 1000) / 1000
          << "</text>\n";
    }
    for (int a = 0; a < 2; ++a) {
      const auto v = r.values(arms[a], metrics[p]);
      if (v.empty()) continue;
      const double cx = x0 + kPanelW * (a == 0 ? 0.3 : 0.7), w = 50;
      const double q1 = quantile(v, 0.25), q2 = quantile(v, 0.5), q3 = quantile(v, 0.75);
      const double mn = quantile(v, 0.0), mx = quantile(v, 1.0);
      svg << "<line x1=\"" << cx << "\" y1=\"" << ypos(mn) << "\" x2=\"" << cx << "\" y2=\""
          << ypos(mx) << "\" stroke=\"black\"/>\n";
      svg << "<rect class=\"box\" data-arm=\"" << arms[a] << "\" x=\"" << cx - w / 2
          << "\" y=\"" << ypos(q3) << "\" width=\"" << w << "\" height=\""
          << std::max(1.0, ypos(q1) - ypos(q3)) << "\" fill=\"" << colors[a]
          << "\" stroke=\"black\"/>\n";
      svg << "<line x1=\"" << cx - w / 2 << "\" y1=\"" << ypos(q2) << "\" x2=\"" << cx + w / 2
          << "\" y2=\"" << ypos(q2) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
      for (double x : v) {
        svg << "<circle cx=\"" << cx + w * 0.7 << "\" cy=\"" << ypos(x)
            << "\" r=\"2.5\" fill=\"black\"/>\n";
      }
      svg << "<text x=\"" << cx << "\" y=\"" << kTop + kPanelH + 18
          << "\" text-anchor=\"middle\">" << (a == 0 ? "Normal" : "Feedback") << "</text>\n";
    }
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace gradmask
