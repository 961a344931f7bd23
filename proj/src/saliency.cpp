#include "gradmask/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "gradmask/error.hpp"

namespace gradmask {

using ad::Tensor;

std::string to_string(Normalization n) {
  return n == Normalization::kGlobal ? "global" : "per_lead";
}

Normalization parse_normalization(const std::string& s) {
  if (s == "global") return Normalization::kGlobal;
  if (s == "per_lead") return Normalization::kPerLead;
  throw ValidationError("unknown normalization '" + s + "' (global|per_lead)");
}

std::vector<std::size_t> default_targets(std::span<const double> logits) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (logits[k] > 0.0) out.push_back(k);
  }
  if (out.empty() && !logits.empty()) {
    out.push_back(static_cast<std::size_t>(
        std::max_element(logits.begin(), logits.end()) - logits.begin()));
  }
  return out;
}

std::vector<double> smooth(std::span<const double> row, std::size_t window) {
  if (window == 0) throw ValidationError("smoothing window must be >= 1");
  if (window == 1) return {row.begin(), row.end()};
  const auto n = static_cast<std::ptrdiff_t>(row.size());
  const auto w = static_cast<std::ptrdiff_t>(window);
  const std::ptrdiff_t left = (w - 1) / 2;
  std::vector<double> out(row.size(), 0.0);
  for (std::ptrdiff_t t = 0; t < n; ++t) {
    // Window covers [t - left, t - left + w); out-of-range taps are zero.
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, t - left);
    const std::ptrdiff_t hi = std::min(n, t - left + w);
    double s = 0;
    for (std::ptrdiff_t i = lo; i < hi; ++i) s += row[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(t)] = s / static_cast<double>(window);
  }
  return out;
}

void normalize(SaliencyMap& map) {
  auto scale_range = [&](std::size_t begin, std::size_t end) {
    double mx = 0;
    for (std::size_t i = begin; i < end; ++i) mx = std::max(mx, map.values[i]);
    if (mx == 0.0) return;
    for (std::size_t i = begin; i < end; ++i) map.values[i] /= mx;
  };
  if (map.normalization == Normalization::kGlobal) {
    scale_range(0, map.values.size());
  } else {
    for (std::size_t l = 0; l < map.leads; ++l) {
      scale_range(l * map.samples, (l + 1) * map.samples);
    }
  }
}

namespace {

SaliencyMap finish_map(std::span<const double> grad, std::size_t L, std::size_t T,
                       std::vector<std::size_t> targets, const SaliencyOptions& options) {
  SaliencyMap map;
  map.leads = L;
  map.samples = T;
  map.target_labels = std::move(targets);
  map.smoothing_window = options.smoothing_window;
  map.normalization = options.normalization;
  map.values.reserve(L * T);
  std::vector<double> row(T);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t t = 0; t < T; ++t) row[t] = std::abs(grad[l * T + t]);
    const auto s = smooth(row, options.smoothing_window);
    map.values.insert(map.values.end(), s.begin(), s.end());
  }
  normalize(map);
  return map;
}

void check_targets(std::span<const std::size_t> targets, std::size_t K) {
  for (auto k : targets) {
    if (k >= K) {
      throw ValidationError("saliency target " + std::to_string(k) + " out of range for " +
                            std::to_string(K) + " labels");
    }
  }
}

}  // namespace

SaliencyMap compute_saliency(const LogitFn& model, const SignalExample& example,
                             const SaliencyOptions& options) {
  const std::size_t L = example.leads, T = example.samples;
  const Tensor x = Tensor::leaf({1, L, T}, example.signal);
  const Tensor logits = model(x);
  const std::size_t K = logits.numel();
  auto targets = options.targets.empty() ? default_targets(logits.data()) : options.targets;
  check_targets(targets, K);
  std::vector<double> sel(K, 0.0);
  for (auto k : targets) sel[k] = 1.0;
  const Tensor out = ad::sum(ad::mul(logits, Tensor::constant(logits.shape(), sel)));
  const auto g = ad::grad(out, {x})[0];
  return finish_map(g.data(), L, T, std::move(targets), options);
}

SaliencyMap compute_saliency(const ModelConfig& config, const ModelParams& params,
                             const SignalExample& example, const SaliencyOptions& options) {
  return compute_saliency(as_logit_fn(config, params), example, options);
}

std::vector<SaliencyMap> compute_saliency_batch(const ModelConfig& config,
                                                const ModelParams& params,
                                                std::span<const SignalExample* const> examples,
                                                const SaliencyOptions& options,
                                                std::size_t batch_size) {
  std::vector<SaliencyMap> out;
  if (examples.empty()) return out;
  const std::size_t L = examples.front()->leads, T = examples.front()->samples;
  const std::size_t K = config.n_classes;
  check_targets(options.targets, K);
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    const std::size_t n = end - start;
    std::vector<double> xs;
    xs.reserve(n * L * T);
    for (std::size_t i = start; i < end; ++i) {
      if (examples[i]->leads != L || examples[i]->samples != T) {
        throw ShapeError("saliency: example '" + examples[i]->id + "' has a different shape");
      }
      xs.insert(xs.end(), examples[i]->signal.begin(), examples[i]->signal.end());
    }
    const Tensor x = Tensor::leaf({n, L, T}, std::move(xs));
    const Tensor logits = forward(config, params, x);
    std::vector<std::vector<std::size_t>> targets(n);
    std::vector<double> sel(n * K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      targets[i] = options.targets.empty()
                       ? default_targets(logits.data().subspan(i * K, K))
                       : options.targets;
      for (auto k : targets[i]) sel[i * K + k] = 1.0;
    }
    // Examples do not interact, so one backward pass yields every input gradient.
    const Tensor total = ad::sum(ad::mul(logits, Tensor::constant({n, K}, sel)));
    const auto g = ad::grad(total, {x})[0];
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(finish_map(g.data().subspan(i * L * T, L * T), L, T,
                               std::move(targets[i]), options));
    }
  }
  return out;
}

double mask_overlap(const SaliencyMap& map, const MaskSet& mask) {
  double total = 0;
  for (double v : map.values) total += v;
  if (total == 0.0) return 0.0;
  double inside = 0;
  for (auto idx : mask.flat_indices()) {
    if (idx >= map.values.size()) {
      throw ShapeError("mask index " + std::to_string(idx) + " outside saliency map");
    }
    inside += map.values[idx];
  }
  return inside / total;
}

std::array<int, 3> ramp_color(double value) {
  const double v = std::clamp(value, 0.0, 1.0);
  if (v <= 0.5) {
    const int c = static_cast<int>(std::lround(255.0 * 2.0 * v));
    return {c, c, 255};
  }
  const int c = static_cast<int>(std::lround(255.0 * (2.0 - 2.0 * v)));
  return {255, c, c};
}

namespace {

std::string hex_color(double value) {
  const auto [r, g, b] = ramp_color(value);
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(const SaliencyMap& map, const SignalExample& example,
                       std::span<const std::string> label_names) {
  if (map.leads != example.leads || map.samples != example.samples) {
    throw ShapeError("saliency map does not match example '" + example.id + "'");
  }
  constexpr double kWidth = 960, kPanel = 80, kGap = 10, kMarginTop = 30, kLegend = 50;
  const double cell = kWidth / static_cast<double>(map.samples);
  const double height = kMarginTop + map.leads * (kPanel + kGap) + kLegend;
  std::ostringstream svg;
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth + 20 << "\" height=\""
      << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  std::string title = "example " + example.id;
  if (!map.target_labels.empty()) {
    title += " | explaining:";
    for (auto k : map.target_labels) {
      title += " " + (k < label_names.size() ? label_names[k] : std::to_string(k));
    }
  }
  svg << "<text x=\"10\" y=\"18\">" << escape_xml(title) << "</text>\n";

  for (std::size_t l = 0; l < map.leads; ++l) {
    const double top = kMarginTop + l * (kPanel + kGap);
    svg << "<g class=\"lead\" data-lead=\"" << l << "\">\n";
    // Heat strip: merge runs of identical color into one rect.
    for (std::size_t t = 0; t < map.samples;) {
      const std::string color = hex_color(map.at(l, t));
      std::size_t u = t + 1;
      while (u < map.samples && hex_color(map.at(l, u)) == color) ++u;
      svg << "<rect x=\"" << 10 + t * cell << "\" y=\"" << top << "\" width=\""
          << (u - t) * cell << "\" height=\"" << kPanel << "\" fill=\"" << color << "\"/>\n";
      t = u;
    }
    double amp = 0;
    for (std::size_t t = 0; t < map.samples; ++t) {
      amp = std::max(amp, std::abs(example.signal[l * map.samples + t]));
    }
    if (amp == 0) amp = 1;
    svg << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1\" points=\"";
    for (std::size_t t = 0; t < map.samples; ++t) {
      const double y = top + kPanel / 2 -
                       0.45 * kPanel * example.signal[l * map.samples + t] / amp;
      svg << 10 + (t + 0.5) * cell << "," << y << (t + 1 < map.samples ? " " : "");
    }
    svg << "\"/>\n<text x=\"14\" y=\"" << top + 14 << "\">lead " << l << "</text>\n</g>\n";
  }

  const double ly = kMarginTop + map.leads * (kPanel + kGap) + 10;
  svg << "<defs><linearGradient id=\"ramp\"><stop offset=\"0\" stop-color=\"" << hex_color(0)
      << "\"/><stop offset=\"0.5\" stop-color=\"" << hex_color(0.5)
      << "\"/><stop offset=\"1\" stop-color=\"" << hex_color(1)
      << "\"/></linearGradient></defs>\n";
  svg << "<g class=\"colorbar\"><rect x=\"10\" y=\"" << ly
      << "\" width=\"300\" height=\"12\" fill=\"url(#ramp)\" stroke=\"black\"/>\n";
  svg << "<text x=\"10\" y=\"" << ly + 28 << "\">0 (low gradient)</text>\n";
  svg << "<text x=\"310\" y=\"" << ly + 28
      << "\" text-anchor=\"end\">1 (high gradient)</text></g>\n</svg>\n";
  return svg.str();
}

nlohmann::json to_json(const SaliencyMap& map) {
  return {{"leads", map.leads},
          {"samples", map.samples},
          {"values", map.values},
          {"target_labels", map.target_labels},
          {"smoothing_window", map.smoothing_window},
          {"normalization", to_string(map.normalization)}};
}

SaliencyMap saliency_from_json(const nlohmann::json& j) {
  SaliencyMap m;
  m.leads = j.at("leads").get<std::size_t>();
  m.samples = j.at("samples").get<std::size_t>();
  m.values = j.at("values").get<std::vector<double>>();
  m.target_labels = j.at("target_labels").get<std::vector<std::size_t>>();
  m.smoothing_window = j.at("smoothing_window").get<std::size_t>();
  m.normalization = parse_normalization(j.at("normalization").get<std::string>());
  if (m.values.size() != m.leads * m.samples) {
    throw ShapeError("saliency json: values length does not match leads x samples");
  }
  return m;
}

}  // namespace gradmask
