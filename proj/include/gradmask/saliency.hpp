#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmask/model.hpp"
#include "gradmask/signal.hpp"

namespace gradmask {

enum class Normalization { kGlobal, kPerLead };

std::string to_string(Normalization n);
Normalization parse_normalization(const std::string& s);

struct SaliencyOptions {
  // Empty: labels predicted present, or the top-1 logit if none are.
  std::vector<std::size_t> targets;
  std::size_t smoothing_window = 9;
  Normalization normalization = Normalization::kGlobal;
};

struct SaliencyMap {
  std::size_t leads = 0;
  std::size_t samples = 0;
  std::vector<double> values;  // leads x samples, in [0, 1]
  std::vector<std::size_t> target_labels;
  std::size_t smoothing_window = 1;
  Normalization normalization = Normalization::kGlobal;

  double at(std::size_t lead, std::size_t t) const { return values[lead * samples + t]; }
  bool operator==(const SaliencyMap&) const = default;
};

std::vector<std::size_t> default_targets(std::span<const double> logits);

// |d(sum of target logits)/dx|, smoothed per lead with a centered moving
// average (zero padded, divided by the full width), then normalized.
SaliencyMap compute_saliency(const ModelConfig& config, const ModelParams& params,
                             const SignalExample& example,
                             const SaliencyOptions& options = {});
SaliencyMap compute_saliency(const LogitFn& model, const SignalExample& example,
                             const SaliencyOptions& options = {});

// One backward pass per batch. Targets come from each example's own logits
// unless options.targets is set.
std::vector<SaliencyMap> compute_saliency_batch(
    const ModelConfig& config, const ModelParams& params,
    std::span<const SignalExample* const> examples, const SaliencyOptions& options = {},
    std::size_t batch_size = 64);

// Building blocks, exposed for testing.
std::vector<double> smooth(std::span<const double> row, std::size_t window);
void normalize(SaliencyMap& map);

// Share of saliency mass inside the mask; 0 when the map is all zero.
double mask_overlap(const SaliencyMap& map, const MaskSet& mask);

// Blue (0) -> white (0.5) -> red (1).
std::array<int, 3> ramp_color(double value);

std::string render_svg(const SaliencyMap& map, const SignalExample& example,
                       std::span<const std::string> label_names = {});
nlohmann::json to_json(const SaliencyMap& map);
SaliencyMap saliency_from_json(const nlohmann::json& j);

}  // namespace gradmask
