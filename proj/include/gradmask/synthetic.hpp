#pragma once

#include <cstddef>
#include <cstdint>

#include <json.hpp>

#include "gradmask/signal.hpp"

namespace gradmask {

// Desk-scale stand-in for a clinical ECG corpus. Each class k owns an evidence
// lead (k mod L) and a Gaussian-bump motif of class-specific width. A positive
// label plants the motif inside a random window on that lead; the union of
// those windows is the example's ground-truth mask.
//
// With probability `spurious_correlation` an example also carries a
// distractor: the motif of one of its positive classes, planted on the next
// lead outside every evidence window. In the test split the distractor's
// class is drawn uniformly instead (when `decorrelate_test` is set), so a
// model that learned the shortcut pays for it there.
struct SyntheticSpec {
  std::size_t n_examples = 2600;
  std::size_t n_validation = 300;
  std::size_t n_test = 300;
  std::size_t leads = 4;
  std::size_t samples = 160;
  std::size_t n_classes = 4;
  std::size_t evidence_window_len = 24;
  double noise_sigma = 0.25;
  double spurious_correlation = 0.8;
  // Fraction of training examples whose ground-truth mask is attached as
  // feedback. Validation and test examples always keep theirs.
  double feedback_fraction = 0.1;
  double motif_amplitude = 1.0;
  double distractor_amplitude = 1.5;
  // Probability of each non-primary class being present as well.
  double extra_label_prob = 0.2;
  bool decorrelate_test = true;
  double sample_rate_hz = 100.0;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t n_train() const { return n_examples - n_validation - n_test; }
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

struct SyntheticDataset {
  DatasetManifest manifest;
  // Ground-truth masks for every example, attached or not, in manifest order.
  std::vector<MaskSet> ground_truth;
  // Whether each example carries a distractor motif.
  std::vector<bool> has_distractor;
};

SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

// Motif value at offset `t` from the start of a window of length `len`.
double motif_value(std::size_t cls, std::size_t t, std::size_t len);

}  // namespace gradmask
