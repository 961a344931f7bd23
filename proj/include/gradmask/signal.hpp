#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gradmask {

enum class Split { kTrain, kValidation, kTest };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

// Half-open sample range [start, end) on one lead.
struct Interval {
  std::size_t lead = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  auto operator<=>(const Interval&) const = default;
};

enum class MaskSource { kAnnotator, kGroundTruth };

std::string_view to_string(MaskSource source);
MaskSource parse_mask_source(std::string_view text);

// Flat index of (lead, sample) in an L x T signal: lead * T + sample.
std::vector<std::size_t> flatten_mask(std::span<const Interval> intervals,
                                      std::size_t leads, std::size_t samples);

// Minimal interval list covering exactly `flat` (sorted, deduplicated).
std::vector<Interval> unflatten_mask(std::span<const std::size_t> flat,
                                     std::size_t samples);

// Throws ValidationError naming the first interval outside an L x T signal.
void validate_intervals(std::span<const Interval> intervals, std::size_t leads,
                        std::size_t samples);

// An annotator's (or the generator's) importance mask. An empty mask is valid
// and distinct from "no mask" (std::nullopt at the example level).
class MaskSet {
 public:
  MaskSet() = default;
  MaskSet(std::vector<Interval> intervals, std::size_t leads,
          std::size_t samples, MaskSource source = MaskSource::kGroundTruth,
          std::string note = {});

  const std::vector<Interval>& intervals() const { return intervals_; }
  const std::vector<std::size_t>& flat_indices() const { return flat_; }
  MaskSource source() const { return source_; }
  const std::string& note() const { return note_; }

  // Keeps only samples [0, samples); intervals are clipped.
  MaskSet truncated(std::size_t leads, std::size_t samples) const;

  bool operator==(const MaskSet&) const = default;

 private:
  std::vector<Interval> intervals_;
  std::vector<std::size_t> flat_;
  MaskSource source_ = MaskSource::kGroundTruth;
  std::string note_;
};

struct SignalExample {
  std::string id;
  std::size_t leads = 0;
  std::size_t samples = 0;
  // Row-major leads x samples, millivolts.
  std::vector<double> signal;
  double sample_rate_hz = 100.0;
  // +1 present, -1 absent.
  std::vector<int> labels;
  std::optional<MaskSet> mask;
  Split split = Split::kTrain;

  std::span<const double> lead(std::size_t l) const {
    return std::span<const double>(signal).subspan(l * samples, samples);
  }

  void validate(std::size_t n_classes) const;
  bool operator==(const SignalExample&) const = default;
};

struct DatasetManifest {
  std::size_t n_classes = 0;
  std::size_t leads = 0;
  std::size_t samples = 0;
  double sample_rate_hz = 100.0;
  std::vector<std::string> label_names;
  std::vector<SignalExample> examples;

  // Ids of examples carrying a mask (the feedback set).
  std::set<std::string> feedback_ids() const;
  // Training examples carrying a mask.
  std::size_t feedback_count(Split split = Split::kTrain) const;

  std::vector<const SignalExample*> split(Split s) const;
  const SignalExample* find(std::string_view id) const;

  void validate() const;
  bool operator==(const DatasetManifest&) const = default;
};

// First `samples` samples of every lead; masks are clipped to the window.
DatasetManifest truncate(const DatasetManifest& m, std::size_t samples);
DatasetManifest strip_masks(const DatasetManifest& m);

}  // namespace gradmask
