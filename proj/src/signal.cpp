#include "gradmask/signal.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "gradmask/error.hpp"

namespace gradmask {

namespace {

std::string interval_str(const Interval& iv) {
  return "(lead " + std::to_string(iv.lead) + ", [" +
         std::to_string(iv.start) + ", " + std::to_string(iv.end) + "))";
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kValidation:
      return "validation";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "validation" || text == "val") return Split::kValidation;
  if (text == "test") return Split::kTest;
  throw ValidationError("unknown split '" + std::string(text) + "'");
}

std::string_view to_string(MaskSource source) {
  return source == MaskSource::kAnnotator ? "annotator" : "ground_truth";
}

MaskSource parse_mask_source(std::string_view text) {
  if (text == "annotator") return MaskSource::kAnnotator;
  if (text == "ground_truth") return MaskSource::kGroundTruth;
  throw ValidationError("unknown mask source '" + std::string(text) + "'");
}

void validate_intervals(std::span<const Interval> intervals, std::size_t leads,
                        std::size_t samples) {
  for (const auto& iv : intervals) {
    if (iv.lead >= leads) {
      throw ValidationError("interval " + interval_str(iv) +
                            ": lead out of range for " + std::to_string(leads) +
                            " leads");
    }
    if (iv.start >= iv.end || iv.end > samples) {
      throw ValidationError("interval " + interval_str(iv) +
                            ": samples out of range for length " +
                            std::to_string(samples));
    }
  }
}

std::vector<std::size_t> flatten_mask(std::span<const Interval> intervals,
                                      std::size_t leads, std::size_t samples) {
  validate_intervals(intervals, leads, samples);
  std::vector<std::size_t> flat;
  for (const auto& iv : intervals) {
    for (std::size_t s = iv.start; s < iv.end; ++s) {
      flat.push_back(iv.lead * samples + s);
    }
  }
  std::sort(flat.begin(), flat.end());
  flat.erase(std::unique(flat.begin(), flat.end()), flat.end());
  return flat;
}

std::vector<Interval> unflatten_mask(std::span<const std::size_t> flat,
                                     std::size_t samples) {
  std::vector<Interval> out;
  for (std::size_t i = 0; i < flat.size();) {
    const std::size_t lead = flat[i] / samples;
    const std::size_t start = flat[i] % samples;
    std::size_t end = start + 1;
    std::size_t j = i + 1;
    while (j < flat.size() && flat[j] == lead * samples + end && end < samples) {
      ++end;
      ++j;
    }
    out.push_back({lead, start, end});
    i = j;
  }
  return out;
}

MaskSet::MaskSet(std::vector<Interval> intervals, std::size_t leads,
                 std::size_t samples, MaskSource source, std::string note)
    : intervals_(std::move(intervals)),
      flat_(flatten_mask(intervals_, leads, samples)),
      source_(source),
      note_(std::move(note)) {}

MaskSet MaskSet::truncated(std::size_t leads, std::size_t samples) const {
  std::vector<Interval> clipped;
  for (const auto& iv : intervals_) {
    if (iv.start >= samples) continue;
    clipped.push_back({iv.lead, iv.start, std::min(iv.end, samples)});
  }
  return MaskSet(std::move(clipped), leads, samples, source_, note_);
}

void SignalExample::validate(std::size_t n_classes) const {
  if (leads == 0 || samples == 0) {
    throw ValidationError("example '" + id + "': empty signal");
  }
  if (signal.size() != leads * samples) {
    throw ShapeError("example '" + id + "': " + std::to_string(signal.size()) +
                     " samples for shape " + std::to_string(leads) + "x" +
                     std::to_string(samples));
  }
  for (std::size_t i = 0; i < signal.size(); ++i) {
    if (!std::isfinite(signal[i])) {
      throw ValidationError("example '" + id + "': non-finite sample at lead " +
                            std::to_string(i / samples) + ", sample " +
                            std::to_string(i % samples));
    }
  }
  if (!(sample_rate_hz > 0.0)) {
    throw ValidationError("example '" + id + "': sample rate must be positive");
  }
  if (labels.size() != n_classes) {
    throw ShapeError("example '" + id + "': " + std::to_string(labels.size()) +
                     " labels, expected " + std::to_string(n_classes));
  }
  for (int y : labels) {
    if (y != 1 && y != -1) {
      throw ValidationError("example '" + id + "': label value " +
                            std::to_string(y) + " is not +1/-1");
    }
  }
  if (mask) validate_intervals(mask->intervals(), leads, samples);
}

std::set<std::string> DatasetManifest::feedback_ids() const {
  std::set<std::string> ids;
  for (const auto& ex : examples) {
    if (ex.mask) ids.insert(ex.id);
  }
  return ids;
}

std::size_t DatasetManifest::feedback_count(Split s) const {
  return static_cast<std::size_t>(
      std::count_if(examples.begin(), examples.end(), [s](const auto& ex) {
        return ex.split == s && ex.mask.has_value();
      }));
}

std::vector<const SignalExample*> DatasetManifest::split(Split s) const {
  std::vector<const SignalExample*> out;
  for (const auto& ex : examples) {
    if (ex.split == s) out.push_back(&ex);
  }
  return out;
}

const SignalExample* DatasetManifest::find(std::string_view id) const {
  for (const auto& ex : examples) {
    if (ex.id == id) return &ex;
  }
  return nullptr;
}

void DatasetManifest::validate() const {
  if (n_classes == 0 || leads == 0 || samples == 0) {
    throw ValidationError("dataset: K, L and T must be positive");
  }
  if (label_names.size() != n_classes) {
    throw ShapeError("dataset: " + std::to_string(label_names.size()) +
                     " label names for K=" + std::to_string(n_classes));
  }
  std::unordered_set<std::string> seen;
  for (const auto& ex : examples) {
    if (!seen.insert(ex.id).second) {
      throw ValidationError("dataset: duplicate id '" + ex.id + "'");
    }
    if (ex.leads != leads || ex.samples != samples) {
      throw ShapeError("example '" + ex.id + "': shape " +
                       std::to_string(ex.leads) + "x" +
                       std::to_string(ex.samples) + " differs from dataset " +
                       std::to_string(leads) + "x" + std::to_string(samples));
    }
    ex.validate(n_classes);
  }
}

DatasetManifest truncate(const DatasetManifest& m, std::size_t samples) {
  if (samples == 0 || samples > m.samples) {
    throw ValidationError("truncate: window " + std::to_string(samples) +
                          " not in [1, " + std::to_string(m.samples) + "]");
  }
  DatasetManifest out = m;
  out.samples = samples;
  for (auto& ex : out.examples) {
    std::vector<double> sig(ex.leads * samples);
    for (std::size_t l = 0; l < ex.leads; ++l) {
      std::copy_n(ex.signal.begin() + l * ex.samples, samples,
                  sig.begin() + l * samples);
    }
    ex.signal = std::move(sig);
    ex.samples = samples;
    if (ex.mask) ex.mask = ex.mask->truncated(ex.leads, samples);
  }
  return out;
}

DatasetManifest strip_masks(const DatasetManifest& m) {
  DatasetManifest out = m;
  for (auto& ex : out.examples) ex.mask.reset();
  return out;
}

}  // namespace gradmask
