#include "gradmask/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"
#include "gradmask/rng.hpp"

namespace gradmask {

namespace {

std::size_t evidence_lead(std::size_t cls, std::size_t leads) {
  return cls % leads;
}

std::size_t distractor_lead(std::size_t cls, std::size_t leads) {
  return (evidence_lead(cls, leads) + 1) % leads;
}

bool overlaps(const std::vector<Interval>& windows, std::size_t lead,
              std::size_t start, std::size_t end) {
  return std::any_of(windows.begin(), windows.end(), [&](const Interval& w) {
    return w.lead == lead && start < w.end && w.start < end;
  });
}

std::string make_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "syn%05zu", i);
  return buf;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (n_examples == 0 || leads == 0 || samples == 0 || n_classes == 0 ||
      evidence_window_len == 0) {
    throw ValidationError("synthetic spec: all counts must be positive");
  }
  if (n_validation + n_test >= n_examples) {
    throw ValidationError("synthetic spec: validation + test leave no training "
                          "examples");
  }
  if (evidence_window_len > samples) {
    throw ValidationError("synthetic spec: evidence window " +
                          std::to_string(evidence_window_len) +
                          " longer than T=" + std::to_string(samples));
  }
  if (!(noise_sigma >= 0.0)) {
    throw ValidationError("synthetic spec: noise_sigma must be >= 0");
  }
  if (!(spurious_correlation >= 0.0 && spurious_correlation <= 1.0) ||
      !(feedback_fraction >= 0.0 && feedback_fraction <= 1.0) ||
      !(extra_label_prob >= 0.0 && extra_label_prob <= 1.0)) {
    throw ValidationError("synthetic spec: probabilities must lie in [0, 1]");
  }
  const std::size_t min_pos =
      std::max<std::size_t>(5, n_examples / (4 * n_classes));
  if (min_pos > n_examples) {
    throw ValidationError("synthetic spec: " + std::to_string(n_examples) +
                          " examples cannot give every class " +
                          std::to_string(min_pos) + " positives");
  }
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"n_examples", s.n_examples},
       {"n_validation", s.n_validation},
       {"n_test", s.n_test},
       {"L", s.leads},
       {"T", s.samples},
       {"K", s.n_classes},
       {"evidence_window_len", s.evidence_window_len},
       {"noise_sigma", s.noise_sigma},
       {"spurious_correlation", s.spurious_correlation},
       {"feedback_fraction", s.feedback_fraction},
       {"motif_amplitude", s.motif_amplitude},
       {"distractor_amplitude", s.distractor_amplitude},
       {"extra_label_prob", s.extra_label_prob},
       {"decorrelate_test", s.decorrelate_test},
       {"sample_rate_hz", s.sample_rate_hz},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  require_known_keys(j, {"n_examples", "n_validation", "n_test", "L", "T", "K",
                         "evidence_window_len", "noise_sigma", "spurious_correlation",
                         "feedback_fraction", "motif_amplitude", "distractor_amplitude",
                         "extra_label_prob", "decorrelate_test", "sample_rate_hz", "seed"},
                     "synthetic spec");
  s.n_examples = j.value("n_examples", s.n_examples);
  s.n_validation = j.value("n_validation", s.n_validation);
  s.n_test = j.value("n_test", s.n_test);
  s.leads = j.value("L", s.leads);
  s.samples = j.value("T", s.samples);
  s.n_classes = j.value("K", s.n_classes);
  s.evidence_window_len = j.value("evidence_window_len", s.evidence_window_len);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.spurious_correlation =
      j.value("spurious_correlation", s.spurious_correlation);
  s.feedback_fraction = j.value("feedback_fraction", s.feedback_fraction);
  s.motif_amplitude = j.value("motif_amplitude", s.motif_amplitude);
  s.distractor_amplitude =
      j.value("distractor_amplitude", s.distractor_amplitude);
  s.extra_label_prob = j.value("extra_label_prob", s.extra_label_prob);
  s.decorrelate_test = j.value("decorrelate_test", s.decorrelate_test);
  s.sample_rate_hz = j.value("sample_rate_hz", s.sample_rate_hz);
  s.seed = j.value("seed", s.seed);
}

double motif_value(std::size_t cls, std::size_t t, std::size_t len) {
  const double width =
      static_cast<double>(len) * (0.06 + 0.05 * static_cast<double>(cls % 4));
  const double sign = (cls / 4) % 2 == 0 ? 1.0 : -1.0;
  const double center = (static_cast<double>(len) - 1.0) / 2.0;
  const double d = static_cast<double>(t) - center;
  return sign * std::exp(-d * d / (2.0 * width * width));
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t n = spec.n_examples;
  const std::size_t K = spec.n_classes;
  const std::size_t L = spec.leads;
  const std::size_t T = spec.samples;
  const std::size_t W = spec.evidence_window_len;
  const std::size_t n_train = spec.n_train();

  std::vector<Split> splits(n, Split::kTrain);
  for (std::size_t i = n_train; i < n_train + spec.n_validation; ++i) {
    splits[i] = Split::kValidation;
  }
  for (std::size_t i = n_train + spec.n_validation; i < n; ++i) {
    splits[i] = Split::kTest;
  }

  // Labels: a round-robin primary class per split (shuffled), plus extras.
  std::vector<std::vector<int>> labels(n, std::vector<int>(K, -1));
  std::size_t begin = 0;
  for (std::size_t count : {n_train, spec.n_validation, spec.n_test}) {
    std::vector<std::size_t> primary(count);
    for (std::size_t i = 0; i < count; ++i) primary[i] = i % K;
    rng.shuffle(std::span<std::size_t>(primary));
    for (std::size_t i = 0; i < count; ++i) {
      labels[begin + i][primary[i]] = 1;
    }
    begin += count;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      if (labels[i][k] != 1 && rng.bernoulli(spec.extra_label_prob)) {
        labels[i][k] = 1;
      }
    }
  }
  const std::size_t min_pos = std::max<std::size_t>(5, n / (4 * K));
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t have = 0;
    for (const auto& y : labels) have += y[k] == 1;
    while (have < min_pos) {
      auto& y = labels[rng.below(n)];
      if (y[k] != 1) {
        y[k] = 1;
        ++have;
      }
    }
  }

  SyntheticDataset out;
  auto& m = out.manifest;
  m.n_classes = K;
  m.leads = L;
  m.samples = T;
  m.sample_rate_hz = spec.sample_rate_hz;
  for (std::size_t k = 0; k < K; ++k) {
    m.label_names.push_back("class" + std::to_string(k));
  }

  for (std::size_t i = 0; i < n; ++i) {
    SignalExample ex;
    ex.id = make_id(i);
    ex.leads = L;
    ex.samples = T;
    ex.sample_rate_hz = spec.sample_rate_hz;
    ex.labels = labels[i];
    ex.split = splits[i];
    ex.signal.assign(L * T, 0.0);

    std::vector<std::size_t> positives;
    std::vector<Interval> windows;
    for (std::size_t k = 0; k < K; ++k) {
      if (labels[i][k] != 1) continue;
      positives.push_back(k);
      const std::size_t lead = evidence_lead(k, L);
      const std::size_t start = rng.below(T - W + 1);
      windows.push_back({lead, start, start + W});
      for (std::size_t t = 0; t < W; ++t) {
        ex.signal[lead * T + start + t] +=
            spec.motif_amplitude * motif_value(k, t, W);
      }
    }

    bool distractor = false;
    if (!positives.empty() && rng.bernoulli(spec.spurious_correlation)) {
      const std::size_t cls =
          (ex.split == Split::kTest && spec.decorrelate_test)
              ? rng.below(K)
              : positives[rng.below(positives.size())];
      const std::size_t lead = distractor_lead(cls, L);
      std::vector<std::size_t> free_starts;
      for (std::size_t s = 0; s + W <= T; ++s) {
        if (!overlaps(windows, lead, s, s + W)) free_starts.push_back(s);
      }
      if (!free_starts.empty()) {
        const std::size_t start = free_starts[rng.below(free_starts.size())];
        for (std::size_t t = 0; t < W; ++t) {
          ex.signal[lead * T + start + t] +=
              spec.distractor_amplitude * motif_value(cls, t, W);
        }
        distractor = true;
      }
    }

    if (spec.noise_sigma > 0.0) {
      for (auto& v : ex.signal) v += spec.noise_sigma * rng.normal();
    }
    // float32-representable so the binary format round-trips exactly.
    for (auto& v : ex.signal) v = static_cast<double>(static_cast<float>(v));

    out.ground_truth.emplace_back(std::move(windows), L, T,
                                  MaskSource::kGroundTruth);
    out.has_distractor.push_back(distractor);
    m.examples.push_back(std::move(ex));
  }

  // Feedback subset of the training split; held-out splits keep their masks.
  std::vector<std::size_t> train_idx(n_train);
  for (std::size_t i = 0; i < n_train; ++i) train_idx[i] = i;
  rng.shuffle(std::span<std::size_t>(train_idx));
  const auto n_feedback = static_cast<std::size_t>(
      std::llround(spec.feedback_fraction * static_cast<double>(n_train)));
  for (std::size_t j = 0; j < n_feedback; ++j) {
    m.examples[train_idx[j]].mask = out.ground_truth[train_idx[j]];
  }
  for (std::size_t i = n_train; i < n; ++i) {
    m.examples[i].mask = out.ground_truth[i];
  }
  m.validate();
  return out;
}

}  // namespace gradmask
