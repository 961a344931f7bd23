#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gradmask/signal.hpp"

namespace gradmask {

enum class LabelDecision { kConfirm, kAdd, kRemove, kUntouched };

std::string_view to_string(LabelDecision d);
LabelDecision parse_label_decision(std::string_view text);

struct FeedbackRecord {
  std::string example_id;
  std::string annotator_id;
  std::vector<Interval> intervals;
  // One entry per label, in manifest order.
  std::vector<LabelDecision> label_decisions;
  // Stored for reviewers; training never reads it.
  std::string note;
  std::string submitted_at;
  std::uint64_t revision = 0;

  bool operator==(const FeedbackRecord&) const = default;
};

nlohmann::json to_json(const FeedbackRecord& r);
FeedbackRecord record_from_json(const nlohmann::json& j);

// Validates a client submission against `example` (K = n_classes). The body
// may not carry revision or submitted_at; missing label_decisions mean all
// untouched. Throws ValidationError naming the offending field or interval.
FeedbackRecord parse_submission(const nlohmann::json& body, const SignalExample& example,
                                std::size_t n_classes);

// Latest record per example plus first-completion order. A pure fold over
// the log.
struct FeedbackState {
  std::map<std::string, FeedbackRecord> latest;
  std::vector<std::string> completion_order;
  std::uint64_t records = 0;

  void apply(const FeedbackRecord& r);
  std::uint64_t latest_revision(const std::string& id) const;
  bool operator==(const FeedbackState&) const = default;
};

nlohmann::json to_json(const FeedbackState& s);
FeedbackState state_from_json(const nlohmann::json& j);

struct QueueState {
  // Training examples without feedback, in manifest order.
  std::vector<std::string> pending;
  // In order of first feedback.
  std::vector<std::string> completed;
  std::map<std::string, std::uint64_t> latest_revision;

  bool operator==(const QueueState&) const = default;
};

QueueState queue_state(const DatasetManifest& dataset, const FeedbackState& state);

// Working copy for training: each example with feedback gets the latest
// revision's mask (source annotator, note attached) and its label decisions
// applied to the original labels. `dataset` itself is left untouched.
DatasetManifest export_dataset(const DatasetManifest& dataset, const FeedbackState& state);
// Per-label corrections of the export, for provenance.
nlohmann::json label_provenance(const DatasetManifest& dataset, const FeedbackState& state);

// Records from complete lines of an NDJSON log. A trailing line without its
// newline is a torn write and is ignored. `complete_bytes` receives the
// length of the prefix made of complete lines.
std::vector<FeedbackRecord> parse_log(std::string_view bytes,
                                      std::size_t* complete_bytes = nullptr);

// Append-only feedback log with periodic snapshots. Opening repairs a torn
// tail, loads the snapshot when it matches the log prefix, and replays the
// rest.
class FeedbackLog {
 public:
  FeedbackLog(std::filesystem::path log_path, std::filesystem::path snapshot_path,
              std::size_t snapshot_every = 50);

  // Assigns the next revision for the example, stamps `submitted_at`, and
  // appends durably. Serialized across threads.
  FeedbackRecord append(FeedbackRecord record, const std::string& submitted_at);

  FeedbackState state() const;
  // Every stored revision for one example, oldest first.
  std::vector<FeedbackRecord> history(const std::string& example_id) const;
  void write_snapshot();

  const std::filesystem::path& log_path() const { return log_path_; }

 private:
  std::filesystem::path log_path_;
  std::filesystem::path snapshot_path_;
  std::size_t snapshot_every_;
  mutable std::mutex mu_;
  FeedbackState state_;
  std::uint64_t log_bytes_ = 0;
  std::size_t since_snapshot_ = 0;

  void write_snapshot_locked();
};

// State reconstructed from raw log bytes and an optional snapshot document,
// exactly as FeedbackLog does on open.
FeedbackState recover_state(std::string_view log_bytes,
                            const std::optional<nlohmann::json>& snapshot);

std::string utc_timestamp();

}  // namespace gradmask
