#include "gradmask/feedback.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "gradmask/dataset_io.hpp"
#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"

namespace gradmask {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSnapshotVersion = 1;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Interval parse_interval(const json& triple, std::size_t index) {
  const std::string where = "interval " + std::to_string(index);
  if (!triple.is_array() || triple.size() != 3) {
    throw ValidationError(where + ": expected [lead, start, end]");
  }
  std::size_t v[3];
  for (int k = 0; k < 3; ++k) {
    if (!triple[k].is_number_integer() || triple[k].get<long long>() < 0) {
      throw ValidationError(where + " " + triple.dump() +
                            ": entries must be non-negative integers");
    }
    v[k] = triple[k].get<std::size_t>();
  }
  return {v[0], v[1], v[2]};
}

}  // namespace

std::string_view to_string(LabelDecision d) {
  switch (d) {
    case LabelDecision::kConfirm: return "confirm";
    case LabelDecision::kAdd: return "add";
    case LabelDecision::kRemove: return "remove";
    case LabelDecision::kUntouched: return "untouched";
  }
  return "untouched";
}

LabelDecision parse_label_decision(std::string_view text) {
  if (text == "confirm") return LabelDecision::kConfirm;
  if (text == "add") return LabelDecision::kAdd;
  if (text == "remove") return LabelDecision::kRemove;
  if (text == "untouched") return LabelDecision::kUntouched;
  throw ValidationError("unknown label decision '" + std::string(text) +
                        "' (expected confirm, add, remove or untouched)");
}

json to_json(const FeedbackRecord& r) {
  json intervals = json::array();
  for (const auto& iv : r.intervals) intervals.push_back({iv.lead, iv.start, iv.end});
  json decisions = json::array();
  for (auto d : r.label_decisions) decisions.push_back(std::string(to_string(d)));
  return {{"example_id", r.example_id},   {"annotator_id", r.annotator_id},
          {"intervals", intervals},       {"label_decisions", decisions},
          {"note", r.note},               {"submitted_at", r.submitted_at},
          {"revision", r.revision}};
}

FeedbackRecord record_from_json(const json& j) {
  require_known_keys(j, {"example_id", "annotator_id", "intervals", "label_decisions", "note",
                         "submitted_at", "revision"},
                     "feedback record");
  FeedbackRecord r;
  r.example_id = j.at("example_id").get<std::string>();
  r.annotator_id = j.at("annotator_id").get<std::string>();
  for (const auto& t : j.at("intervals")) r.intervals.push_back(parse_interval(t, r.intervals.size()));
  for (const auto& d : j.at("label_decisions")) {
    r.label_decisions.push_back(parse_label_decision(d.get<std::string>()));
  }
  r.note = j.at("note").get<std::string>();
  r.submitted_at = j.at("submitted_at").get<std::string>();
  r.revision = j.at("revision").get<std::uint64_t>();
  return r;
}

FeedbackRecord parse_submission(const json& body, const SignalExample& example,
                                std::size_t n_classes) {
  if (body.is_object() && (body.contains("revision") || body.contains("submitted_at"))) {
    throw ValidationError("revision and submitted_at are assigned by the server");
  }
  require_known_keys(body, {"example_id", "annotator_id", "intervals", "label_decisions", "note"},
                     "feedback");
  FeedbackRecord r;
  r.example_id = example.id;
  if (body.contains("example_id") && body["example_id"] != example.id) {
    throw ValidationError("body example_id " + body["example_id"].dump() +
                          " does not match the URL id '" + example.id + "'");
  }
  if (!body.contains("annotator_id") || !body["annotator_id"].is_string() ||
      body["annotator_id"].get<std::string>().empty()) {
    throw ValidationError("annotator_id must be a non-empty string");
  }
  r.annotator_id = body["annotator_id"].get<std::string>();
  if (!body.contains("intervals") || !body["intervals"].is_array()) {
    throw ValidationError("intervals must be a list of [lead, start, end]");
  }
  for (const auto& t : body["intervals"]) {
    r.intervals.push_back(parse_interval(t, r.intervals.size()));
  }
  validate_intervals(r.intervals, example.leads, example.samples);
  r.label_decisions.assign(n_classes, LabelDecision::kUntouched);
  if (body.contains("label_decisions")) {
    const auto& d = body["label_decisions"];
    if (!d.is_array() || d.size() != n_classes) {
      throw ValidationError("label_decisions must list " + std::to_string(n_classes) +
                            " decisions");
    }
    for (std::size_t k = 0; k < n_classes; ++k) {
      if (!d[k].is_string()) throw ValidationError("label_decisions entries must be strings");
      r.label_decisions[k] = parse_label_decision(d[k].get<std::string>());
    }
  }
  if (body.contains("note")) {
    if (!body["note"].is_string()) throw ValidationError("note must be a string");
    r.note = body["note"].get<std::string>();
  }
  return r;
}

void FeedbackState::apply(const FeedbackRecord& r) {
  if (!latest.count(r.example_id)) completion_order.push_back(r.example_id);
  latest[r.example_id] = r;
  ++records;
}

std::uint64_t FeedbackState::latest_revision(const std::string& id) const {
  const auto it = latest.find(id);
  return it == latest.end() ? 0 : it->second.revision;
}

json to_json(const FeedbackState& s) {
  json latest = json::array();
  for (const auto& id : s.completion_order) latest.push_back(to_json(s.latest.at(id)));
  return {{"records", s.records}, {"latest", latest}};
}

FeedbackState state_from_json(const json& j) {
  require_known_keys(j, {"records", "latest"}, "feedback state");
  FeedbackState s;
  for (const auto& rj : j.at("latest")) {
    auto r = record_from_json(rj);
    s.completion_order.push_back(r.example_id);
    s.latest[r.example_id] = std::move(r);
  }
  s.records = j.at("records").get<std::uint64_t>();
  return s;
}

QueueState queue_state(const DatasetManifest& dataset, const FeedbackState& state) {
  QueueState q;
  for (const auto* ex : dataset.split(Split::kTrain)) {
    if (!state.latest.count(ex->id)) q.pending.push_back(ex->id);
  }
  q.completed = state.completion_order;
  for (const auto& [id, r] : state.latest) q.latest_revision[id] = r.revision;
  return q;
}

DatasetManifest export_dataset(const DatasetManifest& dataset, const FeedbackState& state) {
  DatasetManifest out = dataset;
  for (auto& ex : out.examples) {
    const auto it = state.latest.find(ex.id);
    if (it == state.latest.end()) continue;
    const auto& r = it->second;
    ex.mask = MaskSet(r.intervals, ex.leads, ex.samples, MaskSource::kAnnotator, r.note);
    for (std::size_t k = 0; k < ex.labels.size() && k < r.label_decisions.size(); ++k) {
      if (r.label_decisions[k] == LabelDecision::kAdd) ex.labels[k] = 1;
      if (r.label_decisions[k] == LabelDecision::kRemove) ex.labels[k] = -1;
    }
  }
  return out;
}

json label_provenance(const DatasetManifest& dataset, const FeedbackState& state) {
  json out = json::array();
  for (const auto& id : state.completion_order) {
    const auto& r = state.latest.at(id);
    const auto* ex = dataset.find(id);
    if (!ex) continue;
    for (std::size_t k = 0; k < ex->labels.size() && k < r.label_decisions.size(); ++k) {
      const auto d = r.label_decisions[k];
      if (d == LabelDecision::kUntouched) continue;
      int corrected = ex->labels[k];
      if (d == LabelDecision::kAdd) corrected = 1;
      if (d == LabelDecision::kRemove) corrected = -1;
      out.push_back({{"example_id", id},
                     {"label", dataset.label_names.at(k)},
                     {"decision", std::string(to_string(d))},
                     {"original", ex->labels[k]},
                     {"corrected", corrected},
                     {"revision", r.revision},
                     {"annotator_id", r.annotator_id}});
    }
  }
  return out;
}

std::vector<FeedbackRecord> parse_log(std::string_view bytes, std::size_t* complete_bytes) {
  std::vector<FeedbackRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 1;
  while (pos < bytes.size()) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) break;
    const auto line = bytes.substr(pos, nl - pos);
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw RuntimeFailure("feedback log line " + std::to_string(line_no) +
                           " is corrupt: " + e.what());
    }
    pos = nl + 1;
    ++line_no;
  }
  if (complete_bytes) *complete_bytes = pos;
  return out;
}

FeedbackState recover_state(std::string_view log_bytes, const std::optional<json>& snapshot) {
  std::size_t complete = 0;
  parse_log(log_bytes, &complete);  // validates every complete line
  FeedbackState state;
  std::size_t start = 0;
  if (snapshot) {
    try {
      const auto& s = *snapshot;
      const auto at = s.at("log_bytes").get<std::size_t>();
      if (s.at("version").get<int>() == kSnapshotVersion && at <= complete &&
          s.at("log_fnv").get<std::string>() == hex64(fnv1a(log_bytes.substr(0, at)))) {
        state = state_from_json(s.at("state"));
        start = at;
      }
    } catch (const std::exception&) {
      state = {};
      start = 0;
    }
  }
  for (const auto& r : parse_log(log_bytes.substr(start, complete - start))) state.apply(r);
  return state;
}

FeedbackLog::FeedbackLog(fs::path log_path, fs::path snapshot_path, std::size_t snapshot_every)
    : log_path_(std::move(log_path)),
      snapshot_path_(std::move(snapshot_path)),
      snapshot_every_(snapshot_every) {
  if (log_path_.has_parent_path()) fs::create_directories(log_path_.parent_path());
  const std::string bytes = read_all(log_path_);
  std::optional<json> snap;
  if (fs::exists(snapshot_path_)) {
    try {
      snap = read_json_file(snapshot_path_);
    } catch (const ValidationError&) {
      snap.reset();
    }
  }
  state_ = recover_state(bytes, snap);
  std::size_t complete = 0;
  parse_log(bytes, &complete);
  if (complete != bytes.size()) fs::resize_file(log_path_, complete);
  log_bytes_ = complete;
}

FeedbackRecord FeedbackLog::append(FeedbackRecord record, const std::string& submitted_at) {
  std::lock_guard lock(mu_);
  record.revision = state_.latest_revision(record.example_id) + 1;
  record.submitted_at = submitted_at;
  const std::string line = to_json(record).dump() + "\n";
  const int fd = ::open(log_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) {
    throw RuntimeFailure("cannot open feedback log " + log_path_.string() + ": " +
                         std::strerror(errno));
  }
  std::size_t done = 0;
  while (done < line.size()) {
    const auto n = ::write(fd, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string err = std::strerror(errno);
      ::close(fd);
      throw RuntimeFailure("cannot append to feedback log: " + err);
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  log_bytes_ += line.size();
  state_.apply(record);
  if (snapshot_every_ > 0 && ++since_snapshot_ >= snapshot_every_) write_snapshot_locked();
  return record;
}

FeedbackState FeedbackLog::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

std::vector<FeedbackRecord> FeedbackLog::history(const std::string& example_id) const {
  std::string bytes;
  {
    std::lock_guard lock(mu_);
    bytes = read_all(log_path_).substr(0, log_bytes_);
  }
  std::vector<FeedbackRecord> out;
  for (auto& r : parse_log(bytes)) {
    if (r.example_id == example_id) out.push_back(std::move(r));
  }
  return out;
}

void FeedbackLog::write_snapshot() {
  std::lock_guard lock(mu_);
  write_snapshot_locked();
}

void FeedbackLog::write_snapshot_locked() {
  const std::string prefix = read_all(log_path_).substr(0, log_bytes_);
  const json snap = {{"version", kSnapshotVersion},
                     {"log_bytes", log_bytes_},
                     {"log_fnv", hex64(fnv1a(prefix))},
                     {"state", to_json(state_)}};
  write_file_atomic(snapshot_path_, snap.dump() + "\n");
  since_snapshot_ = 0;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() %
      1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof(out), "%s.%03lldZ", buf, static_cast<long long>(ms));
  return out;
}

}  // namespace gradmask
