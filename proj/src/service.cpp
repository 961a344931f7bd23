#include "gradmask/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "gradmask/compare.hpp"
#include "gradmask/dataset_io.hpp"
#include "gradmask/error.hpp"
#include "gradmask/json_util.hpp"

namespace gradmask {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ServiceResponse error(int status, const std::string& message, const std::string& hint = {}) {
  json body = {{"error", message}};
  if (!hint.empty()) body["hint"] = hint;
  return {status, body};
}

ServiceResponse no_checkpoint() {
  return error(409, "no checkpoint is loaded",
               "start the service with --checkpoint, or retrain and POST /api/promote");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Logits for a set of examples, one forward pass.
std::vector<std::vector<double>> logits_for(const Checkpoint& ckpt,
                                            const std::vector<const SignalExample*>& exs) {
  std::vector<std::vector<double>> out;
  if (exs.empty()) return out;
  const std::size_t L = exs[0]->leads, T = exs[0]->samples;
  std::vector<double> x;
  x.reserve(exs.size() * L * T);
  for (const auto* e : exs) x.insert(x.end(), e->signal.begin(), e->signal.end());
  ad::NoGradGuard no_grad;
  const auto f = forward(ckpt.config, ckpt.params, ad::Tensor::constant({exs.size(), L, T}, x));
  const auto data = f.data();
  const std::size_t K = f.dim(1);
  for (std::size_t i = 0; i < exs.size(); ++i) {
    out.emplace_back(data.begin() + i * K, data.begin() + (i + 1) * K);
  }
  return out;
}

json prediction_json(std::span<const double> logits) {
  json scores = json::array();
  for (double v : logits) scores.push_back(1.0 / (1.0 + std::exp(-v)));
  return {{"logits", logits}, {"scores", scores}, {"predicted", predict(logits)}};
}

json parse_body(const std::string& body) {
  if (body.empty()) return json::object();
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("request body is not valid JSON: ") + e.what());
  }
}

}  // namespace

FeedbackService::FeedbackService(ServiceOptions options)
    : opt_(std::move(options)),
      log_(opt_.data_dir / "feedback.ndjson", opt_.data_dir / "feedback.snapshot.json",
           opt_.snapshot_every) {
  opt_.dataset.validate();
  fs::create_directories(runs_dir());
  if (opt_.checkpoint) {
    serve_checkpoint(load_checkpoint(*opt_.checkpoint), "");
  } else if (fs::exists(opt_.data_dir / "promoted.json")) {
    const auto j = read_json_file(opt_.data_dir / "promoted.json");
    serve_checkpoint(load_checkpoint(j.at("checkpoint").get<std::string>()),
                     j.value("run_id", std::string()));
  }
  if (const auto s = serving()) {
    if (s->checkpoint.config.in_leads != opt_.dataset.leads ||
        s->checkpoint.config.n_classes != opt_.dataset.n_classes) {
      throw ValidationError("checkpoint expects " +
                            std::to_string(s->checkpoint.config.in_leads) + " leads and " +
                            std::to_string(s->checkpoint.config.n_classes) +
                            " labels; dataset has " + std::to_string(opt_.dataset.leads) +
                            " and " + std::to_string(opt_.dataset.n_classes));
    }
  }
}

FeedbackService::~FeedbackService() {
  cancel_ = true;
  if (worker_.joinable()) worker_.join();
}

std::shared_ptr<const FeedbackService::Serving> FeedbackService::serving() const {
  std::lock_guard lock(serving_mu_);
  return serving_;
}

void FeedbackService::serve_checkpoint(Checkpoint ckpt, std::string run_id) {
  auto s = std::make_shared<Serving>();
  s->id = hex64(fnv1a(encode_checkpoint(ckpt)));
  s->checkpoint = std::move(ckpt);
  s->run_id = std::move(run_id);
  std::lock_guard lock(serving_mu_);
  serving_ = std::move(s);
}

std::string FeedbackService::checkpoint_id() const {
  const auto s = serving();
  return s ? s->id : std::string();
}

fs::path FeedbackService::runs_dir() const { return opt_.data_dir / "runs"; }

std::string FeedbackService::next_run_id() const {
  for (std::size_t n = 1;; ++n) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "run-%04zu", n);
    if (!fs::exists(runs_dir() / buf) && !runs_.count(buf)) return buf;
  }
}

QueueState FeedbackService::queue() const { return queue_state(opt_.dataset, log_.state()); }

std::string FeedbackService::export_bytes() const {
  return encode_binary(export_dataset(opt_.dataset, log_.state()));
}

ServiceResponse FeedbackService::list_examples(const std::string& status,
                                               std::optional<std::size_t> limit) const {
  if (status != "pending" && status != "completed" && status != "all") {
    return error(422, "unknown status '" + status + "' (expected pending, completed or all)");
  }
  const auto s = serving();
  if (!s) return no_checkpoint();
  const auto state = log_.state();
  const auto q = queue_state(opt_.dataset, state);
  std::vector<std::string> ids;
  if (status == "pending") {
    ids = q.pending;
  } else if (status == "completed") {
    ids = q.completed;
  } else {
    for (const auto& ex : opt_.dataset.examples) ids.push_back(ex.id);
  }
  const std::size_t total = ids.size();
  if (limit && *limit < ids.size()) ids.resize(*limit);
  std::vector<const SignalExample*> exs;
  for (const auto& id : ids) exs.push_back(opt_.dataset.find(id));
  std::vector<std::vector<double>> logits;
  {
    std::lock_guard lock(compute_mu_);
    logits = logits_for(s->checkpoint, exs);
  }
  json items = json::array();
  for (std::size_t i = 0; i < exs.size(); ++i) {
    const auto rev = state.latest_revision(exs[i]->id);
    json item = prediction_json(logits[i]);
    item["id"] = exs[i]->id;
    item["split"] = std::string(to_string(exs[i]->split));
    item["has_feedback"] = rev > 0;
    item["latest_revision"] = rev;
    items.push_back(std::move(item));
  }
  return {200, {{"status", status},
                {"total", total},
                {"checkpoint_id", s->id},
                {"label_names", opt_.dataset.label_names},
                {"examples", items}}};
}

ServiceResponse FeedbackService::get_example(const std::string& id) const {
  const auto* ex = opt_.dataset.find(id);
  if (!ex) return error(404, "unknown example '" + id + "'");
  json signal = json::array();
  for (std::size_t l = 0; l < ex->leads; ++l) {
    const auto lead = ex->lead(l);
    signal.push_back(std::vector<double>(lead.begin(), lead.end()));
  }
  json history = json::array();
  for (const auto& r : log_.history(id)) history.push_back(to_json(r));
  json body = {{"id", ex->id},
               {"split", std::string(to_string(ex->split))},
               {"leads", ex->leads},
               {"samples", ex->samples},
               {"sample_rate_hz", ex->sample_rate_hz},
               {"signal", signal},
               {"label_names", opt_.dataset.label_names},
               {"labels", ex->labels},
               {"feedback", history},
               {"checkpoint_id", nullptr},
               {"predictions", nullptr},
               {"saliency", nullptr}};
  const auto s = serving();
  if (!s) return {200, body};
  json sal;
  {
    std::lock_guard lock(s->cache_mu);
    const auto it = s->saliency_cache.find(id);
    if (it != s->saliency_cache.end()) sal = it->second;
  }
  std::vector<std::vector<double>> logits;
  {
    std::lock_guard lock(compute_mu_);
    logits = logits_for(s->checkpoint, {ex});
    if (sal.is_null()) {
      sal = to_json(compute_saliency(s->checkpoint.config, s->checkpoint.params, *ex,
                                     opt_.saliency));
      std::lock_guard cache_lock(s->cache_mu);
      s->saliency_cache.emplace(id, sal);
    }
  }
  body["checkpoint_id"] = s->id;
  body["predictions"] = prediction_json(logits[0]);
  body["saliency"] = sal;
  return {200, body};
}

ServiceResponse FeedbackService::post_feedback(const std::string& id, const std::string& body) {
  const auto* ex = opt_.dataset.find(id);
  if (!ex) return error(404, "unknown example '" + id + "'");
  FeedbackRecord record;
  try {
    record = parse_submission(parse_body(body), *ex, opt_.dataset.n_classes);
  } catch (const ValidationError& e) {
    return error(422, e.what());
  } catch (const json::exception& e) {
    return error(422, e.what());
  }
  const auto stored = log_.append(std::move(record), opt_.clock());
  json out = to_json(stored);
  out["flat_mask_size"] = flatten_mask(stored.intervals, ex->leads, ex->samples).size();
  return {201, out};
}

ServiceResponse FeedbackService::retrain(const std::string& body) {
  json overrides;
  try {
    overrides = parse_body(body);
    if (!overrides.is_object()) throw ValidationError("retrain body must be a JSON object");
  } catch (const ValidationError& e) {
    return error(422, e.what());
  }
  const bool allow_empty = overrides.value("allow_empty", false);
  const std::uint64_t seed = overrides.value("seed", opt_.seed);
  overrides.erase("allow_empty");
  overrides.erase("seed");
  TrainConfig config = opt_.train;
  try {
    from_json(overrides, config);
    config.validate();
  } catch (const ValidationError& e) {
    return error(422, e.what());
  } catch (const json::exception& e) {
    return error(422, e.what());
  }

  std::unique_lock lock(runs_mu_);
  if (!active_run_.empty()) {
    return error(409, "run " + active_run_ + " is still active",
                 "poll GET /api/runs/" + active_run_ + " until it finishes");
  }
  const auto state = log_.state();
  if (state.records == 0 && !allow_empty) {
    return error(409, "no feedback has been collected",
                 "submit feedback first, or pass \"allow_empty\": true");
  }
  ModelConfig model;
  if (opt_.model) {
    model = *opt_.model;
  } else if (const auto s = serving()) {
    model = s->checkpoint.config;
  }
  model.in_leads = opt_.dataset.leads;
  model.n_classes = opt_.dataset.n_classes;

  const std::string run_id = next_run_id();
  const fs::path dir = runs_dir() / run_id;
  fs::create_directories(dir);
  const DatasetManifest snapshot = export_dataset(opt_.dataset, state);
  write_file_atomic(dir / "dataset.gmsk", encode_binary(snapshot));
  write_file_atomic(dir / "label_provenance.json",
                    label_provenance(opt_.dataset, state).dump(2) + "\n");

  RunSlot slot;
  slot.dir = dir;
  slot.manifest.run_id = run_id;
  slot.manifest.model_config = model;
  slot.manifest.train_config = config;
  slot.manifest.seed = seed;
  slot.manifest.feedback_count = snapshot.feedback_count(Split::kTrain);
  runs_[run_id] = slot;
  active_run_ = run_id;
  if (worker_.joinable()) worker_.join();
  cancel_ = false;
  worker_ = std::thread([this, run_id, dir, snapshot, model, config, seed] {
    TrainOptions topts;
    topts.run_id = run_id;
    topts.run_dir = dir;
    topts.cancel = &cancel_;
    topts.on_epoch = [this, &run_id](const RunManifest& m) {
      std::lock_guard g(runs_mu_);
      runs_[run_id].manifest = m;
    };
    RunManifest final_manifest;
    try {
      auto result = train_run(snapshot, model, config, seed, topts);
      final_manifest = result.manifest;
      if (final_manifest.status == RunStatus::kCompleted &&
          !snapshot.split(Split::kTest).empty()) {
        try {
          const auto t = evaluate_test(snapshot, result.best, config, opt_.saliency);
          final_manifest.test_metrics = {{"fmax", t.fmax},
                                         {"macro_auc", t.macro_auc},
                                         {"mask_overlap", t.mask_overlap}};
        } catch (const ValidationError& e) {
          final_manifest.test_metrics = {{"error", e.what()}};
        }
        write_file_atomic(dir / "manifest.json", to_json(final_manifest).dump(2) + "\n");
      }
    } catch (const std::exception& e) {
      std::lock_guard g(runs_mu_);
      final_manifest = runs_[run_id].manifest;
      final_manifest.status = RunStatus::kFailed;
      final_manifest.error = e.what();
      try {
        write_file_atomic(dir / "manifest.json", to_json(final_manifest).dump(2) + "\n");
      } catch (const std::exception&) {
      }
    }
    std::lock_guard g(runs_mu_);
    runs_[run_id].manifest = final_manifest;
    active_run_.clear();
  });
  return {202, {{"run_id", run_id},
                {"status", "running"},
                {"feedback_count", slot.manifest.feedback_count}}};
}

ServiceResponse FeedbackService::run_status(const std::string& run_id) const {
  {
    std::lock_guard lock(runs_mu_);
    const auto it = runs_.find(run_id);
    if (it != runs_.end()) return {200, to_json(it->second.manifest)};
  }
  const fs::path manifest = runs_dir() / run_id / "manifest.json";
  if (run_id.find('/') == std::string::npos && run_id != ".." && fs::exists(manifest)) {
    return {200, read_json_file(manifest)};
  }
  return error(404, "unknown run '" + run_id + "'");
}

ServiceResponse FeedbackService::promote(const std::string& body) {
  json j;
  try {
    j = parse_body(body);
    require_known_keys(j, {"run_id"}, "promote");
    if (!j.contains("run_id") || !j["run_id"].is_string()) {
      throw ValidationError("promote needs a run_id string");
    }
  } catch (const ValidationError& e) {
    return error(422, e.what());
  }
  const std::string run_id = j["run_id"].get<std::string>();
  const auto st = run_status(run_id);
  if (st.status != 200) return st;
  if (st.body.value("status", std::string()) != "completed") {
    return error(409, "run " + run_id + " has status " + st.body.value("status", std::string()),
                 "only completed runs can be promoted");
  }
  const fs::path ckpt_path = runs_dir() / run_id / "ckpt-best.gmck";
  serve_checkpoint(load_checkpoint(ckpt_path), run_id);
  write_file_atomic(opt_.data_dir / "promoted.json",
                    json{{"run_id", run_id}, {"checkpoint", fs::absolute(ckpt_path).string()}}
                            .dump(2) +
                        "\n");
  return {200, {{"run_id", run_id}, {"checkpoint_id", checkpoint_id()}}};
}

ServiceResponse FeedbackService::status() const {
  const auto s = serving();
  const auto q = queue();
  std::lock_guard lock(runs_mu_);
  return {200,
          {{"checkpoint_id", s ? json(s->id) : json(nullptr)},
           {"promoted_run", s && !s->run_id.empty() ? json(s->run_id) : json(nullptr)},
           {"active_run", active_run_.empty() ? json(nullptr) : json(active_run_)},
           {"pending", q.pending.size()},
           {"completed", q.completed.size()},
           {"dataset_fingerprint", fingerprint(opt_.dataset)}}};
}

void FeedbackService::wait_for_run() {
  if (worker_.joinable()) worker_.join();
}

void FeedbackService::mount(httplib::Server& server) {
  auto reply = [](httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get("/api/examples", [this, reply](const httplib::Request& req, httplib::Response& res) {
    std::optional<std::size_t> limit;
    if (req.has_param("limit")) {
      const auto text = req.get_param_value("limit");
      if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
        return reply(res, error(422, "limit must be a non-negative integer"));
      }
      limit = std::stoull(text);
    }
    const auto status = req.has_param("status") ? req.get_param_value("status") : "pending";
    reply(res, list_examples(status, limit));
  });
  server.Get("/api/examples/:id", [this, reply](const httplib::Request& req,
                                                httplib::Response& res) {
    reply(res, get_example(req.path_params.at("id")));
  });
  server.Post("/api/examples/:id/feedback", [this, reply](const httplib::Request& req,
                                                          httplib::Response& res) {
    reply(res, post_feedback(req.path_params.at("id"), req.body));
  });
  server.Post("/api/retrain", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, retrain(req.body));
  });
  server.Get("/api/runs/:id", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, run_status(req.path_params.at("id")));
  });
  server.Post("/api/promote", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, promote(req.body));
  });
  server.Get("/api/status", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, status());
  });
  server.set_exception_handler(
      [](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "internal error";
        try {
          std::rethrow_exception(ep);
        } catch (const std::exception& e) {
          what = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(json{{"error", what}}.dump(), "application/json");
      });
  if (opt_.static_dir) {
    if (!fs::is_directory(*opt_.static_dir)) {
      throw ValidationError("static directory " + opt_.static_dir->string() + " does not exist");
    }
    server.set_mount_point("/", opt_.static_dir->string());
  }
}

}  // namespace gradmask
