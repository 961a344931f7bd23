#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "gradmask/checkpoint.hpp"
#include "gradmask/feedback.hpp"
#include "gradmask/saliency.hpp"
#include "gradmask/signal.hpp"
#include "gradmask/trainer.hpp"

namespace httplib {
class Server;
}

namespace gradmask {

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  DatasetManifest dataset;
  // Serving checkpoint at startup. Without it, the last promoted one under
  // data_dir is used if present.
  std::optional<std::filesystem::path> checkpoint;
  // Holds feedback.ndjson, feedback.snapshot.json, runs/ and promoted.json.
  std::filesystem::path data_dir = "gradmask-data";
  std::optional<std::filesystem::path> static_dir;
  // Base configs for retraining; request bodies override the train config.
  // Without a model config, the serving checkpoint's is reused.
  std::optional<ModelConfig> model;
  TrainConfig train;
  std::uint64_t seed = 0;
  SaliencyOptions saliency;
  std::size_t snapshot_every = 50;
  std::function<std::string()> clock = utc_timestamp;
};

// The feedback protocol behind /api. Handlers are plain methods so they can
// be driven without sockets; mount() wires them to an HTTP server.
class FeedbackService {
 public:
  explicit FeedbackService(ServiceOptions options);
  ~FeedbackService();
  FeedbackService(const FeedbackService&) = delete;
  FeedbackService& operator=(const FeedbackService&) = delete;

  // status: pending, completed or all.
  ServiceResponse list_examples(const std::string& status,
                                std::optional<std::size_t> limit) const;
  ServiceResponse get_example(const std::string& id) const;
  ServiceResponse post_feedback(const std::string& id, const std::string& body);
  ServiceResponse retrain(const std::string& body);
  ServiceResponse run_status(const std::string& run_id) const;
  ServiceResponse promote(const std::string& body);
  ServiceResponse status() const;

  void mount(httplib::Server& server);
  void wait_for_run();

  QueueState queue() const;
  // Deterministic bytes of the training snapshot for the current log.
  std::string export_bytes() const;
  std::string checkpoint_id() const;

 private:
  struct Serving {
    Checkpoint checkpoint;
    std::string id;
    std::string run_id;
    mutable std::mutex cache_mu;
    mutable std::map<std::string, nlohmann::json> saliency_cache;
  };
  struct RunSlot {
    RunManifest manifest;
    std::filesystem::path dir;
  };

  ServiceOptions opt_;
  FeedbackLog log_;
  mutable std::mutex serving_mu_;
  std::shared_ptr<const Serving> serving_;
  // Forward and backward passes share parameter leaves, so they run one at
  // a time.
  mutable std::mutex compute_mu_;

  mutable std::mutex runs_mu_;
  std::map<std::string, RunSlot> runs_;
  std::string active_run_;
  std::thread worker_;
  std::atomic<bool> cancel_{false};

  std::shared_ptr<const Serving> serving() const;
  void serve_checkpoint(Checkpoint ckpt, std::string run_id);
  std::filesystem::path runs_dir() const;
  std::string next_run_id() const;
};

}  // namespace gradmask
