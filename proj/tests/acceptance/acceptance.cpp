// Acceptance harness. `acceptance N` checks one criterion, `acceptance all`
// checks every one. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <httplib.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "gradmask/checkpoint.hpp"
#include "gradmask/compare.hpp"
#include "gradmask/dataset_io.hpp"
#include "gradmask/error.hpp"
#include "gradmask/feedback.hpp"
#include "gradmask/json_util.hpp"
#include "gradmask/metrics.hpp"
#include "gradmask/objective.hpp"
#include "gradmask/rng.hpp"
#include "gradmask/service.hpp"
#include "gradmask/synthetic.hpp"
#include "gradmask/trainer.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace gradmask;
using ad::Tensor;
using nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr std::size_t kGradTrials = 200;
constexpr double kGradTol = 1e-5;
constexpr double kKinkMargin = 1e-4;
constexpr std::size_t kMaxParams = 5000;
constexpr double kGradBudgetS = 300;
constexpr double kParityBudgetS = 60;
constexpr std::size_t kMetricInstances = 1000;
constexpr double kMetricTol = 1e-12;
constexpr double kAucMargin = 0.0;      // Feedback AUC >= Normal AUC - margin
constexpr double kOverlapRatio = 1.5;   // Feedback overlap >= ratio * Normal
constexpr double kCompareBudgetS = 1800;
constexpr std::size_t kCrashOffsets = 100;
constexpr std::size_t kLoopFeedback = 20;
constexpr double kLoopBudgetS = 600;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// 1. Parameter gradient of the full objective vs central differences.

ModelConfig random_model(Rng& rng, std::size_t L, std::size_t K) {
  ModelConfig c;
  c.in_leads = L;
  c.n_classes = K;
  c.seed = rng.next();
  const std::size_t blocks = 1 + rng.below(2);
  c.blocks.clear();
  for (std::size_t b = 0; b < blocks; ++b) {
    if (rng.bernoulli(0.5)) {
      c.blocks.emplace_back(PlainConvBlock{1 + rng.below(16), 1 + 2 * rng.below(5)});
    } else {
      std::vector<std::size_t> ks{1 + 2 * rng.below(3), 5 + 2 * rng.below(3)};
      c.blocks.emplace_back(InceptionBlock{ks, rng.below(9), 1 + rng.below(8)});
    }
  }
  return c;
}

std::vector<SignalExample> random_batch(Rng& rng, std::size_t L, std::size_t T, std::size_t K) {
  const std::size_t n = 2 + rng.below(4);
  std::vector<SignalExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    SignalExample ex{.id = "e" + std::to_string(i), .leads = L, .samples = T,
                     .signal = std::vector<double>(L * T), .labels = std::vector<int>(K)};
    for (auto& v : ex.signal) v = rng.normal();
    for (auto& y : ex.labels) y = rng.bernoulli(0.5) ? 1 : -1;
    if (i == 0 || rng.bernoulli(0.6)) {
      std::vector<Interval> ivs;
      const std::size_t m = rng.below(3);
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t a = rng.below(T);
        ivs.push_back({rng.below(L), a, a + 1 + rng.below(T - a)});
      }
      ex.mask = MaskSet(ivs, L, T);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

Outcome criterion_gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  const double lambdas[] = {0.01, 0.1, 1.0, 10.0};
  Rng rng(20260101);
  std::size_t accepted = 0, rejected = 0, attempts = 0;
  double worst = 0;
  std::size_t max_params = 0;
  std::string worst_where;
  while (accepted < kGradTrials && attempts < 10 * kGradTrials) {
    ++attempts;
    const std::size_t L = 1 + rng.below(3), K = 1 + rng.below(3);
    const auto config = random_model(rng, L, K);
    const std::size_t T = config.receptive_field() + rng.below(8);
    const auto params = init_params(config);
    if (params.total_count() > kMaxParams) continue;
    const auto batch = random_batch(rng, L, T, K);
    std::vector<const SignalExample*> ptrs;
    for (const auto& e : batch) ptrs.push_back(&e);
    const double lambda = lambdas[accepted % 4];
    const ObjectiveConfig oc{lambda, rng.bernoulli(0.5) ? Reduction::kMean : Reduction::kSum};
    const ad::ScalarFn f = [&](const std::vector<Tensor>& leaves) {
      ModelParams q;
      for (std::size_t i = 0; i < leaves.size(); ++i) q.add(params.name(i), leaves[i]);
      return objective_batch(as_logit_fn(config, q), ptrs, oc);
    };
    {
      // Central differences straddling a relu kink are meaningless.
      ad::ReluKinkMonitor kinks;
      f(params.tensors());
      if (kinks.min_abs_input() < kKinkMargin) {
        ++rejected;
        continue;
      }
    }
    const auto r = ad::grad_check(f, params.tensors(), {1, 8, attempts});
    max_params = std::max(max_params, params.total_count());
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_where = params.name(r.worst_leaf) + " lambda " + fmt("%g", lambda);
    }
    ++accepted;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = accepted >= kGradTrials && worst < kGradTol && secs < kGradBudgetS;
  o.detail = std::to_string(accepted) + " trials (" + std::to_string(rejected) +
             " rejected near relu kinks), lambda in {0.01,0.1,1,10}, <= " +
             std::to_string(max_params) + " params; max rel err " + fmt("%.3g", worst) +
             (worst_where.empty() ? "" : " at " + worst_where) + " (tol " +
             fmt("%g", kGradTol) + "); " + fmt("%.1f", secs) + " s (budget " +
             fmt("%g", kGradBudgetS) + " s)";
  return o;
}

// 2. lambda = 0 with masks vs masks stripped: bit-identical checkpoints.

Outcome criterion_parity() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = generate_synthetic(SyntheticSpec{}).manifest;
  ModelConfig mc;
  mc.in_leads = ds.leads;
  mc.n_classes = ds.n_classes;
  mc.blocks = {PlainConvBlock{8, 9}};
  TrainConfig tc;
  tc.epochs = 8;
  tc.lambda = 0.0;
  bool all_equal = true;
  std::string detail;
  for (std::uint64_t seed : {0, 7}) {
    const auto with = train_run(ds, mc, tc, seed);
    const auto without = train_run(strip_masks(ds), mc, tc, seed);
    const bool best = encode_checkpoint(with.best) == encode_checkpoint(without.best);
    const bool last = encode_checkpoint(with.last) == encode_checkpoint(without.last);
    bool losses = with.manifest.epochs.size() == without.manifest.epochs.size();
    for (std::size_t e = 0; losses && e < with.manifest.epochs.size(); ++e) {
      losses = with.manifest.epochs[e].train_loss == without.manifest.epochs[e].train_loss;
    }
    all_equal = all_equal && best && last && losses;
    detail += "seed " + std::to_string(seed) + ": best " + (best ? "identical" : "DIFFERENT") +
              ", last " + (last ? "identical" : "DIFFERENT") + "; ";
  }
  const double secs = seconds_since(t0);
  return {all_equal && secs < kParityBudgetS,
          detail + std::to_string(ds.feedback_count()) + " masked training examples; " +
              fmt("%.1f", secs) + " s (budget " + fmt("%g", kParityBudgetS) + " s)"};
}

// 3. Metrics vs exhaustive oracles.

double oracle_f_at(const ScoreMatrix& sm, double t) {
  {
    double f_sum = 0;
    int counted = 0;
    for (std::size_t i = 0; i < sm.rows; ++i) {
      int tp = 0, pred = 0, pos = 0;
      for (std::size_t j = 0; j < sm.cols; ++j) {
        const bool y = sm.truth[i * sm.cols + j] == 1;
        const bool p = sm.scores[i * sm.cols + j] >= t;
        tp += y && p;
        pred += p;
        pos += y;
      }
      if (pos == 0) continue;
      const double prec = pred == 0 ? 1.0 : double(tp) / pred;
      const double rec = double(tp) / pos;
      f_sum += prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec);
      ++counted;
    }
    return counted == 0 ? 0.0 : f_sum / counted;
  }
}

double oracle_sample_fmax(const ScoreMatrix& sm) {
  std::set<double> ts(sm.scores.begin(), sm.scores.end());
  ts.insert(0.0);
  ts.insert(1.0);
  double best = 0;
  for (double t : ts) best = std::max(best, oracle_f_at(sm, t));
  return best;
}

double oracle_pair_auc(const ScoreMatrix& sm, std::size_t j, bool* defined) {
  double wins = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < sm.rows; ++a) {
    for (std::size_t b = 0; b < sm.rows; ++b) {
      if (sm.truth[a * sm.cols + j] != 1 || sm.truth[b * sm.cols + j] != -1) continue;
      const double sa = sm.scores[a * sm.cols + j], sb = sm.scores[b * sm.cols + j];
      wins += sa > sb ? 1.0 : (sa == sb ? 0.5 : 0.0);
      ++pairs;
    }
  }
  *defined = pairs > 0;
  return pairs ? wins / pairs : 0.0;
}

Outcome criterion_metrics() {
  Rng rng(424242);
  std::size_t fmax_checked = 0, auc_checked = 0, mismatches = 0;
  double worst = 0;
  for (std::size_t trial = 0; trial < kMetricInstances; ++trial) {
    const std::size_t n = 1 + rng.below(8), k = 1 + rng.below(4);
    ScoreMatrix sm{n, k, {}, {}};
    const bool coarse = trial % 2 == 0;
    for (std::size_t i = 0; i < n * k; ++i) {
      sm.scores.push_back(coarse ? static_cast<double>(rng.below(6)) / 5.0 : rng.uniform());
      sm.truth.push_back(rng.bernoulli(0.45) ? 1 : -1);
    }
    const double f_oracle = oracle_sample_fmax(sm);
    const auto r = fmax(sm);
    // The reported threshold must actually achieve the reported F.
    const double err = std::max(std::abs(r.f - f_oracle), std::abs(oracle_f_at(sm, r.threshold) - r.f));
    worst = std::max(worst, err);
    if (err > kMetricTol) ++mismatches;
    ++fmax_checked;

    if (n < 2) continue;
    double total = 0;
    int used = 0;
    std::vector<double> per(k);
    std::vector<bool> def(k);
    for (std::size_t j = 0; j < k; ++j) {
      bool d = false;
      per[j] = oracle_pair_auc(sm, j, &d);
      def[j] = d;
      if (d) total += per[j], ++used;
    }
    if (used == 0) {
      bool threw = false;
      try {
        macro_auc(sm);
      } catch (const ValidationError&) {
        threw = true;
      }
      if (!threw) ++mismatches;
      continue;
    }
    const auto a = macro_auc(sm);
    for (std::size_t j = 0; j < k; ++j) {
      if (def[j]) {
        const double e = std::abs(a.per_label[j] - per[j]);
        worst = std::max(worst, e);
        if (e > kMetricTol) ++mismatches;
      } else if (!std::isnan(a.per_label[j])) {
        ++mismatches;
      }
    }
    const double e = std::abs(a.macro - total / used);
    worst = std::max(worst, e);
    if (e > kMetricTol) ++mismatches;
    ++auc_checked;
  }
  const ScoreMatrix worked{2, 2, {0.9, 0.2, 0.4, 0.8}, {1, 1, -1, 1}};
  const double worked_f = fmax(worked).f;
  const bool worked_ok = std::abs(worked_f - 5.0 / 6.0) <= kMetricTol;
  return {mismatches == 0 && worked_ok,
          std::to_string(fmax_checked) + " fmax and " + std::to_string(auc_checked) +
              " macro_auc instances (N<=8, K<=4), " + std::to_string(mismatches) +
              " mismatches, max abs err " + fmt("%.3g", worst) + " (tol " +
              fmt("%g", kMetricTol) + "); worked example Fmax " + fmt("%.15f", worked_f) +
              " vs 5/6"};
}

// 4. Synthetic Feedback vs Normal.

ModelConfig compare_model(const DatasetManifest& ds) {
  ModelConfig c;
  c.in_leads = ds.leads;
  c.n_classes = ds.n_classes;
  c.blocks = {InceptionBlock{{9, 19, 39}, 8, 8}};
  return c;
}

Outcome criterion_compare() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = generate_synthetic(SyntheticSpec{}).manifest;
  const TrainConfig tc;  // defaults: 5 seeds, default lambda
  CompareOptions opts;
  opts.on_run = [](const ArmRun& r) {
    std::cerr << "  " << r.arm << " seed " << r.seed << ": macro_auc " << r.test.macro_auc
              << " fmax " << r.test.fmax << " mask_overlap " << r.test.mask_overlap << "\n";
  };
  const auto report = run_compare(ds, compare_model(ds), tc, opts);
  const double auc_n = report.mean("normal", "macro_auc");
  const double auc_f = report.mean("feedback", "macro_auc");
  const double ov_n = report.mean("normal", "mask_overlap");
  const double ov_f = report.mean("feedback", "mask_overlap");
  const double fm_n = report.mean("normal", "fmax");
  const double fm_f = report.mean("feedback", "fmax");
  const double secs = seconds_since(t0);
  const bool a = auc_f >= auc_n - kAucMargin;
  const bool b = ov_f >= kOverlapRatio * ov_n;
  return {a && b && secs < kCompareBudgetS,
          std::string("lambda ") + fmt("%g", tc.lambda) + ", " +
              std::to_string(tc.seeds.size()) + " seeds; (a) macro_auc feedback " +
              fmt("%.4f", auc_f) + " vs normal " + fmt("%.4f", auc_n) + (a ? " ok" : " short") +
              "; (b) mask_overlap feedback " + fmt("%.4f", ov_f) + " vs normal " +
              fmt("%.4f", ov_n) + ", ratio " + fmt("%.3f", ov_n > 0 ? ov_f / ov_n : 0.0) +
              " (need " + fmt("%g", kOverlapRatio) + ")" + (b ? " ok" : " short") +
              "; fmax " + fmt("%.4f", fm_f) + " vs " + fmt("%.4f", fm_n) + "; " +
              fmt("%.0f", secs) + " s (budget " + fmt("%g", kCompareBudgetS) + " s)"};
}

// 5. Crash at arbitrary log offsets.

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome criterion_replay() {
  SyntheticSpec spec;
  spec.n_examples = 120;
  spec.n_validation = 20;
  spec.n_test = 20;
  spec.samples = 60;
  spec.evidence_window_len = 12;
  const auto ds = generate_synthetic(spec).manifest;
  const auto train = ds.split(Split::kTrain);
  test::TempDir dir;
  const fs::path log_path = dir.path() / "feedback.ndjson";
  const fs::path snap_path = dir.path() / "feedback.snapshot.json";

  // Uninterrupted run: state and snapshot file after every append.
  struct Step {
    std::size_t log_end;
    FeedbackState state;
  };
  std::vector<Step> steps{{0, {}}};
  std::vector<std::pair<std::size_t, std::string>> snapshots;
  Rng rng(99);
  const char* notes[] = {"", "ST depression\nlead V5", "QRS \"wide\"", "ok", "été ❤"};
  {
    FeedbackLog log(log_path, snap_path, 7);
    for (int i = 0; i < 60; ++i) {
      const auto* ex = train[rng.below(train.size() / 3)];
      FeedbackRecord r;
      r.example_id = ex->id;
      r.annotator_id = "annotator-" + std::to_string(rng.below(3));
      for (std::size_t m = rng.below(3); m > 0; --m) {
        const std::size_t a = rng.below(ex->samples);
        r.intervals.push_back({rng.below(ex->leads), a, a + 1 + rng.below(ex->samples - a)});
      }
      for (std::size_t k = 0; k < ds.n_classes; ++k) {
        r.label_decisions.push_back(static_cast<LabelDecision>(rng.below(4)));
      }
      r.note = notes[rng.below(5)];
      log.append(r, "2026-01-01T00:00:" + std::to_string(10 + i) + ".000Z");
      const std::size_t end = fs::file_size(log_path);
      steps.push_back({end, log.state()});
      if (fs::exists(snap_path)) {
        const auto snap = read_bytes(snap_path);
        if (snapshots.empty() || snapshots.back().second != snap) snapshots.push_back({end, snap});
      }
    }
  }
  const std::string full = read_bytes(log_path);

  std::size_t failures = 0, with_snapshot = 0;
  std::string first_failure;
  for (std::size_t trial = 0; trial < kCrashOffsets; ++trial) {
    const std::size_t k = trial == 0 ? full.size() : rng.below(full.size() + 1);
    // The uninterrupted run after the last append that completed by k.
    const Step* ref = &steps[0];
    for (const auto& s : steps) {
      if (s.log_end <= k) ref = &s;
    }
    const std::string* snap = nullptr;
    for (const auto& [end, bytes] : snapshots) {
      if (end <= k) snap = &bytes;
    }
    test::TempDir crash;
    {
      std::ofstream(crash.path() / "feedback.ndjson", std::ios::binary) << full.substr(0, k);
      if (snap) {
        std::ofstream(crash.path() / "feedback.snapshot.json", std::ios::binary) << *snap;
        ++with_snapshot;
      }
    }
    FeedbackLog recovered(crash.path() / "feedback.ndjson",
                          crash.path() / "feedback.snapshot.json", 7);
    const auto state = recovered.state();
    const bool queue_ok = queue_state(ds, state) == queue_state(ds, ref->state);
    const bool export_ok = encode_binary(export_dataset(ds, state)) ==
                           encode_binary(export_dataset(ds, ref->state));
    // The repaired log accepts further appends with the next revision.
    FeedbackRecord next;
    next.example_id = train[0]->id;
    next.annotator_id = "after-crash";
    next.label_decisions.assign(ds.n_classes, LabelDecision::kUntouched);
    const auto stored = recovered.append(next, "2026-01-02T00:00:00.000Z");
    const bool append_ok = stored.revision == ref->state.latest_revision(next.example_id) + 1 &&
                           parse_log(read_bytes(crash.path() / "feedback.ndjson")).size() ==
                               ref->state.records + 1;
    if (!(queue_ok && export_ok && append_ok)) {
      if (failures++ == 0) {
        first_failure = "offset " + std::to_string(k) + (queue_ok ? "" : " queue") +
                        (export_ok ? "" : " export") + (append_ok ? "" : " append");
      }
    }
  }
  return {failures == 0,
          std::to_string(kCrashOffsets) + " crash offsets over a " + std::to_string(full.size()) +
              "-byte log of 60 records (" + std::to_string(with_snapshot) +
              " recovered through a snapshot); " + std::to_string(failures) + " mismatches" +
              (first_failure.empty() ? "" : ", first at " + first_failure)};
}

// 6. synth -> serve -> feedback over HTTP -> retrain -> promote.

Outcome criterion_closed_loop() {
  const auto t0 = std::chrono::steady_clock::now();
  test::TempDir dir;
  SyntheticSpec spec;
  spec.n_examples = 700;
  spec.n_validation = 150;
  spec.n_test = 150;
  spec.feedback_fraction = 0.0;
  const auto syn = generate_synthetic(spec);
  save_dataset(syn.manifest, dir.path() / "dataset", DatasetFormat::kCsvDir);
  const auto ds = load_dataset(dir.path() / "dataset");

  ModelConfig mc;
  mc.in_leads = ds.leads;
  mc.n_classes = ds.n_classes;
  mc.blocks = {PlainConvBlock{8, 9}};
  TrainConfig tc;
  tc.epochs = 3;
  TrainOptions first;
  first.run_dir = dir.path() / "initial";
  train_run(ds, mc, tc, 0, first);

  ServiceOptions so;
  so.dataset = ds;
  so.checkpoint = dir.path() / "initial" / "ckpt-best.gmck";
  so.data_dir = dir.path() / "service";
  so.train = tc;
  so.train.lambda = 1.0;
  FeedbackService svc(so);
  httplib::Server server;
  svc.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60, 0);

  std::string problem;
  auto get = [&](const std::string& path) {
    const auto res = cli.Get(path);
    if (!res) throw RuntimeFailure("GET " + path + " failed");
    return std::make_pair(res->status, json::parse(res->body));
  };
  auto post = [&](const std::string& path, const json& body) {
    const auto res = cli.Post(path, body.dump(), "application/json");
    if (!res) throw RuntimeFailure("POST " + path + " failed");
    return std::make_pair(res->status, json::parse(res->body));
  };
  std::size_t feedback_count = 0;
  std::string run_status;
  bool checkpoint_changed = false, predictions_changed = false;
  try {
    const auto before_status = get("/api/status").second;
    const auto [s1, pending] =
        get("/api/examples?status=pending&limit=" + std::to_string(kLoopFeedback));
    if (s1 != 200 || pending["examples"].size() != kLoopFeedback) {
      throw RuntimeFailure("pending listing returned " + std::to_string(s1));
    }
    for (const auto& item : pending["examples"]) {
      const std::string id = item["id"];
      const auto [s2, payload] = get("/api/examples/" + id);
      if (s2 != 200 || payload["saliency"].is_null()) throw RuntimeFailure("payload for " + id);
      std::size_t idx = 0;
      while (syn.manifest.examples[idx].id != id) ++idx;
      json intervals = json::array();
      for (const auto& iv : syn.ground_truth[idx].intervals()) {
        intervals.push_back({iv.lead, iv.start, iv.end});
      }
      json decisions = json::array();
      for (int y : payload["labels"]) decisions.push_back(y == 1 ? "confirm" : "untouched");
      const auto [s3, stored] = post("/api/examples/" + id + "/feedback",
                                     {{"annotator_id", "scripted"},
                                      {"intervals", intervals},
                                      {"label_decisions", decisions},
                                      {"note", "ground-truth windows"}});
      if (s3 != 201) throw RuntimeFailure("feedback for " + id + ": " + stored.dump());
    }
    const auto [s4, started] = post("/api/retrain", {{"epochs", 3}});
    if (s4 != 202) throw RuntimeFailure("retrain: " + started.dump());
    const std::string run_id = started["run_id"];
    json manifest;
    for (;;) {
      manifest = get("/api/runs/" + run_id).second;
      run_status = manifest.value("status", "");
      if (run_status != "running") break;
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
    feedback_count = manifest.value("feedback_count", std::size_t{0});
    const auto [s5, promoted] = post("/api/promote", {{"run_id", run_id}});
    if (s5 != 200) throw RuntimeFailure("promote: " + promoted.dump());
    const auto after_status = get("/api/status").second;
    checkpoint_changed = after_status["checkpoint_id"] != before_status["checkpoint_id"] &&
                         after_status["promoted_run"] == run_id;
    const auto listed = get("/api/examples?status=completed&limit=1").second;
    const std::string id = listed["examples"][0]["id"];
    const auto after = get("/api/examples/" + id).second;
    predictions_changed = after["checkpoint_id"] == after_status["checkpoint_id"] &&
                          after["predictions"]["scores"] != pending["examples"][0]["scores"];
  } catch (const std::exception& e) {
    problem = e.what();
  }
  server.stop();
  th.join();
  const double secs = seconds_since(t0);
  const bool pass = problem.empty() && run_status == "completed" &&
                    feedback_count == kLoopFeedback && checkpoint_changed &&
                    predictions_changed && secs < kLoopBudgetS;
  return {pass, (problem.empty() ? "" : "error: " + problem + "; ") + "run " + run_status +
                    ", |E| = " + std::to_string(feedback_count) + " (need " +
                    std::to_string(kLoopFeedback) + "), serving checkpoint " +
                    (checkpoint_changed ? "changed" : "unchanged") + ", predictions " +
                    (predictions_changed ? "changed" : "unchanged") + "; " +
                    fmt("%.1f", secs) + " s (budget " + fmt("%g", kLoopBudgetS) + " s)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"objective gradient vs finite differences", criterion_gradient},
      {"lambda=0 / mask-stripped checkpoint parity", criterion_parity},
      {"metric oracles", criterion_metrics},
      {"synthetic Feedback vs Normal", criterion_compare},
      {"feedback log crash replay", criterion_replay},
      {"closed feedback loop over HTTP", criterion_closed_loop},
  };
  const std::string which = argc > 1 ? argv[1] : "all";
  bool all_pass = true;
  bool ran = false;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (which != "all" && which != std::to_string(i + 1)) continue;
    ran = true;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all_pass = all_pass && o.pass;
    std::cout << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << " ["
              << criteria[i].first << "] " << o.detail << std::endl;
  }
  if (!ran) {
    std::cerr << "usage: acceptance [1-6|all]\n";
    return 2;
  }
  return all_pass ? 0 : 1;
}
