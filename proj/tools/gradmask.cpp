// gradmask: synth, train, eval, explain, serve and compare.
// Exit codes: 0 success, 1 invalid input, 2 runtime failure.

#include <CLI11.hpp>
#include <httplib.h>

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gradmask/checkpoint.hpp"
#include "gradmask/compare.hpp"
#include "gradmask/dataset_io.hpp"
#include "gradmask/error.hpp"
#include "gradmask/feedback.hpp"
#include "gradmask/json_util.hpp"
#include "gradmask/metrics.hpp"
#include "gradmask/saliency.hpp"
#include "gradmask/service.hpp"
#include "gradmask/synthetic.hpp"
#include "gradmask/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gradmask;

namespace {

struct Config {
  SyntheticSpec synthetic;
  ModelConfig model;
  TrainConfig train;
};

Config load_config(const std::string& path) {
  Config c;
  if (path.empty()) return c;
  const json j = read_json_file(path);
  require_known_keys(j, {"synthetic", "model", "train"}, "config " + path);
  if (j.contains("synthetic")) from_json(j["synthetic"], c.synthetic);
  if (j.contains("model")) from_json(j["model"], c.model);
  if (j.contains("train")) from_json(j["train"], c.train);
  return c;
}

json config_json(const Config& c) {
  return {{"synthetic", c.synthetic}, {"model", c.model}, {"train", c.train}};
}

// Resolved invocation: enough to rerun the command.
struct Invocation {
  std::string command;
  std::vector<std::string> argv;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started_at = utc_timestamp();

  json manifest(json body) const {
    body["version"] = 1;
    body["command"] = command;
    body["argv"] = argv;
    body["started_at"] = started_at;
    body["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return body;
  }
};

void write_manifest(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, j.dump(2) + "\n");
  std::cerr << "manifest: " << path.string() << "\n";
}

void fit_model_to(ModelConfig& model, const DatasetManifest& ds) {
  model.in_leads = ds.leads;
  model.n_classes = ds.n_classes;
}

void print_epoch(const RunManifest& m) {
  const auto& e = m.epochs.back();
  std::cerr << m.run_id << " epoch " << e.epoch << "/" << m.train_config.epochs
            << " loss " << e.train_loss << " val_auc " << e.val_macro_auc << " val_fmax "
            << e.val_fmax << "\n";
}

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feedback-driven multi-label ECG classification"};
  app.require_subcommand(1);
  Invocation inv;
  inv.argv.assign(argv, argv + argc);
  std::string config_path;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path,
                    "JSON file with optional synthetic, model and train sections")
        ->check(CLI::ExistingFile);
  };

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with ground-truth masks");
  std::string synth_out, synth_format = "csv_dir";
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--out", synth_out, "Output directory (csv_dir) or file (binary_records)")
      ->required();
  synth->add_option("--format", synth_format, "csv_dir or binary_records")
      ->check(CLI::IsMember({"csv_dir", "binary_records"}));
  synth->add_option("--seed", synth_seed, "Overrides synthetic.seed");
  add_config(synth);

  // train
  auto* train = app.add_subcommand("train", "Train one seeded run");
  std::string train_dataset, train_out;
  std::uint64_t train_seed = 0;
  std::optional<double> train_lambda;
  std::optional<std::size_t> train_epochs;
  bool train_strip = false;
  train->add_option("--dataset", train_dataset, "Dataset directory or binary file")->required();
  train->add_option("--out", train_out, "Run directory")->required();
  train->add_option("--seed", train_seed, "Run seed (init and batch order)");
  train->add_option("--lambda", train_lambda, "Penalty weight (overrides train.lambda)");
  train->add_option("--epochs", train_epochs, "Overrides train.epochs");
  train->add_flag("--strip-masks", train_strip, "Ignore all masks (Normal pipeline)");
  add_config(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
  std::string eval_dataset, eval_ckpt, eval_out, eval_split = "test",
                                                 eval_conv = "mean_sample_f";
  eval->add_option("--dataset", eval_dataset)->required();
  eval->add_option("--checkpoint", eval_ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split)->check(CLI::IsMember({"train", "validation", "test"}));
  eval->add_option("--fmax-convention", eval_conv)
      ->check(CLI::IsMember({"mean_sample_f", "macro_precision_recall"}));
  eval->add_option("--out", eval_out, "Report path (default: next to the checkpoint)");

  // explain
  auto* explain = app.add_subcommand("explain", "Saliency map for one example as svg and json");
  std::string ex_dataset, ex_ckpt, ex_id, ex_norm = "global", ex_out_dir;
  std::vector<std::string> ex_labels;
  std::size_t ex_window = 9;
  explain->add_option("--dataset", ex_dataset)->required();
  explain->add_option("--checkpoint", ex_ckpt)->required()->check(CLI::ExistingFile);
  explain->add_option("--id", ex_id, "Example id")->required();
  explain->add_option("--label", ex_labels, "Target label name (repeatable; default: predicted)");
  explain->add_option("--window", ex_window, "Smoothing window in samples")
      ->check(CLI::PositiveNumber);
  explain->add_option("--normalization", ex_norm)->check(CLI::IsMember({"global", "per_lead"}));
  explain->add_option("--out-dir", ex_out_dir, "Default: the checkpoint's directory");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the feedback service");
  std::string sv_dataset, sv_ckpt, sv_static, sv_data_dir, sv_host = "127.0.0.1";
  int sv_port = 8080;
  std::uint64_t sv_seed = 0;
  serve->add_option("--dataset", sv_dataset)->required();
  serve->add_option("--checkpoint", sv_ckpt)->check(CLI::ExistingFile);
  serve->add_option("--port", sv_port)->check(CLI::Range(0, 65535));
  serve->add_option("--host", sv_host);
  serve->add_option("--static", sv_static, "Annotation UI bundle directory")
      ->check(CLI::ExistingDirectory);
  serve->add_option("--data-dir", sv_data_dir,
                    "Feedback log, snapshot and runs (default: $GRADMASK_DATA_DIR or "
                    "./gradmask-data)");
  serve->add_option("--seed", sv_seed, "Seed for retraining runs");
  add_config(serve);

  // compare
  auto* compare = app.add_subcommand("compare", "Normal vs Feedback over seed pairs");
  std::string cmp_dataset, cmp_out;
  std::size_t cmp_seeds = 5;
  std::optional<double> cmp_lambda;
  std::optional<std::size_t> cmp_epochs;
  compare->add_option("--dataset", cmp_dataset)->required();
  compare->add_option("--seeds", cmp_seeds, "Number of seed pairs (seeds 0..n-1)")
      ->check(CLI::PositiveNumber);
  compare->add_option("--lambda", cmp_lambda, "Feedback arm penalty weight");
  compare->add_option("--epochs", cmp_epochs);
  compare->add_option("--out", cmp_out, "Output directory")->required();
  add_config(compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    const Config cfg = load_config(config_path);

    if (*synth) {
      inv.command = "synth";
      SyntheticSpec spec = cfg.synthetic;
      if (synth_seed) spec.seed = *synth_seed;
      const auto syn = generate_synthetic(spec);
      const auto format = parse_dataset_format(synth_format);
      save_dataset(syn.manifest, synth_out, format);
      const fs::path manifest = format == DatasetFormat::kCsvDir
                                    ? fs::path(synth_out) / "synth.json"
                                    : fs::path(synth_out + ".synth.json");
      write_manifest(manifest, inv.manifest({{"synthetic", spec},
                                             {"format", synth_format},
                                             {"output", synth_out},
                                             {"examples", syn.manifest.examples.size()},
                                             {"feedback_count", syn.manifest.feedback_count()},
                                             {"dataset_fingerprint",
                                              fingerprint(syn.manifest)}}));
      std::cout << synth_out << "\n";
      return 0;
    }

    if (*train) {
      inv.command = "train";
      DatasetManifest ds = load_dataset(train_dataset);
      if (train_strip) ds = strip_masks(ds);
      Config c = cfg;
      fit_model_to(c.model, ds);
      if (train_lambda) c.train.lambda = *train_lambda;
      if (train_epochs) c.train.epochs = *train_epochs;
      c.train.validate();
      TrainOptions opts;
      opts.run_id = fs::path(train_out).filename().string();
      opts.run_dir = train_out;
      opts.on_epoch = print_epoch;
      const fs::path cli_manifest = fs::path(train_out) / "train.json";
      json body = {{"dataset", train_dataset},
                   {"strip_masks", train_strip},
                   {"seed", train_seed},
                   {"config", config_json(c)},
                   {"dataset_fingerprint", fingerprint(ds)}};
      try {
        const auto result = train_run(ds, c.model, c.train, train_seed, opts);
        body["status"] = to_string(result.manifest.status);
        body["selected_epoch"] = result.manifest.selected_epoch;
        write_manifest(cli_manifest, inv.manifest(body));
      } catch (const std::exception& e) {
        body["status"] = "failed";
        body["error"] = e.what();
        if (fs::exists(train_out)) write_manifest(cli_manifest, inv.manifest(body));
        throw;
      }
      std::cout << (fs::path(train_out) / "ckpt-best.gmck").string() << "\n";
      return 0;
    }

    if (*eval) {
      inv.command = "eval";
      const auto ds = load_dataset(eval_dataset);
      const auto ckpt = load_checkpoint(eval_ckpt);
      const auto examples = ds.split(parse_split(eval_split));
      if (examples.empty()) throw ValidationError("split '" + eval_split + "' is empty");
      if (ckpt.config.in_leads != ds.leads || ckpt.config.n_classes != ds.n_classes) {
        throw ValidationError("checkpoint does not match the dataset's leads or labels");
      }
      const auto sm = score_examples(ckpt.config, ckpt.params, examples);
      const auto report = evaluate(sm, ds.label_names, parse_fmax_convention(eval_conv));
      const fs::path out = eval_out.empty() ? fs::path(eval_ckpt).replace_extension(
                                                  "eval-" + eval_split + ".json")
                                            : fs::path(eval_out);
      write_manifest(out, inv.manifest({{"dataset", eval_dataset},
                                        {"checkpoint", eval_ckpt},
                                        {"split", eval_split},
                                        {"dataset_fingerprint", fingerprint(ds)},
                                        {"report", to_json(report)}}));
      std::cout << to_json(report).dump(2) << "\n";
      return 0;
    }

    if (*explain) {
      inv.command = "explain";
      const auto ds = load_dataset(ex_dataset);
      const auto ckpt = load_checkpoint(ex_ckpt);
      const auto* ex = ds.find(ex_id);
      if (!ex) throw ValidationError("unknown example id '" + ex_id + "'");
      SaliencyOptions so;
      so.smoothing_window = ex_window;
      so.normalization = parse_normalization(ex_norm);
      for (const auto& name : ex_labels) {
        const auto it = std::find(ds.label_names.begin(), ds.label_names.end(), name);
        if (it == ds.label_names.end()) throw ValidationError("unknown label '" + name + "'");
        so.targets.push_back(static_cast<std::size_t>(it - ds.label_names.begin()));
      }
      const auto map = compute_saliency(ckpt.config, ckpt.params, *ex, so);
      const fs::path dir = ex_out_dir.empty() ? fs::absolute(ex_ckpt).parent_path()
                                              : fs::path(ex_out_dir);
      fs::create_directories(dir);
      const std::string stem = fs::path(ex_ckpt).stem().string() + "." + ex_id;
      write_file_atomic(dir / (stem + ".saliency.svg"), render_svg(map, *ex, ds.label_names));
      write_file_atomic(dir / (stem + ".saliency.json"), to_json(map).dump() + "\n");
      json targets = json::array();
      for (auto k : map.target_labels) targets.push_back(ds.label_names[k]);
      write_manifest(dir / (stem + ".explain.json"),
                     inv.manifest({{"dataset", ex_dataset},
                                   {"checkpoint", ex_ckpt},
                                   {"id", ex_id},
                                   {"targets", targets},
                                   {"smoothing_window", ex_window},
                                   {"normalization", ex_norm},
                                   {"outputs",
                                    {(dir / (stem + ".saliency.svg")).string(),
                                     (dir / (stem + ".saliency.json")).string()}}}));
      std::cout << (dir / (stem + ".saliency.svg")).string() << "\n";
      return 0;
    }

    if (*serve) {
      inv.command = "serve";
      ServiceOptions o;
      o.dataset = load_dataset(sv_dataset);
      if (!sv_ckpt.empty()) o.checkpoint = sv_ckpt;
      if (sv_data_dir.empty()) {
        const char* env = std::getenv("GRADMASK_DATA_DIR");
        sv_data_dir = env && *env ? env : "gradmask-data";
      }
      o.data_dir = sv_data_dir;
      if (!sv_static.empty()) o.static_dir = sv_static;
      if (!config_path.empty()) {
        Config c = cfg;
        fit_model_to(c.model, o.dataset);
        if (read_json_file(config_path).contains("model")) o.model = c.model;
      }
      o.train = cfg.train;
      o.seed = sv_seed;
      FeedbackService svc(std::move(o));
      httplib::Server server;
      svc.mount(server);
      int port = sv_port;
      if (port == 0) {
        port = server.bind_to_any_port(sv_host);
      } else if (!server.bind_to_port(sv_host, port)) {
        throw RuntimeFailure("cannot bind " + sv_host + ":" + std::to_string(port));
      }
      write_manifest(fs::path(sv_data_dir) / "serve.json",
                     inv.manifest({{"dataset", sv_dataset},
                                   {"checkpoint", sv_ckpt},
                                   {"checkpoint_id", svc.checkpoint_id()},
                                   {"host", sv_host},
                                   {"port", port},
                                   {"data_dir", sv_data_dir},
                                   {"static", sv_static},
                                   {"config", config_json(cfg)},
                                   {"seed", sv_seed}}));
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << sv_host << ":" << port << std::endl;
      server.listen_after_bind();
      g_server = nullptr;
      return 0;
    }

    if (*compare) {
      inv.command = "compare";
      const auto ds = load_dataset(cmp_dataset);
      Config c = cfg;
      fit_model_to(c.model, ds);
      if (cmp_lambda) c.train.lambda = *cmp_lambda;
      if (cmp_epochs) c.train.epochs = *cmp_epochs;
      c.train.seeds.clear();
      for (std::size_t s = 0; s < cmp_seeds; ++s) c.train.seeds.push_back(s);
      CompareOptions opts;
      opts.out_dir = cmp_out;
      opts.on_run = [](const ArmRun& r) {
        std::cerr << r.arm << " seed " << r.seed << " fmax " << r.test.fmax << " macro_auc "
                  << r.test.macro_auc << " mask_overlap " << r.test.mask_overlap << "\n";
      };
      const auto report = run_compare(ds, c.model, c.train, opts);
      write_manifest(fs::path(cmp_out) / "compare.json",
                     inv.manifest({{"dataset", cmp_dataset},
                                   {"dataset_fingerprint", fingerprint(ds)},
                                   {"config", config_json(c)},
                                   {"report", (fs::path(cmp_out) / "report.json").string()},
                                   {"boxplot", (fs::path(cmp_out) / "boxplot.svg").string()}}));
      std::cout << to_json(report)["mean"].dump(2) << "\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
