#include <fstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "gradmask/checkpoint.hpp"
#include "gradmask/dataset_io.hpp"
#include "gradmask/service.hpp"
#include "gradmask/synthetic.hpp"
#include "test_util.hpp"

using namespace gradmask;
using nlohmann::json;

namespace {

DatasetManifest tiny_dataset() {
  SyntheticSpec s;
  s.n_examples = 60;
  s.n_validation = 16;
  s.n_test = 4;
  s.leads = 2;
  s.samples = 32;
  s.n_classes = 2;
  s.evidence_window_len = 8;
  s.feedback_fraction = 0.0;
  return generate_synthetic(s).manifest;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.in_leads = 2;
  c.n_classes = 2;
  c.blocks = {PlainConvBlock{4, 5}};
  return c;
}

struct Fixture {
  test::TempDir dir;
  std::filesystem::path ckpt = dir.path() / "init.gmck";

  ServiceOptions options(bool with_checkpoint = true) {
    ModelConfig c = tiny_model();
    save_checkpoint({c, init_params(c), {}}, ckpt);
    ServiceOptions o;
    o.dataset = tiny_dataset();
    if (with_checkpoint) o.checkpoint = ckpt;
    o.data_dir = dir.path() / "data";
    o.train.epochs = 2;
    o.train.batch_size = 16;
    o.train.lambda = 1.0;
    o.clock = [] { return std::string("2026-01-01T00:00:00.000Z"); };
    return o;
  }
};

std::string feedback_body(std::size_t lead, std::size_t start, std::size_t end) {
  return json{{"annotator_id", "dr-a"}, {"intervals", {{lead, start, end}}}}.dump();
}

}  // namespace

TEST(Service, ListingNeedsACheckpoint) {
  Fixture f;
  FeedbackService svc(f.options(false));
  const auto r = svc.list_examples("pending", std::nullopt);
  EXPECT_EQ(r.status, 409);
  EXPECT_TRUE(r.body.contains("hint"));
  const auto ex = svc.get_example("syn00000");
  EXPECT_EQ(ex.status, 200);
  EXPECT_TRUE(ex.body["saliency"].is_null());
}

TEST(Service, ListingPaginatesDeterministically) {
  Fixture f;
  FeedbackService svc(f.options());
  const auto all = svc.list_examples("pending", std::nullopt);
  ASSERT_EQ(all.status, 200);
  EXPECT_EQ(all.body["examples"].size(), 40u);
  const auto one = svc.list_examples("pending", 1);
  ASSERT_EQ(one.body["examples"].size(), 1u);
  EXPECT_EQ(one.body["examples"][0]["id"], all.body["examples"][0]["id"]);
  EXPECT_EQ(one.body["total"], 40);
  const auto& item = one.body["examples"][0];
  EXPECT_EQ(item["scores"].size(), 2u);
  EXPECT_EQ(item["predicted"].size(), 2u);
  EXPECT_FALSE(item["has_feedback"].get<bool>());
  EXPECT_EQ(svc.list_examples("bogus", std::nullopt).status, 422);
}

TEST(Service, ExamplePayloadAndCachedSaliency) {
  Fixture f;
  FeedbackService svc(f.options());
  EXPECT_EQ(svc.get_example("nope").status, 404);
  const auto a = svc.get_example("syn00003");
  ASSERT_EQ(a.status, 200);
  EXPECT_EQ(a.body["signal"].size(), 2u);
  EXPECT_EQ(a.body["signal"][0].size(), 32u);
  EXPECT_EQ(a.body["label_names"], (json{"class0", "class1"}));
  EXPECT_EQ(a.body["saliency"]["leads"], 2);
  EXPECT_EQ(a.body["saliency"]["samples"], 32);
  EXPECT_EQ(a.body["saliency"]["values"].size(), 64u);
  EXPECT_EQ(a.body["checkpoint_id"], svc.checkpoint_id());
  const auto b = svc.get_example("syn00003");
  EXPECT_EQ(a.body["saliency"].dump(), b.body["saliency"].dump());
}

TEST(Service, FeedbackIsValidatedStoredAndRevised) {
  Fixture f;
  FeedbackService svc(f.options());
  EXPECT_EQ(svc.post_feedback("nope", feedback_body(0, 1, 2)).status, 404);
  const auto bad = svc.post_feedback("syn00000", feedback_body(2, 0, 5));
  EXPECT_EQ(bad.status, 422);
  EXPECT_NE(bad.body["error"].get<std::string>().find("2"), std::string::npos);
  EXPECT_EQ(svc.post_feedback("syn00000", "{not json").status, 422);

  const auto r1 = svc.post_feedback("syn00000", feedback_body(1, 10, 20));
  ASSERT_EQ(r1.status, 201);
  EXPECT_EQ(r1.body["revision"], 1);
  EXPECT_EQ(r1.body["flat_mask_size"], 10);
  EXPECT_EQ(r1.body["submitted_at"], "2026-01-01T00:00:00.000Z");
  const auto r2 = svc.post_feedback("syn00000", feedback_body(0, 0, 4));
  EXPECT_EQ(r2.body["revision"], 2);

  const auto q = svc.queue();
  EXPECT_EQ(q.completed, std::vector<std::string>{"syn00000"});
  EXPECT_EQ(std::count(q.pending.begin(), q.pending.end(), "syn00000"), 0);
  EXPECT_EQ(svc.get_example("syn00000").body["feedback"].size(), 2u);
  EXPECT_TRUE(svc.list_examples("completed", std::nullopt).body["examples"][0]["has_feedback"]);

  const auto exported = decode_binary(svc.export_bytes());
  EXPECT_EQ(exported.find("syn00000")->mask->intervals(), (std::vector<Interval>{{0, 0, 4}}));
  EXPECT_EQ(svc.export_bytes(), svc.export_bytes());
}

TEST(Service, RetrainRequiresFeedbackOrAllowEmpty) {
  Fixture f;
  FeedbackService svc(f.options());
  EXPECT_EQ(svc.retrain("{}").status, 409);
  EXPECT_EQ(svc.retrain(R"({"allow_empty":true,"learning_rate":1})").status, 422);
  const auto r = svc.retrain(R"({"allow_empty":true,"lambda":1.0})");
  ASSERT_EQ(r.status, 202);
  EXPECT_EQ(r.body["feedback_count"], 0);
  svc.wait_for_run();
  const auto st = svc.run_status(r.body["run_id"]);
  EXPECT_EQ(st.body["status"], "completed");
  EXPECT_EQ(st.body["feedback_count"], 0);
}

TEST(Service, SecondRetrainWhileActiveIsRejected) {
  Fixture f;
  auto o = f.options();
  o.train.epochs = 500;
  FeedbackService svc(std::move(o));
  ASSERT_EQ(svc.post_feedback("syn00001", feedback_body(0, 0, 8)).status, 201);
  ASSERT_EQ(svc.retrain("{}").status, 202);
  const auto again = svc.retrain("{}");
  EXPECT_EQ(again.status, 409);
  EXPECT_TRUE(again.body.contains("hint"));
}

TEST(Service, RetrainPromoteChangesServingCheckpoint) {
  Fixture f;
  FeedbackService svc(f.options());
  ASSERT_EQ(svc.post_feedback("syn00002", feedback_body(1, 4, 12)).status, 201);
  const auto before_id = svc.checkpoint_id();
  const auto before = svc.list_examples("all", 5).body;
  const auto run = svc.retrain(R"({"epochs":3})");
  ASSERT_EQ(run.status, 202);
  const std::string run_id = run.body["run_id"];
  svc.wait_for_run();
  const auto st = svc.run_status(run_id);
  ASSERT_EQ(st.body["status"], "completed") << st.body.dump();
  EXPECT_EQ(st.body["feedback_count"], 1);
  EXPECT_EQ(st.body["epochs"].size(), 3u);
  EXPECT_TRUE(st.body["test_metrics"].contains("macro_auc"));

  EXPECT_EQ(svc.promote(R"({"run_id":"run-9999"})").status, 404);
  EXPECT_EQ(svc.promote(R"({})").status, 422);
  const auto p = svc.promote(json{{"run_id", run_id}}.dump());
  ASSERT_EQ(p.status, 200);
  EXPECT_NE(svc.checkpoint_id(), before_id);
  const auto after = svc.list_examples("all", 5).body;
  EXPECT_NE(after["examples"][0]["scores"], before["examples"][0]["scores"]);
  EXPECT_EQ(svc.get_example("syn00002").body["checkpoint_id"], svc.checkpoint_id());

  // The promoted checkpoint is picked up again after a restart.
  const auto id = svc.checkpoint_id();
  FeedbackService restarted(f.options(false));
  EXPECT_EQ(restarted.checkpoint_id(), id);
  EXPECT_EQ(restarted.queue().completed, std::vector<std::string>{"syn00002"});
}

TEST(Service, HttpRoutesAndStaticFiles) {
  Fixture f;
  auto o = f.options();
  o.static_dir = f.dir.path() / "ui";
  std::filesystem::create_directories(*o.static_dir);
  std::ofstream(*o.static_dir / "index.html") << "<html>ui</html>";
  FeedbackService svc(std::move(o));
  httplib::Server server;
  svc.mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client cli("127.0.0.1", port);
  auto res = cli.Get("/api/examples?limit=2");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["examples"].size(), 2u);
  EXPECT_EQ(cli.Get("/api/examples?limit=x")->status, 422);
  EXPECT_EQ(cli.Get("/api/examples/missing")->status, 404);
  res = cli.Post("/api/examples/syn00000/feedback", feedback_body(0, 1, 3), "application/json");
  EXPECT_EQ(res->status, 201);
  res = cli.Post("/api/examples/syn00000/feedback", feedback_body(5, 1, 3), "application/json");
  EXPECT_EQ(res->status, 422);
  EXPECT_EQ(cli.Get("/api/runs/run-0042")->status, 404);
  res = cli.Get("/api/status");
  EXPECT_EQ(json::parse(res->body)["completed"], 1);
  res = cli.Get("/index.html");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(res->body, "<html>ui</html>");

  server.stop();
  th.join();
}
