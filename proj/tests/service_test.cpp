#include <gtest/gtest.h>

#include <future>

#include "adcnet/service.hpp"
#include "support.hpp"

using namespace adcnet;
using namespace adcnet::testing;

namespace {

Checkpoint model(const std::string& variant = "gru:conditional:multi") {
  Checkpoint ck;
  for (const char* t : {"free", "game", "now", "play", "slim"}) ck.vocab.add(t);
  ck.schema.genres = {"games", "beauty", "finance"};
  auto cfg = apply_variant(small_config(), variant);
  cfg.vocab_size = ck.vocab.size();
  cfg.d_genre = 3;
  auto p = init_params<double>(cfg, 2);
  randomize(p, 3);
  ck.params = p.cast<float>();
  ck.metadata = {{"epochs", 2}};
  return ck;
}

const std::string kPredict = R"({"title":"free game","description":"play now","genre":"games","gender":"male"})";
const std::string kExplain =
    R"({"title":"free game","description":"play now","genre":"beauty","conditions":[{"gender":"all"},{"gender":"female"},{"genre":"finance","gender":"male"}]})";

nlohmann::json parse(const Response& r) { return nlohmann::json::parse(r.body); }

}  // namespace

TEST(Service, NotReadyUntilModelLoaded) {
  InferenceService svc;
  EXPECT_EQ(svc.health().status, 503);
  EXPECT_EQ(svc.info().status, 503);
  EXPECT_EQ(svc.predict(kPredict).status, 503);
  svc.set_model(model());
  EXPECT_EQ(svc.health().status, 200);
  EXPECT_EQ(svc.health().body, "ok");
}

TEST(Service, ModelInfo) {
  InferenceService svc;
  svc.set_model(model());
  const auto r = svc.handle("GET", "/v1/model", "");
  ASSERT_EQ(r.status, 200);
  const auto j = parse(r);
  EXPECT_EQ(j["attention_kind"], "conditional");
  EXPECT_EQ(j["vocab_size"], 7);
  EXPECT_EQ(j["genres"], nlohmann::json({"games", "beauty", "finance"}));
  EXPECT_EQ(j["genders"], nlohmann::json({"all", "male", "female"}));
  EXPECT_EQ(j["metadata"]["epochs"], 2);
}

TEST(Service, PredictSchemaAndDeterminism) {
  InferenceService svc;
  svc.set_model(model());
  const auto a = svc.handle("POST", "/v1/predict", kPredict);
  ASSERT_EQ(a.status, 200) << a.body;
  const auto j = parse(a);
  for (const char* k : {"conversions", "clicks", "cvr"}) {
    ASSERT_TRUE(j[k].is_number()) << k;
    EXPECT_GE(j[k].get<double>(), 0.0);
  }
  EXPECT_TRUE(j["log_space"]["cv"].is_number());
  EXPECT_TRUE(j["log_space"]["click"].is_number());
  EXPECT_EQ(svc.handle("POST", "/v1/predict", kPredict).body, a.body);
}

TEST(Service, PredictValidation) {
  InferenceService svc(256);
  svc.set_model(model());
  const auto bad_gender = svc.predict(R"({"title":"a","description":"b","genre":"games","gender":"unknown"})");
  EXPECT_EQ(bad_gender.status, 400);
  EXPECT_NE(parse(bad_gender)["details"].get<std::string>().find(R"("all", "male", "female")"), std::string::npos);
  EXPECT_EQ(svc.predict(R"({"title":"a","description":"b","genre":"cars","gender":"all"})").status, 400);
  EXPECT_EQ(svc.predict(R"({"title":" ","description":"b","genre":"games","gender":"all"})").status, 400);
  EXPECT_EQ(svc.predict("{\"title\": ").status, 422);
  EXPECT_EQ(svc.predict("[1,2]").status, 422);
  EXPECT_EQ(svc.predict(R"({"title":1,"description":"b","genre":"games","gender":"all"})").status, 422);
  EXPECT_EQ(svc.predict(R"({"description":"b","genre":"games","gender":"all"})").status, 422);
  EXPECT_EQ(svc.predict(std::string(300, ' ')).status, 413);
  EXPECT_EQ(svc.handle("GET", "/nope", "").status, 404);
  EXPECT_TRUE(parse(svc.predict("{")).contains("error"));
}

TEST(Service, ExplainOrderingAndBounds) {
  InferenceService svc;
  svc.set_model(model());
  const auto r = svc.handle("POST", "/v1/explain", kExplain);
  ASSERT_EQ(r.status, 200) << r.body;
  const auto j = parse(r);
  ASSERT_EQ(j["entries"].size(), 3u);
  EXPECT_EQ(j["entries"][0]["condition"]["genre"], "beauty");
  EXPECT_EQ(j["entries"][0]["condition"]["gender"], "all");
  EXPECT_EQ(j["entries"][1]["condition"]["gender"], "female");
  EXPECT_EQ(j["entries"][2]["condition"]["genre"], "finance");
  for (const auto& e : j["entries"])
    for (const char* f : {"title", "description"})
      for (const auto& t : e[f]["tokens"]) {
        EXPECT_GE(t["display"].get<double>(), 0.0);
        EXPECT_LE(t["display"].get<double>(), 1.0);
      }
  EXPECT_EQ(svc.explain(R"({"title":"a","description":"b","genre":"games","conditions":[]})").status, 400);
  EXPECT_EQ(svc.explain(R"({"title":"a","description":"b","genre":"games"})").status, 422);
}

TEST(Service, ExplainOnVanillaModel) {
  InferenceService svc;
  svc.set_model(model("gru:vanilla:multi"));
  const auto r = svc.explain(kExplain);
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(parse(r)["error"], "model has no attention");
  EXPECT_EQ(svc.predict(kPredict).status, 200);
}

TEST(Service, ConcurrentRequestsMatchSequential) {
  InferenceService svc;
  svc.set_model(model());
  const auto p = svc.predict(kPredict).body, e = svc.explain(kExplain).body;
  std::vector<std::future<bool>> jobs;
  for (int i = 0; i < 8; ++i)
    jobs.push_back(std::async(std::launch::async, [&] {
      bool same = true;
      for (int k = 0; k < 20; ++k) same = same && svc.predict(kPredict).body == p && svc.explain(kExplain).body == e;
      return same;
    }));
  for (auto& j : jobs) EXPECT_TRUE(j.get());
}

TEST(Http, LoopbackServesAllEndpoints) {
  InferenceService svc;
  ServiceConfig cfg;
  cfg.max_body_bytes = 4096;
  httplib::Server server;
  mount(server, svc, cfg);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread listener([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto health = cli.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 503);
  svc.set_model(model());
  health = cli.Get("/healthz");
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(health->body, "ok");

  const auto info = cli.Get("/v1/model");
  ASSERT_TRUE(info);
  EXPECT_EQ(info->status, 200);
  EXPECT_EQ(nlohmann::json::parse(info->body)["attention_kind"], "conditional");
  EXPECT_EQ(info->get_header_value("Content-Type"), "application/json");

  const auto pred = cli.Post("/v1/predict", kPredict, "application/json");
  ASSERT_TRUE(pred);
  EXPECT_EQ(pred->status, 200);
  EXPECT_EQ(pred->body, svc.predict(kPredict).body);

  const auto ex = cli.Post("/v1/explain", kExplain, "application/json");
  ASSERT_TRUE(ex);
  EXPECT_EQ(ex->status, 200);
  EXPECT_EQ(nlohmann::json::parse(ex->body)["entries"].size(), 3u);

  const auto bad = cli.Post("/v1/predict", "{oops", "application/json");
  EXPECT_EQ(bad->status, 422);
  const auto big = cli.Post("/v1/predict", std::string(10000, 'x'), "application/json");
  ASSERT_TRUE(big);
  EXPECT_EQ(big->status, 413);
  EXPECT_TRUE(nlohmann::json::parse(big->body).contains("error"));
  const auto missing = cli.Get("/nothing");
  EXPECT_EQ(missing->status, 404);

  server.stop();
  listener.join();
}

TEST(Http, ServeFailsOnMissingCheckpoint) {
  ServiceConfig cfg;
  cfg.port = 0;
  cfg.checkpoint = "/nonexistent/model.ckpt";
  EXPECT_NE(serve(cfg), 0);
}
