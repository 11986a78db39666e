#pragma once

// HTTP inference service. Request handling is a set of pure functions from
// (model, request body) to (status, JSON body); the httplib server only routes.

#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include <nlohmann/json.hpp>

#include "adcnet/checkpoint.hpp"
#include "adcnet/data.hpp"
#include "adcnet/error.hpp"
#include "adcnet/explainer.hpp"
#include "adcnet/log.hpp"
#include "adcnet/network.hpp"

// after Eigen: resolv.h defines a _res macro that clashes with Eigen parameter names
#include <httplib.h>

namespace adcnet {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint;
  std::size_t max_body_bytes = 1 << 20;
  int timeout_seconds = 10;
};

struct Response {
  int status = 200;
  std::string body;
};

inline Response json_response(int status, const nlohmann::ordered_json& j) { return {status, j.dump()}; }

inline Response error_response(int status, const std::string& error, const std::string& details = {}) {
  nlohmann::ordered_json j;
  j["error"] = error;
  if (!details.empty()) j["details"] = details;
  return json_response(status, j);
}

/// Stateless request handlers over one immutable model.
class InferenceService {
 public:
  explicit InferenceService(std::size_t max_body_bytes = 1 << 20) : max_body_(max_body_bytes) {}

  void set_model(Checkpoint ck) { std::atomic_store(&model_, std::make_shared<const Checkpoint>(std::move(ck))); }
  bool ready() const { return std::atomic_load(&model_) != nullptr; }

  Response health() const {
    if (!ready()) return error_response(503, "model not loaded");
    return {200, "ok"};
  }

  Response info() const {
    const auto m = std::atomic_load(&model_);
    if (!m) return error_response(503, "model not loaded");
    const auto& cfg = m->params.config;
    nlohmann::ordered_json j;
    j["variant"] = cfg.variant_name();
    j["encoder_kind"] = to_string(cfg.encoder);
    j["attention_kind"] = to_string(cfg.attention);
    j["task_kind"] = to_string(cfg.task);
    j["config"] = nlohmann::json(cfg);
    j["vocab_size"] = m->vocab.size();
    j["genres"] = m->schema.genres;
    j["genders"] = std::vector<std::string>(kGenderLabels.begin(), kGenderLabels.end());
    j["metadata"] = m->metadata;
    return json_response(200, j);
  }

  Response predict(const std::string& body) const {
    return guarded(body, [&](const Checkpoint& m, const nlohmann::json& req) {
      auto c = creative_from_request(m, req);
      const auto enc = encode_creative(c, m.vocab, m.schema, m.params.config.n_title, m.params.config.n_desc);
      const auto pred = adcnet::predict(m.params, std::vector<EncodedCreative>{enc}).front();
      ConditionReport r;
      fill_estimates(pred, r);
      auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
      nlohmann::ordered_json j;
      j["conversions"] = opt(r.conversions);
      j["clicks"] = opt(r.clicks);
      j["cvr"] = opt(r.cvr);
      j["log_space"] = {{"cv", opt(r.y_cv_log)}, {"click", opt(r.y_click_log)}};
      return json_response(200, j);
    });
  }

  Response explain(const std::string& body) const {
    return guarded(body, [&](const Checkpoint& m, const nlohmann::json& req) {
      if (!m.params.config.has_attention()) return error_response(400, "model has no attention");
      auto c = creative_from_request(m, req, false);
      if (!req.contains("conditions") || !req.at("conditions").is_array())
        throw SchemaError("field \"conditions\" must be an array");
      std::vector<Condition> conds;
      for (const auto& x : req.at("conditions")) {
        if (!x.is_object()) throw SchemaError("each condition must be an object");
        Condition cond{c.genre, c.gender};
        if (x.contains("genre")) cond.genre = m.schema.genre_index(string_field(x, "genre"));
        if (x.contains("gender")) cond.gender = AttributeSchema::gender_index(string_field(x, "gender"));
        conds.push_back(cond);
      }
      if (conds.empty()) return error_response(400, "at least one condition is required");
      return json_response(200, report_to_json(what_if(m.params, m.vocab, m.schema, c, conds), m.schema));
    });
  }

  /// Routes a request the way the HTTP server does.
  Response handle(const std::string& method, const std::string& path, const std::string& body) const {
    if (method == "GET" && path == "/healthz") return health();
    if (method == "GET" && path == "/v1/model") return info();
    if (method == "POST" && path == "/v1/predict") return predict(body);
    if (method == "POST" && path == "/v1/explain") return explain(body);
    return error_response(404, "not found", method + " " + path);
  }

 private:
  struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
  };

  static std::string string_field(const nlohmann::json& j, const char* key) {
    if (!j.contains(key)) throw SchemaError(std::string("missing field \"") + key + "\"");
    if (!j.at(key).is_string()) throw SchemaError(std::string("field \"") + key + "\" must be a string");
    return j.at(key).get<std::string>();
  }

  static Creative creative_from_request(const Checkpoint& m, const nlohmann::json& req, bool need_gender = true) {
    Creative c;
    c.title = tokenize(string_field(req, "title"));
    c.description = tokenize(string_field(req, "description"));
    c.genre = m.schema.genre_index(string_field(req, "genre"));
    c.gender = need_gender || req.contains("gender") ? AttributeSchema::gender_index(string_field(req, "gender"))
                                                     : 0;
    if (c.title.empty() || c.description.empty()) throw ValidationError("title and description must be non-empty");
    return c;
  }

  template <class F>
  Response guarded(const std::string& body, F&& f) const {
    const auto m = std::atomic_load(&model_);
    if (!m) return error_response(503, "model not loaded");
    if (body.size() > max_body_)
      return error_response(413, "request body too large", "limit is " + std::to_string(max_body_) + " bytes");
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      return error_response(422, "malformed JSON", e.what());
    }
    if (!req.is_object()) return error_response(422, "request body must be a JSON object");
    try {
      return f(*m, req);
    } catch (const SchemaError& e) {
      return error_response(422, "invalid request", e.what());
    } catch (const ValidationError& e) {
      return error_response(400, "invalid request", e.what());
    } catch (const std::exception& e) {
      return error_response(500, "internal error", e.what());
    }
  }

  std::size_t max_body_;
  std::shared_ptr<const Checkpoint> model_;
};

/// Binds the service routes onto an httplib server.
inline void mount(httplib::Server& server, const InferenceService& svc, const ServiceConfig& cfg) {
  auto reply = [](httplib::Response& res, const Response& r, const char* type) {
    res.status = r.status;
    res.set_content(r.body, r.status == 200 && std::string(type) == "text/plain" ? "text/plain" : "application/json");
  };
  server.set_payload_max_length(cfg.max_body_bytes);
  server.set_read_timeout(cfg.timeout_seconds, 0);
  server.set_write_timeout(cfg.timeout_seconds, 0);
  server.Get("/healthz", [&svc, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, svc.health(), "text/plain");
  });
  server.Get("/v1/model", [&svc, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, svc.info(), "application/json");
  });
  server.Post("/v1/predict", [&svc, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.predict(req.body), "application/json");
  });
  server.Post("/v1/explain", [&svc, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.explain(req.body), "application/json");
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.status == 413) {
      res.set_content(error_response(413, "request body too large").body, "application/json");
    } else if (res.body.empty()) {
      res.set_content(error_response(res.status, "request failed").body, "application/json");
    }
  });
}

/// Listens first (so /healthz answers 503 while loading), then loads the
/// checkpoint. Returns nonzero if the checkpoint cannot be loaded or the
/// port cannot be bound.
inline int serve(const ServiceConfig& cfg) {
  InferenceService svc(cfg.max_body_bytes);
  httplib::Server server;
  mount(server, svc, cfg);
  if (!server.bind_to_port(cfg.host, cfg.port)) {
    log().error("cannot bind {}:{}", cfg.host, cfg.port);
    return 2;
  }
  std::thread listener([&] { server.listen_after_bind(); });
  // stop() is a no-op until the listener runs
  server.wait_until_ready();
  try {
    svc.set_model(load_checkpoint(cfg.checkpoint));
  } catch (const std::exception& e) {
    log().error("cannot load checkpoint: {}", e.what());
    server.stop();
    listener.join();
    return dynamic_cast<const ValidationError*>(&e) ? 1 : 2;
  }
  log().info("serving {} on {}:{}", cfg.checkpoint, cfg.host, cfg.port);
  listener.join();
  return 0;
}

}  // namespace adcnet
