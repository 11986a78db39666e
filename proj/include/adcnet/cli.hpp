#pragma once

// Command-line driver. run() maps every failure to an exit code:
// 0 success, 1 invalid input or usage, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "adcnet/checkpoint.hpp"
#include "adcnet/corpus.hpp"
#include "adcnet/data.hpp"
#include "adcnet/error.hpp"
#include "adcnet/evaluation.hpp"
#include "adcnet/explainer.hpp"
#include "adcnet/log.hpp"
#include "adcnet/network.hpp"
#include "adcnet/service.hpp"
#include "adcnet/training.hpp"

namespace adcnet::cli {

/// Everything a run needs, merged from the config file and then flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GeneratorConfig generator;
  CvOptions cv;
  ServiceConfig service;
  std::vector<std::string> variants = {"gru:vanilla:multi", "gru:attention:multi", "gru:conditional:multi",
                                       "gru:conditional:single"};
  std::vector<std::string> genres;  // fallback label set for datasets without a header
  double validation_fraction = 0.1;
  int min_count = 1;
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

/// Reads a JSON config with optional sections model, train, generator, cv,
/// service and top-level variants, genres, validation_fraction, min_count.
inline RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    if (j.contains("model")) from_json(j.at("model"), rc.model);
    if (j.contains("train")) from_json(j.at("train"), rc.train);
    if (j.contains("generator")) from_json(j.at("generator"), rc.generator);
    if (j.contains("cv")) {
      const auto& c = j.at("cv");
      rc.cv.k = c.value("k", rc.cv.k);
      rc.cv.repeats = c.value("repeats", rc.cv.repeats);
      rc.cv.eval.top_fraction = c.value("top_fraction", rc.cv.eval.top_fraction);
      rc.cv.eval.cvr_threshold = c.value("cvr_threshold", rc.cv.eval.cvr_threshold);
    }
    if (j.contains("service")) {
      const auto& s = j.at("service");
      rc.service.host = s.value("host", rc.service.host);
      rc.service.port = s.value("port", rc.service.port);
      rc.service.max_body_bytes = s.value("max_body_bytes", rc.service.max_body_bytes);
      rc.service.timeout_seconds = s.value("timeout_seconds", rc.service.timeout_seconds);
    }
    if (j.contains("variants")) rc.variants = j.at("variants").get<std::vector<std::string>>();
    if (j.contains("genres")) rc.genres = j.at("genres").get<std::vector<std::string>>();
    rc.validation_fraction = j.value("validation_fraction", rc.validation_fraction);
    rc.min_count = j.value("min_count", rc.min_count);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  return rc;
}

inline void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw RuntimeError("failed writing " + path);
}

inline std::string with_suffix(const std::string& path, const std::string& suffix) {
  return path.empty() || path == "-" ? std::string() : path + suffix;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> precision;
  std::optional<int> threads;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file (flags override it)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "random seed");
  sub->add_option("--out", c.out, "output path ('-' or empty for stdout)");
  sub->add_option("--precision", c.precision, "floating point width for training: 32 or 64");
  sub->add_option("--threads", c.threads, "worker threads (cv only)");
}

/// Merges the config file and the shared flags into one validated RunConfig.
inline RunConfig resolve(const Common& c) {
  auto rc = load_run_config(c.config);
  if (c.seed) {
    rc.train.seed = *c.seed;
    rc.generator.seed = *c.seed;
    rc.cv.seed = *c.seed;
  }
  if (c.precision) rc.train.precision = *c.precision;
  if (c.threads) rc.cv.threads = *c.threads;
  return rc;
}

inline Dataset load_data(const std::string& path, const RunConfig& rc) {
  if (path.empty()) throw ValidationError("--data is required");
  AttributeSchema fallback;
  fallback.genres = rc.genres;
  auto ds = read_dataset(path, fallback);
  if (ds.creatives.empty()) throw ValidationError("dataset " + path + " has no creatives");
  return ds;
}

inline Creative creative_from_flags(const std::string& title, const std::string& desc, const std::string& genre,
                                    const std::string& gender, const AttributeSchema& schema) {
  Creative c;
  c.title = tokenize(title);
  c.description = tokenize(desc);
  if (c.title.empty() || c.description.empty()) throw ValidationError("--title and --description must be non-empty");
  c.genre = schema.genre_index(genre);
  c.gender = AttributeSchema::gender_index(gender);
  return c;
}

// ---------------------------------------------------------------------------

inline int cmd_synth(const Common& common, const std::optional<int>& n_creatives,
                     const std::optional<int>& n_campaigns, const std::string& truth_path) {
  auto rc = resolve(common);
  if (n_creatives) rc.generator.n_creatives = *n_creatives;
  if (n_campaigns) rc.generator.n_campaigns = *n_campaigns;
  const auto corpus = generate_corpus(rc.generator);
  std::ostringstream data;
  write_dataset(data, corpus.dataset);
  write_text(common.out, data.str());
  const auto tp = truth_path.empty() ? with_suffix(common.out, ".truth.json") : truth_path;
  if (!tp.empty()) write_text(tp, corpus.truth.to_json(corpus.dataset.schema).dump(2) + "\n");
  log().info("corpus stats: {}", stats_to_json(corpus_stats(corpus.dataset.creatives)).dump());
  return 0;
}

template <class T>
void train_and_save(const Dataset& ds, const ModelConfig& cfg, const RunConfig& rc, const std::vector<EncodedCreative>& tr,
                    const std::vector<EncodedCreative>& val, const Vocabulary& vocab, const EmbeddingTable* emb,
                    const Common& common, const std::string& history_path, bool timing) {
  const auto res = train<T>(tr, cfg, rc.train, &val, emb);
  nlohmann::json meta;
  meta["variant"] = cfg.variant_name();
  meta["train_config"] = nlohmann::json(rc.train);
  meta["train_items"] = tr.size();
  meta["validation_items"] = val.size();
  meta["epochs_completed"] = res.history.epochs.size();
  meta["optimizer_steps"] = res.history.optimizer_steps;
  if (!res.history.epochs.empty()) meta["final_train_loss"] = res.history.epochs.back().train_loss;
  if (common.out.empty() || common.out == "-") throw ValidationError("train needs --out for the checkpoint");
  save_checkpoint(common.out, res.params, vocab, ds.schema, meta);
  const auto hp = history_path.empty() ? with_suffix(common.out, ".history.json") : history_path;
  write_text(hp, history_to_json(res.history, timing).dump(2) + "\n");
  if (res.history.aborted) throw RuntimeError("training diverged: " + *res.history.aborted);
}

inline int cmd_train(const Common& common, const std::string& data_path, const std::string& variant,
                     const std::optional<int>& epochs, const std::string& embeddings, const std::string& history_path,
                     bool timing) {
  auto rc = resolve(common);
  if (epochs) rc.train.epochs = *epochs;
  auto cfg = variant.empty() ? rc.model : apply_variant(rc.model, variant);
  rc.train.validate();
  const auto ds = load_data(data_path, rc);
  std::vector<std::size_t> all(ds.creatives.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto [tr_idx, val_idx] = split_validation(ds.creatives, all, rc.validation_fraction);
  const auto tr_raw = select(ds.creatives, tr_idx);
  const auto vocab = build_vocab(tr_raw, rc.min_count);
  cfg.vocab_size = vocab.size();
  cfg.d_genre = ds.schema.d_genre();
  cfg.validate();
  const auto tr = encode_all(tr_raw, vocab, ds.schema, cfg.n_title, cfg.n_desc);
  const auto val = encode_all(select(ds.creatives, val_idx), vocab, ds.schema, cfg.n_title, cfg.n_desc);
  std::optional<EmbeddingTable> emb;
  if (!embeddings.empty()) {
    emb = load_embeddings(embeddings, vocab, cfg.d_w, derive_seed(rc.train.seed, 3));
    log().info("embedding coverage {:.3f}", emb->coverage);
  }
  if (rc.train.precision == 64)
    train_and_save<double>(ds, cfg, rc, tr, val, vocab, emb ? &*emb : nullptr, common, history_path, timing);
  else
    train_and_save<float>(ds, cfg, rc, tr, val, vocab, emb ? &*emb : nullptr, common, history_path, timing);
  return 0;
}

inline int cmd_eval(const Common& common, const std::string& ckpt, const std::string& data_path) {
  auto rc = resolve(common);
  const auto m = load_checkpoint(ckpt);
  if (rc.genres.empty()) rc.genres = m.schema.genres;
  const auto ds = load_data(data_path, rc);
  if (ds.schema.genres != m.schema.genres) throw ValidationError("dataset genre labels differ from the checkpoint's");
  const auto& cfg = m.params.config;
  const auto items = encode_all(ds.creatives, m.vocab, ds.schema, cfg.n_title, cfg.n_desc);
  const auto res = evaluate(predict(m.params, items), items, rc.cv.eval);
  write_text(common.out, to_json(res).dump(2) + "\n");
  return 0;
}

inline int cmd_cv(const Common& common, const std::string& data_path, const std::string& variants,
                  const std::optional<int>& k, const std::optional<int>& repeats, const std::optional<int>& epochs,
                  const std::string& format, const std::string& embeddings) {
  auto rc = resolve(common);
  if (!variants.empty()) rc.variants = split_list(variants);
  if (k) rc.cv.k = *k;
  if (repeats) rc.cv.repeats = *repeats;
  if (epochs) rc.train.epochs = *epochs;
  rc.cv.validation_fraction = rc.validation_fraction;
  rc.cv.min_count = rc.min_count;
  if (!embeddings.empty()) rc.cv.embeddings_path = embeddings;
  std::vector<ModelConfig> cfgs;
  for (const auto& v : rc.variants) cfgs.push_back(apply_variant(rc.model, v));
  if (cfgs.empty()) throw ValidationError("no variants requested");
  if (format != "csv" && format != "json" && format != "text")
    throw ValidationError("--format must be csv, json or text");
  rc.train.validate();
  const auto ds = load_data(data_path, rc);
  const auto table = cross_validate(ds, cfgs, rc.train, rc.cv);
  if (format == "csv") write_text(common.out, to_csv(table));
  if (format == "json") write_text(common.out, to_json(table).dump(2) + "\n");
  if (format == "text") write_text(common.out, to_text(table));
  return 0;
}

inline int cmd_predict(const Common& common, const std::string& ckpt, const std::string& title,
                       const std::string& desc, const std::string& genre, const std::string& gender) {
  const auto m = load_checkpoint(ckpt);
  InferenceService svc;
  svc.set_model(m);
  nlohmann::json req = {{"title", title}, {"description", desc}, {"genre", genre}, {"gender", gender}};
  const auto r = svc.predict(req.dump());
  if (r.status != 200) throw ValidationError(r.body);
  write_text(common.out, nlohmann::json::parse(r.body).dump(2) + "\n");
  return 0;
}

inline int cmd_explain(const Common& common, const std::string& ckpt, const std::string& title,
                       const std::string& desc, const std::string& genre, const std::string& genders,
                       const std::string& genres, const std::string& format) {
  const auto m = load_checkpoint(ckpt);
  if (format != "json" && format != "html") throw ValidationError("--format must be json or html");
  const auto c = creative_from_flags(title, desc, genre, "all", m.schema);
  auto gender_list = split_list(genders);
  auto genre_list = split_list(genres);
  if (gender_list.empty()) gender_list = {"all"};
  if (genre_list.empty()) genre_list = {genre};
  std::vector<Condition> conds;
  for (const auto& g : genre_list)
    for (const auto& d : gender_list) conds.push_back({m.schema.genre_index(g), AttributeSchema::gender_index(d)});
  const auto rep = what_if(m.params, m.vocab, m.schema, c, conds);
  if (format == "json")
    write_text(common.out, report_to_json(rep, m.schema).dump(2) + "\n");
  else
    write_text(common.out, report_to_html(rep, m.schema));
  return 0;
}

inline int cmd_serve(const Common& common, const std::string& ckpt, const std::optional<std::string>& host,
                     const std::optional<int>& port, const std::optional<std::size_t>& max_body) {
  auto rc = resolve(common);
  rc.service.checkpoint = ckpt;
  if (host) rc.service.host = *host;
  if (port) rc.service.port = *port;
  if (max_body) rc.service.max_body_bytes = *max_body;
  return serve(rc.service);
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Conversion prediction and attention highlighting for ad creative text", "adcnet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  Common common;
  std::string data, ckpt, variant, variants, embeddings, history, truth, format = "csv", exp_format = "json";
  std::string title, desc, genre, gender = "all", genders = "all", genres;
  std::optional<int> n_creatives, n_campaigns, epochs, k, repeats, port;
  std::optional<std::string> host;
  std::optional<std::size_t> max_body;
  bool timing = false;

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and its ground-truth lifts");
  add_common(synth, common);
  synth->add_option("--n-creatives", n_creatives, "number of creatives");
  synth->add_option("--n-campaigns", n_campaigns, "number of campaigns");
  synth->add_option("--truth", truth, "ground-truth lift file (default <out>.truth.json)");

  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train_cmd, common);
  train_cmd->add_option("--data", data, "dataset (JSON Lines)")->required();
  train_cmd->add_option("--variant", variant, "encoder:attention:task[:attrs], e.g. gru:conditional:multi");
  train_cmd->add_option("--epochs", epochs, "training epochs");
  train_cmd->add_option("--embeddings", embeddings, "pretrained embeddings (word2vec text format)");
  train_cmd->add_option("--history", history, "history file (default <out>.history.json)");
  train_cmd->add_flag("--timing", timing, "record wall time per epoch in the history");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--data", data, "dataset (JSON Lines)")->required();

  auto* cv_cmd = app.add_subcommand("cv", "campaign-grouped cross-validation across variants");
  add_common(cv_cmd, common);
  cv_cmd->add_option("--data", data, "dataset (JSON Lines)")->required();
  cv_cmd->add_option("--variants", variants, "comma-separated variant list");
  cv_cmd->add_option("--k", k, "number of folds");
  cv_cmd->add_option("--repeats", repeats, "repetitions with seeds seed, seed+1, ...");
  cv_cmd->add_option("--epochs", epochs, "training epochs");
  cv_cmd->add_option("--format", format, "csv, json or text");
  cv_cmd->add_option("--embeddings", embeddings, "pretrained embeddings (word2vec text format)");

  auto* predict_cmd = app.add_subcommand("predict", "predict conversions and clicks for one creative");
  add_common(predict_cmd, common);
  predict_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  predict_cmd->add_option("--title", title, "title text")->required();
  predict_cmd->add_option("--description", desc, "description text")->required();
  predict_cmd->add_option("--genre", genre, "genre label")->required();
  predict_cmd->add_option("--gender", gender, "all, male or female");

  auto* explain_cmd = app.add_subcommand("explain", "attention highlights under one or more target conditions");
  add_common(explain_cmd, common);
  explain_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  explain_cmd->add_option("--title", title, "title text")->required();
  explain_cmd->add_option("--description", desc, "description text")->required();
  explain_cmd->add_option("--genre", genre, "genre label of the creative")->required();
  explain_cmd->add_option("--gender", genders, "comma-separated target genders, e.g. all,male,female");
  explain_cmd->add_option("--genres", genres, "comma-separated target genres (default: --genre)");
  explain_cmd->add_option("--format", exp_format, "json or html");

  auto* serve_cmd = app.add_subcommand("serve", "serve /v1/predict, /v1/explain, /v1/model, /healthz");
  add_common(serve_cmd, common);
  serve_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  serve_cmd->add_option("--host", host, "listen address");
  serve_cmd->add_option("--port", port, "listen port");
  serve_cmd->add_option("--max-body", max_body, "maximum request body in bytes");

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
    if (*synth) return cmd_synth(common, n_creatives, n_campaigns, truth);
    if (*train_cmd) return cmd_train(common, data, variant, epochs, embeddings, history, timing);
    if (*eval_cmd) return cmd_eval(common, ckpt, data);
    if (*cv_cmd) return cmd_cv(common, data, variants, k, repeats, epochs, format, embeddings);
    if (*predict_cmd) return cmd_predict(common, ckpt, title, desc, genre, gender);
    if (*explain_cmd) return cmd_explain(common, ckpt, title, desc, genre, genders, genres, exp_format);
    if (*serve_cmd) return cmd_serve(common, ckpt, host, port, max_body);
  } catch (const ValidationError& e) {
    log().error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    log().error("{}", e.what());
    return 2;
  }
  return 1;
}

}  // namespace adcnet::cli
