#pragma once

// Regression and ranking metrics plus the campaign-grouped cross-validation
// harness. Metrics that cannot be computed are empty optionals ("n/a").

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "adcnet/data.hpp"
#include "adcnet/error.hpp"
#include "adcnet/log.hpp"
#include "adcnet/network.hpp"
#include "adcnet/training.hpp"

namespace adcnet {

enum class Subset { all, cv_positive };

struct MseResult {
  std::optional<double> value;
  std::optional<double> zero_baseline;  // same subset, every prediction 0
  std::size_t count = 0;
};

/// Mean squared error in log space. cv_positive keeps items whose target is > 0.
inline MseResult mse_metric(std::span<const double> preds, std::span<const double> targets,
                            Subset subset = Subset::all) {
  if (preds.size() != targets.size()) throw ValidationError("mse: length mismatch");
  double se = 0, zero = 0;
  MseResult r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (subset == Subset::cv_positive && !(targets[i] > 0)) continue;
    se += (preds[i] - targets[i]) * (preds[i] - targets[i]);
    zero += targets[i] * targets[i];
    ++r.count;
  }
  if (r.count) {
    r.value = se / static_cast<double>(r.count);
    r.zero_baseline = zero / static_cast<double>(r.count);
  }
  return r;
}

struct NdcgResult {
  double value = 1.0;
  bool degenerate = false;  // IDCG was 0
};

/// Items ranked by score descending, ties in input order; gain = relevance,
/// discount = log2(rank + 1).
inline NdcgResult ndcg(std::span<const double> relevance, std::span<const double> scores) {
  if (relevance.size() != scores.size()) throw ValidationError("ndcg: length mismatch");
  if (relevance.empty()) throw ValidationError("ndcg: empty input");
  const auto n = relevance.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<double> ideal(relevance.begin(), relevance.end());
  std::stable_sort(ideal.begin(), ideal.end(), std::greater<>());
  double dcg = 0, idcg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double disc = std::log2(static_cast<double>(i) + 2.0);
    dcg += relevance[order[i]] / disc;
    idcg += ideal[i] / disc;
  }
  if (idcg == 0) return {1.0, true};
  return {dcg / idcg, false};
}

/// Number of items kept by ndcg_top_fraction.
inline std::size_t top_fraction_count(std::size_t n, double fraction) {
  if (!(fraction > 0 && fraction <= 1)) throw ValidationError("fraction must be in (0, 1]");
  const double k = std::ceil(fraction * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 1.0)), 1, n);
}

/// NDCG over the k = ceil(fraction * N) items of highest true relevance
/// (ties by input order), keeping their input order for score ties.
inline NdcgResult ndcg_top_fraction(std::span<const double> relevance,
                                    std::span<const double> scores, double fraction = 0.01) {
  if (relevance.size() != scores.size()) throw ValidationError("ndcg: length mismatch");
  if (relevance.empty()) throw ValidationError("ndcg: empty input");
  const auto k = top_fraction_count(relevance.size(), fraction);
  std::vector<std::size_t> order(relevance.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return relevance[a] > relevance[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  std::vector<double> rel, sc;
  for (auto i : order) {
    rel.push_back(relevance[i]);
    sc.push_back(scores[i]);
  }
  return ndcg(rel, sc);
}

inline constexpr double kClickFloor = 1e-6;

/// Binary relevance: observed conversions / max(clicks, 1) >= threshold.
inline std::vector<double> cvr_relevance(std::span<const std::int64_t> clicks,
                                         std::span<const std::int64_t> conversions,
                                         double threshold) {
  if (clicks.size() != conversions.size()) throw ValidationError("cvr: length mismatch");
  std::vector<double> rel(clicks.size());
  for (std::size_t i = 0; i < rel.size(); ++i)
    rel[i] = static_cast<double>(conversions[i]) /
                         static_cast<double>(std::max<std::int64_t>(clicks[i], 1)) >=
                     threshold
                 ? 1.0
                 : 0.0;
  return rel;
}

/// NDCG of the CVR derived from predicted conversions and clicks.
inline NdcgResult cvr_eval(std::span<const double> pred_cv_log, std::span<const double> pred_click_log,
                           std::span<const std::int64_t> clicks,
                           std::span<const std::int64_t> conversions, double threshold = 0.5) {
  if (pred_cv_log.size() != pred_click_log.size() || pred_cv_log.size() != clicks.size())
    throw ValidationError("cvr: length mismatch");
  std::vector<double> score(pred_cv_log.size());
  for (std::size_t i = 0; i < score.size(); ++i)
    score[i] = denormalize(pred_cv_log[i]) / std::max(denormalize(pred_click_log[i]), kClickFloor);
  return ndcg(cvr_relevance(clicks, conversions, threshold), score);
}

/// NDCG of a directly predicted CVR.
inline NdcgResult cvr_eval_direct(std::span<const double> pred_cvr, std::span<const std::int64_t> clicks,
                                  std::span<const std::int64_t> conversions, double threshold = 0.5) {
  if (pred_cvr.size() != clicks.size()) throw ValidationError("cvr: length mismatch");
  return ndcg(cvr_relevance(clicks, conversions, threshold), pred_cvr);
}

// ---------------------------------------------------------------------------

struct EvalResult {
  std::optional<double> mse_all;
  std::optional<double> mse_cv_gt0;
  std::optional<double> zero_mse_all;
  std::optional<double> zero_mse_cv_gt0;
  std::optional<double> ndcg_all;
  std::optional<double> ndcg_top1pct;
  std::optional<double> cvr_ndcg;
  bool ndcg_degenerate = false;
  bool cvr_degenerate = false;
  std::size_t n_all = 0;
  std::size_t n_cv_gt0 = 0;
  std::size_t n_top = 0;
  std::size_t n_cvr_relevant = 0;
};

struct EvalOptions {
  double top_fraction = 0.01;
  double cvr_threshold = 0.5;
};

/// All metrics for one model's predictions over `items`.
inline EvalResult evaluate(const std::vector<Prediction>& preds, const std::vector<EncodedCreative>& items,
                           const EvalOptions& opt = {}) {
  if (preds.size() != items.size()) throw ValidationError("evaluate: length mismatch");
  if (items.empty()) throw ValidationError("evaluate: empty evaluation set");
  std::vector<double> y, yhat, clickhat, cvrhat;
  std::vector<std::int64_t> clicks, conv;
  bool has_click = true, direct = true;
  for (std::size_t i = 0; i < items.size(); ++i) {
    y.push_back(items[i].y_cv);
    yhat.push_back(preds[i].y_cv_log);
    clicks.push_back(items[i].clicks);
    conv.push_back(items[i].conversions);
    has_click = has_click && preds[i].y_click_log.has_value();
    direct = direct && preds[i].cvr.has_value();
    clickhat.push_back(preds[i].y_click_log.value_or(0.0));
    cvrhat.push_back(preds[i].cvr.value_or(0.0));
  }
  EvalResult r;
  const auto all = mse_metric(yhat, y, Subset::all);
  const auto pos = mse_metric(yhat, y, Subset::cv_positive);
  r.zero_mse_all = all.zero_baseline;
  r.zero_mse_cv_gt0 = pos.zero_baseline;
  r.n_all = all.count;
  r.n_cv_gt0 = pos.count;
  r.n_top = top_fraction_count(items.size(), opt.top_fraction);
  const auto rel = cvr_relevance(clicks, conv, opt.cvr_threshold);
  r.n_cvr_relevant = static_cast<std::size_t>(std::count(rel.begin(), rel.end(), 1.0));
  if (direct) {
    const auto c = cvr_eval_direct(cvrhat, clicks, conv, opt.cvr_threshold);
    r.cvr_ndcg = c.value;
    r.cvr_degenerate = c.degenerate;
    return r;
  }
  r.mse_all = all.value;
  r.mse_cv_gt0 = pos.value;
  const auto full = ndcg(y, yhat);
  r.ndcg_all = full.value;
  r.ndcg_degenerate = full.degenerate;
  r.ndcg_top1pct = ndcg_top_fraction(y, yhat, opt.top_fraction).value;
  if (has_click) {
    const auto c = cvr_eval(yhat, clickhat, clicks, conv, opt.cvr_threshold);
    r.cvr_ndcg = c.value;
    r.cvr_degenerate = c.degenerate;
  }
  return r;
}

/// Metrics of the predictor that outputs 0 conversions and 0 clicks everywhere.
inline EvalResult evaluate_zero_baseline(const std::vector<EncodedCreative>& items,
                                         const EvalOptions& opt = {}) {
  std::vector<Prediction> zeros(items.size());
  for (auto& p : zeros) p.y_click_log = 0.0;
  return evaluate(zeros, items, opt);
}

// ---------------------------------------------------------------------------

struct FoldEntry {
  int repeat = 0;
  int fold = 0;
  EvalResult result;
};

struct MetricsRow {
  std::string variant;
  std::vector<FoldEntry> folds;
  EvalResult mean;  // counts are totals over folds
};

struct MetricsTable {
  std::vector<MetricsRow> rows;

  const MetricsRow& row(const std::string& variant) const {
    for (const auto& r : rows)
      if (r.variant == variant) return r;
    throw ValidationError("no row for variant " + variant);
  }
};

inline EvalResult mean_of(const std::vector<FoldEntry>& folds) {
  EvalResult m;
  auto avg = [&](auto member) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& f : folds)
      if (const auto& v = f.result.*member) {
        s += *v;
        ++n;
      }
    return n ? std::optional<double>(s / static_cast<double>(n)) : std::nullopt;
  };
  m.mse_all = avg(&EvalResult::mse_all);
  m.mse_cv_gt0 = avg(&EvalResult::mse_cv_gt0);
  m.zero_mse_all = avg(&EvalResult::zero_mse_all);
  m.zero_mse_cv_gt0 = avg(&EvalResult::zero_mse_cv_gt0);
  m.ndcg_all = avg(&EvalResult::ndcg_all);
  m.ndcg_top1pct = avg(&EvalResult::ndcg_top1pct);
  m.cvr_ndcg = avg(&EvalResult::cvr_ndcg);
  for (const auto& f : folds) {
    m.ndcg_degenerate = m.ndcg_degenerate || f.result.ndcg_degenerate;
    m.cvr_degenerate = m.cvr_degenerate || f.result.cvr_degenerate;
    m.n_all += f.result.n_all;
    m.n_cv_gt0 += f.result.n_cv_gt0;
    m.n_top += f.result.n_top;
    m.n_cvr_relevant += f.result.n_cvr_relevant;
  }
  return m;
}

inline std::string format_metric(const std::optional<double>& v, int precision = 6) {
  if (!v) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, *v);
  return buf;
}

inline std::string to_csv(const MetricsTable& t) {
  std::ostringstream os;
  os << "variant,repeat,fold,mse_all,mse_cv_gt0,ndcg_all,ndcg_top1pct,cvr_ndcg,n_all,n_cv_gt0\n";
  auto line = [&](const std::string& v, const std::string& rep, const std::string& fold,
                  const EvalResult& r) {
    os << v << ',' << rep << ',' << fold << ',' << format_metric(r.mse_all) << ','
       << format_metric(r.mse_cv_gt0) << ',' << format_metric(r.ndcg_all) << ','
       << format_metric(r.ndcg_top1pct) << ',' << format_metric(r.cvr_ndcg) << ',' << r.n_all << ','
       << r.n_cv_gt0 << '\n';
  };
  for (const auto& row : t.rows) {
    for (const auto& f : row.folds) line(row.variant, std::to_string(f.repeat), std::to_string(f.fold), f.result);
    line(row.variant, "mean", "mean", row.mean);
  }
  return os.str();
}

inline nlohmann::ordered_json to_json(const EvalResult& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json("n/a");
  };
  nlohmann::ordered_json j;
  j["mse_all"] = opt(r.mse_all);
  j["mse_cv_gt0"] = opt(r.mse_cv_gt0);
  j["zero_mse_all"] = opt(r.zero_mse_all);
  j["zero_mse_cv_gt0"] = opt(r.zero_mse_cv_gt0);
  j["ndcg_all"] = opt(r.ndcg_all);
  j["ndcg_top1pct"] = opt(r.ndcg_top1pct);
  j["cvr_ndcg"] = opt(r.cvr_ndcg);
  j["ndcg_degenerate"] = r.ndcg_degenerate;
  j["cvr_degenerate"] = r.cvr_degenerate;
  j["n_all"] = r.n_all;
  j["n_cv_gt0"] = r.n_cv_gt0;
  j["n_top"] = r.n_top;
  j["n_cvr_relevant"] = r.n_cvr_relevant;
  return j;
}

inline nlohmann::ordered_json to_json(const MetricsTable& t) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& row : t.rows) {
    nlohmann::ordered_json r;
    r["variant"] = row.variant;
    auto& folds = r["folds"] = nlohmann::ordered_json::array();
    for (const auto& f : row.folds) {
      auto e = to_json(f.result);
      e["repeat"] = f.repeat;
      e["fold"] = f.fold;
      folds.push_back(std::move(e));
    }
    r["mean"] = to_json(row.mean);
    j.push_back(std::move(r));
  }
  return j;
}

/// Aligned text rendering of the per-variant means; NDCG columns in percent.
inline std::string to_text(const MetricsTable& t) {
  const std::vector<std::string> head = {"model", "MSE all", "MSE #CV>0", "NDCG all", "NDCG top1%", "CVR NDCG"};
  std::vector<std::vector<std::string>> cells{head};
  auto pct = [](const std::optional<double>& v) {
    return v ? std::optional<double>(*v * 100.0) : std::nullopt;
  };
  for (const auto& row : t.rows) {
    const auto& m = row.mean;
    cells.push_back({row.variant, format_metric(m.mse_all, 5), format_metric(m.mse_cv_gt0, 5),
                     format_metric(pct(m.ndcg_all), 2), format_metric(pct(m.ndcg_top1pct), 2),
                     format_metric(pct(m.cvr_ndcg), 2)});
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& r : cells)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream os;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      const auto& s = cells[i][c];
      if (c == 0)
        os << s << std::string(width[c] - s.size(), ' ');
      else
        os << "  " << std::string(width[c] - s.size(), ' ') << s;
    }
    os << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------

struct CvOptions {
  int k = 5;
  std::uint64_t seed = 0;
  int repeats = 1;  // repeat r uses seed + r for folds and training
  int threads = 1;
  double validation_fraction = 0.1;
  int min_count = 1;
  std::optional<std::string> embeddings_path;
  EvalOptions eval;
};

struct FoldSplit {
  std::vector<std::size_t> train, validation, test;
};

/// Splits `idx` into (train, validation): the last `fraction` of its campaigns,
/// ordered by first appearance, form the validation part.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(
    const std::vector<Creative>& creatives, const std::vector<std::size_t>& idx, double fraction) {
  if (!(fraction >= 0 && fraction < 1)) throw ValidationError("validation fraction must be in [0, 1)");
  std::vector<std::string> order;
  std::set<std::string> seen;
  for (auto i : idx)
    if (seen.insert(creatives[i].campaign_id).second) order.push_back(creatives[i].campaign_id);
  auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(order.size())));
  if (fraction > 0 && n_val == 0 && order.size() >= 2) n_val = 1;
  const std::set<std::string> val(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
  for (auto i : idx) (val.count(creatives[i].campaign_id) ? out.second : out.first).push_back(i);
  return out;
}

/// Held-out fold `f` as test; the remaining campaigns split into training and
/// validation by split_validation.
inline FoldSplit split_fold(const std::vector<Creative>& creatives, const FoldAssignment& folds, int f,
                            double validation_fraction) {
  FoldSplit s;
  s.test = folds.members(f);
  std::tie(s.train, s.validation) = split_validation(creatives, folds.complement(f), validation_fraction);
  return s;
}

/// Trains one model on the training part of a fold and evaluates it on the test part.
inline EvalResult run_fold(const Dataset& ds, const FoldSplit& split, ModelConfig cfg, TrainConfig tc,
                           const CvOptions& opt, std::uint64_t fold_seed) {
  const auto train_raw = select(ds.creatives, split.train);
  const auto vocab = build_vocab(train_raw, opt.min_count);
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.d_genre = ds.schema.d_genre();
  auto enc = [&](const std::vector<std::size_t>& idx) {
    return encode_all(select(ds.creatives, idx), vocab, ds.schema, cfg.n_title, cfg.n_desc);
  };
  const auto train_set = enc(split.train);
  const auto val_set = enc(split.validation);
  const auto test_set = enc(split.test);
  std::optional<EmbeddingTable> emb;
  if (opt.embeddings_path) emb = load_embeddings(*opt.embeddings_path, vocab, cfg.d_w, derive_seed(fold_seed, 3));
  tc.seed = fold_seed;
  std::vector<Prediction> preds;
  if (tc.precision == 64) {
    const auto res = train<double>(train_set, cfg, tc, &val_set, emb ? &*emb : nullptr);
    if (res.history.aborted) throw RuntimeError("training diverged: " + *res.history.aborted);
    preds = predict(res.params, test_set);
  } else {
    const auto res = train<float>(train_set, cfg, tc, &val_set, emb ? &*emb : nullptr);
    if (res.history.aborted) throw RuntimeError("training diverged: " + *res.history.aborted);
    preds = predict(res.params, test_set);
  }
  return evaluate(preds, test_set, opt.eval);
}

inline const std::string kZeroBaselineRow = "zero-baseline";

/// Campaign-grouped k-fold cross-validation of every variant, plus the
/// all-zero predictor. Work units (repeat, fold, variant) run on `threads`
/// workers; results land in fixed slots, so the table does not depend on
/// scheduling.
inline MetricsTable cross_validate(const Dataset& ds, const std::vector<ModelConfig>& variants,
                                   const TrainConfig& tc, const CvOptions& opt) {
  tc.validate();
  for (const auto& v : variants) v.validate();
  if (opt.repeats < 1) throw ValidationError("repeats must be >= 1");
  if (opt.threads < 1) throw ValidationError("threads must be >= 1");
  if (ds.creatives.empty()) throw ValidationError("empty dataset");

  const int R = opt.repeats, K = opt.k, V = static_cast<int>(variants.size());
  std::vector<std::vector<FoldSplit>> splits(static_cast<std::size_t>(R));
  MetricsTable table;
  table.rows.resize(static_cast<std::size_t>(V) + 1);
  for (int v = 0; v < V; ++v) table.rows[static_cast<std::size_t>(v)].variant = variants[static_cast<std::size_t>(v)].variant_name();
  table.rows.back().variant = kZeroBaselineRow;
  for (int r = 0; r < R; ++r) {
    const auto folds = group_kfold(ds.creatives, K, derive_seed(opt.seed + static_cast<std::uint64_t>(r), 7));
    for (int f = 0; f < K; ++f) {
      splits[static_cast<std::size_t>(r)].push_back(split_fold(ds.creatives, folds, f, opt.validation_fraction));
      const auto test = encode_all(select(ds.creatives, splits[static_cast<std::size_t>(r)].back().test),
                                   Vocabulary{}, ds.schema, 1, 1);
      table.rows.back().folds.push_back({r, f, evaluate_zero_baseline(test, opt.eval)});
    }
  }
  for (int v = 0; v < V; ++v) table.rows[static_cast<std::size_t>(v)].folds.resize(static_cast<std::size_t>(R * K));

  const int units = R * K * V;
  std::atomic<int> next{0};
  std::mutex err_mu;
  std::exception_ptr error;
  auto worker = [&] {
    for (int u = next++; u < units; u = next++) {
      const int v = u % V, f = (u / V) % K, r = u / (V * K);
      try {
        const auto seed_r = opt.seed + static_cast<std::uint64_t>(r);
        const auto& cfg = variants[static_cast<std::size_t>(v)];
        log().info("cv: repeat {} fold {} variant {}", r, f, cfg.variant_name());
        auto res = run_fold(ds, splits[static_cast<std::size_t>(r)][static_cast<std::size_t>(f)], cfg, tc, opt,
                            derive_seed(seed_r, 200 + static_cast<std::uint64_t>(f)));
        table.rows[static_cast<std::size_t>(v)].folds[static_cast<std::size_t>(r * K + f)] = {r, f, res};
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!error) error = std::current_exception();
        next = units;
      }
    }
  };
  const int n_threads = std::min(opt.threads, std::max(units, 1));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  for (auto& row : table.rows) row.mean = mean_of(row.folds);
  return table;
}

}  // namespace adcnet
