#pragma once

// Losses, reverse-mode gradients of the network, Adam with coupled L2
// weight decay, and the epoch loop.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adcnet/data.hpp"
#include "adcnet/error.hpp"
#include "adcnet/log.hpp"
#include "adcnet/network.hpp"

namespace adcnet {

/// splitmix64 finalizer; derives independent stream seeds from (seed, tag).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct TrainConfig {
  int batch_size = 64;
  int epochs = 50;
  double lambda_click = 1.0;
  double learning_rate = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double word_dropout_p = 0.1;
  std::uint64_t seed = 0;
  int precision = 32;

  void validate() const {
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (epochs < 0) throw ValidationError("train config: epochs must be >= 0");
    if (!(lambda_click >= 0)) throw ValidationError("train config: lambda_click must be >= 0");
    if (!(word_dropout_p >= 0 && word_dropout_p < 1))
      throw ValidationError("train config: word_dropout_p must be in [0, 1)");
    if (!(learning_rate > 0)) throw ValidationError("train config: learning_rate must be > 0");
    if (!(weight_decay >= 0)) throw ValidationError("train config: weight_decay must be >= 0");
    if (precision != 32 && precision != 64)
      throw ValidationError("train config: precision must be 32 or 64");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},     {"epochs", c.epochs},
                     {"lambda_click", c.lambda_click}, {"learning_rate", c.learning_rate},
                     {"adam_beta1", c.adam_beta1},     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},         {"weight_decay", c.weight_decay},
                     {"word_dropout_p", c.word_dropout_p}, {"seed", c.seed},
                     {"precision", c.precision}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("lambda_click", c.lambda_click);
  get("learning_rate", c.learning_rate);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_eps", c.adam_eps);
  get("weight_decay", c.weight_decay);
  get("word_dropout_p", c.word_dropout_p);
  get("seed", c.seed);
  get("precision", c.precision);
}

// ---------------------------------------------------------------------------
// Loss

/// Mean squared conversion error plus lambda times mean squared click error.
/// An empty `pred_click` gives the single-task loss.
template <class T>
T multi_task_loss(std::span<const T> pred_cv, std::span<const T> pred_click, std::span<const T> y_cv,
                  std::span<const T> y_click, T lambda) {
  const std::size_t n = pred_cv.size();
  if (n == 0) throw ValidationError("loss over zero items");
  if (y_cv.size() != n) throw ValidationError("loss: length mismatch");
  T cv = 0;
  for (std::size_t i = 0; i < n; ++i) cv += (y_cv[i] - pred_cv[i]) * (y_cv[i] - pred_cv[i]);
  cv /= static_cast<T>(n);
  if (pred_click.empty()) return cv;
  if (pred_click.size() != n || y_click.size() != n) throw ValidationError("loss: length mismatch");
  T click = 0;
  for (std::size_t i = 0; i < n; ++i)
    click += (y_click[i] - pred_click[i]) * (y_click[i] - pred_click[i]);
  return cv + lambda * (click / static_cast<T>(n));
}

/// Loss of a forward state against its batch, and d(loss)/d(outputs).
template <class T>
T batch_loss(const ForwardState<T>& st, const Batch<T>& batch, T lambda, Mat<T>* dout) {
  const auto B = batch.size;
  const bool multi = st.out.cols() > 1;
  const Vec<T> e_cv = st.out.col(0) - batch.y_cv;
  T loss = e_cv.squaredNorm() / static_cast<T>(B);
  if (dout) {
    dout->resize(B, st.out.cols());
    dout->col(0) = e_cv * (T(2) / static_cast<T>(B));
  }
  if (multi) {
    const Vec<T> e_click = st.out.col(1) - batch.y_click;
    loss += lambda * e_click.squaredNorm() / static_cast<T>(B);
    if (dout) dout->col(1) = e_click * (T(2) * lambda / static_cast<T>(B));
  }
  return loss;
}

/// Applies wildcard dropout to an embedded sequence (rows = positions).
/// Each unmasked row is zeroed with probability p, survivors scaled by 1/(1-p).
template <class T>
Mat<T> word_dropout(const Mat<T>& embedded, std::span<const std::uint8_t> mask, double p,
                    std::mt19937_64& rng, bool training = true) {
  if (!(p >= 0 && p < 1)) throw ValidationError("word dropout p must be in [0, 1)");
  if (!training || p == 0.0) return embedded;
  Mat<T> out = embedded;
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index t = 0; t < out.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    if (ud(rng) < p)
      out.row(t).setZero();
    else
      out.row(t) *= keep;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

/// Gradient of a GRU field given dL/dH; returns dL/dX for live rows.
template <class T>
Mat<T> gru_backward(const GruParams<T>& g, const Batch<T>& batch, Field f, const FieldCache<T>& fc,
                    const Mat<T>& dH, GruParams<T>& grad) {
  const int B = fc.B, u = fc.u;
  const Eigen::Index live = static_cast<Eigen::Index>(fc.steps) * B;
  Mat<T> dG = Mat<T>::Zero(live, 3 * u);
  Mat<T> Uzr(2 * u, u);
  Uzr << g.U_z, g.U_r;
  const auto& mask = batch.mask[f];

  Mat<T> dh = Mat<T>::Zero(B, u), dnew(B, u), carry(B, u), dz(B, u), dcand(B, u), dq(B, u);
  for (int t = fc.steps - 1; t >= 0; --t) {
    if (!fc.active[static_cast<std::size_t>(t)]) continue;
    const Eigen::Index r0 = static_cast<Eigen::Index>(t) * B;
    const Vec<T> m = mask.col(t);
    dnew = (dh + dH.middleRows(r0, B)).array().colwise() * m.array();
    carry = dh.array().colwise() * (T(1) - m.array());
    const auto z = fc.Z.middleRows(r0, B);
    const auto r = fc.R.middleRows(r0, B);
    const auto cand = fc.C.middleRows(r0, B);
    const auto hprev = fc.Hprev.middleRows(r0, B);

    dz = dnew.cwiseProduct(cand - hprev);
    dcand = dnew.cwiseProduct(z);
    dh = dnew.array() * (T(1) - z.array());
    auto da_z = dG.block(r0, 0, B, u);
    auto da_r = dG.block(r0, u, B, u);
    auto da_h = dG.block(r0, 2 * u, B, u);
    da_h = dcand.array() * (T(1) - cand.array().square());
    dq.noalias() = da_h * g.U_h;
    dh.array() += dq.array() * r.array();
    da_r = dq.array() * hprev.array() * r.array() * (T(1) - r.array());
    da_z = dz.array() * z.array() * (T(1) - z.array());
    dh.noalias() += dG.block(r0, 0, B, 2 * u) * Uzr;
    dh += carry;
  }

  const auto X = fc.X.topRows(live);
  const auto Hprev = fc.Hprev.topRows(live);
  const Mat<T> Q = fc.R.topRows(live).cwiseProduct(Hprev);
  grad.W_z.noalias() += dG.leftCols(u).transpose() * X;
  grad.W_r.noalias() += dG.middleCols(u, u).transpose() * X;
  grad.W_h.noalias() += dG.rightCols(u).transpose() * X;
  grad.U_z.noalias() += dG.leftCols(u).transpose() * Hprev;
  grad.U_r.noalias() += dG.middleCols(u, u).transpose() * Hprev;
  grad.U_h.noalias() += dG.rightCols(u).transpose() * Q;
  grad.b_z += dG.leftCols(u).colwise().sum();
  grad.b_r += dG.middleCols(u, u).colwise().sum();
  grad.b_h += dG.rightCols(u).colwise().sum();

  Mat<T> Wx(3 * u, fc.d_in);
  Wx << g.W_z, g.W_r, g.W_h;
  Mat<T> dX(live, fc.d_in);
  dX.noalias() = dG * Wx;
  return dX;
}

/// Backward through attention pooling; accumulates into dH and parameter grads.
template <class T>
void attention_backward(const FieldParams<T>& fp, const ModelConfig& cfg, const Batch<T>& batch,
                        Field f, const FieldCache<T>& fc, const std::vector<Mat<T>>& dM, Mat<T>& dH,
                        FieldParams<T>& grad) {
  const int B = fc.B, n = fc.n, hops = cfg.hops;
  const Eigen::Index live = static_cast<Eigen::Index>(fc.steps) * B;
  const auto& mask = batch.mask[f];
  Mat<T> dscores = Mat<T>::Zero(live, hops);
  Mat<T> dc = Mat<T>::Zero(B, n);
  Mat<T> dAcnd(B, n), dA(B, n);
  for (int j = 0; j < hops; ++j) {
    const auto& A = fc.A[static_cast<std::size_t>(j)];
    const auto& Acnd = fc.Acnd[static_cast<std::size_t>(j)];
    const auto& dMj = dM[static_cast<std::size_t>(j)];
    dAcnd.setZero();
    for (int t = 0; t < fc.steps; ++t) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(t) * B;
      const auto Ht = fc.H.middleRows(r0, B);
      dH.middleRows(r0, B).array() += dMj.array().colwise() * Acnd.col(t).array();
      dAcnd.col(t) = Ht.cwiseProduct(dMj).rowwise().sum();
    }
    dA = dAcnd.cwiseProduct(fc.c);
    dc += dAcnd.cwiseProduct(A);
    for (int b = 0; b < B; ++b) {
      T s = 0;
      for (int t = 0; t < fc.steps; ++t) s += A(b, t) * dA(b, t);
      for (int t = 0; t < fc.steps; ++t)
        if (mask(b, t) != T(0))
          dscores(static_cast<Eigen::Index>(t) * B + b, j) = A(b, t) * (dA(b, t) - s);
    }
  }
  const auto Ts = fc.Ts.topRows(live);
  grad.W_s2.noalias() += dscores.transpose() * Ts;
  Mat<T> da = dscores * fp.W_s2;
  da.array() *= (T(1) - Ts.array().square());
  grad.W_s1.noalias() += da.transpose() * fc.H.topRows(live);
  dH.topRows(live).noalias() += da * fp.W_s1;
  if (cfg.conditional()) grad.W_prj.noalias() += dc.transpose() * batch.attrs;
}

}  // namespace detail

/// Gradient of the batch loss w.r.t. every parameter, given a forward state
/// and d(loss)/d(outputs). The PAD embedding row gradient is zero.
template <class T>
ModelParams<T> backward(const ModelParams<T>& p, const Batch<T>& batch, const ForwardState<T>& st,
                        const Mat<T>& dout) {
  const auto& cfg = p.config;
  const int B = batch.size;
  auto grad = ModelParams<T>::zeros(cfg);

  grad.W_2.noalias() = dout.transpose() * st.h1;
  grad.b_2 = dout.colwise().sum();
  Mat<T> dpre1 = dout * p.W_2;
  dpre1.array() *= (st.pre1.array() > T(0)).template cast<T>();
  grad.b_1 = dpre1.colwise().sum();

  const int attr_off = cfg.field_features(kTitle) + cfg.field_features(kDesc);
  grad.W_1.middleCols(attr_off, cfg.d_attr()).noalias() = dpre1.transpose() * batch.attrs;

  for (Field f : {kTitle, kDesc}) {
    const auto& fc = st.field[f];
    const int off = feature_offset(cfg, f);
    const Eigen::Index live = static_cast<Eigen::Index>(fc.steps) * B;
    Mat<T> dH = Mat<T>::Zero(live, fc.u);

    if (cfg.has_attention()) {
      std::vector<Mat<T>> dM(static_cast<std::size_t>(cfg.hops));
      for (int j = 0; j < cfg.hops; ++j) {
        auto W = p.W_1.middleCols(off + j * fc.u, fc.u);
        dM[static_cast<std::size_t>(j)].noalias() = dpre1 * W;
        grad.W_1.middleCols(off + j * fc.u, fc.u).noalias() =
            dpre1.transpose() * fc.M[static_cast<std::size_t>(j)];
      }
      detail::attention_backward(p.field[f], cfg, batch, f, fc, dM, dH, grad.field[f]);
    } else if (cfg.encoder == EncoderKind::gru) {
      for (int t = 0; t < fc.steps; ++t) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(t) * B;
        dH.middleRows(r0, B).noalias() = dpre1 * p.W_1.middleCols(off + t * fc.u, fc.u);
        grad.W_1.middleCols(off + t * fc.u, fc.u).noalias() =
            dpre1.transpose() * fc.H.middleRows(r0, B);
      }
    } else {
      const Mat<T> dmean = dpre1 * p.W_1.middleCols(off, fc.d_in);
      grad.W_1.middleCols(off, fc.d_in).noalias() = dpre1.transpose() * fc.mean;
      for (int t = 0; t < fc.steps; ++t)
        for (int b = 0; b < B; ++b)
          dH.row(static_cast<Eigen::Index>(t) * B + b) = dmean.row(b) / std::max(fc.count(b), T(1));
    }

    Mat<T> dX = cfg.encoder == EncoderKind::gru
                    ? detail::gru_backward(p.field[f].gru, batch, f, fc, dH, grad.field[f].gru)
                    : std::move(dH);

    const auto& ids = batch.ids[f];
    for (int t = 0; t < fc.steps; ++t)
      for (int b = 0; b < B; ++b) {
        const T s = fc.scale(b, t);
        if (s == T(0)) continue;
        grad.embeddings.row(ids(b, t)) += s * dX.row(static_cast<Eigen::Index>(t) * B + b).head(cfg.d_w);
      }
  }
  grad.embeddings.row(Vocabulary::kPad).setZero();
  return grad;
}

template <class T>
struct GradientResult {
  T loss = 0;
  ModelParams<T> grads;
};

/// Forward + backward on one batch. With a dropout rng the word dropout is active,
/// and the result is a deterministic function of the rng state.
template <class T>
GradientResult<T> compute_gradients(const ModelParams<T>& p, const Batch<T>& batch,
                                    const TrainConfig& tc, std::mt19937_64* dropout_rng = nullptr) {
  ForwardState<T> st;
  WordDropout wd{tc.word_dropout_p, dropout_rng};
  forward(p, batch, st, dropout_rng ? &wd : nullptr);
  Mat<T> dout;
  GradientResult<T> res;
  res.loss = batch_loss(st, batch, static_cast<T>(tc.lambda_click), &dout);
  if (!std::isfinite(static_cast<double>(res.loss))) {
    for (const auto& [name, t] : p.tensors())
      if (!t->allFinite()) throw RuntimeError("non-finite loss: parameter tensor " + name);
    throw RuntimeError("non-finite loss: tensor outputs");
  }
  res.grads = backward(p, batch, st, dout);
  for (const auto& [name, t] : res.grads.tensors())
    if (!t->allFinite()) throw RuntimeError("non-finite gradient in tensor " + name);
  return res;
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
struct AdamState {
  ModelParams<T> m, v;
  long step = 0;

  static AdamState for_params(const ModelParams<T>& p) {
    return {ModelParams<T>::zeros(p.config), ModelParams<T>::zeros(p.config), 0};
  }
};

/// Adam with coupled L2 decay (grad + weight_decay * param). The PAD embedding row is frozen.
template <class T>
void adam_step(ModelParams<T>& p, const ModelParams<T>& grads, AdamState<T>& s, const TrainConfig& tc) {
  ++s.step;
  const T b1 = static_cast<T>(tc.adam_beta1), b2 = static_cast<T>(tc.adam_beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(tc.adam_beta1, static_cast<double>(s.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(tc.adam_beta2, static_cast<double>(s.step)));
  const T lr = static_cast<T>(tc.learning_rate), eps = static_cast<T>(tc.adam_eps);
  const T wd = static_cast<T>(tc.weight_decay);
  auto pt = p.tensors();
  auto gt = grads.tensors();
  auto mt = s.m.tensors();
  auto vt = s.v.tensors();
  for (std::size_t i = 0; i < pt.size(); ++i) {
    auto& w = *pt[i].second;
    const auto& g = *gt[i].second;
    auto& m = *mt[i].second;
    auto& v = *vt[i].second;
    const Eigen::Index first = pt[i].first == "embeddings" ? 1 : 0;  // skip PAD row
    const Eigen::Index rows = w.rows() - first;
    auto W = w.bottomRows(rows);
    const Mat<T> G = g.bottomRows(rows) + wd * W;
    auto Mb = m.bottomRows(rows);
    auto Vb = v.bottomRows(rows);
    Mb = b1 * Mb + (T(1) - b1) * G;
    Vb = b2 * Vb + (T(1) - b2) * G.cwiseAbs2();
    W.array() -= lr * (Mb.array() / c1) / ((Vb.array() / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_mse_all;
  std::optional<double> val_mse_cv_gt0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  long optimizer_steps = 0;
  std::optional<std::string> aborted;  // set when training stopped on divergence
};

inline nlohmann::ordered_json history_to_json(const TrainHistory& h, bool with_timing) {
  nlohmann::ordered_json j;
  j["optimizer_steps"] = h.optimizer_steps;
  if (h.aborted) j["aborted"] = *h.aborted;
  auto& arr = j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : h.epochs) {
    nlohmann::ordered_json r;
    r["epoch"] = e.epoch;
    r["train_loss"] = e.train_loss;
    r["val_mse_all"] = e.val_mse_all ? nlohmann::ordered_json(*e.val_mse_all) : nlohmann::ordered_json();
    r["val_mse_cv_gt0"] =
        e.val_mse_cv_gt0 ? nlohmann::ordered_json(*e.val_mse_cv_gt0) : nlohmann::ordered_json();
    if (with_timing) r["wall_seconds"] = e.wall_seconds;
    arr.push_back(std::move(r));
  }
  return j;
}

template <class T>
struct TrainResult {
  ModelParams<T> params;
  TrainHistory history;
};

/// Observed conversion rate, the regression target of cvr-task models.
inline double cvr_target(const EncodedCreative& e) {
  return static_cast<double>(e.conversions) / static_cast<double>(std::max<std::int64_t>(e.clicks, 1));
}

/// Copies items with y_cv replaced by the observed conversion rate.
inline std::vector<EncodedCreative> with_cvr_targets(const std::vector<EncodedCreative>& items) {
  auto out = items;
  for (auto& e : out) e.y_cv = cvr_target(e);
  return out;
}

namespace detail {
inline std::pair<std::optional<double>, std::optional<double>> cv_mse(
    const std::vector<Prediction>& preds, const std::vector<EncodedCreative>& items) {
  double all = 0, pos = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double e = preds[i].cvr ? *preds[i].cvr - cvr_target(items[i]) : preds[i].y_cv_log - items[i].y_cv;
    all += e * e;
    if (items[i].conversions > 0) {
      pos += e * e;
      ++n_pos;
    }
  }
  std::optional<double> a, p;
  if (!items.empty()) a = all / static_cast<double>(items.size());
  if (n_pos) p = pos / static_cast<double>(n_pos);
  return {a, p};
}
}  // namespace detail

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch Adam over `epochs` passes with word dropout active.
/// Deterministic for a fixed TrainConfig::seed.
template <class T>
TrainResult<T> train(const std::vector<EncodedCreative>& train_set, const ModelConfig& cfg,
                     const TrainConfig& tc, const std::vector<EncodedCreative>* validation = nullptr,
                     const EmbeddingTable* pretrained = nullptr, const EpochCallback& on_epoch = {}) {
  tc.validate();
  cfg.validate();
  if (train_set.empty()) throw ValidationError("empty training set");
  std::vector<EncodedCreative> retargeted;
  if (cfg.task == TaskKind::cvr) retargeted = with_cvr_targets(train_set);
  const auto& data = cfg.task == TaskKind::cvr ? retargeted : train_set;
  TrainResult<T> res{init_params<T>(cfg, derive_seed(tc.seed, 1), pretrained), {}};
  auto opt = AdamState<T>::for_params(res.params);
  std::mt19937_64 dropout_rng(derive_seed(tc.seed, 2));
  WordDropout wd{tc.word_dropout_p, &dropout_rng};
  ForwardState<T> st;
  Mat<T> dout;

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto batches = make_batches(data.size(), tc.batch_size, true,
                                      derive_seed(tc.seed, 100 + static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0;
    for (const auto& idx : batches) {
      const auto batch = collate<T>(data, idx);
      forward(res.params, batch, st, &wd);
      const T loss = batch_loss(st, batch, static_cast<T>(tc.lambda_click), &dout);
      if (!std::isfinite(static_cast<double>(loss))) {
        res.history.aborted = "non-finite loss in epoch " + std::to_string(epoch);
        log().error("training diverged: {}", *res.history.aborted);
        return res;
      }
      const auto grads = backward(res.params, batch, st, dout);
      adam_step(res.params, grads, opt, tc);
      ++res.history.optimizer_steps;
      loss_sum += static_cast<double>(loss) * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(data.size());
    if (validation && !validation->empty()) {
      const auto preds = predict(res.params, *validation);
      std::tie(rec.val_mse_all, rec.val_mse_cv_gt0) = detail::cv_mse(preds, *validation);
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log().debug("epoch {} loss {:.6f}", epoch, rec.train_loss);
    res.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

}  // namespace adcnet
