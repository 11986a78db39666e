#pragma once

// Test-only helpers: random encoded creatives and a central-difference
// gradient oracle that shares nothing with the analytic backward pass
// except the forward computation it differentiates.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "adcnet/network.hpp"
#include "adcnet/training.hpp"

namespace adcnet::testing {

inline ModelConfig small_config(AttentionKind attention = AttentionKind::conditional,
                                TaskKind task = TaskKind::multi) {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.d_w = 5;
  cfg.u_title = 8;
  cfg.u_desc = 8;
  cfg.n_title = 4;
  cfg.n_desc = 4;
  cfg.d_genre = 4;
  cfg.d_gender = 3;
  cfg.d_a = 6;
  cfg.hops = 2;
  cfg.mlp_hidden = 10;
  cfg.attention = attention;
  cfg.task = task;
  return cfg;
}

/// Random creatives with trailing padding; every field has at least one token.
inline std::vector<EncodedCreative> random_items(const ModelConfig& cfg, int count,
                                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(2, cfg.vocab_size - 1);
  std::uniform_int_distribution<int> genre(0, cfg.d_genre - 1), gender(0, cfg.d_gender - 1);
  std::uniform_int_distribution<int> clicks(0, 40);
  std::vector<EncodedCreative> out;
  for (int i = 0; i < count; ++i) {
    EncodedCreative e;
    auto fill = [&](int n, auto& ids, auto& mask) {
      std::uniform_int_distribution<int> len(1, n);
      const int L = len(rng);
      ids.assign(static_cast<std::size_t>(n), 0);
      mask.assign(static_cast<std::size_t>(n), 0);
      for (int t = 0; t < L; ++t) {
        ids[static_cast<std::size_t>(t)] = tok(rng);
        mask[static_cast<std::size_t>(t)] = 1;
      }
    };
    fill(cfg.n_title, e.title_ids, e.title_mask);
    fill(cfg.n_desc, e.desc_ids, e.desc_mask);
    e.genre = genre(rng);
    e.gender = gender(rng);
    e.genre_onehot.assign(static_cast<std::size_t>(cfg.d_genre), 0.0);
    e.gender_onehot.assign(static_cast<std::size_t>(cfg.d_gender), 0.0);
    e.genre_onehot[static_cast<std::size_t>(e.genre)] = 1.0;
    e.gender_onehot[static_cast<std::size_t>(e.gender)] = 1.0;
    e.clicks = clicks(rng);
    std::uniform_int_distribution<int> cv(0, static_cast<int>(e.clicks));
    e.conversions = cv(rng);
    e.y_click = std::log1p(static_cast<double>(e.clicks));
    e.y_cv = std::log1p(static_cast<double>(e.conversions));
    out.push_back(std::move(e));
  }
  return out;
}

/// Randomizes every parameter (including W_prj) so no coordinate sits at a special point.
template <class T>
void randomize(ModelParams<T>& p, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ud(-scale, scale);
  for (auto& [name, t] : p.tensors())
    for (Eigen::Index i = 0; i < t->size(); ++i) t->data()[i] = static_cast<T>(ud(rng));
  p.embeddings.row(Vocabulary::kPad).setZero();
}

/// A model over fields `extra` positions longer that computes the same function
/// as `p` on inputs with trailing padding. Parameters that the padding never
/// reaches are random.
template <class T>
ModelParams<T> widen(const ModelParams<T>& p, int extra, std::uint64_t seed) {
  const auto& cfg = p.config;
  auto wide_cfg = cfg;
  wide_cfg.n_title += extra;
  wide_cfg.n_desc += extra;
  auto q = init_params<T>(wide_cfg, seed);
  randomize(q, seed + 1);
  q.embeddings = p.embeddings;
  for (Field f : {kTitle, kDesc}) {
    q.field[f].gru = p.field[f].gru;
    q.field[f].W_s1 = p.field[f].W_s1;
    q.field[f].W_s2 = p.field[f].W_s2;
    if (cfg.conditional()) q.field[f].W_prj.topRows(cfg.n(f)) = p.field[f].W_prj;
  }
  q.b_1 = p.b_1;
  q.W_2 = p.W_2;
  q.b_2 = p.b_2;
  if (!cfg.has_attention() && cfg.encoder == EncoderKind::gru) {
    // vanilla: position blocks move, the extra blocks multiply zero features
    const int ut = cfg.u_title, ud = cfg.u_desc;
    q.W_1.leftCols(cfg.n_title * ut) = p.W_1.leftCols(cfg.n_title * ut);
    q.W_1.middleCols(wide_cfg.n_title * ut, cfg.n_desc * ud) = p.W_1.middleCols(cfg.n_title * ut, cfg.n_desc * ud);
    q.W_1.rightCols(cfg.d_attr()) = p.W_1.rightCols(cfg.d_attr());
  } else {
    q.W_1 = p.W_1;
  }
  return q;
}

/// Appends `extra` PAD positions to both fields of every item.
inline std::vector<EncodedCreative> pad_items(std::vector<EncodedCreative> items, int extra) {
  for (auto& e : items) {
    for (int i = 0; i < extra; ++i) {
      e.title_ids.push_back(0);
      e.title_mask.push_back(0);
      e.desc_ids.push_back(0);
      e.desc_mask.push_back(0);
    }
  }
  return items;
}

/// Per-item forward pass composed from the single-creative operations only.
/// `force_unit_c` replaces the learned conditional vector with ones.
template <class T>
Vec<T> reference_forward(const ModelParams<T>& p, const EncodedCreative& e, bool force_unit_c = false) {
  const auto& cfg = p.config;
  Vec<T> feats(cfg.d_pred_in());
  Eigen::Index k = 0;
  for (Field f : {kTitle, kDesc}) {
    const auto& ids = f == kTitle ? e.title_ids : e.desc_ids;
    const auto& mask = f == kTitle ? e.title_mask : e.desc_mask;
    const Mat<T> X = embed_tokens<T>(ids, mask, e.genre_onehot, e.gender_onehot, p);
    const Mat<T> H = cfg.encoder == EncoderKind::gru ? encode_sequence<T>(X, mask, p.field[f].gru) : X;
    if (cfg.has_attention()) {
      const auto& fp = p.field[f];
      const Mat<T> A = attention_matrix<T>(H, mask, fp.W_s1, fp.W_s2);
      Vec<T> c = Vec<T>::Ones(A.cols());
      if (cfg.conditional() && !force_unit_c) c = conditional_vector<T>(e.genre_onehot, e.gender_onehot, fp.W_prj);
      const Mat<T> M = pool_sentence<T>(H, apply_condition<T>(A, c));
      for (Eigen::Index j = 0; j < M.cols(); ++j) {
        feats.segment(k, M.rows()) = M.col(j);
        k += M.rows();
      }
    } else if (cfg.encoder == EncoderKind::gru) {
      for (Eigen::Index t = 0; t < H.cols(); ++t) {
        feats.segment(k, H.rows()) = H.col(t);
        k += H.rows();
      }
    } else {
      T count = 0;
      Vec<T> mean = Vec<T>::Zero(H.rows());
      for (Eigen::Index t = 0; t < H.cols(); ++t)
        if (mask[static_cast<std::size_t>(t)]) {
          mean += H.col(t);
          count += 1;
        }
      feats.segment(k, H.rows()) = mean / std::max(count, T(1));
      k += H.rows();
    }
  }
  for (double v : e.genre_onehot) feats(k++) = static_cast<T>(v);
  for (double v : e.gender_onehot) feats(k++) = static_cast<T>(v);
  const Vec<T> h1 = (p.W_1 * feats + p.b_1.transpose()).cwiseMax(T(0));
  return p.W_2 * h1 + p.b_2.transpose();
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_tensor;
  Eigen::Index worst_index = -1;
  std::size_t coordinates = 0;
};

/// Central differences over every coordinate of every tensor except the PAD row.
/// The perturbed losses are evaluated in extended precision so that round-off
/// in the loss (about eps * loss / h) stays far below the smallest gradients.
/// rel = |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheckReport finite_difference_check(const ModelParams<double>& params,
                                               const std::vector<EncodedCreative>& items,
                                               const TrainConfig& tc, std::uint64_t dropout_seed,
                                               double h = 1e-5, double floor = 1e-12) {
  using Ext = long double;
  const bool use_dropout = tc.word_dropout_p > 0;
  const auto batch = collate<double>(items);
  const auto ext_batch = collate<Ext>(items);
  auto loss_at = [&](const ModelParams<Ext>& p) {
    std::mt19937_64 rng(dropout_seed);
    ForwardState<Ext> st;
    WordDropout wd{tc.word_dropout_p, &rng};
    forward(p, ext_batch, st, use_dropout ? &wd : nullptr);
    return batch_loss(st, ext_batch, static_cast<Ext>(tc.lambda_click), static_cast<Mat<Ext>*>(nullptr));
  };
  std::mt19937_64 rng(dropout_seed);
  const auto analytic = compute_gradients(params, batch, tc, use_dropout ? &rng : nullptr);

  GradCheckReport rep;
  auto probe = params.template cast<Ext>();
  auto probe_tensors = probe.tensors();
  auto grad_tensors = analytic.grads.tensors();
  for (std::size_t k = 0; k < probe_tensors.size(); ++k) {
    auto& [name, t] = probe_tensors[k];
    const auto& g = *grad_tensors[k].second;
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      if (name == "embeddings" && i < t->cols()) continue;  // PAD row is frozen
      const Ext saved = t->data()[i];
      t->data()[i] = saved + h;
      const Ext up = loss_at(probe);
      t->data()[i] = saved - h;
      const Ext down = loss_at(probe);
      t->data()[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<Ext>(h)));
      const double a = g.data()[i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      ++rep.coordinates;
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_tensor = name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace adcnet::testing
