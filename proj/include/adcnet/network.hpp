#pragma once

// Dual-encoder conditional-attention regression network: parameters,
// per-item reference operations and the batched forward pass.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "adcnet/data.hpp"
#include "adcnet/error.hpp"

namespace adcnet {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
using IdMat = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class EncoderKind { mlp, gru };
enum class AttentionKind { vanilla, attention, conditional };
/// single: conversions only; multi: conversions and clicks; cvr: single output
/// trained directly on conversions / max(clicks, 1).
enum class TaskKind { single, multi, cvr };

inline std::string to_string(EncoderKind k) { return k == EncoderKind::gru ? "gru" : "mlp"; }
inline std::string to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::vanilla: return "vanilla";
    case AttentionKind::attention: return "attention";
    case AttentionKind::conditional: return "conditional";
  }
  return "?";
}
inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::single: return "single";
    case TaskKind::multi: return "multi";
    case TaskKind::cvr: return "cvr";
  }
  return "?";
}

inline EncoderKind parse_encoder(const std::string& s) {
  if (s == "gru") return EncoderKind::gru;
  if (s == "mlp") return EncoderKind::mlp;
  throw ValidationError("unknown encoder kind \"" + s + "\" (expected gru|mlp)");
}
inline AttentionKind parse_attention(const std::string& s) {
  if (s == "vanilla") return AttentionKind::vanilla;
  if (s == "attention") return AttentionKind::attention;
  if (s == "conditional") return AttentionKind::conditional;
  throw ValidationError("unknown attention kind \"" + s +
                        "\" (expected vanilla|attention|conditional)");
}
inline TaskKind parse_task(const std::string& s) {
  if (s == "single") return TaskKind::single;
  if (s == "multi") return TaskKind::multi;
  if (s == "cvr") return TaskKind::cvr;
  throw ValidationError("unknown task kind \"" + s + "\" (expected single|multi|cvr)");
}

enum Field : int { kTitle = 0, kDesc = 1 };
inline constexpr const char* kFieldNames[2] = {"title", "desc"};

struct ModelConfig {
  int vocab_size = 2;
  int d_w = 100;
  int u_title = 200;
  int u_desc = 200;
  int n_title = 20;
  int n_desc = 40;
  int d_genre = 20;
  int d_gender = 3;
  int d_a = 64;
  int hops = 1;
  int mlp_hidden = 200;
  EncoderKind encoder = EncoderKind::gru;
  AttentionKind attention = AttentionKind::conditional;
  TaskKind task = TaskKind::multi;
  bool attrs_to_words = false;

  int d_attr() const { return d_genre + d_gender; }
  int d_in() const { return d_w + (attrs_to_words ? d_attr() : 0); }
  int n(Field f) const { return f == kTitle ? n_title : n_desc; }
  /// Width of the per-position representation H for a field.
  int u(Field f) const {
    if (encoder == EncoderKind::mlp) return d_in();
    return f == kTitle ? u_title : u_desc;
  }
  bool has_attention() const { return attention != AttentionKind::vanilla; }
  bool conditional() const { return attention == AttentionKind::conditional; }
  int n_outputs() const { return task == TaskKind::multi ? 2 : 1; }

  /// Width of the field's block in the MLP input.
  int field_features(Field f) const {
    if (has_attention()) return hops * u(f);
    if (encoder == EncoderKind::mlp) return d_in();
    return n(f) * u(f);
  }
  /// MLP input width; for the vanilla GRU this is n(u_title + u_desc) + d_genre + d_gender.
  int d_pred_in() const { return field_features(kTitle) + field_features(kDesc) + d_attr(); }

  std::string variant_name() const {
    std::string s = to_string(encoder) + ":" + to_string(attention) + ":" + to_string(task);
    if (attrs_to_words) s += ":attrs";
    return s;
  }

  void validate() const {
    auto pos = [](int v, const char* name) {
      if (v < 1) throw ValidationError(std::string("model config: ") + name + " must be >= 1");
    };
    pos(d_w, "d_w");
    pos(u_title, "u_title");
    pos(u_desc, "u_desc");
    pos(n_title, "n_title");
    pos(n_desc, "n_desc");
    pos(d_genre, "d_genre");
    pos(d_gender, "d_gender");
    pos(d_a, "d_a");
    pos(hops, "hops");
    pos(mlp_hidden, "mlp_hidden");
    if (vocab_size < 2) throw ValidationError("model config: vocab_size must be >= 2");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Applies "encoder:attention:task[:attrs]" to a base configuration.
inline ModelConfig apply_variant(ModelConfig base, const std::string& spec) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : spec) {
    if (ch == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  if (parts.size() < 3 || parts.size() > 4)
    throw ValidationError("variant \"" + spec + "\" must look like encoder:attention:task[:attrs]");
  base.encoder = parse_encoder(parts[0]);
  base.attention = parse_attention(parts[1]);
  base.task = parse_task(parts[2]);
  base.attrs_to_words = false;
  if (parts.size() == 4) {
    if (parts[3] != "attrs") throw ValidationError("unknown variant suffix \"" + parts[3] + "\"");
    base.attrs_to_words = true;
  }
  return base;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_w", c.d_w},
                     {"u_title", c.u_title},       {"u_desc", c.u_desc},
                     {"n_title", c.n_title},       {"n_desc", c.n_desc},
                     {"d_genre", c.d_genre},       {"d_gender", c.d_gender},
                     {"d_a", c.d_a},               {"hops", c.hops},
                     {"mlp_hidden", c.mlp_hidden}, {"encoder", to_string(c.encoder)},
                     {"attention", to_string(c.attention)}, {"task", to_string(c.task)},
                     {"attrs_to_words", c.attrs_to_words}};
}

/// Missing keys keep their current values, so a partial object acts as an override.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("vocab_size", c.vocab_size);
  get("d_w", c.d_w);
  get("u_title", c.u_title);
  get("u_desc", c.u_desc);
  get("n_title", c.n_title);
  get("n_desc", c.n_desc);
  get("d_genre", c.d_genre);
  get("d_gender", c.d_gender);
  get("d_a", c.d_a);
  get("hops", c.hops);
  get("mlp_hidden", c.mlp_hidden);
  if (j.contains("encoder")) c.encoder = parse_encoder(j.at("encoder").get<std::string>());
  if (j.contains("attention")) c.attention = parse_attention(j.at("attention").get<std::string>());
  if (j.contains("task")) c.task = parse_task(j.at("task").get<std::string>());
  get("attrs_to_words", c.attrs_to_words);
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct GruParams {
  Mat<T> W_z, U_z, b_z;
  Mat<T> W_r, U_r, b_r;
  Mat<T> W_h, U_h, b_h;
};

template <class T>
struct FieldParams {
  GruParams<T> gru;
  Mat<T> W_s1;   // d_a x u
  Mat<T> W_s2;   // hops x d_a
  Mat<T> W_prj;  // n x (d_genre + d_gender)
};

struct TensorSpec {
  std::string name;
  int rows = 0;
  int cols = 0;
};

/// Every trainable tensor of a configuration, in canonical order.
inline std::vector<TensorSpec> tensor_specs(const ModelConfig& c) {
  std::vector<TensorSpec> out;
  out.push_back({"embeddings", c.vocab_size, c.d_w});
  for (Field f : {kTitle, kDesc}) {
    const std::string p = kFieldNames[f];
    const int u = c.u(f);
    if (c.encoder == EncoderKind::gru) {
      for (const char* g : {"z", "r", "h"}) {
        out.push_back({p + ".gru.W_" + g, u, c.d_in()});
        out.push_back({p + ".gru.U_" + g, u, u});
        out.push_back({p + ".gru.b_" + g, 1, u});
      }
    }
    if (c.has_attention()) {
      out.push_back({p + ".attn.W_s1", c.d_a, u});
      out.push_back({p + ".attn.W_s2", c.hops, c.d_a});
    }
    if (c.conditional()) out.push_back({p + ".attn.W_prj", c.n(f), c.d_attr()});
  }
  out.push_back({"mlp.W_1", c.mlp_hidden, c.d_pred_in()});
  out.push_back({"mlp.b_1", 1, c.mlp_hidden});
  out.push_back({"mlp.W_2", c.n_outputs(), c.mlp_hidden});
  out.push_back({"mlp.b_2", 1, c.n_outputs()});
  return out;
}

template <class T>
struct ModelParams {
  ModelConfig config;
  Mat<T> embeddings;  // vocab_size x d_w, row 0 (PAD) stays zero
  FieldParams<T> field[2];
  Mat<T> W_1, b_1, W_2, b_2;

  /// Tensors in tensor_specs() order.
  std::vector<std::pair<std::string, Mat<T>*>> tensors() {
    std::vector<std::pair<std::string, Mat<T>*>> out;
    out.emplace_back("embeddings", &embeddings);
    for (Field f : {kTitle, kDesc}) {
      const std::string p = kFieldNames[f];
      auto& fp = field[f];
      if (config.encoder == EncoderKind::gru) {
        auto& g = fp.gru;
        out.emplace_back(p + ".gru.W_z", &g.W_z);
        out.emplace_back(p + ".gru.U_z", &g.U_z);
        out.emplace_back(p + ".gru.b_z", &g.b_z);
        out.emplace_back(p + ".gru.W_r", &g.W_r);
        out.emplace_back(p + ".gru.U_r", &g.U_r);
        out.emplace_back(p + ".gru.b_r", &g.b_r);
        out.emplace_back(p + ".gru.W_h", &g.W_h);
        out.emplace_back(p + ".gru.U_h", &g.U_h);
        out.emplace_back(p + ".gru.b_h", &g.b_h);
      }
      if (config.has_attention()) {
        out.emplace_back(p + ".attn.W_s1", &fp.W_s1);
        out.emplace_back(p + ".attn.W_s2", &fp.W_s2);
      }
      if (config.conditional()) out.emplace_back(p + ".attn.W_prj", &fp.W_prj);
    }
    out.emplace_back("mlp.W_1", &W_1);
    out.emplace_back("mlp.b_1", &b_1);
    out.emplace_back("mlp.W_2", &W_2);
    out.emplace_back("mlp.b_2", &b_2);
    return out;
  }

  std::vector<std::pair<std::string, const Mat<T>*>> tensors() const {
    auto mut = const_cast<ModelParams*>(this)->tensors();
    std::vector<std::pair<std::string, const Mat<T>*>> out;
    out.reserve(mut.size());
    for (auto& [n, t] : mut) out.emplace_back(std::move(n), t);
    return out;
  }

  /// Same shapes as `cfg`, every entry zero.
  static ModelParams zeros(const ModelConfig& cfg) {
    ModelParams p;
    p.config = cfg;
    auto specs = tensor_specs(cfg);
    auto ts = p.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) *ts[i].second = Mat<T>::Zero(specs[i].rows, specs[i].cols);
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : tensors()) n += static_cast<std::size_t>(t->size());
    return n;
  }

  bool all_finite() const {
    for (auto& [name, t] : tensors())
      if (!t->allFinite()) return false;
    return true;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(config);
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
    return out;
  }
};

/// Xavier-uniform weights, zero biases, W_prj = 0.5 (so c = 1 at start),
/// N(0, 1) embeddings unless a pretrained table is supplied; PAD row zero.
template <class T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed,
                           const EmbeddingTable* pretrained = nullptr) {
  cfg.validate();
  if (pretrained && (pretrained->matrix.rows() != cfg.vocab_size ||
                     pretrained->matrix.cols() != cfg.d_w))
    throw ValidationError("pretrained embeddings are " + std::to_string(pretrained->matrix.rows()) +
                          "x" + std::to_string(pretrained->matrix.cols()) + ", model expects " +
                          std::to_string(cfg.vocab_size) + "x" + std::to_string(cfg.d_w));
  auto p = ModelParams<T>::zeros(cfg);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : p.tensors()) {
    if (name == "embeddings") {
      if (pretrained) {
        *t = pretrained->matrix.template cast<T>();
      } else {
        std::normal_distribution<double> nd(0.0, 1.0);
        for (Eigen::Index i = 0; i < t->rows(); ++i)
          for (Eigen::Index j = 0; j < t->cols(); ++j) (*t)(i, j) = static_cast<T>(nd(rng));
      }
      t->row(Vocabulary::kPad).setZero();
    } else if (name.ends_with("W_prj")) {
      t->setConstant(T(0.5));
    } else if (t->rows() == 1 && name.find(".b_") != std::string::npos) {
      t->setZero();
    } else {
      const double limit = std::sqrt(6.0 / static_cast<double>(t->rows() + t->cols()));
      std::uniform_real_distribution<double> ud(-limit, limit);
      for (Eigen::Index i = 0; i < t->rows(); ++i)
        for (Eigen::Index j = 0; j < t->cols(); ++j) (*t)(i, j) = static_cast<T>(ud(rng));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Per-item reference operations (column-vector convention, one creative at a time).

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

/// Input vectors x_t as columns (d_in x n). Masked positions are zero; with
/// attrs_to_words the attribute one-hots are appended to every real token.
template <class T>
Mat<T> embed_tokens(std::span<const int> ids, std::span<const std::uint8_t> mask,
                    std::span<const double> genre_onehot, std::span<const double> gender_onehot,
                    const ModelParams<T>& p) {
  const auto& cfg = p.config;
  Mat<T> X = Mat<T>::Zero(cfg.d_in(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (!mask[t]) continue;
    if (ids[t] < 0 || ids[t] >= cfg.vocab_size)
      throw ValidationError("token id " + std::to_string(ids[t]) + " outside vocabulary");
    const auto col = static_cast<Eigen::Index>(t);
    X.col(col).head(cfg.d_w) = p.embeddings.row(ids[t]).transpose();
    if (cfg.attrs_to_words) {
      Eigen::Index k = cfg.d_w;
      for (double v : genre_onehot) X(k++, col) = static_cast<T>(v);
      for (double v : gender_onehot) X(k++, col) = static_cast<T>(v);
    }
  }
  return X;
}

/// One GRU update: z, r gates, candidate with reset applied before U_h.
template <class T>
Vec<T> gru_step(const Vec<T>& x, const Vec<T>& h_prev, const GruParams<T>& g) {
  const Vec<T> z = (g.W_z * x + g.U_z * h_prev + g.b_z.transpose()).unaryExpr(&sigmoid<T>);
  const Vec<T> r = (g.W_r * x + g.U_r * h_prev + g.b_r.transpose()).unaryExpr(&sigmoid<T>);
  const Vec<T> cand =
      (g.W_h * x + g.U_h * r.cwiseProduct(h_prev) + g.b_h.transpose()).array().tanh().matrix();
  return (Vec<T>::Ones(z.size()) - z).cwiseProduct(h_prev) + z.cwiseProduct(cand);
}

/// Runs the GRU over columns of X (d_in x n). Masked steps carry the state and emit zero.
template <class T>
Mat<T> encode_sequence(const Mat<T>& X, std::span<const std::uint8_t> mask, const GruParams<T>& g) {
  const auto u = g.U_z.rows();
  Mat<T> H = Mat<T>::Zero(u, X.cols());
  Vec<T> h = Vec<T>::Zero(u);
  for (Eigen::Index t = 0; t < X.cols(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    h = gru_step<T>(X.col(t), h, g);
    H.col(t) = h;
  }
  return H;
}

/// Self-attention weights (hops x n): masked row-wise softmax of W_s2 tanh(W_s1 H).
template <class T>
Mat<T> attention_matrix(const Mat<T>& H, std::span<const std::uint8_t> mask, const Mat<T>& W_s1,
                        const Mat<T>& W_s2) {
  const Mat<T> scores = W_s2 * (W_s1 * H).array().tanh().matrix();
  Mat<T> A = Mat<T>::Zero(scores.rows(), scores.cols());
  for (Eigen::Index j = 0; j < scores.rows(); ++j) {
    T best = -std::numeric_limits<T>::infinity();
    for (Eigen::Index t = 0; t < scores.cols(); ++t)
      if (mask[static_cast<std::size_t>(t)]) best = std::max(best, scores(j, t));
    if (!std::isfinite(best)) throw RuntimeError("empty sequence");
    T total = 0;
    for (Eigen::Index t = 0; t < scores.cols(); ++t)
      if (mask[static_cast<std::size_t>(t)]) total += (A(j, t) = std::exp(scores(j, t) - best));
    A.row(j) /= total;
  }
  return A;
}

/// c = W_prj [genre ; gender].
template <class T>
Vec<T> conditional_vector(std::span<const double> genre_onehot, std::span<const double> gender_onehot,
                          const Mat<T>& W_prj) {
  Vec<T> x(static_cast<Eigen::Index>(genre_onehot.size() + gender_onehot.size()));
  Eigen::Index k = 0;
  for (double v : genre_onehot) x(k++) = static_cast<T>(v);
  for (double v : gender_onehot) x(k++) = static_cast<T>(v);
  return W_prj * x;
}

/// Scales every attention row element-wise by c (no renormalization).
template <class T>
Mat<T> apply_condition(const Mat<T>& A, const Vec<T>& c) {
  return A.array().rowwise() * c.transpose().array();
}

/// M = H A_cnd^T (u x hops).
template <class T>
Mat<T> pool_sentence(const Mat<T>& H, const Mat<T>& A_cnd) {
  return H * A_cnd.transpose();
}

// ---------------------------------------------------------------------------
// Batched forward pass

template <class T>
struct Batch {
  int size = 0;
  IdMat ids[2];      // B x n per field
  Mat<T> mask[2];    // B x n, 1 for real tokens
  Mat<T> attrs;      // B x (d_genre + d_gender)
  Vec<T> y_cv, y_click;
};

template <class T>
Batch<T> collate(const std::vector<EncodedCreative>& items, std::span<const std::size_t> idx) {
  Batch<T> b;
  b.size = static_cast<int>(idx.size());
  if (idx.empty()) return b;
  const auto& first = items[idx[0]];
  const Eigen::Index nt = static_cast<Eigen::Index>(first.title_ids.size());
  const Eigen::Index nd = static_cast<Eigen::Index>(first.desc_ids.size());
  const Eigen::Index dg = static_cast<Eigen::Index>(first.genre_onehot.size());
  const Eigen::Index ds = static_cast<Eigen::Index>(first.gender_onehot.size());
  b.ids[kTitle].resize(b.size, nt);
  b.ids[kDesc].resize(b.size, nd);
  b.mask[kTitle].resize(b.size, nt);
  b.mask[kDesc].resize(b.size, nd);
  b.attrs = Mat<T>::Zero(b.size, dg + ds);
  b.y_cv.resize(b.size);
  b.y_click.resize(b.size);
  for (int r = 0; r < b.size; ++r) {
    const auto& e = items[idx[static_cast<std::size_t>(r)]];
    if (static_cast<Eigen::Index>(e.title_ids.size()) != nt ||
        static_cast<Eigen::Index>(e.desc_ids.size()) != nd)
      throw ValidationError("batch items have inconsistent sequence lengths");
    for (Eigen::Index t = 0; t < nt; ++t) {
      b.ids[kTitle](r, t) = e.title_ids[static_cast<std::size_t>(t)];
      b.mask[kTitle](r, t) = static_cast<T>(e.title_mask[static_cast<std::size_t>(t)]);
    }
    for (Eigen::Index t = 0; t < nd; ++t) {
      b.ids[kDesc](r, t) = e.desc_ids[static_cast<std::size_t>(t)];
      b.mask[kDesc](r, t) = static_cast<T>(e.desc_mask[static_cast<std::size_t>(t)]);
    }
    for (Eigen::Index j = 0; j < dg; ++j) b.attrs(r, j) = static_cast<T>(e.genre_onehot[static_cast<std::size_t>(j)]);
    for (Eigen::Index j = 0; j < ds; ++j)
      b.attrs(r, dg + j) = static_cast<T>(e.gender_onehot[static_cast<std::size_t>(j)]);
    b.y_cv(r) = static_cast<T>(e.y_cv);
    b.y_click(r) = static_cast<T>(e.y_click);
  }
  return b;
}

template <class T>
Batch<T> collate(const std::vector<EncodedCreative>& items) {
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return collate<T>(items, idx);
}

/// Whole-vector dropout of input word embeddings with inverted scaling.
struct WordDropout {
  double p = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// Intermediate values of one field, kept for the backward pass.
/// Sequence tensors are stacked position-major: row t*B + b.
template <class T>
struct FieldCache {
  int n = 0, B = 0, u = 0, d_in = 0;
  int steps = 0;              // positions 0..steps-1 contain every unmasked token
  std::vector<char> active;   // per position: at least one unmasked item
  Mat<T> scale;               // B x n, dropout scale of each word vector (0 when masked)
  Mat<T> X;                   // (n*B) x d_in
  Mat<T> Z, R, C, Hprev;      // GRU gates, candidate and incoming state
  Mat<T> H;                   // (n*B) x u, zero at masked positions
  Mat<T> Ts;                  // (n*B) x d_a, tanh(H W_s1^T)
  std::vector<Mat<T>> A;      // per hop: B x n
  Mat<T> c;                   // B x n
  std::vector<Mat<T>> Acnd;   // per hop: B x n
  std::vector<Mat<T>> M;      // per hop: B x u
  Mat<T> mean;                // B x d_in (mlp encoder, vanilla)
  Vec<T> count;               // B
};

template <class T>
struct ForwardState {
  FieldCache<T> field[2];
  Mat<T> pre1, h1;  // B x hidden
  Mat<T> out;       // B x outputs (column 0 = cv, column 1 = click)
};

namespace detail {

template <class T>
void embed_field(const ModelParams<T>& p, const Batch<T>& batch, Field f, FieldCache<T>& fc,
                 const WordDropout* dropout) {
  const auto& cfg = p.config;
  const int B = batch.size, n = cfg.n(f), dw = cfg.d_w;
  fc.n = n;
  fc.B = B;
  fc.d_in = cfg.d_in();
  fc.u = cfg.u(f);
  const auto& mask = batch.mask[f];
  fc.active.assign(static_cast<std::size_t>(n), 0);
  fc.steps = 0;
  for (int t = 0; t < n; ++t)
    for (int b = 0; b < B; ++b)
      if (mask(b, t) != T(0)) {
        fc.active[static_cast<std::size_t>(t)] = 1;
        fc.steps = t + 1;
        break;
      }
  fc.scale = mask;
  if (dropout && dropout->p > 0.0) {
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    const T keep = static_cast<T>(1.0 / (1.0 - dropout->p));
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < n; ++t)
        if (mask(b, t) != T(0)) fc.scale(b, t) = ud(*dropout->rng) < dropout->p ? T(0) : keep;
  }
  fc.X = Mat<T>::Zero(static_cast<Eigen::Index>(n) * B, fc.d_in);
  const auto& ids = batch.ids[f];
  for (int t = 0; t < fc.steps; ++t) {
    for (int b = 0; b < B; ++b) {
      if (mask(b, t) == T(0)) continue;
      const auto row = static_cast<Eigen::Index>(t) * B + b;
      const int id = ids(b, t);
      if (id < 0 || id >= cfg.vocab_size)
        throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
      fc.X.row(row).head(dw) = p.embeddings.row(id) * fc.scale(b, t);
      if (cfg.attrs_to_words) fc.X.row(row).tail(cfg.d_attr()) = batch.attrs.row(b);
    }
  }
}

template <class T>
void run_gru(const GruParams<T>& g, const Batch<T>& batch, Field f, FieldCache<T>& fc) {
  const int B = fc.B, u = fc.u, n = fc.n;
  const Eigen::Index rows = static_cast<Eigen::Index>(n) * B;
  const Eigen::Index live = static_cast<Eigen::Index>(fc.steps) * B;
  fc.Z = Mat<T>::Zero(rows, u);
  fc.R = Mat<T>::Zero(rows, u);
  fc.C = Mat<T>::Zero(rows, u);
  fc.Hprev = Mat<T>::Zero(rows, u);
  fc.H = Mat<T>::Zero(rows, u);

  // Input projections of every live position at once.
  Mat<T> Wx(3 * u, fc.d_in);
  Wx << g.W_z, g.W_r, g.W_h;
  Mat<T> bias(1, 3 * u);
  bias << g.b_z, g.b_r, g.b_h;
  Mat<T> XW(live, 3 * u);
  XW.noalias() = fc.X.topRows(live) * Wx.transpose();
  XW.rowwise() += bias.row(0);

  Mat<T> Uzr(2 * u, u);
  Uzr << g.U_z, g.U_r;
  const auto& mask = batch.mask[f];
  Mat<T> h = Mat<T>::Zero(B, u);
  Mat<T> gates(B, 2 * u), q(B, u), cand(B, u);
  for (int t = 0; t < fc.steps; ++t) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(t) * B;
    fc.Hprev.middleRows(r0, B) = h;
    if (!fc.active[static_cast<std::size_t>(t)]) continue;
    gates = XW.block(r0, 0, B, 2 * u);
    gates.noalias() += h * Uzr.transpose();
    auto z = fc.Z.middleRows(r0, B);
    auto r = fc.R.middleRows(r0, B);
    z = gates.leftCols(u).unaryExpr(&sigmoid<T>);
    r = gates.rightCols(u).unaryExpr(&sigmoid<T>);
    q = r.cwiseProduct(h);
    cand = XW.block(r0, 2 * u, B, u);
    cand.noalias() += q * g.U_h.transpose();
    cand = cand.array().tanh().matrix();
    fc.C.middleRows(r0, B) = cand;
    for (int b = 0; b < B; ++b) {
      if (mask(b, t) == T(0)) continue;
      h.row(b) = (T(1) - z.row(b).array()) * h.row(b).array() + z.row(b).array() * cand.row(b).array();
      fc.H.row(r0 + b) = h.row(b);
    }
  }
  for (int t = fc.steps; t < n; ++t) fc.Hprev.middleRows(static_cast<Eigen::Index>(t) * B, B) = h;
}

template <class T>
void run_attention(const FieldParams<T>& fp, const ModelConfig& cfg, const Batch<T>& batch, Field f,
                   FieldCache<T>& fc) {
  const int B = fc.B, n = fc.n, hops = cfg.hops;
  const Eigen::Index live = static_cast<Eigen::Index>(fc.steps) * B;
  const auto& mask = batch.mask[f];
  fc.Ts = Mat<T>::Zero(static_cast<Eigen::Index>(n) * B, cfg.d_a);
  fc.Ts.topRows(live).noalias() = fc.H.topRows(live) * fp.W_s1.transpose();
  fc.Ts.topRows(live) = fc.Ts.topRows(live).array().tanh().matrix();
  const Mat<T> scores = fc.Ts.topRows(live) * fp.W_s2.transpose();  // live x hops

  fc.A.assign(static_cast<std::size_t>(hops), Mat<T>::Zero(B, n));
  for (int j = 0; j < hops; ++j) {
    auto& A = fc.A[static_cast<std::size_t>(j)];
    for (int b = 0; b < B; ++b) {
      T best = -std::numeric_limits<T>::infinity();
      for (int t = 0; t < fc.steps; ++t)
        if (mask(b, t) != T(0)) best = std::max(best, scores(static_cast<Eigen::Index>(t) * B + b, j));
      if (!std::isfinite(best)) throw RuntimeError("empty sequence");
      T total = 0;
      for (int t = 0; t < fc.steps; ++t)
        if (mask(b, t) != T(0))
          total += (A(b, t) = std::exp(scores(static_cast<Eigen::Index>(t) * B + b, j) - best));
      A.row(b) /= total;
    }
  }

  if (cfg.conditional())
    fc.c.noalias() = batch.attrs * fp.W_prj.transpose();
  else
    fc.c = Mat<T>::Ones(B, n);

  fc.Acnd.resize(static_cast<std::size_t>(hops));
  fc.M.assign(static_cast<std::size_t>(hops), Mat<T>::Zero(B, fc.u));
  for (int j = 0; j < hops; ++j) {
    auto& Acnd = fc.Acnd[static_cast<std::size_t>(j)];
    Acnd = fc.A[static_cast<std::size_t>(j)].cwiseProduct(fc.c);
    auto& M = fc.M[static_cast<std::size_t>(j)];
    for (int t = 0; t < fc.steps; ++t)
      M.array() += fc.H.middleRows(static_cast<Eigen::Index>(t) * B, B).array().colwise() *
                   Acnd.col(t).array();
  }
}

}  // namespace detail

/// Offset of a field's block inside the MLP input vector.
inline int feature_offset(const ModelConfig& cfg, Field f) {
  return f == kTitle ? 0 : cfg.field_features(kTitle);
}

/// Full forward pass over a batch. `dropout` is only passed while training.
template <class T>
void forward(const ModelParams<T>& p, const Batch<T>& batch, ForwardState<T>& st,
             const WordDropout* dropout = nullptr) {
  const auto& cfg = p.config;
  const int B = batch.size;
  if (B == 0) throw ValidationError("empty batch");
  if (batch.ids[kTitle].cols() != cfg.n_title || batch.ids[kDesc].cols() != cfg.n_desc ||
      batch.attrs.cols() != cfg.d_attr())
    throw ValidationError("batch shape does not match model config (n_title=" +
                          std::to_string(cfg.n_title) + ", n_desc=" + std::to_string(cfg.n_desc) +
                          ", attributes=" + std::to_string(cfg.d_attr()) + ")");

  st.pre1 = Mat<T>::Zero(B, cfg.mlp_hidden);
  st.pre1.rowwise() += p.b_1.row(0);
  for (Field f : {kTitle, kDesc}) {
    auto& fc = st.field[f];
    detail::embed_field(p, batch, f, fc, dropout);
    if (cfg.encoder == EncoderKind::gru)
      detail::run_gru(p.field[f].gru, batch, f, fc);
    else
      fc.H = fc.X;
    const int off = feature_offset(cfg, f);
    if (cfg.has_attention()) {
      detail::run_attention(p.field[f], cfg, batch, f, fc);
      for (int j = 0; j < cfg.hops; ++j)
        st.pre1.noalias() += fc.M[static_cast<std::size_t>(j)] *
                             p.W_1.middleCols(off + j * fc.u, fc.u).transpose();
    } else if (cfg.encoder == EncoderKind::gru) {
      for (int t = 0; t < fc.steps; ++t)
        st.pre1.noalias() += fc.H.middleRows(static_cast<Eigen::Index>(t) * B, B) *
                             p.W_1.middleCols(off + t * fc.u, fc.u).transpose();
    } else {
      fc.count = batch.mask[f].rowwise().sum();
      fc.mean = Mat<T>::Zero(B, fc.d_in);
      for (int t = 0; t < fc.steps; ++t) fc.mean += fc.X.middleRows(static_cast<Eigen::Index>(t) * B, B);
      for (int b = 0; b < B; ++b) fc.mean.row(b) /= std::max(fc.count(b), T(1));
      st.pre1.noalias() += fc.mean * p.W_1.middleCols(off, fc.d_in).transpose();
    }
  }
  const int attr_off = cfg.field_features(kTitle) + cfg.field_features(kDesc);
  st.pre1.noalias() += batch.attrs * p.W_1.middleCols(attr_off, cfg.d_attr()).transpose();
  st.h1 = st.pre1.cwiseMax(T(0));
  st.out.noalias() = st.h1 * p.W_2.transpose();
  st.out.rowwise() += p.b_2.row(0);
}

// ---------------------------------------------------------------------------
// Per-item predictions

/// Attention of one field for one creative.
struct AttentionMap {
  Eigen::MatrixXd A;      // hops x n
  Eigen::VectorXd c;      // n
  Eigen::MatrixXd A_cnd;  // hops x n
  Eigen::MatrixXd M;      // u x hops
};

/// For cvr-task models the single output is a direct CVR estimate held in
/// `cvr`, and y_cv_log stays 0.
struct Prediction {
  double y_cv_log = 0.0;
  std::optional<double> y_click_log;
  std::optional<double> cvr;
  std::optional<std::array<AttentionMap, 2>> attention;
};

template <class T>
std::vector<Prediction> predictions_from(const ModelParams<T>& p, const ForwardState<T>& st,
                                         bool with_attention) {
  const auto& cfg = p.config;
  const auto B = st.out.rows();
  std::vector<Prediction> out(static_cast<std::size_t>(B));
  for (Eigen::Index b = 0; b < B; ++b) {
    auto& pr = out[static_cast<std::size_t>(b)];
    if (cfg.task == TaskKind::cvr)
      pr.cvr = static_cast<double>(st.out(b, 0));
    else
      pr.y_cv_log = static_cast<double>(st.out(b, 0));
    if (cfg.task == TaskKind::multi) pr.y_click_log = static_cast<double>(st.out(b, 1));
    if (with_attention && cfg.has_attention()) {
      std::array<AttentionMap, 2> maps;
      for (Field f : {kTitle, kDesc}) {
        const auto& fc = st.field[f];
        auto& m = maps[f];
        m.A.resize(cfg.hops, fc.n);
        m.A_cnd.resize(cfg.hops, fc.n);
        m.M.resize(fc.u, cfg.hops);
        m.c = fc.c.row(b).transpose().template cast<double>();
        for (int j = 0; j < cfg.hops; ++j) {
          m.A.row(j) = fc.A[static_cast<std::size_t>(j)].row(b).template cast<double>();
          m.A_cnd.row(j) = fc.Acnd[static_cast<std::size_t>(j)].row(b).template cast<double>();
          m.M.col(j) = fc.M[static_cast<std::size_t>(j)].row(b).transpose().template cast<double>();
        }
      }
      pr.attention = std::move(maps);
    }
  }
  return out;
}

/// Inference over a whole encoded dataset, in chunks of `batch_size`.
template <class T>
std::vector<Prediction> predict(const ModelParams<T>& p, const std::vector<EncodedCreative>& items,
                                bool with_attention = false, int batch_size = 256) {
  std::vector<Prediction> out;
  out.reserve(items.size());
  ForwardState<T> st;
  for (const auto& idx : make_batches(items.size(), batch_size, false, 0)) {
    const auto batch = collate<T>(items, idx);
    forward(p, batch, st);
    auto part = predictions_from(p, st, with_attention);
    for (auto& pr : part) out.push_back(std::move(pr));
  }
  return out;
}

}  // namespace adcnet
