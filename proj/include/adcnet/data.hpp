#pragma once

// Creative records, vocabulary, embedding files, target normalization,
// batching and campaign-grouped fold assignment.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "adcnet/error.hpp"
#include "adcnet/log.hpp"

namespace adcnet {

inline constexpr std::array<std::string_view, 3> kGenderLabels = {"all", "male", "female"};

inline std::string join_labels(const auto& labels) {
  std::string out;
  for (const auto& l : labels) {
    if (!out.empty()) out += ", ";
    out += '"';
    out += l;
    out += '"';
  }
  return out;
}

/// Categorical label sets for the two creative attributes.
struct AttributeSchema {
  std::vector<std::string> genres;

  int d_genre() const { return static_cast<int>(genres.size()); }
  static constexpr int d_gender() { return static_cast<int>(kGenderLabels.size()); }

  int genre_index(std::string_view label) const {
    auto it = std::find(genres.begin(), genres.end(), label);
    if (it == genres.end())
      throw ValidationError("unknown genre \"" + std::string(label) + "\"; valid labels: " +
                            join_labels(genres));
    return static_cast<int>(it - genres.begin());
  }

  static int gender_index(std::string_view label) {
    auto it = std::find(kGenderLabels.begin(), kGenderLabels.end(), label);
    if (it == kGenderLabels.end())
      throw ValidationError("unknown gender \"" + std::string(label) + "\"; valid labels: " +
                            join_labels(kGenderLabels));
    return static_cast<int>(it - kGenderLabels.begin());
  }

  static AttributeSchema with_default_genres(int n) {
    AttributeSchema s;
    for (int i = 0; i < n; ++i) s.genres.push_back("genre" + std::to_string(i));
    return s;
  }
};

struct Creative {
  std::string campaign_id;
  std::vector<std::string> title;
  std::vector<std::string> description;
  int genre = 0;
  int gender = 0;
  std::int64_t clicks = 0;
  std::int64_t conversions = 0;
};

struct Dataset {
  AttributeSchema schema;
  std::vector<Creative> creatives;
};

/// Whitespace tokenizer for pre-segmented text.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const auto is_space = [](char ch) {
    return ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Token table with PAD=0 and UNK=1. The reserved names contain a space, so
/// the whitespace tokenizer can never produce a colliding corpus token.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr std::string_view kPadToken = "<pad >";
  static constexpr std::string_view kUnkToken = "<unk >";

  Vocabulary() : tokens_{std::string(kPadToken), std::string(kUnkToken)} {}

  /// Rebuilds a vocabulary from an index-ordered token list (as stored in checkpoints).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken)
      throw ValidationError("vocabulary must start with the reserved PAD and UNK entries");
    Vocabulary v;
    for (std::size_t i = 2; i < tokens.size(); ++i) v.add(tokens[i]);
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token_of(int index) const { return tokens_.at(static_cast<std::size_t>(index)); }

  int index_of(std::string_view token) const {
    if (token == kPadToken) return kPad;
    if (token == kUnkToken) return kUnk;
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  void add(const std::string& token) {
    if (index_.count(token) || token == kPadToken || token == kUnkToken)
      throw ValidationError("duplicate vocabulary token \"" + token + "\"");
    index_.emplace(token, size());
    tokens_.push_back(token);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Frequency-ordered vocabulary over title and description tokens (one shared table).
inline Vocabulary build_vocab(const std::vector<Creative>& corpus, int min_count = 1) {
  if (corpus.empty()) throw ValidationError("empty corpus");
  if (min_count < 1) throw ValidationError("min_count must be >= 1");
  std::unordered_map<std::string, std::int64_t> counts;
  for (const auto& c : corpus) {
    for (const auto& t : c.title) ++counts[t];
    for (const auto& t : c.description) ++counts[t];
  }
  std::vector<std::pair<std::string, std::int64_t>> kept;
  for (auto& [tok, n] : counts)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary v;
  for (auto& [tok, n] : kept) v.add(tok);
  return v;
}

// ---------------------------------------------------------------------------
// Pretrained embeddings

struct EmbeddingTable {
  Eigen::MatrixXd matrix;          // V x d_w
  std::vector<bool> pretrained;    // per row
  double coverage = 0.0;           // fraction of non-reserved tokens found in the file
};

/// Reads the word2vec text format ("<count> <dim>" header, then "<token> v1 .. v_dim").
/// Tokens absent from the file are drawn from U[-0.5/d_w, 0.5/d_w].
inline EmbeddingTable load_embeddings(std::istream& in, const Vocabulary& vocab, int d_w,
                                      std::uint64_t seed = 0) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ValidationError("embedding file: missing header");
  ++line_no;
  {
    std::istringstream hs(line);
    long long count = 0, dim = 0;
    if (!(hs >> count >> dim) || count < 0 || dim <= 0)
      throw ValidationError("embedding file line 1: malformed header \"" + line + "\"");
    if (dim != d_w)
      throw ValidationError("dimension mismatch: file has " + std::to_string(dim) +
                            ", model expects " + std::to_string(d_w));
  }

  const int V = vocab.size();
  EmbeddingTable table;
  table.matrix = Eigen::MatrixXd::Zero(V, d_w);
  table.pretrained.assign(static_cast<std::size_t>(V), false);

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(d_w));
    std::string field;
    while (ls >> field) {
      char* end = nullptr;
      const double x = std::strtod(field.c_str(), &end);
      if (end != field.c_str() + field.size() || !std::isfinite(x))
        throw ValidationError("embedding file line " + std::to_string(line_no) +
                              ": malformed number \"" + field + "\"");
      values.push_back(x);
    }
    if (static_cast<int>(values.size()) != d_w)
      throw ValidationError("embedding file line " + std::to_string(line_no) + ": expected " +
                            std::to_string(d_w) + " values, got " + std::to_string(values.size()));
    if (!vocab.contains(token)) continue;
    const int row = vocab.index_of(token);
    for (int j = 0; j < d_w; ++j) table.matrix(row, j) = values[static_cast<std::size_t>(j)];
    table.pretrained[static_cast<std::size_t>(row)] = true;
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> init(-0.5 / d_w, 0.5 / d_w);
  int found = 0;
  for (int row = 2; row < V; ++row) {
    if (table.pretrained[static_cast<std::size_t>(row)]) {
      ++found;
      continue;
    }
    for (int j = 0; j < d_w; ++j) table.matrix(row, j) = init(rng);
  }
  table.matrix.row(Vocabulary::kPad).setZero();
  table.coverage = V > 2 ? static_cast<double>(found) / (V - 2) : 0.0;
  return table;
}

inline EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab, int d_w,
                                      std::uint64_t seed = 0) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open embedding file " + path);
  return load_embeddings(in, vocab, d_w, seed);
}

// ---------------------------------------------------------------------------
// Targets

inline double log_normalize(double count) { return std::log1p(count); }
inline double denormalize(double y) { return std::expm1(std::max(y, 0.0)); }

// ---------------------------------------------------------------------------
// Encoding

struct EncodedCreative {
  std::vector<std::int32_t> title_ids;
  std::vector<std::uint8_t> title_mask;
  std::vector<std::int32_t> desc_ids;
  std::vector<std::uint8_t> desc_mask;
  std::vector<double> genre_onehot;
  std::vector<double> gender_onehot;
  int genre = 0;
  int gender = 0;
  double y_cv = 0.0;
  double y_click = 0.0;
  std::int64_t clicks = 0;
  std::int64_t conversions = 0;
};

namespace detail {
inline void encode_field(const std::vector<std::string>& tokens, const Vocabulary& vocab, int n,
                         std::vector<std::int32_t>& ids, std::vector<std::uint8_t>& mask) {
  ids.assign(static_cast<std::size_t>(n), Vocabulary::kPad);
  mask.assign(static_cast<std::size_t>(n), 0);
  const std::size_t len = std::min(tokens.size(), static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < len; ++i) {
    ids[i] = vocab.index_of(tokens[i]);
    mask[i] = 1;
  }
}
}  // namespace detail

inline EncodedCreative encode_creative(const Creative& c, const Vocabulary& vocab,
                                       const AttributeSchema& schema, int n_title, int n_desc) {
  if (n_title < 1 || n_desc < 1) throw ValidationError("sequence lengths must be >= 1");
  if (c.genre < 0 || c.genre >= schema.d_genre())
    throw ValidationError("unknown genre index " + std::to_string(c.genre) +
                          "; valid labels: " + join_labels(schema.genres));
  if (c.gender < 0 || c.gender >= AttributeSchema::d_gender())
    throw ValidationError("unknown gender index " + std::to_string(c.gender) +
                          "; valid labels: " + join_labels(kGenderLabels));
  EncodedCreative e;
  detail::encode_field(c.title, vocab, n_title, e.title_ids, e.title_mask);
  detail::encode_field(c.description, vocab, n_desc, e.desc_ids, e.desc_mask);
  e.genre = c.genre;
  e.gender = c.gender;
  e.genre_onehot.assign(static_cast<std::size_t>(schema.d_genre()), 0.0);
  e.gender_onehot.assign(static_cast<std::size_t>(AttributeSchema::d_gender()), 0.0);
  e.genre_onehot[static_cast<std::size_t>(c.genre)] = 1.0;
  e.gender_onehot[static_cast<std::size_t>(c.gender)] = 1.0;
  e.y_cv = log_normalize(static_cast<double>(c.conversions));
  e.y_click = log_normalize(static_cast<double>(c.clicks));
  e.clicks = c.clicks;
  e.conversions = c.conversions;
  return e;
}

inline std::vector<EncodedCreative> encode_all(const std::vector<Creative>& cs,
                                               const Vocabulary& vocab,
                                               const AttributeSchema& schema, int n_title,
                                               int n_desc) {
  std::vector<EncodedCreative> out;
  out.reserve(cs.size());
  for (const auto& c : cs) out.push_back(encode_creative(c, vocab, schema, n_title, n_desc));
  return out;
}

// ---------------------------------------------------------------------------
// Batching and folds

using IndexBatches = std::vector<std::vector<std::size_t>>;

/// Splits [0, n) into consecutive batches, optionally after a seeded shuffle.
inline IndexBatches make_batches(std::size_t n, int batch_size, bool shuffle, std::uint64_t seed) {
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  IndexBatches out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

template <class Item>
IndexBatches make_batches(const std::vector<Item>& dataset, int batch_size, bool shuffle,
                          std::uint64_t seed) {
  return make_batches(dataset.size(), batch_size, shuffle, seed);
}

struct FoldAssignment {
  int k = 0;
  std::vector<int> fold;  // per creative

  std::vector<std::size_t> members(int f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold.size(); ++i)
      if (fold[i] == f) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> complement(int f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold.size(); ++i)
      if (fold[i] != f) out.push_back(i);
    return out;
  }
};

/// Campaign-disjoint k-fold split. Campaigns are shuffled by seed, stably sorted
/// by size (largest first) and each is placed in the currently smallest fold.
inline FoldAssignment group_kfold(const std::vector<std::string>& groups, int k,
                                  std::uint64_t seed) {
  if (k < 2) throw ValidationError("k must be >= 2");
  std::vector<std::string> names;
  std::unordered_map<std::string, std::size_t> size_of;
  for (const auto& g : groups)
    if (size_of[g]++ == 0) names.push_back(g);
  if (static_cast<int>(names.size()) < k)
    throw ValidationError("need at least " + std::to_string(k) + " campaigns for " +
                          std::to_string(k) + "-fold grouping, found " +
                          std::to_string(names.size()));
  std::mt19937_64 rng(seed);
  std::shuffle(names.begin(), names.end(), rng);
  std::stable_sort(names.begin(), names.end(),
                   [&](const auto& a, const auto& b) { return size_of[a] > size_of[b]; });

  std::vector<std::size_t> load(static_cast<std::size_t>(k), 0);
  std::unordered_map<std::string, int> fold_of;
  for (const auto& name : names) {
    const auto f = static_cast<int>(std::min_element(load.begin(), load.end()) - load.begin());
    fold_of[name] = f;
    load[static_cast<std::size_t>(f)] += size_of[name];
  }
  FoldAssignment out;
  out.k = k;
  out.fold.reserve(groups.size());
  for (const auto& g : groups) out.fold.push_back(fold_of[g]);
  return out;
}

inline FoldAssignment group_kfold(const std::vector<Creative>& dataset, int k, std::uint64_t seed) {
  std::vector<std::string> groups;
  groups.reserve(dataset.size());
  for (const auto& c : dataset) groups.push_back(c.campaign_id);
  return group_kfold(groups, k, seed);
}

template <class T>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines I/O

/// Parses one dataset line. Throws ValidationError naming the offending field.
inline Creative parse_creative(const nlohmann::json& j, const AttributeSchema& schema) {
  auto need = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw ValidationError(std::string("missing field \"") + key + "\"");
    return j.at(key);
  };
  Creative c;
  const auto& cid = need("campaign_id");
  c.campaign_id = cid.is_string() ? cid.get<std::string>() : cid.dump();
  c.title = tokenize(need("title").get<std::string>());
  c.description = tokenize(need("description").get<std::string>());
  if (c.title.empty()) throw ValidationError("empty title");
  if (c.description.empty()) throw ValidationError("empty description");
  c.genre = schema.genre_index(need("genre").get<std::string>());
  c.gender = AttributeSchema::gender_index(need("gender").get<std::string>());
  c.clicks = need("clicks").get<std::int64_t>();
  c.conversions = need("conversions").get<std::int64_t>();
  if (c.clicks < 0 || c.conversions < 0) throw ValidationError("negative count");
  return c;
}

inline nlohmann::ordered_json creative_to_json(const Creative& c, const AttributeSchema& schema) {
  nlohmann::ordered_json j;
  j["campaign_id"] = c.campaign_id;
  j["title"] = detokenize(c.title);
  j["description"] = detokenize(c.description);
  j["genre"] = schema.genres.at(static_cast<std::size_t>(c.genre));
  j["gender"] = std::string(kGenderLabels.at(static_cast<std::size_t>(c.gender)));
  j["clicks"] = c.clicks;
  j["conversions"] = c.conversions;
  return j;
}

/// Reads a JSON Lines dataset. The genre label set comes from a leading
/// {"genres": [...]} header line; otherwise from `fallback` if non-empty;
/// otherwise it is the sorted set of labels seen in the file.
inline Dataset read_dataset(std::istream& in, const AttributeSchema& fallback = {}) {
  std::vector<nlohmann::json> rows;
  std::vector<std::size_t> line_numbers;
  AttributeSchema schema;
  bool have_schema = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.is_object() && j.contains("genres") && !j.contains("campaign_id")) {
      schema.genres = j.at("genres").get<std::vector<std::string>>();
      have_schema = true;
      continue;
    }
    rows.push_back(std::move(j));
    line_numbers.push_back(line_no);
  }
  if (!have_schema) {
    if (!fallback.genres.empty()) {
      schema = fallback;
    } else {
      std::vector<std::string> seen;
      for (const auto& j : rows)
        if (j.contains("genre") && j.at("genre").is_string())
          seen.push_back(j.at("genre").get<std::string>());
      std::sort(seen.begin(), seen.end());
      seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
      schema.genres = seen;
    }
  }
  Dataset ds;
  ds.schema = schema;
  ds.creatives.reserve(rows.size());
  std::size_t inconsistent = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    try {
      ds.creatives.push_back(parse_creative(rows[i], schema));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("dataset line " + std::to_string(line_numbers[i]) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("dataset line " + std::to_string(line_numbers[i]) + ": " + e.what());
    }
    if (ds.creatives.back().conversions > ds.creatives.back().clicks) ++inconsistent;
  }
  if (inconsistent)
    log().warn("{} creatives report more conversions than clicks", inconsistent);
  return ds;
}

inline Dataset read_dataset(const std::string& path, const AttributeSchema& fallback = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset " + path);
  return read_dataset(in, fallback);
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  nlohmann::ordered_json header;
  header["genres"] = ds.schema.genres;
  out << header.dump() << '\n';
  for (const auto& c : ds.creatives) out << creative_to_json(c, ds.schema).dump() << '\n';
}

}  // namespace adcnet
