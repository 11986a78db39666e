#pragma once

// Synthetic creative corpora with planted, condition-dependent keyword
// effects. Counts follow clicks ~ Poisson, conversions ~ Binomial(clicks, p),
// so conversions never exceed clicks and most creatives convert zero times.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adcnet/data.hpp"
#include "adcnet/error.hpp"
#include "adcnet/training.hpp"

namespace adcnet {

enum class Placement { title_start, desc_start, title, description };

struct PlantedKeyword {
  std::string token;
  int genre = -1;   // -1 = any genre
  int gender = -1;  // -1 = any gender
  double click_lift = 0.0;
  double cv_lift = 0.0;
  double rate = 0.1;  // probability that a creative carries the keyword
  Placement placement = Placement::title_start;

  bool matches(int g, int d) const { return (genre < 0 || genre == g) && (gender < 0 || gender == d); }
};

/// Default keyword set: condition-specific conversion lifts, two at fixed field
/// openings and two anywhere in the description, plus unconditional click lifts
/// inside descriptions.
inline std::vector<PlantedKeyword> default_planted_keywords() {
  return {
      {"exclusive", -1, 1, 0.0, 1.2, 0.15, Placement::title_start},
      {"girls", -1, 2, 0.0, 1.2, 0.15, Placement::desc_start},
      {"slim", 1, -1, 0.0, 1.2, 0.15, Placement::description},
      {"supervised", 2, -1, 0.0, 1.2, 0.15, Placement::description},
      {"free", -1, -1, 1.0, 0.0, 0.20, Placement::description},
      {"million", -1, -1, 0.8, 0.0, 0.20, Placement::description},
      {"popular", -1, -1, 0.6, 0.0, 0.20, Placement::description},
      {"ranking", -1, -1, 0.5, 0.0, 0.20, Placement::description},
      {"new", -1, -1, -0.5, 0.0, 0.20, Placement::description},
  };
}

struct GeneratorConfig {
  int n_creatives = 14000;
  int n_campaigns = 1694;
  int vocab_size = 2000;
  int n_genres = 20;
  int n_genders = 3;
  std::vector<PlantedKeyword> planted_keywords = default_planted_keywords();
  double base_click_log_mean = 1.8;
  double base_click_log_std = 0.4;
  double genre_click_log_std = 1.5;
  double creative_click_log_std = 0.1;
  double base_cv_rate_logit = -3.5;
  double campaign_cv_logit_std = 0.1;
  int title_min = 3, title_max = 7;
  int desc_min = 6, desc_max = 12;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_creatives < 1 || n_campaigns < 1 || n_campaigns > n_creatives)
      throw ValidationError("generator: need 1 <= n_campaigns <= n_creatives");
    if (vocab_size < 1) throw ValidationError("generator: vocab_size must be >= 1");
    if (n_genres < 1) throw ValidationError("generator: n_genres must be >= 1");
    if (n_genders != 3) throw ValidationError("generator: n_genders must be 3");
    if (title_min < 1 || title_max < title_min || desc_min < 1 || desc_max < desc_min)
      throw ValidationError("generator: invalid length ranges");
    for (const auto& k : planted_keywords) {
      if (!std::isfinite(k.click_lift) || !std::isfinite(k.cv_lift))
        throw ValidationError("generator: non-finite lift for keyword " + k.token);
      if (k.genre >= n_genres || k.gender >= n_genders)
        throw ValidationError("generator: keyword " + k.token + " has an out-of-range condition");
      if (!(k.rate >= 0 && k.rate <= 1))
        throw ValidationError("generator: keyword rate must be in [0, 1]");
      if (k.token.empty() || !tokenize(k.token).size() || tokenize(k.token).size() != 1)
        throw ValidationError("generator: keyword must be a single token");
    }
  }
};

inline const char* placement_name(Placement p) {
  switch (p) {
    case Placement::title_start: return "title_start";
    case Placement::desc_start: return "desc_start";
    case Placement::title: return "title";
    case Placement::description: return "description";
  }
  return "?";
}

inline void to_json(nlohmann::json& j, const PlantedKeyword& k) {
  j = nlohmann::json{{"token", k.token},
                     {"genre", k.genre},
                     {"gender", k.gender},
                     {"click_lift", k.click_lift},
                     {"cv_lift", k.cv_lift},
                     {"rate", k.rate},
                     {"placement", placement_name(k.placement)}};
}

inline void from_json(const nlohmann::json& j, PlantedKeyword& k) {
  k.token = j.at("token").get<std::string>();
  if (j.contains("genre")) k.genre = j.at("genre").get<int>();
  if (j.contains("gender")) k.gender = j.at("gender").get<int>();
  if (j.contains("click_lift")) k.click_lift = j.at("click_lift").get<double>();
  if (j.contains("cv_lift")) k.cv_lift = j.at("cv_lift").get<double>();
  if (j.contains("rate")) k.rate = j.at("rate").get<double>();
  if (j.contains("placement")) {
    const auto p = j.at("placement").get<std::string>();
    if (p == "title_start")
      k.placement = Placement::title_start;
    else if (p == "desc_start")
      k.placement = Placement::desc_start;
    else if (p == "title")
      k.placement = Placement::title;
    else if (p == "description")
      k.placement = Placement::description;
    else
      throw ValidationError("unknown keyword placement \"" + p + "\"");
  }
}

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"n_creatives", c.n_creatives},
                     {"n_campaigns", c.n_campaigns},
                     {"vocab_size", c.vocab_size},
                     {"n_genres", c.n_genres},
                     {"n_genders", c.n_genders},
                     {"planted_keywords", c.planted_keywords},
                     {"base_click_log_mean", c.base_click_log_mean},
                     {"base_click_log_std", c.base_click_log_std},
                     {"genre_click_log_std", c.genre_click_log_std},
                     {"creative_click_log_std", c.creative_click_log_std},
                     {"base_cv_rate_logit", c.base_cv_rate_logit},
                     {"campaign_cv_logit_std", c.campaign_cv_logit_std},
                     {"title_min", c.title_min},
                     {"title_max", c.title_max},
                     {"desc_min", c.desc_min},
                     {"desc_max", c.desc_max},
                     {"zipf_exponent", c.zipf_exponent},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_creatives", c.n_creatives);
  get("n_campaigns", c.n_campaigns);
  get("vocab_size", c.vocab_size);
  get("n_genres", c.n_genres);
  get("n_genders", c.n_genders);
  get("planted_keywords", c.planted_keywords);
  get("base_click_log_mean", c.base_click_log_mean);
  get("base_click_log_std", c.base_click_log_std);
  get("genre_click_log_std", c.genre_click_log_std);
  get("creative_click_log_std", c.creative_click_log_std);
  get("base_cv_rate_logit", c.base_cv_rate_logit);
  get("campaign_cv_logit_std", c.campaign_cv_logit_std);
  get("title_min", c.title_min);
  get("title_max", c.title_max);
  get("desc_min", c.desc_min);
  get("desc_max", c.desc_max);
  get("zipf_exponent", c.zipf_exponent);
  get("seed", c.seed);
}

/// Expected-conversion multipliers of planted keywords per (genre, gender).
struct GroundTruthLift {
  double base_cv_rate_logit = 0.0;
  int n_genres = 0;
  std::vector<PlantedKeyword> keywords;

  /// exp(click_lift) * sigmoid(base + cv_lift [if condition matches]) / sigmoid(base);
  /// 1.0 for tokens that were not planted.
  double lift(const std::string& token, int genre, int gender) const {
    double out = 1.0;
    bool found = false;
    for (const auto& k : keywords) {
      if (k.token != token) continue;
      found = true;
      const double sb = 1.0 / (1.0 + std::exp(-base_cv_rate_logit));
      const double logit = base_cv_rate_logit + (k.matches(genre, gender) ? k.cv_lift : 0.0);
      out *= std::exp(k.click_lift) * (1.0 / (1.0 + std::exp(-logit))) / sb;
    }
    return found ? out : 1.0;
  }

  nlohmann::ordered_json to_json(const AttributeSchema& schema) const {
    nlohmann::ordered_json j;
    j["base_cv_rate_logit"] = base_cv_rate_logit;
    auto& kws = j["keywords"] = nlohmann::ordered_json::array();
    for (const auto& k : keywords) {
      nlohmann::ordered_json e;
      e["token"] = k.token;
      e["genre"] = k.genre < 0 ? std::string("any") : schema.genres.at(static_cast<std::size_t>(k.genre));
      e["gender"] = k.gender < 0 ? std::string("any")
                                 : std::string(kGenderLabels.at(static_cast<std::size_t>(k.gender)));
      e["click_lift"] = k.click_lift;
      e["cv_lift"] = k.cv_lift;
      kws.push_back(std::move(e));
    }
    auto& lifts = j["lifts"] = nlohmann::ordered_json::array();
    std::vector<std::string> seen;
    for (const auto& k : keywords) {
      if (std::find(seen.begin(), seen.end(), k.token) != seen.end()) continue;
      seen.push_back(k.token);
      for (int g = 0; g < n_genres; ++g)
        for (int d = 0; d < AttributeSchema::d_gender(); ++d) {
          nlohmann::ordered_json e;
          e["token"] = k.token;
          e["genre"] = schema.genres.at(static_cast<std::size_t>(g));
          e["gender"] = std::string(kGenderLabels.at(static_cast<std::size_t>(d)));
          e["lift"] = lift(k.token, g, d);
          lifts.push_back(std::move(e));
        }
    }
    return j;
  }
};

struct GeneratedCorpus {
  Dataset dataset;
  GroundTruthLift truth;
};

inline GeneratedCorpus generate_corpus(const GeneratorConfig& cfg) {
  cfg.validate();
  GeneratedCorpus out;
  out.dataset.schema = AttributeSchema::with_default_genres(cfg.n_genres);
  out.truth.base_cv_rate_logit = cfg.base_cv_rate_logit;
  out.truth.n_genres = cfg.n_genres;
  out.truth.keywords = cfg.planted_keywords;

  struct Campaign {
    int genre, gender;
    double click_base, cv_offset;
  };
  std::mt19937_64 crng(derive_seed(cfg.seed, 1));
  std::uniform_int_distribution<int> pick_genre(0, cfg.n_genres - 1), pick_gender(0, 2);
  std::normal_distribution<double> click_base(cfg.base_click_log_mean, cfg.base_click_log_std);
  std::normal_distribution<double> cv_offset(0.0, cfg.campaign_cv_logit_std);
  std::lognormal_distribution<double> size_weight(0.0, 0.75);
  // Evenly spaced genre offsets with the configured std, shuffled over genres,
  // so corpus-level statistics vary little between seeds.
  std::vector<double> genre_click(static_cast<std::size_t>(cfg.n_genres), 0.0);
  if (cfg.n_genres > 1) {
    const double half = cfg.genre_click_log_std * std::sqrt(3.0 * (cfg.n_genres - 1.0) / (cfg.n_genres + 1.0));
    for (int g = 0; g < cfg.n_genres; ++g)
      genre_click[static_cast<std::size_t>(g)] = half * (2.0 * g / (cfg.n_genres - 1.0) - 1.0);
    std::shuffle(genre_click.begin(), genre_click.end(), crng);
  }
  std::vector<Campaign> campaigns;
  std::vector<double> weights;
  for (int c = 0; c < cfg.n_campaigns; ++c) {
    Campaign k{pick_genre(crng), pick_gender(crng), 0, 0};
    k.click_base = click_base(crng) + genre_click[static_cast<std::size_t>(k.genre)];
    k.cv_offset = cv_offset(crng);
    campaigns.push_back(k);
    weights.push_back(size_weight(crng));
  }
  // Every campaign gets one creative; the rest follow skewed campaign weights.
  std::vector<int> owner(static_cast<std::size_t>(cfg.n_creatives));
  for (int i = 0; i < cfg.n_campaigns; ++i) owner[static_cast<std::size_t>(i)] = i;
  std::discrete_distribution<int> pick_campaign(weights.begin(), weights.end());
  for (int i = cfg.n_campaigns; i < cfg.n_creatives; ++i) owner[static_cast<std::size_t>(i)] = pick_campaign(crng);
  std::stable_sort(owner.begin(), owner.end());

  std::vector<double> zipf(static_cast<std::size_t>(cfg.vocab_size));
  for (int r = 0; r < cfg.vocab_size; ++r) zipf[static_cast<std::size_t>(r)] = 1.0 / std::pow(r + 1.0, cfg.zipf_exponent);
  const auto width = std::to_string(cfg.vocab_size - 1).size();
  auto filler_name = [&](int r) {
    auto s = std::to_string(r);
    return "w" + std::string(width - s.size(), '0') + s;
  };
  const auto cid_width = std::to_string(cfg.n_campaigns - 1).size();

  out.dataset.creatives.reserve(static_cast<std::size_t>(cfg.n_creatives));
  for (int i = 0; i < cfg.n_creatives; ++i) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 1000000 + static_cast<std::uint64_t>(i)));
    std::discrete_distribution<int> filler(zipf.begin(), zipf.end());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int ci = owner[static_cast<std::size_t>(i)];
    const auto& camp = campaigns[static_cast<std::size_t>(ci)];

    Creative c;
    const auto s = std::to_string(ci);
    c.campaign_id = "c" + std::string(cid_width - s.size(), '0') + s;
    c.genre = camp.genre;
    c.gender = camp.gender;
    std::uniform_int_distribution<int> tl(cfg.title_min, cfg.title_max), dl(cfg.desc_min, cfg.desc_max);
    const int n_title = tl(rng), n_desc = dl(rng);
    for (int t = 0; t < n_title; ++t) c.title.push_back(filler_name(filler(rng)));
    for (int t = 0; t < n_desc; ++t) c.description.push_back(filler_name(filler(rng)));

    double log_click = camp.click_base;
    double cv_logit = cfg.base_cv_rate_logit + camp.cv_offset;
    std::vector<std::string> title_open, desc_open;
    for (const auto& k : cfg.planted_keywords) {
      if (unit(rng) >= k.rate) continue;
      log_click += k.click_lift;
      if (k.matches(c.genre, c.gender)) cv_logit += k.cv_lift;
      if (k.placement == Placement::title_start) {
        title_open.push_back(k.token);
      } else if (k.placement == Placement::desc_start) {
        desc_open.push_back(k.token);
      } else {
        auto& field = k.placement == Placement::title ? c.title : c.description;
        std::uniform_int_distribution<std::size_t> pos(0, field.size());
        field.insert(field.begin() + static_cast<std::ptrdiff_t>(pos(rng)), k.token);
      }
    }
    c.title.insert(c.title.begin(), title_open.begin(), title_open.end());
    c.description.insert(c.description.begin(), desc_open.begin(), desc_open.end());

    std::normal_distribution<double> noise(0.0, cfg.creative_click_log_std);
    log_click += noise(rng);
    std::poisson_distribution<std::int64_t> clicks(std::exp(log_click));
    c.clicks = clicks(rng);
    std::binomial_distribution<std::int64_t> conv(c.clicks, 1.0 / (1.0 + std::exp(-cv_logit)));
    c.conversions = conv(rng);
    out.dataset.creatives.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct CorpusStats {
  std::size_t n = 0;
  double zero_conversion_fraction = 0.0;
  std::vector<std::size_t> click_histogram;  // bins: 0, 1, 2-3, 4-7, ... (powers of two)
  std::vector<std::size_t> cv_histogram;
  std::optional<double> pearson_r;           // empty when either variance is zero
  double mean_clicks = 0.0;
  double mean_conversions = 0.0;
};

inline std::size_t pow2_bin(std::int64_t x) {
  if (x <= 0) return 0;
  std::size_t b = 1;
  while ((std::int64_t{1} << b) <= x) ++b;
  return b;
}

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  if (x.size() < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

inline CorpusStats corpus_stats(const std::vector<Creative>& corpus) {
  if (corpus.empty()) throw ValidationError("corpus_stats: empty corpus");
  CorpusStats s;
  s.n = corpus.size();
  std::vector<double> clicks, cvs;
  std::size_t zeros = 0;
  for (const auto& c : corpus) {
    clicks.push_back(static_cast<double>(c.clicks));
    cvs.push_back(static_cast<double>(c.conversions));
    zeros += c.conversions == 0;
    const auto bc = pow2_bin(c.clicks), bv = pow2_bin(c.conversions);
    if (s.click_histogram.size() <= bc) s.click_histogram.resize(bc + 1, 0);
    if (s.cv_histogram.size() <= bv) s.cv_histogram.resize(bv + 1, 0);
    ++s.click_histogram[bc];
    ++s.cv_histogram[bv];
    s.mean_clicks += static_cast<double>(c.clicks);
    s.mean_conversions += static_cast<double>(c.conversions);
  }
  s.mean_clicks /= static_cast<double>(s.n);
  s.mean_conversions /= static_cast<double>(s.n);
  s.zero_conversion_fraction = static_cast<double>(zeros) / static_cast<double>(s.n);
  s.pearson_r = pearson(clicks, cvs);
  return s;
}

inline nlohmann::ordered_json stats_to_json(const CorpusStats& s) {
  nlohmann::ordered_json j;
  j["n"] = s.n;
  j["zero_conversion_fraction"] = s.zero_conversion_fraction;
  j["mean_clicks"] = s.mean_clicks;
  j["mean_conversions"] = s.mean_conversions;
  j["pearson_r"] = s.pearson_r ? nlohmann::ordered_json(*s.pearson_r) : nlohmann::ordered_json("n/a");
  j["click_histogram_pow2"] = s.click_histogram;
  j["cv_histogram_pow2"] = s.cv_histogram;
  return j;
}

}  // namespace adcnet
