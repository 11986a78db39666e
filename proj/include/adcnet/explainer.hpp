#pragma once

// Per-token conditional-attention highlights and what-if comparisons across
// target conditions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adcnet/data.hpp"
#include "adcnet/error.hpp"
#include "adcnet/log.hpp"
#include "adcnet/network.hpp"

namespace adcnet {

inline constexpr int kReportVersion = 1;

struct Condition {
  int genre = 0;
  int gender = 0;
  bool operator==(const Condition&) const = default;
};

struct TokenWeight {
  std::string token;
  double raw = 0.0;      // max over hops of |A_cnd|
  double display = 0.0;  // raw / max(raw) within the field
};

struct FieldHighlight {
  std::vector<TokenWeight> tokens;
  bool degenerate = false;  // every raw weight is 0
};

struct ConditionReport {
  Condition condition;
  std::optional<double> conversions;
  std::optional<double> clicks;
  std::optional<double> cvr;
  std::optional<double> y_cv_log;
  std::optional<double> y_click_log;
  FieldHighlight title;
  FieldHighlight description;
};

struct HighlightReport {
  std::vector<ConditionReport> entries;
  std::vector<std::string> warnings;
};

/// Raw and display weights for one field of one item.
inline FieldHighlight field_highlight(const std::vector<std::string>& tokens, const AttentionMap& map) {
  FieldHighlight fh;
  const auto n = std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(map.A_cnd.cols()));
  double top = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    TokenWeight w;
    w.token = tokens[t];
    w.raw = map.A_cnd.col(static_cast<Eigen::Index>(t)).cwiseAbs().maxCoeff();
    top = std::max(top, w.raw);
    fh.tokens.push_back(std::move(w));
  }
  fh.degenerate = !(top > 0);
  for (auto& w : fh.tokens) w.display = fh.degenerate ? 0.0 : w.raw / top;
  return fh;
}

/// Denormalized estimates from a prediction: conversions and clicks clamped
/// at 0, CVR derived as conversions / max(clicks, 1e-6).
inline void fill_estimates(const Prediction& p, ConditionReport& r) {
  if (p.cvr) {
    r.cvr = std::max(*p.cvr, 0.0);
    return;
  }
  r.y_cv_log = p.y_cv_log;
  r.conversions = denormalize(p.y_cv_log);
  if (p.y_click_log) {
    r.y_click_log = *p.y_click_log;
    r.clicks = denormalize(*p.y_click_log);
    r.cvr = *r.conversions / std::max(*r.clicks, 1e-6);
  }
}

/// Forward pass of `creative` under `cond`, with highlights.
template <class T>
ConditionReport explain(const ModelParams<T>& params, const Vocabulary& vocab, const AttributeSchema& schema,
                        Creative creative, const Condition& cond) {
  const auto& cfg = params.config;
  if (!cfg.has_attention()) throw ValidationError("model has no attention");
  if (cond.genre < 0 || cond.genre >= schema.d_genre()) throw ValidationError("genre index out of range");
  if (cond.gender < 0 || cond.gender >= AttributeSchema::d_gender()) throw ValidationError("gender index out of range");
  if (creative.title.empty() || creative.description.empty())
    throw ValidationError("title and description must be non-empty");
  creative.genre = cond.genre;
  creative.gender = cond.gender;
  const auto enc = encode_creative(creative, vocab, schema, cfg.n_title, cfg.n_desc);
  const auto pred = predict(params, std::vector<EncodedCreative>{enc}, true).front();
  ConditionReport r;
  r.condition = cond;
  fill_estimates(pred, r);
  r.title = field_highlight(creative.title, (*pred.attention)[kTitle]);
  r.description = field_highlight(creative.description, (*pred.attention)[kDesc]);
  return r;
}

/// One explain entry per distinct condition, in request order. Repeated
/// conditions are dropped with a warning.
template <class T>
HighlightReport what_if(const ModelParams<T>& params, const Vocabulary& vocab, const AttributeSchema& schema,
                        const Creative& creative, const std::vector<Condition>& conditions) {
  if (conditions.empty()) throw ValidationError("at least one condition is required");
  HighlightReport rep;
  std::vector<Condition> seen;
  for (const auto& c : conditions) {
    if (std::find(seen.begin(), seen.end(), c) != seen.end()) {
      const auto msg = "duplicate condition (" + schema.genres.at(static_cast<std::size_t>(c.genre)) + ", " +
                       std::string(kGenderLabels.at(static_cast<std::size_t>(c.gender))) + ") ignored";
      log().warn("{}", msg);
      rep.warnings.push_back(msg);
      continue;
    }
    seen.push_back(c);
    rep.entries.push_back(explain(params, vocab, schema, creative, c));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Export

inline nlohmann::ordered_json to_json(const FieldHighlight& f) {
  nlohmann::ordered_json j;
  j["degenerate"] = f.degenerate;
  auto& toks = j["tokens"] = nlohmann::ordered_json::array();
  for (const auto& t : f.tokens) toks.push_back({{"token", t.token}, {"raw", t.raw}, {"display", t.display}});
  return j;
}

inline nlohmann::ordered_json report_to_json(const HighlightReport& rep, const AttributeSchema& schema) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  nlohmann::ordered_json j;
  j["version"] = kReportVersion;
  auto& entries = j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : rep.entries) {
    nlohmann::ordered_json x;
    x["condition"] = {{"genre", schema.genres.at(static_cast<std::size_t>(e.condition.genre))},
                      {"gender", std::string(kGenderLabels.at(static_cast<std::size_t>(e.condition.gender)))}};
    x["prediction"] = {{"conversions", opt(e.conversions)},
                       {"clicks", opt(e.clicks)},
                       {"cvr", opt(e.cvr)},
                       {"log_space", {{"cv", opt(e.y_cv_log)}, {"click", opt(e.y_click_log)}}}};
    x["title"] = to_json(e.title);
    x["description"] = to_json(e.description);
    entries.push_back(std::move(x));
  }
  j["warnings"] = rep.warnings;
  return j;
}

inline std::string html_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += ch;
    }
  }
  return out;
}

/// Standalone page; each token is a span whose background alpha equals its
/// display weight.
inline std::string report_to_html(const HighlightReport& rep, const AttributeSchema& schema) {
  std::ostringstream os;
  auto num = [](const std::optional<double>& v) {
    if (!v) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return std::string(buf);
  };
  os << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Attention highlights</title>\n"
     << "<style>body{font-family:sans-serif;margin:2em}.tok{padding:2px 3px;margin:1px;border-radius:3px;"
        "display:inline-block}section{margin-bottom:1.5em}.note{color:#888;font-size:small}</style>\n"
     << "</head><body>\n";
  for (const auto& e : rep.entries) {
    os << "<section><h2>" << html_escape(schema.genres.at(static_cast<std::size_t>(e.condition.genre))) << " / "
       << kGenderLabels.at(static_cast<std::size_t>(e.condition.gender)) << "</h2>\n"
       << "<p>conversions " << num(e.conversions) << ", clicks " << num(e.clicks) << ", CVR " << num(e.cvr)
       << "</p>\n";
    for (const auto* f : {&e.title, &e.description}) {
      os << "<p>";
      for (const auto& t : f->tokens) {
        char alpha[16];
        std::snprintf(alpha, sizeof alpha, "%.3f", t.display);
        os << "<span class=\"tok\" style=\"background-color:rgba(255,99,71," << alpha << ")\" title=\"" << alpha
           << "\">" << html_escape(t.token) << "</span>";
      }
      if (f->degenerate) os << " <span class=\"note\">(no attention mass)</span>";
      os << "</p>\n";
    }
    os << "</section>\n";
  }
  os << "</body></html>\n";
  return os.str();
}

}  // namespace adcnet
