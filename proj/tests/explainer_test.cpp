#include <gtest/gtest.h>

#include <regex>

#include "adcnet/explainer.hpp"
#include "support.hpp"

using namespace adcnet;
using namespace adcnet::testing;

namespace {

struct Model {
  ModelParams<double> params;
  Vocabulary vocab;
  AttributeSchema schema = AttributeSchema::with_default_genres(4);
};

Model make(const std::string& variant = "gru:conditional:multi") {
  Model m;
  for (int i = 0; i < 10; ++i) m.vocab.add("tok" + std::to_string(i));
  auto cfg = apply_variant(small_config(), variant);
  cfg.vocab_size = m.vocab.size();
  m.params = init_params<double>(cfg, 5);
  randomize(m.params, 6);
  return m;
}

Creative sample(const std::string& title = "tok1 tok2 tok3", const std::string& desc = "tok4 tok5") {
  Creative c;
  c.title = tokenize(title);
  c.description = tokenize(desc);
  return c;
}

}  // namespace

TEST(Explain, UnitConditionGivesPlainAttention) {
  auto m = make();
  for (Field f : {kTitle, kDesc}) m.params.field[f].W_prj.setConstant(0.5);
  const auto c = sample();
  const auto r = explain(m.params, m.vocab, m.schema, c, {1, 2});
  auto enc = encode_creative(c, m.vocab, m.schema, m.params.config.n_title, m.params.config.n_desc);
  enc.genre = 1;
  std::fill(enc.genre_onehot.begin(), enc.genre_onehot.end(), 0.0);
  enc.genre_onehot[1] = 1.0;
  const auto pred = predict(m.params, std::vector<EncodedCreative>{enc}, true).front();
  const auto& A = (*pred.attention)[kTitle].A;
  ASSERT_EQ(r.title.tokens.size(), 3u);
  for (Eigen::Index t = 0; t < 3; ++t) EXPECT_EQ(r.title.tokens[static_cast<std::size_t>(t)].raw, A.col(t).maxCoeff());
}

TEST(Explain, DisplayNormalization) {
  const auto m = make();
  const auto r = explain(m.params, m.vocab, m.schema, sample("tok1", "tok2 tok3 tok4"), {0, 0});
  ASSERT_EQ(r.title.tokens.size(), 1u);
  EXPECT_EQ(r.title.tokens[0].display, 1.0);
  double top = 0;
  for (const auto& t : r.description.tokens) {
    EXPECT_GE(t.display, 0.0);
    EXPECT_LE(t.display, 1.0);
    top = std::max(top, t.display);
  }
  EXPECT_EQ(top, 1.0);
  EXPECT_TRUE(r.conversions.has_value());
  EXPECT_GE(*r.conversions, 0.0);
  EXPECT_TRUE(r.cvr.has_value());
}

TEST(Explain, TokenCountIsUnmaskedLength) {
  const auto m = make();
  // n_title is 4: the fifth title token is truncated away
  const auto r = explain(m.params, m.vocab, m.schema, sample("tok1 tok2 tok3 tok4 tok5", "tok1 unknownword"), {0, 1});
  EXPECT_EQ(r.title.tokens.size(), 4u);
  EXPECT_EQ(r.description.tokens.size(), 2u);
  EXPECT_EQ(r.description.tokens[1].token, "unknownword");
}

TEST(Explain, ScaleInvariantDisplay) {
  AttentionMap map;
  map.A_cnd = Mat<double>(1, 3);
  map.A_cnd << 0.2, -0.5, 0.1;
  const auto a = field_highlight({"a", "b", "c"}, map);
  map.A_cnd *= 7.0;
  const auto b = field_highlight({"a", "b", "c"}, map);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.tokens[i].display, b.tokens[i].display);
  EXPECT_EQ(a.tokens[1].raw, 0.5);
  map.A_cnd.setZero();
  const auto z = field_highlight({"a", "b", "c"}, map);
  EXPECT_TRUE(z.degenerate);
  for (const auto& t : z.tokens) EXPECT_EQ(t.display, 0.0);
}

TEST(Explain, HopsCollapseByMax) {
  AttentionMap map;
  map.A_cnd = Mat<double>(2, 2);
  map.A_cnd << 0.1, 0.9, 0.8, 0.2;
  const auto h = field_highlight({"a", "b"}, map);
  EXPECT_EQ(h.tokens[0].raw, 0.8);
  EXPECT_EQ(h.tokens[1].raw, 0.9);
}

TEST(Explain, VanillaModelRejected) {
  const auto m = make("gru:vanilla:multi");
  try {
    explain(m.params, m.vocab, m.schema, sample(), {0, 0});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(std::string(e.what()), "model has no attention");
  }
  const auto a = make();
  EXPECT_THROW(explain(a.params, a.vocab, a.schema, sample(), {9, 0}), ValidationError);
  EXPECT_THROW(explain(a.params, a.vocab, a.schema, sample(), {0, 3}), ValidationError);
}

TEST(WhatIf, ThreeGendersAndDedup) {
  const auto m = make();
  const auto c = sample();
  const auto rep = what_if(m.params, m.vocab, m.schema, c, {{2, 0}, {2, 1}, {2, 2}});
  ASSERT_EQ(rep.entries.size(), 3u);
  EXPECT_TRUE(rep.warnings.empty());
  for (int g = 0; g < 3; ++g) {
    EXPECT_EQ(rep.entries[static_cast<std::size_t>(g)].condition.gender, g);
    ASSERT_EQ(rep.entries[static_cast<std::size_t>(g)].title.tokens.size(), 3u);
    EXPECT_EQ(rep.entries[static_cast<std::size_t>(g)].title.tokens[2].token, "tok3");
  }
  bool differs = false;
  for (std::size_t t = 0; t < 3; ++t) differs = differs || rep.entries[0].title.tokens[t].raw != rep.entries[1].title.tokens[t].raw;
  EXPECT_TRUE(differs);

  const auto one = what_if(m.params, m.vocab, m.schema, c, {{1, 1}});
  const auto direct = explain(m.params, m.vocab, m.schema, c, {1, 1});
  EXPECT_EQ(report_to_json(one, m.schema)["entries"][0].dump(),
            report_to_json(HighlightReport{{direct}, {}}, m.schema)["entries"][0].dump());

  const auto dup = what_if(m.params, m.vocab, m.schema, c, {{1, 1}, {1, 1}});
  EXPECT_EQ(dup.entries.size(), 1u);
  EXPECT_EQ(dup.warnings.size(), 1u);
  EXPECT_THROW(what_if(m.params, m.vocab, m.schema, c, {}), ValidationError);
}

TEST(Export, JsonRoundTripsLosslessly) {
  const auto m = make();
  const auto rep = what_if(m.params, m.vocab, m.schema, sample(), {{0, 0}, {3, 2}});
  const auto j = report_to_json(rep, m.schema);
  EXPECT_EQ(j["version"], 1);
  EXPECT_EQ(j["entries"][1]["condition"]["genre"], "genre3");
  EXPECT_EQ(j["entries"][1]["condition"]["gender"], "female");
  const auto text = j.dump();
  EXPECT_EQ(nlohmann::ordered_json::parse(text).dump(), text);
  EXPECT_EQ(j["entries"][0]["title"]["tokens"][0]["display"].get<double>(), rep.entries[0].title.tokens[0].display);
}

TEST(Export, HtmlHasOneSpanPerTokenWithAlphaMapping) {
  HighlightReport rep;
  ConditionReport e;
  e.title.tokens = {{"<b>", 0.0, 0.0}, {"x", 1.0, 1.0}};
  e.description.tokens = {{"y", 0.5, 0.5}};
  rep.entries.push_back(e);
  const auto html = report_to_html(rep, AttributeSchema::with_default_genres(1));
  const std::regex span("<span class=\"tok\"");
  EXPECT_EQ(std::distance(std::sregex_iterator(html.begin(), html.end(), span), std::sregex_iterator()), 3);
  EXPECT_NE(html.find("rgba(255,99,71,0.000)\" title=\"0.000\">&lt;b&gt;</span>"), std::string::npos);
  EXPECT_NE(html.find("rgba(255,99,71,1.000)"), std::string::npos);
  EXPECT_EQ(html.find("<b>"), std::string::npos);
  EXPECT_EQ(html_escape("a&\"'"), "a&amp;&quot;&#39;");
}
