#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "adcnet/corpus.hpp"
#include "adcnet/evaluation.hpp"

using namespace adcnet;

namespace {

double dcg_of_order(const std::vector<double>& rel, const std::vector<std::size_t>& order) {
  double s = 0;
  for (std::size_t i = 0; i < order.size(); ++i) s += rel[order[i]] / std::log2(static_cast<double>(i) + 2.0);
  return s;
}

// Ideal DCG by trying every ordering.
double brute_idcg(const std::vector<double>& rel) {
  std::vector<std::size_t> p(rel.size());
  std::iota(p.begin(), p.end(), std::size_t{0});
  double best = 0;
  do best = std::max(best, dcg_of_order(rel, p));
  while (std::next_permutation(p.begin(), p.end()));
  return best;
}

}  // namespace

TEST(Mse, Examples) {
  const std::vector<double> y = {0.5, 0.0, 2.0};
  EXPECT_EQ(*mse_metric(y, y).value, 0.0);
  const std::vector<double> p = {1, 2}, t = {0, 0};
  EXPECT_EQ(*mse_metric(p, t).value, 2.5);
  const std::vector<double> zeros(3, 0.0);
  const auto r = mse_metric(zeros, y);
  EXPECT_EQ(*r.value, (0.25 + 0.0 + 4.0) / 3.0);
  EXPECT_EQ(*r.value, *r.zero_baseline);
  const auto pos = mse_metric(zeros, y, Subset::cv_positive);
  EXPECT_EQ(pos.count, 2u);
  EXPECT_EQ(*pos.value, (0.25 + 4.0) / 2.0);
  const std::vector<double> none = {0.0};
  EXPECT_FALSE(mse_metric(none, none, Subset::cv_positive).value.has_value());
  EXPECT_THROW(mse_metric(p, y), ValidationError);
}

TEST(Ndcg, WorkedExamples) {
  const std::vector<double> rel = {3, 2, 1};
  EXPECT_EQ(ndcg(rel, std::vector<double>{3, 2, 1}).value, 1.0);
  EXPECT_NEAR(ndcg(rel, std::vector<double>{1, 2, 3}).value, 0.79000, 1e-4);
  const auto z = ndcg(std::vector<double>{0, 0}, std::vector<double>{1, 2});
  EXPECT_EQ(z.value, 1.0);
  EXPECT_TRUE(z.degenerate);
  EXPECT_THROW(ndcg(std::vector<double>{}, std::vector<double>{}), ValidationError);
}

TEST(Ndcg, MatchesBruteForceOnAllPermutations) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> level(0, 3);
  for (std::size_t n = 1; n <= 6; ++n) {
    for (int trial = 0; trial < 3; ++trial) {
      std::vector<double> rel(n);
      for (auto& r : rel) r = std::log1p(static_cast<double>(level(rng) * level(rng)));
      const double idcg = brute_idcg(rel);
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      do {
        std::vector<double> scores(n);
        for (std::size_t i = 0; i < n; ++i) scores[perm[i]] = static_cast<double>(n - i);
        const double expect = idcg == 0 ? 1.0 : dcg_of_order(rel, perm) / idcg;
        ASSERT_NEAR(ndcg(rel, scores).value, expect, 1e-12);
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
  }
}

TEST(Ndcg, TiesKeepInputOrder) {
  const std::vector<double> rel = {0, 1};
  EXPECT_NEAR(ndcg(rel, std::vector<double>{5, 5}).value, (1.0 / std::log2(3.0)) / 1.0, 1e-15);
}

TEST(Ndcg, InvariantUnderMonotonicTransform) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  std::vector<double> rel(50), s(50), t(50);
  for (std::size_t i = 0; i < 50; ++i) {
    rel[i] = std::abs(nd(rng));
    s[i] = nd(rng);
    t[i] = std::exp(3 * s[i]) + 7;
  }
  EXPECT_EQ(ndcg(rel, s).value, ndcg(rel, t).value);
  const double v = ndcg(rel, s).value;
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0);
}

TEST(TopFraction, CountAndReduction) {
  EXPECT_EQ(top_fraction_count(300, 0.01), 3u);
  EXPECT_EQ(top_fraction_count(2800, 0.01), 28u);
  EXPECT_EQ(top_fraction_count(5, 0.01), 1u);
  EXPECT_EQ(top_fraction_count(3, 0.5), 2u);
  EXPECT_THROW(top_fraction_count(3, 0.0), ValidationError);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<double> rel(40), sc(40);
  for (std::size_t i = 0; i < 40; ++i) {
    rel[i] = std::floor(std::abs(nd(rng)) * 2);
    sc[i] = nd(rng);
  }
  const auto a = ndcg_top_fraction(rel, sc, 1.0), b = ndcg(rel, sc);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(a.degenerate, b.degenerate);
}

TEST(TopFraction, EqualRelevanceIsPerfect) {
  const std::vector<double> rel = {2, 2, 2, 0, 0};
  EXPECT_EQ(ndcg_top_fraction(rel, std::vector<double>{0, 1, 2, 9, 9}, 0.6).value, 1.0);
}

TEST(TopFraction, RestrictsToLargestRelevanceItems) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ud(0, 1);
  std::vector<double> rel(300), sc(300);
  for (std::size_t i = 0; i < 300; ++i) {
    rel[i] = ud(rng);
    sc[i] = ud(rng);
  }
  rel[10] = 9;
  rel[200] = 8;
  rel[55] = 7;
  // oracle: the three planted items, scored by their own predictions
  const std::vector<double> r3 = {9, 7, 8}, s3 = {sc[10], sc[55], sc[200]};
  EXPECT_NEAR(ndcg_top_fraction(rel, sc, 0.01).value, ndcg(r3, s3).value, 1e-15);
}

TEST(CvrEval, Examples) {
  const std::vector<std::int64_t> clicks = {2, 4}, conv = {0, 1};
  const auto deg = cvr_eval(std::vector<double>{1, 2}, std::vector<double>{1, 2}, clicks, conv);
  EXPECT_TRUE(deg.degenerate);
  EXPECT_EQ(deg.value, 1.0);

  const std::vector<std::int64_t> c2 = {2, 4}, v2 = {2, 0};
  // item 0 true CVR 1.0 (relevant), item 1 true CVR 0
  const double lc = std::log1p(1.0), lk = std::log1p(9.0);
  EXPECT_EQ(cvr_eval(std::vector<double>{lk, lc}, std::vector<double>{lk, lk}, c2, v2).value, 1.0);
  EXPECT_NEAR(cvr_eval(std::vector<double>{lc, lk}, std::vector<double>{lk, lk}, c2, v2).value, 0.6309, 1e-4);
  EXPECT_NEAR(cvr_eval_direct(std::vector<double>{0.1, 0.9}, c2, v2).value, 0.6309, 1e-4);

  const auto rel = cvr_relevance(std::vector<std::int64_t>{0, 10, 10}, std::vector<std::int64_t>{1, 5, 4}, 0.5);
  EXPECT_EQ(rel, (std::vector<double>{1, 1, 0}));
}

TEST(CvrEval, ZeroClickPredictionUsesFloor) {
  const std::vector<std::int64_t> clicks = {1, 1}, conv = {1, 0};
  // predicted clicks 0 for item 0: CVR = cv / 1e-6, ranked first
  const auto r = cvr_eval(std::vector<double>{std::log1p(0.5), std::log1p(0.1)}, std::vector<double>{-1.0, 0.0},
                          clicks, conv);
  EXPECT_EQ(r.value, 1.0);
}

TEST(Evaluate, ZeroBaselineEqualsMeanSquaredTarget) {
  std::vector<EncodedCreative> items(4);
  const std::int64_t cv[] = {0, 3, 0, 10}, cl[] = {5, 20, 0, 30};
  double s = 0, s_pos = 0;
  for (int i = 0; i < 4; ++i) {
    items[i].conversions = cv[i];
    items[i].clicks = cl[i];
    items[i].y_cv = std::log1p(static_cast<double>(cv[i]));
    items[i].y_click = std::log1p(static_cast<double>(cl[i]));
    s += items[i].y_cv * items[i].y_cv;
    if (cv[i] > 0) s_pos += items[i].y_cv * items[i].y_cv;
  }
  const auto r = evaluate_zero_baseline(items);
  EXPECT_EQ(*r.mse_all, s / 4);
  EXPECT_EQ(*r.mse_cv_gt0, s_pos / 2);
  EXPECT_EQ(*r.mse_all, *r.zero_mse_all);
  EXPECT_EQ(r.n_all, 4u);
  EXPECT_EQ(r.n_cv_gt0, 2u);
  EXPECT_EQ(r.n_top, 1u);
}

TEST(Evaluate, TaskKindsFillMetrics) {
  std::vector<EncodedCreative> items(3);
  for (int i = 0; i < 3; ++i) {
    items[i].clicks = 4;
    items[i].conversions = i;
    items[i].y_cv = std::log1p(static_cast<double>(i));
  }
  std::vector<Prediction> single(3);
  for (int i = 0; i < 3; ++i) single[i].y_cv_log = i;
  auto r = evaluate(single, items);
  EXPECT_TRUE(r.mse_all.has_value());
  EXPECT_FALSE(r.cvr_ndcg.has_value());
  EXPECT_EQ(*r.ndcg_all, 1.0);

  auto multi = single;
  for (auto& p : multi) p.y_click_log = std::log1p(4.0);
  r = evaluate(multi, items);
  EXPECT_EQ(*r.cvr_ndcg, 1.0);

  std::vector<Prediction> direct(3);
  for (int i = 0; i < 3; ++i) direct[i].cvr = i * 0.25;
  r = evaluate(direct, items);
  EXPECT_FALSE(r.mse_all.has_value());
  EXPECT_EQ(*r.cvr_ndcg, 1.0);
  EXPECT_EQ(r.n_cvr_relevant, 1u);
}

TEST(Tables, CsvJsonAndText) {
  MetricsTable t;
  MetricsRow row;
  row.variant = "gru:conditional:multi";
  EvalResult a, b;
  a.mse_all = 0.5;
  b.mse_all = 1.5;
  a.ndcg_top1pct = 0.9;
  b.ndcg_top1pct = 0.8;
  row.folds = {{0, 0, a}, {0, 1, b}};
  row.mean = mean_of(row.folds);
  t.rows.push_back(row);
  EXPECT_EQ(*row.mean.mse_all, 1.0);
  EXPECT_NEAR(*row.mean.ndcg_top1pct, 0.85, 1e-15);
  EXPECT_FALSE(row.mean.cvr_ndcg.has_value());

  const auto csv = to_csv(t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "variant,repeat,fold,mse_all,mse_cv_gt0,ndcg_all,ndcg_top1pct,cvr_ndcg,n_all,n_cv_gt0");
  EXPECT_NE(csv.find("gru:conditional:multi,mean,mean,1.000000,n/a"), std::string::npos);
  const auto j = to_json(t);
  EXPECT_EQ(j[0]["mean"]["cvr_ndcg"], "n/a");
  EXPECT_EQ(j[0]["folds"].size(), 2u);
  const auto text = to_text(t);
  EXPECT_NE(text.find("85.00"), std::string::npos);
  EXPECT_EQ(&t.row("gru:conditional:multi"), &t.rows[0]);
  EXPECT_THROW(t.row("x"), ValidationError);
}

TEST(SplitValidation, LastCampaignsByFirstAppearance) {
  std::vector<Creative> cs;
  for (int c = 0; c < 10; ++c) {
    Creative x;
    x.campaign_id = "c" + std::to_string(c);
    cs.push_back(x);
    cs.push_back(x);
  }
  std::vector<std::size_t> idx(cs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto [tr, va] = split_validation(cs, idx, 0.1);
  EXPECT_EQ(va, (std::vector<std::size_t>{18, 19}));
  EXPECT_EQ(tr.size(), 18u);
  EXPECT_TRUE(split_validation(cs, idx, 0.0).second.empty());
  EXPECT_THROW(split_validation(cs, idx, 1.0), ValidationError);
}

TEST(CrossValidate, HarnessContract) {
  GeneratorConfig g;
  g.n_creatives = 200;
  g.n_campaigns = 10;
  g.seed = 3;
  const auto ds = generate_corpus(g).dataset;
  ModelConfig cfg;
  cfg.d_w = 4;
  cfg.u_title = cfg.u_desc = 5;
  cfg.n_title = 8;
  cfg.n_desc = 14;
  cfg.d_a = 4;
  cfg.mlp_hidden = 6;
  auto cond = cfg, van = cfg;
  van.attention = AttentionKind::vanilla;
  TrainConfig tc;
  tc.epochs = 1;
  CvOptions opt;
  opt.k = 5;
  opt.seed = 8;

  const auto t1 = cross_validate(ds, {cond, van}, tc, opt);
  ASSERT_EQ(t1.rows.size(), 3u);
  EXPECT_EQ(t1.rows.back().variant, kZeroBaselineRow);
  for (const auto& row : t1.rows) EXPECT_EQ(row.folds.size(), 5u);

  std::size_t total = 0;
  for (const auto& f : t1.rows[0].folds) total += f.result.n_all;
  EXPECT_EQ(total, ds.creatives.size());

  const auto folds = group_kfold(ds.creatives, 5, derive_seed(opt.seed, 7));
  std::set<std::string> seen;
  for (int f = 0; f < 5; ++f) {
    std::set<std::string> here;
    for (auto i : folds.members(f)) here.insert(ds.creatives[i].campaign_id);
    for (const auto& c : here) EXPECT_TRUE(seen.insert(c).second);
  }

  auto opt2 = opt;
  opt2.threads = 3;
  const auto t2 = cross_validate(ds, {cond, van}, tc, opt2);
  EXPECT_EQ(to_csv(t1), to_csv(t2));

  const auto t3 = cross_validate(ds, {van}, tc, opt);
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_EQ(to_json(t3.rows.back().folds[i].result).dump(), to_json(t1.rows.back().folds[i].result).dump());
}
