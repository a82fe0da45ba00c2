#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"
#include "xtrend/model.hpp"

using namespace xtrend;
using ad::Graph;
using ad::Mat;
using ad::Var;
using xtrend::testing::gradcheck;
using xtrend::testing::project;
using xtrend::testing::random_matrix;

namespace {

ModelConfig small_config(Variant v, ContextMode mode = ContextMode::FinalState) {
  ModelConfig c;
  c.d_h = 8;
  c.n_heads = 4;
  c.dropout = 0.0;
  c.variant = v;
  c.context_mode = mode;
  c.n_features = 3;
  c.n_categories = 5;
  c.quantiles = {0.1, 0.5, 0.9};
  return c;
}

SequenceBatch random_targets(Rng& rng, Eigen::Index batch, Eigen::Index steps, int features, bool with_static = true) {
  std::vector<Mat<double>> seqs;
  std::vector<int> cats;
  for (Eigen::Index b = 0; b < batch; ++b) {
    seqs.push_back(random_matrix(steps, features, rng));
    cats.push_back(static_cast<int>(b % 5));
  }
  return SequenceBatch::pack(seqs, with_static ? cats : std::vector<int>{});
}

ContextBatch random_contexts(Rng& rng, Eigen::Index targets, Eigen::Index set_size, Eigen::Index min_len,
                             Eigen::Index max_len, int features) {
  std::vector<Mat<double>> seqs;
  std::vector<int> cats;
  ContextBatch ctx;
  for (Eigen::Index i = 0; i < targets * set_size; ++i) {
    const Eigen::Index len = min_len + static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(max_len - min_len + 1)));
    seqs.push_back(random_matrix(len, features + 1, rng));
    cats.push_back(static_cast<int>(rng.index(5)));
    ctx.tickers.push_back("C" + std::to_string(i));
    std::vector<Date> dates;
    for (Eigen::Index t = 0; t < len; ++t) dates.push_back(Date::from_ymd(2001, 1, 1) + static_cast<int>(10 * i + t));
    ctx.dates.push_back(dates);
  }
  ctx.sequences = SequenceBatch::pack(seqs, cats);
  ctx.set_size = set_size;
  return ctx;
}

Mat<double> positions(const XTrendModel<double>& m, const SequenceBatch& tgt, const ContextBatch* ctx) {
  Graph<double> g(const_cast<ad::ParamStore<double>*>(&m.params()));
  auto res = m.forward(g, tgt, ctx);
  return g.value(res.position);
}

void set_zero(ad::ParamStore<double>& store, const std::string& prefix) {
  for (auto& p : store) {
    if (p.name.rfind(prefix, 0) == 0) p.value.setZero();
  }
}

}  // namespace

TEST(Encode, ZeroParametersCollapseToLayerNormBias) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe), 1);
  Rng rng(2);
  for (auto& p : m.params()) p.value.setZero();
  Mat<double> bias = random_matrix(1, 8, rng);
  m.params()["query.ln_out.bias"].value = bias;
  auto tgt = random_targets(rng, 3, 6, 3);
  Graph<double> g(&m.params());
  const auto out = g.value(m.encode(g, tgt));
  for (Eigen::Index r = 0; r < out.rows(); ++r) EXPECT_LT((out.row(r) - bias).norm(), 1e-12);
}

TEST(Encode, OutputAtStepIgnoresLaterInputs) {
  XTrendModel<double> m(small_config(Variant::Baseline), 3);
  Rng rng(4);
  auto tgt = random_targets(rng, 2, 8, 3);
  auto moved = tgt;
  for (Eigen::Index t = 5; t < 8; ++t) moved.features.row(t * 2 + 1).setConstant(9.0);
  Graph<double> g(&m.params());
  const auto a = g.value(m.encode(g, tgt));
  const auto b = g.value(m.encode(g, moved));
  EXPECT_LT((a.topRows(5 * 2) - b.topRows(5 * 2)).norm(), 1e-14);
  EXPECT_GT((a.bottomRows(3 * 2) - b.bottomRows(3 * 2)).norm(), 1e-6);
}

TEST(Encode, LaterOutputDependsOnFirstInput) {
  XTrendModel<double> m(small_config(Variant::Baseline), 5);
  Rng rng(6);
  auto tgt = random_targets(rng, 1, 6, 3);
  Graph<double> g(&m.params());
  const double base = g.value(m.encode(g, tgt))(5, 0);
  auto moved = tgt;
  moved.features(0, 0) += 1e-4;
  Graph<double> g2(&m.params());
  const double bumped = g2.value(m.encode(g2, moved))(5, 0);
  EXPECT_GT(std::abs(bumped - base), 1e-10);
}

TEST(Context, FinalStateModeUsesOneKeyPerContext) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe, ContextMode::FinalState), 7);
  Rng rng(8);
  auto tgt = random_targets(rng, 2, 5, 3);
  auto ctx = random_contexts(rng, 2, 10, 21, 21, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  EXPECT_EQ(g.attention_probs(res.cross_attention).cols(), 4 * 10);
  EXPECT_EQ(g.attention_probs(res.cross_attention).rows(), 2 * 5);
}

TEST(Context, PaddingBeyondSegmentEndIsIgnored) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe, ContextMode::CpdSegments), 9);
  Rng rng(10);
  auto tgt = random_targets(rng, 2, 4, 3);
  auto ctx = random_contexts(rng, 2, 3, 5, 21, 3);
  auto moved = ctx;
  for (Eigen::Index s = 0; s < moved.sequences.batch; ++s) {
    for (Eigen::Index t = moved.sequences.lengths[static_cast<std::size_t>(s)]; t < moved.sequences.steps; ++t)
      moved.sequences.features.row(t * moved.sequences.batch + s).setConstant(5.0);
  }
  EXPECT_LT((positions(m, tgt, &ctx) - positions(m, tgt, &moved)).norm(), 1e-14);
}

TEST(Context, TimeEquivalentNeedsTargetLength) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe, ContextMode::TimeEquivalent), 11);
  Rng rng(12);
  auto tgt = random_targets(rng, 2, 6, 3);
  auto bad = random_contexts(rng, 2, 3, 5, 5, 3);
  EXPECT_THROW(positions(m, tgt, &bad), ValidationError);
  auto good = random_contexts(rng, 2, 3, 6, 6, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &good);
  EXPECT_EQ(g.attention_probs(res.cross_attention).cols(), 4 * 3);
}

TEST(Context, TimeEquivalentStepAttendsToMatchingContextStep) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe, ContextMode::TimeEquivalent), 13);
  Rng rng(14);
  auto tgt = random_targets(rng, 1, 6, 3);
  auto ctx = random_contexts(rng, 1, 3, 6, 6, 3);
  auto moved = ctx;
  // change context inputs from step 4 on; target steps 0..3 only see context steps 0..3
  for (Eigen::Index t = 4; t < 6; ++t) moved.sequences.features.row(t * 3 + 1).array() += 2.0;
  const auto a = positions(m, tgt, &ctx), b = positions(m, tgt, &moved);
  EXPECT_LT((a.topRows(4) - b.topRows(4)).norm(), 1e-14);
  EXPECT_GT((a.bottomRows(2) - b.bottomRows(2)).norm(), 1e-8);
}

TEST(CrossAttention, SingleContextGetsWeightOne) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe), 15);
  Rng rng(16);
  auto tgt = random_targets(rng, 2, 4, 3);
  auto ctx = random_contexts(rng, 2, 1, 7, 7, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  EXPECT_TRUE((g.attention_probs(res.cross_attention).array() == 1.0).all());
}

TEST(CrossAttention, ZeroQueryWeightsGiveUniformWeights) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe), 17);
  set_zero(m.params(), "cross_att.q.");
  Rng rng(18);
  auto tgt = random_targets(rng, 2, 4, 3);
  auto ctx = random_contexts(rng, 2, 4, 3, 7, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  const auto& P = g.attention_probs(res.cross_attention);
  EXPECT_LT((P.array() - 0.25).abs().maxCoeff(), 1e-15);
}

TEST(CrossAttention, ContextOrderDoesNotMatter) {
  for (auto mode : {ContextMode::FinalState, ContextMode::TimeEquivalent}) {
    XTrendModel<double> m(small_config(Variant::XTrendG, mode), 19);
    Rng rng(20);
    auto tgt = random_targets(rng, 2, 5, 3);
    const Eigen::Index len = mode == ContextMode::TimeEquivalent ? 5 : 3;
    auto ctx = random_contexts(rng, 2, 4, len, mode == ContextMode::TimeEquivalent ? 5 : 7, 3);
    // reverse the contexts of every target
    std::vector<Mat<double>> seqs;
    std::vector<int> cats;
    const auto& cs = ctx.sequences;
    for (Eigen::Index b = 0; b < 2; ++b) {
      for (Eigen::Index c = 3; c >= 0; --c) {
        const Eigen::Index s = b * 4 + c;
        Mat<double> seq(cs.lengths[static_cast<std::size_t>(s)], 4);
        for (Eigen::Index t = 0; t < seq.rows(); ++t) seq.row(t) = cs.features.row(t * cs.batch + s);
        seqs.push_back(seq);
        cats.push_back(cs.categories[static_cast<std::size_t>(s)]);
      }
    }
    ContextBatch rev;
    rev.sequences = SequenceBatch::pack(seqs, cats);
    rev.set_size = 4;
    EXPECT_LT((positions(m, tgt, &ctx) - positions(m, tgt, &rev)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(CrossAttention, EmptyContextThrows) {
  XTrendModel<double> m(small_config(Variant::XTrendSharpe), 21);
  Rng rng(22);
  auto tgt = random_targets(rng, 1, 3, 3);
  EXPECT_THROW(positions(m, tgt, nullptr), ValidationError);
  ContextBatch empty;
  EXPECT_THROW(positions(m, tgt, &empty), ValidationError);
}

TEST(Decode, PositionsStrictlyInsideUnitInterval) {
  for (auto v : {Variant::Baseline, Variant::XTrendSharpe, Variant::XTrendG, Variant::XTrendQ}) {
    auto cfg = small_config(v);
    XTrendModel<double> m(cfg, 23);
    for (auto& p : m.params()) p.value *= 2.0;
    Rng rng(24);
    auto tgt = random_targets(rng, 3, 6, 3);
    auto ctx = random_contexts(rng, 3, 2, 3, 6, 3);
    const auto z = positions(m, tgt, &ctx);
    EXPECT_LT(z.cwiseAbs().maxCoeff(), 1.0) << to_string(v);
  }
}

TEST(Decode, ZeroPtpWeightsGiveFlatPosition) {
  XTrendModel<double> m(small_config(Variant::XTrendG), 25);
  set_zero(m.params(), "ptp.");
  Rng rng(26);
  auto tgt = random_targets(rng, 2, 4, 3);
  auto ctx = random_contexts(rng, 2, 2, 3, 5, 3);
  EXPECT_TRUE(positions(m, tgt, &ctx).isZero());
}

TEST(Decode, BaselineNeverReadsContext) {
  XTrendModel<double> m(small_config(Variant::Baseline), 27);
  Rng rng(28);
  auto tgt = random_targets(rng, 2, 5, 3);
  auto ctx = random_contexts(rng, 2, 3, 3, 5, 3);
  auto other = random_contexts(rng, 2, 3, 3, 5, 3);
  const auto a = positions(m, tgt, nullptr);
  EXPECT_EQ(a, positions(m, tgt, &ctx));
  EXPECT_EQ(a, positions(m, tgt, &other));
  for (const auto& p : m.params()) {
    EXPECT_EQ(p.name.find("cross"), std::string::npos);
    EXPECT_EQ(p.name.find("key."), std::string::npos);
  }
}

TEST(Heads, GaussianZeroWeights) {
  XTrendModel<double> m(small_config(Variant::XTrendG), 29);
  set_zero(m.params(), "head.");
  Rng rng(30);
  auto tgt = random_targets(rng, 2, 3, 3);
  auto ctx = random_contexts(rng, 2, 2, 3, 3, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  EXPECT_TRUE(g.value(res.mu).isZero());
  for (Eigen::Index i = 0; i < g.value(res.sigma).size(); ++i)
    EXPECT_NEAR(g.value(res.sigma).data()[i], std::log(2.0) + 1e-4, 1e-15);
  EXPECT_NEAR(std::log(2.0) + 1e-4, 0.6933, 1e-4);
}

TEST(Heads, SigmaAlwaysPositive) {
  XTrendModel<double> m(small_config(Variant::XTrendG), 31);
  m.params()["head.sigma.b"].value.setConstant(-80.0);
  Rng rng(32);
  auto tgt = random_targets(rng, 2, 3, 3);
  auto ctx = random_contexts(rng, 2, 2, 3, 3, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  EXPECT_GT(g.value(res.sigma).minCoeff(), 0.0);
}

TEST(Heads, QuantileOutputs) {
  EXPECT_EQ(kDefaultQuantiles.size(), 13u);
  EXPECT_EQ(kDefaultQuantiles.front(), 0.01);
  EXPECT_EQ(kDefaultQuantiles.back(), 0.99);
  auto cfg = small_config(Variant::XTrendQ);
  cfg.quantiles = kDefaultQuantiles;
  XTrendModel<double> m(cfg, 33);
  Rng rng(34);
  auto tgt = random_targets(rng, 2, 3, 3);
  auto ctx = random_contexts(rng, 2, 2, 3, 3, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  auto sorted = sort_quantiles(g.value(res.quantiles));
  EXPECT_EQ(sorted.cols(), 13);
  for (Eigen::Index r = 0; r < sorted.rows(); ++r) {
    for (Eigen::Index c = 1; c < sorted.cols(); ++c) EXPECT_LE(sorted(r, c - 1), sorted(r, c));
  }

  set_zero(m.params(), "head.quantiles");
  Graph<double> g2(&m.params());
  auto res2 = m.forward(g2, tgt, &ctx);
  EXPECT_TRUE(g2.value(res2.quantiles).isZero());

  cfg.quantiles = {0.5, 0.4};
  EXPECT_THROW(XTrendModel<double>(cfg, 1), ValidationError);
}

TEST(AttentionDump, UniformWeightsWithTwentyContexts) {
  auto cfg = small_config(Variant::XTrendSharpe);
  XTrendModel<double> m(cfg, 35);
  set_zero(m.params(), "cross_att.q.");
  Rng rng(36);
  auto tgt = random_targets(rng, 1, 3, 3);
  auto ctx = random_contexts(rng, 1, 20, 4, 9, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  std::vector<Date> tdates{Date::from_ymd(2020, 1, 1), Date::from_ymd(2020, 1, 2), Date::from_ymd(2020, 1, 3)};
  auto dump = m.attention_dump(g, res, tgt, ctx, {"T"}, {tdates});
  ASSERT_EQ(dump.size(), 3u * 5u);
  for (const auto& rec : dump) {
    ASSERT_EQ(rec.entries.size(), 20u);
    for (const auto& e : rec.entries) EXPECT_NEAR(e.weight, 0.05, 1e-12);
  }
}

TEST(AttentionDump, WeightsNormalizedSortedAndTraceable) {
  XTrendModel<double> m(small_config(Variant::XTrendQ), 37);
  Rng rng(38);
  auto tgt = random_targets(rng, 2, 3, 3);
  auto ctx = random_contexts(rng, 2, 6, 3, 8, 3);
  Graph<double> g(&m.params());
  auto res = m.forward(g, tgt, &ctx);
  auto dump = m.attention_dump(g, res, tgt, ctx, {}, {});
  for (const auto& rec : dump) {
    double total = 0;
    for (std::size_t i = 0; i < rec.entries.size(); ++i) {
      EXPECT_GE(rec.entries[i].weight, 0.0);
      if (i > 0) {
        EXPECT_GE(rec.entries[i - 1].weight, rec.entries[i].weight);
      }
      total += rec.entries[i].weight;
      EXPECT_FALSE(rec.entries[i].ctx_ticker.empty());
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_GE(rec.entries.front().weight, 1.0 / 6.0 - 1e-15);
  }
  ForwardResult<double> none;
  EXPECT_THROW(m.attention_dump(g, none, tgt, ctx, {}, {}), Error);
}

TEST(ZeroShot, TargetCategoryIgnoredContextCategoryUsed) {
  auto cfg = small_config(Variant::XTrendG);
  cfg.zero_shot = true;
  XTrendModel<double> m(cfg, 39);
  Rng rng(40);
  auto tgt = random_targets(rng, 2, 4, 3);
  auto ctx = random_contexts(rng, 2, 3, 3, 6, 3);
  auto other_target = tgt;
  other_target.categories = {4, 3};
  EXPECT_EQ(positions(m, tgt, &ctx), positions(m, other_target, &ctx));
  auto other_ctx = ctx;
  other_ctx.sequences.categories[0] = (other_ctx.sequences.categories[0] + 1) % 5;
  EXPECT_GT((positions(m, tgt, &ctx) - positions(m, tgt, &other_ctx)).norm(), 1e-9);
}

TEST(FullModel, GradientCheckEveryVariant) {
  for (auto v : {Variant::Baseline, Variant::XTrendSharpe, Variant::XTrendG, Variant::XTrendQ}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      auto cfg = small_config(v, seed == 1 ? ContextMode::TimeEquivalent : ContextMode::CpdSegments);
      XTrendModel<double> m(cfg, 100 + seed);
      Rng rng(200 + seed);
      for (auto& p : m.params()) p.value.array() += 0.1 * random_matrix(p.value.rows(), p.value.cols(), rng).array();
      auto tgt = random_targets(rng, 2, 3, 3);
      auto ctx = random_contexts(rng, 2, 2, seed == 1 ? 3 : 2, 3, 3);
      xtrend::testing::GradCheckOptions opt;
      opt.max_entries = 3;
      opt.seed = seed;
      auto res = gradcheck(&m.params(), {}, [&](Graph<double>& g, const std::vector<Var>&) {
        auto out = m.forward(g, tgt, &ctx);
        Var loss = project(g, out.position, 1);
        if (out.mu.valid()) loss = g.add(loss, g.add(project(g, out.mu, 2), project(g, out.sigma, 3)));
        if (out.quantiles.valid()) loss = g.add(loss, project(g, out.quantiles, 4));
        return loss;
      }, opt);
      EXPECT_LT(res.max_rel_error, 1e-4) << to_string(v) << " seed " << seed << ": " << res.worst;
    }
  }
}
