#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "xtrend/gp_harness.hpp"

namespace xtrend {
namespace {

std::vector<std::string> param_names(const ad::ParamStore<double>& store) {
  std::vector<std::string> out;
  for (const auto& p : store) out.push_back(p.name);
  return out;
}

GpHarnessConfig tiny_config() {
  GpHarnessConfig cfg;
  cfg.context_sizes = {2};
  cfg.n_seeds = 2;
  cfg.d_h = 8;
  cfg.n_heads = 2;
  cfg.steps = 3;
  cfg.batch = 4;
  cfg.eval_episodes = 16;
  cfg.seed = 5;
  return cfg;
}

TEST(GpEpisodeSampler, LayoutFollowsTheGrid) {
  GpHarnessConfig cfg;
  GpEpisodeSampler sampler(cfg);
  ASSERT_EQ(sampler.grid().size(), 81u);
  Rng t(1), c(2);
  const auto ep = sampler.sample(5, 6, t, c);
  ASSERT_EQ(ep.target.batch, 5);
  ASSERT_EQ(ep.target.steps, cfg.target_length);
  ASSERT_TRUE(ep.context.has_value());
  EXPECT_EQ(ep.context->set_size, 6);
  const auto& tf = ep.target.features;
  for (Eigen::Index b = 0; b < 5; ++b) {
    for (Eigen::Index k = 1; k < ep.target.steps; ++k) {
      EXPECT_NEAR(tf(k * 5 + b, 0) - tf((k - 1) * 5 + b, 0), cfg.dx, 1e-12);
      // the next observation of step k-1 is the input of step k
      EXPECT_EQ(ep.next[static_cast<std::size_t>((k - 1) * 5 + b)], tf(k * 5 + b, 1));
    }
  }
  const auto& cs = ep.context->sequences;
  for (Eigen::Index s = 0; s < cs.batch; ++s) {
    const int len = cs.lengths[static_cast<std::size_t>(s)];
    EXPECT_GE(len, cfg.context_min);
    EXPECT_LE(len, cfg.context_max);
    for (int k = 1; k < len; ++k) EXPECT_EQ(cs.features((k - 1) * cs.batch + s, 2), cs.features(k * cs.batch + s, 1));
  }
}

TEST(GpEpisodeSampler, TargetsIndependentOfContextSize) {
  GpEpisodeSampler sampler(GpHarnessConfig{});
  Rng t1(3), c1(4), t2(3), c2(9);
  const auto a = sampler.sample(4, 2, t1, c1);
  const auto b = sampler.sample(4, 10, t2, c2);
  EXPECT_EQ(a.target.features, b.target.features);
  EXPECT_EQ(a.next, b.next);
}

TEST(GpEpisodeSampler, UnconditionalMeanMseIsPriorPlusNoiseVariance) {
  // Monte Carlo oracle: E[y^2] = amplitude + noise variance = 2 for a zero-mean draw
  GpHarnessConfig cfg;
  GpEpisodeSampler sampler(cfg);
  Rng t(11), c(12);
  double s = 0;
  std::size_t n = 0;
  for (int i = 0; i < 40; ++i) {
    const auto ep = sampler.sample(64, 0, t, c);
    for (double y : ep.next) s += y * y;
    n += ep.next.size();
  }
  EXPECT_NEAR(s / static_cast<double>(n), cfg.amplitude + cfg.noise_var, 0.1);
}

TEST(GpHarness, EmptyContextSetIsTheNoContextModel) {
  GpHarnessConfig cfg;
  cfg.d_h = 8;
  cfg.n_heads = 2;
  const auto zero = harness_model_config(cfg, HarnessModel::Full, 0);
  const auto none = harness_model_config(cfg, HarnessModel::NoContext, 6);
  EXPECT_FALSE(zero.uses_context());
  XTrendModel<double> m0(zero, 4), m1(none, 4);
  const auto names = param_names(m0.params());
  ASSERT_EQ(names, param_names(m1.params()));
  GpEpisodeSampler sampler(cfg);
  Rng t(1), c(2);
  const auto ep = sampler.sample(3, 0, t, c);
  ad::Graph<double> g0(&m0.params()), g1(&m1.params());
  const auto o0 = m0.forward(g0, ep.target, nullptr);
  const auto o1 = m1.forward(g1, ep.target, nullptr);
  EXPECT_EQ(g0.value(o0.mu), g1.value(o1.mu));
  EXPECT_EQ(g0.value(o0.sigma), g1.value(o1.sigma));
  for (const auto& n : names) {
    EXPECT_NE(n.rfind("cross_att.", 0), 0u) << n;
    EXPECT_NE(n.rfind("key.", 0), 0u) << n;
  }
}

TEST(GpHarness, MeanPooledArmHasNoCrossAttentionWeights) {
  GpHarnessConfig cfg;
  cfg.d_h = 8;
  cfg.n_heads = 2;
  const auto mc = harness_model_config(cfg, HarnessModel::NoCrossAttention, 6);
  EXPECT_TRUE(mc.uses_context());
  EXPECT_FALSE(mc.cross_attention);
  const auto full = harness_model_config(cfg, HarnessModel::Full, 6);
  EXPECT_TRUE(full.cross_attention);
  EXPECT_EQ(full.variant, Variant::XTrendG);
}

TEST(GpHarness, FixedSeedsReproduceTheTable) {
  const auto cfg = tiny_config();
  const auto a = to_json(gp_fewshot_harness(cfg)).dump();
  const auto b = to_json(gp_fewshot_harness(cfg)).dump();
  EXPECT_EQ(a, b);
  const auto r = gp_fewshot_harness(cfg);
  ASSERT_EQ(r.arms.size(), 3u);
  for (const auto& arm : r.arms) {
    EXPECT_EQ(arm.mse.size(), 2u);
    EXPECT_GT(arm.mean, 0.0);
  }
  EXPECT_NE(r.arm(HarnessModel::NoContext, 0), nullptr);
}

TEST(GpHarness, TrainingImprovesOnTheUnconditionalMean) {
  auto cfg = tiny_config();
  cfg.n_seeds = 1;
  cfg.steps = 150;
  cfg.batch = 16;
  cfg.lr = 3e-3;
  cfg.eval_episodes = 64;
  const auto r = gp_fewshot_harness(cfg);
  EXPECT_LT(r.arm(HarnessModel::NoContext, 0)->mean, r.mean_predictor_mse);
  EXPECT_LT(r.arm(HarnessModel::Full, 2)->mean, r.mean_predictor_mse);
}

TEST(GpHarnessConfig, RejectsBadSettings) {
  GpHarnessConfig cfg;
  cfg.context_sizes = {};
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.context_max = 100;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.d_h = 30;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

}  // namespace
}  // namespace xtrend
