#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "xtrend/classical.hpp"
#include "xtrend/synthetic.hpp"

using namespace xtrend;

namespace {

ReturnsSeries flat_returns(std::size_t n, double r, double sigma) {
  ReturnsSeries rs;
  rs.ticker = "A";
  rs.dates = business_days(Date::from_ymd(2010, 1, 4), n);
  rs.r.assign(n, r);
  rs.sigma.assign(n, sigma);
  return rs;
}

}  // namespace

TEST(LongSignal, AllOnes) {
  auto dates = business_days(Date::from_ymd(2020, 1, 1), 10);
  auto s = long_signal("A", dates);
  EXPECT_EQ(s.size(), 10u);
  for (double z : s.z) EXPECT_EQ(z, 1.0);
  EXPECT_EQ(long_signal("A", {}).size(), 0u);
}

TEST(Tsmom, SignOfTrailingReturn) {
  auto up = flat_returns(300, 0.001, 0.01);
  auto s = tsmom_signal(up);
  ASSERT_EQ(s.size(), 300u - 251u);
  for (double z : s.z) EXPECT_EQ(z, 1.0);
  auto down = flat_returns(300, -0.001, 0.01);
  for (double z : tsmom_signal(down).z) EXPECT_EQ(z, -1.0);
  auto flat = flat_returns(300, 0.0, 0.01);
  for (double z : tsmom_signal(flat).z) EXPECT_EQ(z, 0.0);
  EXPECT_EQ(tsmom_signal(flat_returns(100, 0.001, 0.01)).size(), 0u);
}

TEST(BlendedTsmom, Examples) {
  auto up = flat_returns(300, 0.001, 0.01);
  for (double z : blended_tsmom_signal(up).z) EXPECT_EQ(z, 1.0);
  SyntheticParams sp;
  sp.n = 600;
  auto r = make_returns(gen_synthetic(SyntheticKind::WhiteNoise, sp, 2).prices);
  auto one = blended_tsmom_signal(r, {{63, 1.0}});
  auto ref = tsmom_signal(r, 63);
  EXPECT_EQ(one.z, ref.z);
  for (double z : blended_tsmom_signal(r, {{21, 0.0}, {252, 0.0}}).z) EXPECT_EQ(z, 0.0);
  for (double z : blended_tsmom_signal(r, {{21, 0.9}, {63, 0.9}}).z) EXPECT_LE(std::abs(z), 1.0);
}

TEST(MacdSignal, BoundedAndZeroOnConstant) {
  PriceSeries c{"C", business_days(Date::from_ymd(2005, 1, 3), 300), std::vector<double>(300, 10.0)};
  for (double z : macd_signal(c).z) EXPECT_EQ(z, 0.0);
  SyntheticParams sp;
  sp.n = 1200;
  sp.drift = 0.002;
  auto p = gen_synthetic(SyntheticKind::TrendRegimes, sp, 4).prices;
  const double bound = response_function(std::sqrt(2.0));
  for (double z : macd_signal(p).z) EXPECT_LE(std::abs(z), bound + 1e-12);
}

TEST(Portfolio, SingleAssetDirectEvaluation) {
  auto rs = flat_returns(3, 0.0, 0.15 / std::sqrt(252.0));  // leverage exactly 1
  rs.r = {0.0, 0.01, 0.0};
  PositionSeries pos{"A", {rs.dates[0]}, {1.0}};
  auto rep = portfolio_returns({pos}, {rs});
  ASSERT_EQ(rep.daily_returns.size(), 1u);
  EXPECT_NEAR(rep.daily_returns[0], 0.01, 1e-15);
  EXPECT_EQ(rep.dates[0], rs.dates[1]);
}

TEST(Portfolio, OffsettingAssetsAverageToZero) {
  const double s = 0.15 / std::sqrt(252.0);
  auto a = flat_returns(2, 0.01, s);
  auto b = flat_returns(2, -0.01, s);
  b.ticker = "B";
  auto rep = portfolio_returns({{"A", {a.dates[0]}, {1.0}}, {"B", {b.dates[0]}, {1.0}}}, {a, b});
  ASSERT_EQ(rep.daily_returns.size(), 1u);
  EXPECT_NEAR(rep.daily_returns[0], 0.0, 1e-16);
}

TEST(Portfolio, TransactionCostOnEntry) {
  // leverage 1 and a 0 -> 1 position change: the deducted cost is C * tgt * |1/sigma - 0| = C
  const double s = 0.15 / std::sqrt(252.0);
  auto a = flat_returns(2, 0.0, s);
  PortfolioParams pp;
  pp.cost = 2e-4;
  auto rep = portfolio_returns({{"A", {a.dates[0]}, {1.0}}}, {a}, pp);
  EXPECT_NEAR(rep.daily_returns[0], -2e-4, 1e-15);
}

TEST(Portfolio, LinearInPositionsWithoutCost) {
  SyntheticParams sp;
  sp.n = 400;
  auto r = make_returns(gen_synthetic(SyntheticKind::WhiteNoise, sp, 6).prices);
  Rng rng(1);
  PositionSeries p1{"SYN", r.dates, {}}, p2{"SYN", r.dates, {}}, sum{"SYN", r.dates, {}};
  for (std::size_t i = 0; i < r.size(); ++i) {
    p1.z.push_back(rng.uniform(-0.5, 0.5));
    p2.z.push_back(rng.uniform(-0.5, 0.5));
    sum.z.push_back(p1.z.back() + p2.z.back());
  }
  auto a = portfolio_returns({p1}, {r}), b = portfolio_returns({p2}, {r}), c = portfolio_returns({sum}, {r});
  ASSERT_EQ(a.daily_returns.size(), c.daily_returns.size());
  for (std::size_t i = 0; i < c.daily_returns.size(); ++i)
    EXPECT_NEAR(c.daily_returns[i], a.daily_returns[i] + b.daily_returns[i], 1e-15);
}

TEST(Portfolio, PositionsIgnoreFutureReturns) {
  SyntheticParams sp;
  sp.n = 700;
  sp.drift = 0.001;
  auto prices = gen_synthetic(SyntheticKind::TrendRegimes, sp, 9).prices;
  auto r = make_returns(prices);
  auto base = tsmom_signal(r);
  // scramble every return after a cutoff; positions up to the cutoff must not move
  const std::size_t cut = 500;
  auto shuffled = r;
  Rng rng(4);
  rng.shuffle(shuffled.r.begin() + static_cast<std::ptrdiff_t>(cut) + 1, shuffled.r.end());
  auto moved = tsmom_signal(shuffled);
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (base.dates[i] > r.dates[cut]) break;
    EXPECT_EQ(base.z[i], moved.z[i]);
  }
  // shifting returns one day earlier changes the P&L
  auto shifted = r;
  std::rotate(shifted.r.begin(), shifted.r.begin() + 1, shifted.r.end());
  EXPECT_NE(portfolio_returns({base}, {r}).daily_returns, portfolio_returns({base}, {shifted}).daily_returns);
}

TEST(Portfolio, SkipsAssetsWithoutVolatility) {
  auto a = flat_returns(3, 0.01, std::numeric_limits<double>::quiet_NaN());
  auto rep = portfolio_returns({{"A", a.dates, {1, 1, 1}}}, {a});
  EXPECT_TRUE(rep.daily_returns.empty());
}

TEST(Sharpe, Examples) {
  EXPECT_EQ(annualized_sharpe({0.01, -0.01}), 0.0);
  // population std 0.01 around mean 0.001
  EXPECT_NEAR(annualized_sharpe({0.011, -0.009}), std::sqrt(252.0) * 0.1, 1e-12);
  EXPECT_NEAR(std::sqrt(252.0) * 0.1, 1.587, 1e-3);
  EXPECT_EQ(annualized_sharpe({0.01, 0.01, 0.01}), std::numeric_limits<double>::infinity());
  EXPECT_EQ(annualized_sharpe({-0.02, -0.02}), -std::numeric_limits<double>::infinity());
  EXPECT_EQ(annualized_sharpe({0.0, 0.0}), 0.0);
  EXPECT_THROW(annualized_sharpe({0.1}), std::invalid_argument);
}

TEST(Sharpe, InvariantToPositiveScaling) {
  Rng rng(12);
  std::vector<double> d(500), e(500);
  for (std::size_t i = 0; i < d.size(); ++i) {
    d[i] = 0.0003 + 0.01 * rng.normal();
    e[i] = 3.7 * d[i];
  }
  EXPECT_NEAR(annualized_sharpe(d), annualized_sharpe(e), 1e-12);
}

TEST(Drawdown, Examples) {
  auto a = max_drawdown({1.0, 0.8, 1.1});
  EXPECT_NEAR(a.max_fraction, 0.20, 1e-15);
  EXPECT_EQ(a.duration, 2);
  auto b = max_drawdown({1.0, 1.1, 1.2, 1.3});
  EXPECT_EQ(b.max_fraction, 0.0);
  EXPECT_EQ(b.duration, 0);
  auto c = max_drawdown({1.0, 0.5});
  EXPECT_NEAR(c.max_fraction, 0.5, 1e-15);
  EXPECT_EQ(c.duration, 1);
  auto d = max_drawdown({1.0, 2.0, 1.0, 1.5, 1.8, 2.1, 1.9});
  EXPECT_NEAR(d.max_fraction, 0.5, 1e-15);
  EXPECT_EQ(d.duration, 4);
}

TEST(Rescale, ToTargetVolatility) {
  Rng rng(2);
  std::vector<double> d(1000);
  for (auto& x : d) x = 0.3 / std::sqrt(252.0) * rng.normal();
  const double vol = annualized_vol(d);
  auto half = rescale_to_target_vol(d, vol / 2);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(half[i], d[i] / 2, 1e-15);
  auto same = rescale_to_target_vol(d, vol);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(same[i], d[i], 1e-15);
  EXPECT_NEAR(annualized_sharpe(rescale_to_target_vol(d, 0.15)), annualized_sharpe(d), 1e-12);
  EXPECT_NEAR(annualized_vol(rescale_to_target_vol(d, 0.15)), 0.15, 1e-12);
  EXPECT_THROW(rescale_to_target_vol({0.01, 0.01}, 0.15), ValidationError);
}

TEST(Report, EquityIsCumulativeProduct) {
  auto rep = make_report(business_days(Date::from_ymd(2020, 1, 1), 3), {0.1, -0.5, 0.2});
  EXPECT_NEAR(rep.equity_curve[2], 1.1 * 0.5 * 1.2, 1e-15);
  EXPECT_NEAR(rep.max_drawdown, 0.5, 1e-15);
  EXPECT_EQ(rep.drawdown_days, 2);
}

TEST(LongStrategy, ZeroDriftSharpeBand) {
  SyntheticParams sp;
  sp.n = 25200;  // long enough that the Sharpe standard error is ~0.1
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto r = make_returns(gen_synthetic(SyntheticKind::WhiteNoise, sp, seed).prices);
    auto rep = portfolio_returns({long_signal(r.ticker, r.dates)}, {r});
    EXPECT_LT(std::abs(rep.annualized_sharpe), 0.5) << "seed " << seed;
  }
}
