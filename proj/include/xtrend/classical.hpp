#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "xtrend/common.hpp"
#include "xtrend/features.hpp"
#include "xtrend/market_data.hpp"

namespace xtrend {

/// Traded positions in [-1, 1] for one asset.
struct PositionSeries {
  std::string ticker;
  std::vector<Date> dates;
  std::vector<double> z;

  std::size_t size() const { return z.size(); }
};

struct PortfolioParams {
  double sigma_tgt = 0.15;  ///< annualized
  double cost = 0.0;

  void validate() const {
    if (!(sigma_tgt > 0.0)) throw ValidationError("sigma_tgt must be positive");
    if (!(cost >= 0.0)) throw ValidationError("cost must be non-negative");
  }
  double daily_target() const { return sigma_tgt / std::sqrt(static_cast<double>(kTradingDaysPerYear)); }
};

struct StrategyReport {
  std::vector<Date> dates;
  std::vector<double> daily_returns;
  std::vector<double> equity_curve;
  double annualized_sharpe = 0.0;
  double max_drawdown = 0.0;
  int drawdown_days = 0;
};

inline double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

inline PositionSeries long_signal(const std::string& ticker, const std::vector<Date>& dates) {
  return {ticker, dates, std::vector<double>(dates.size(), 1.0)};
}

/// Compounded return over the `horizon` returns ending at index k (inclusive).
inline double trailing_return(const ReturnsSeries& r, std::size_t k, std::size_t horizon) {
  double g = 1.0;
  for (std::size_t i = k + 1 - horizon; i <= k; ++i) g *= 1.0 + r.r[i];
  return g - 1.0;
}

/// Sign of the trailing `horizon`-day return; dates without enough history are skipped.
inline PositionSeries tsmom_signal(const ReturnsSeries& r, std::size_t horizon = 252) {
  if (horizon == 0) throw std::invalid_argument("tsmom horizon must be positive");
  PositionSeries out{r.ticker, {}, {}};
  for (std::size_t k = horizon - 1; k < r.size(); ++k) {
    out.dates.push_back(r.dates[k]);
    out.z.push_back(sign(trailing_return(r, k, horizon)));
  }
  return out;
}

/// Clipped weighted sum of trailing-return signs; weights keyed by horizon.
inline PositionSeries blended_tsmom_signal(const ReturnsSeries& r,
                                           const std::map<std::size_t, double>& weights = {
                                               {21, 0.25}, {63, 0.25}, {126, 0.25}, {252, 0.25}}) {
  std::size_t longest = 1;
  for (const auto& [h, w] : weights) {
    if (h == 0) throw std::invalid_argument("blend horizon must be positive");
    if (w < 0.0 || w > 1.0) throw ValidationError("blend weights must lie in [0, 1]");
    longest = std::max(longest, h);
  }
  PositionSeries out{r.ticker, {}, {}};
  for (std::size_t k = longest - 1; k < r.size(); ++k) {
    double s = 0.0;
    for (const auto& [h, w] : weights) s += w * sign(trailing_return(r, k, h));
    out.dates.push_back(r.dates[k]);
    out.z.push_back(std::clamp(s, -1.0, 1.0));
  }
  return out;
}

/// Mean response over the three MACD timescale pairs.
inline PositionSeries macd_signal(const PriceSeries& p, int price_std_window = kPriceStdWindow) {
  PositionSeries out{p.ticker, {}, {}};
  if (p.size() <= static_cast<std::size_t>(kFeatureWarmup)) return out;
  std::array<std::vector<double>, 3> m;
  for (std::size_t j = 0; j < 3; ++j) m[j] = macd_series(p.close, kMacdSpecs[j], price_std_window);
  for (std::size_t t = kFeatureWarmup; t < p.size(); ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += response_function(m[j][t]);
    out.dates.push_back(p.dates[t]);
    out.z.push_back(s / 3.0);
  }
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double population_std(const std::vector<double>& v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

/// sqrt(252) * mean / population std. A degenerate (zero) std gives a signed
/// infinity, or 0 when the mean is also 0.
inline double annualized_sharpe(const std::vector<double>& daily) {
  if (daily.size() < 2) throw std::invalid_argument("Sharpe needs at least 2 observations");
  const double m = mean_of(daily);
  const double sd = population_std(daily, m);
  if (sd <= 1e-14 * std::abs(m) || sd == 0.0) {
    if (m == 0.0) return 0.0;
    return m > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
  }
  return std::sqrt(static_cast<double>(kTradingDaysPerYear)) * m / sd;
}

struct Drawdown {
  double max_fraction = 0.0;
  int duration = 0;  ///< longest peak-to-recovery span in observations
};

inline Drawdown max_drawdown(const std::vector<double>& equity) {
  Drawdown dd;
  if (equity.empty()) return dd;
  double peak = equity[0];
  std::size_t peak_at = 0;
  bool underwater = false;
  for (std::size_t i = 1; i < equity.size(); ++i) {
    if (equity[i] >= peak) {
      if (underwater) dd.duration = std::max(dd.duration, static_cast<int>(i - peak_at));
      underwater = false;
      peak = equity[i];
      peak_at = i;
    } else {
      underwater = true;
      dd.max_fraction = std::max(dd.max_fraction, (peak - equity[i]) / peak);
    }
  }
  if (underwater) dd.duration = std::max(dd.duration, static_cast<int>(equity.size() - 1 - peak_at));
  return dd;
}

inline std::vector<double> equity_from_returns(const std::vector<double>& daily) {
  std::vector<double> eq(daily.size());
  double e = 1.0;
  for (std::size_t i = 0; i < daily.size(); ++i) eq[i] = e *= 1.0 + daily[i];
  return eq;
}

inline double annualized_vol(const std::vector<double>& daily) {
  return population_std(daily, mean_of(daily)) * std::sqrt(static_cast<double>(kTradingDaysPerYear));
}

inline std::vector<double> rescale_to_target_vol(const std::vector<double>& daily, double target = 0.15) {
  if (daily.size() < 2) throw std::invalid_argument("rescaling needs at least 2 observations");
  const double vol = annualized_vol(daily);
  if (!(vol > 0.0)) throw ValidationError("cannot rescale a series with zero realized volatility");
  std::vector<double> out(daily.size());
  for (std::size_t i = 0; i < daily.size(); ++i) out[i] = daily[i] * target / vol;
  return out;
}

inline StrategyReport make_report(std::vector<Date> dates, std::vector<double> daily) {
  StrategyReport rep;
  rep.dates = std::move(dates);
  rep.daily_returns = std::move(daily);
  rep.equity_curve = equity_from_returns(rep.daily_returns);
  rep.annualized_sharpe = rep.daily_returns.size() >= 2 ? annualized_sharpe(rep.daily_returns) : 0.0;
  std::vector<double> eq;
  eq.reserve(rep.equity_curve.size() + 1);
  eq.push_back(1.0);
  eq.insert(eq.end(), rep.equity_curve.begin(), rep.equity_curve.end());
  const auto dd = max_drawdown(eq);
  rep.max_drawdown = dd.max_fraction;
  rep.drawdown_days = dd.duration;
  return rep;
}

/// Volatility-targeted, equally weighted portfolio. A position dated t earns
/// the asset's next return; assets without a volatility estimate at t sit out.
inline StrategyReport portfolio_returns(const std::vector<PositionSeries>& positions,
                                        const std::vector<ReturnsSeries>& returns,
                                        const PortfolioParams& params = {}) {
  params.validate();
  std::map<std::string, const ReturnsSeries*> by_ticker;
  for (const auto& r : returns) by_ticker[r.ticker] = &r;
  const double tgt = params.daily_target();

  std::map<Date, std::pair<double, int>> acc;
  for (const auto& pos : positions) {
    auto it = by_ticker.find(pos.ticker);
    if (it == by_ticker.end()) throw ValidationError("no returns for positioned asset " + pos.ticker);
    const ReturnsSeries& rs = *it->second;
    double prev_scaled = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      while (k < rs.size() && rs.dates[k] < pos.dates[i]) ++k;
      if (k >= rs.size() || rs.dates[k] != pos.dates[i]) continue;
      if (k + 1 >= rs.size()) break;
      const double sigma = rs.sigma[k];
      if (!std::isfinite(sigma)) continue;
      const double scaled = pos.z[i] / sigma;
      double ret = pos.z[i] * (tgt / sigma) * rs.r[k + 1];
      if (params.cost > 0.0) ret -= params.cost * tgt * std::abs(scaled - prev_scaled);
      prev_scaled = scaled;
      auto& slot = acc[rs.dates[k + 1]];
      slot.first += ret;
      slot.second += 1;
    }
  }
  std::vector<Date> dates;
  std::vector<double> daily;
  for (const auto& [d, s] : acc) {
    dates.push_back(d);
    daily.push_back(s.first / s.second);
  }
  return make_report(std::move(dates), std::move(daily));
}

}  // namespace xtrend
