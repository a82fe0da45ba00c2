#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xtrend/common.hpp"
#include "xtrend/market_data.hpp"

namespace xtrend {

enum class SyntheticKind { GpDraw, TrendRegimes, WhiteNoise };

inline SyntheticKind parse_synthetic_kind(std::string_view s) {
  if (s == "gpdraw" || s == "GpDraw") return SyntheticKind::GpDraw;
  if (s == "trend" || s == "trendregimes" || s == "TrendRegimes") return SyntheticKind::TrendRegimes;
  if (s == "whitenoise" || s == "WhiteNoise") return SyntheticKind::WhiteNoise;
  throw ValidationError("unknown synthetic kind '" + std::string(s) + "'");
}

struct SyntheticParams {
  std::string ticker = "SYN";
  std::size_t n = 1000;          ///< number of prices
  double start_price = 100.0;
  Date start_date = Date::from_ymd(2000, 1, 3);
  double vol = 0.01;             ///< daily return volatility
  double drift = 0.0;            ///< absolute daily drift inside a trend regime
  std::size_t min_regime = 250;  ///< regime lengths are uniform in [min_regime, max_regime]
  std::size_t max_regime = 750;
  double gp_lengthscale = 0.4;
  double gp_amplitude = 1.0;     ///< kernel variance k(0, 0)
  double gp_noise_var = 1.0;
  double gp_dx = 0.05;           ///< input spacing of consecutive GP points
  double gp_price_scale = 0.05;  ///< log-price units per GP unit when emitting prices

  void validate(SyntheticKind kind) const {
    if (n < 2 && kind != SyntheticKind::GpDraw) throw ValidationError("synthetic series needs n >= 2");
    if (n < 1) throw ValidationError("synthetic series needs n >= 1");
    if (!(start_price > 0.0)) throw ValidationError("start_price must be positive");
    if (!(vol >= 0.0)) throw ValidationError("vol must be non-negative");
    if (kind == SyntheticKind::TrendRegimes && (min_regime < 1 || max_regime < min_regime)) {
      throw ValidationError("regime length bounds must satisfy 1 <= min_regime <= max_regime");
    }
    if (kind == SyntheticKind::GpDraw &&
        (!(gp_lengthscale > 0.0) || !(gp_amplitude > 0.0) || gp_noise_var < 0.0 || !(gp_dx > 0.0))) {
      throw ValidationError("invalid GP draw parameters");
    }
  }
};

struct SyntheticSeries {
  PriceSeries prices;
  std::vector<double> returns;           ///< simple returns, one fewer than prices (empty for GpDraw)
  std::vector<double> values;            ///< GP draw values (GpDraw only)
  std::vector<std::size_t> change_points;  ///< price indices where a new regime starts
  std::vector<double> regime_drift;      ///< drift of each regime, in order
};

inline std::vector<Date> business_days(Date start, std::size_t n) {
  std::vector<Date> out;
  out.reserve(n);
  Date d = start;
  if (d.weekday() == 0 || d.weekday() == 6) d = next_business_day(d);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(d);
    d = next_business_day(d);
  }
  return out;
}

inline double rbf_kernel(double x1, double x2, double lengthscale, double amplitude) {
  const double d = (x1 - x2) / lengthscale;
  return amplitude * std::exp(-0.5 * d * d);
}

/// One joint draw of f + noise at inputs `xs` from a zero-mean RBF process.
inline std::vector<double> gp_draw(const std::vector<double>& xs, double lengthscale, double amplitude,
                                   double noise_var, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) k(i, j) = rbf_kernel(xs[static_cast<std::size_t>(i)], xs[static_cast<std::size_t>(j)], lengthscale, amplitude);
  double jitter = 1e-10 * amplitude;
  for (int attempt = 0; attempt < 6; ++attempt, jitter *= 10.0) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(kj);
    if (llt.info() != Eigen::Success) continue;
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z(i) = rng.normal();
    const Eigen::VectorXd f = llt.matrixL() * z;
    std::vector<double> out(xs.size());
    const double noise_sd = std::sqrt(noise_var);
    for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = f(i) + noise_sd * rng.normal();
    return out;
  }
  throw Error("GP covariance not positive definite after jitter escalation");
}

namespace detail {

inline PriceSeries prices_from_returns(const SyntheticParams& p, const std::vector<double>& r) {
  PriceSeries ps;
  ps.ticker = p.ticker;
  ps.dates = business_days(p.start_date, r.size() + 1);
  ps.close.resize(r.size() + 1);
  ps.close[0] = p.start_price;
  for (std::size_t i = 0; i < r.size(); ++i) ps.close[i + 1] = ps.close[i] * (1.0 + r[i]);
  return ps;
}

}  // namespace detail

/// Deterministic synthetic data. Noise and regime layout come from separate
/// child streams, so a zero-drift trend series reproduces white noise exactly.
inline SyntheticSeries gen_synthetic(SyntheticKind kind, const SyntheticParams& p, std::uint64_t seed) {
  p.validate(kind);
  Rng master(seed);
  Rng noise = master.split(1);
  Rng layout = master.split(2);
  SyntheticSeries out;

  if (kind == SyntheticKind::GpDraw) {
    std::vector<double> xs(p.n);
    for (std::size_t i = 0; i < p.n; ++i) xs[i] = static_cast<double>(i) * p.gp_dx;
    out.values = gp_draw(xs, p.gp_lengthscale, p.gp_amplitude, p.gp_noise_var, noise);
    out.prices.ticker = p.ticker;
    out.prices.dates = business_days(p.start_date, p.n);
    for (double v : out.values) out.prices.close.push_back(p.start_price * std::exp(p.gp_price_scale * v));
    return out;
  }

  const std::size_t nr = p.n - 1;
  out.returns.resize(nr);
  for (auto& r : out.returns) r = p.vol * noise.normal();
  if (kind == SyntheticKind::TrendRegimes) {
    double sgn = layout.uniform() < 0.5 ? -1.0 : 1.0;
    std::size_t start = 0;
    while (start < nr) {
      const auto len = static_cast<std::size_t>(layout.integer(static_cast<int>(p.min_regime), static_cast<int>(p.max_regime)));
      const std::size_t stop = std::min(nr, start + len);
      out.change_points.push_back(start + 1);
      out.regime_drift.push_back(sgn * p.drift);
      for (std::size_t i = start; i < stop; ++i) out.returns[i] += sgn * p.drift;
      sgn = -sgn;
      start = stop;
    }
  }
  out.prices = detail::prices_from_returns(p, out.returns);
  return out;
}

}  // namespace xtrend

namespace xtrend {

struct UniverseParams {
  std::size_t n_assets = 10;
  std::size_t n = 2520;
  Date start_date = Date::from_ymd(2000, 1, 3);
  double vol_lo = 0.006, vol_hi = 0.02;
  /// Regime drift as a multiple of the asset's daily volatility.
  double drift_ratio_lo = 0.04, drift_ratio_hi = 0.10;
  int min_regime_lo = 40, min_regime_hi = 120;
  double regime_spread = 3.0;  ///< max_regime = spread * min_regime

  void validate() const {
    if (n_assets < 1 || n < 2) throw ValidationError("universe needs at least one asset and two prices");
    if (!(vol_lo > 0 && vol_hi >= vol_lo)) throw ValidationError("invalid volatility range");
    if (!(drift_ratio_lo >= 0 && drift_ratio_hi >= drift_ratio_lo)) throw ValidationError("invalid drift range");
    if (min_regime_lo < 1 || min_regime_hi < min_regime_lo || regime_spread < 1) {
      throw ValidationError("invalid regime length range");
    }
  }
};

struct SyntheticUniverse {
  std::vector<SyntheticSeries> series;
  std::vector<SyntheticParams> params;
  AssetCatalog catalog;

  std::vector<PriceSeries> prices() const {
    std::vector<PriceSeries> out;
    for (const auto& s : series) out.push_back(s.prices);
    return out;
  }
};

/// Independent TrendRegimes assets with heterogeneous volatility, trend strength
/// and regime lengths. Tickers are S00, S01, ...; asset classes cycle CM, EQ, FI, FX.
inline SyntheticUniverse gen_mixed_universe(const UniverseParams& up, std::uint64_t seed) {
  up.validate();
  Rng master(seed);
  SyntheticUniverse u;
  static constexpr AssetClass kClasses[] = {AssetClass::CM, AssetClass::EQ, AssetClass::FI, AssetClass::FX};
  for (std::size_t i = 0; i < up.n_assets; ++i) {
    Rng pr = master.split(i + 1);
    SyntheticParams p;
    char name[16];
    std::snprintf(name, sizeof name, "S%02zu", i);
    p.ticker = name;
    p.n = up.n;
    p.start_date = up.start_date;
    p.vol = pr.uniform(up.vol_lo, up.vol_hi);
    p.drift = p.vol * pr.uniform(up.drift_ratio_lo, up.drift_ratio_hi);
    p.min_regime = static_cast<std::size_t>(pr.integer(up.min_regime_lo, up.min_regime_hi));
    p.max_regime = static_cast<std::size_t>(std::llround(static_cast<double>(p.min_regime) * up.regime_spread));
    u.series.push_back(gen_synthetic(SyntheticKind::TrendRegimes, p, pr.bits()));
    u.params.push_back(p);
    u.catalog.add({p.ticker, "synthetic trend " + p.ticker, kClasses[i % 4]});
  }
  return u;
}

}  // namespace xtrend
