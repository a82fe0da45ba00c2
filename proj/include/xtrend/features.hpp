#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "xtrend/common.hpp"
#include "xtrend/market_data.hpp"

namespace xtrend {

struct MacdSpec {
  int short_scale;
  int long_scale;

  void validate() const {
    if (!(1 < short_scale && short_scale < long_scale)) {
      throw ValidationError("MACD timescales must satisfy 1 < S < L");
    }
  }
};

inline constexpr std::array<int, 5> kReturnHorizons{1, 21, 63, 126, 252};
inline constexpr std::array<MacdSpec, 3> kMacdSpecs{{{8, 24}, {16, 28}, {32, 96}}};
inline constexpr int kNumFeatures = 8;
inline constexpr int kFeatureWarmup = 252;
inline constexpr int kPriceStdWindow = 63;
inline constexpr int kSignalStdWindow = 252;
inline constexpr int kRollingMinPoints = 10;
inline constexpr double kStdFloor = 1e-12;

inline const std::array<const char*, kNumFeatures>& feature_names() {
  static const std::array<const char*, kNumFeatures> names{
      "nr1", "nr21", "nr63", "nr126", "nr252", "macd_8_24", "macd_16_28", "macd_32_96"};
  return names;
}

using FeatureVec = std::array<double, kNumFeatures>;

struct FeatureRow {
  Date date;
  std::string ticker;
  FeatureVec x{};  ///< 5 normalized returns then 3 MACD values

  double norm_return(std::size_t i) const { return x[i]; }
  double macd(std::size_t i) const { return x[5 + i]; }
};

/// Exponential moving average with decay 1 - 1/timescale, seeded with the first value.
inline std::vector<double> ewma(const std::vector<double>& series, double timescale) {
  if (series.empty()) throw std::invalid_argument("ewma of an empty series");
  if (!(timescale > 1.0)) throw std::invalid_argument("ewma timescale must exceed 1");
  const double a = 1.0 / timescale;
  std::vector<double> out(series.size());
  double e = series[0];
  out[0] = e;
  for (std::size_t i = 1; i < series.size(); ++i) {
    e += a * (series[i] - e);
    out[i] = e;
  }
  return out;
}

/// Trailing sample standard deviation (n - 1) over `window` points ending at
/// each index; shorter prefixes use what is available. NaN below `min_points`.
inline std::vector<double> rolling_std(const std::vector<double>& v, int window,
                                       int min_points = kRollingMinPoints) {
  std::vector<double> out(v.size(), std::numeric_limits<double>::quiet_NaN());
  const auto w = static_cast<std::size_t>(window);
  for (std::size_t t = 0; t < v.size(); ++t) {
    const std::size_t lo = t + 1 >= w ? t + 1 - w : 0;
    std::size_t n = 0;
    double mean = 0.0;
    for (std::size_t i = lo; i <= t; ++i) {
      if (!std::isfinite(v[i])) continue;
      ++n;
      mean += (v[i] - mean) / static_cast<double>(n);
    }
    if (n < static_cast<std::size_t>(min_points) || n < 2) continue;
    double ss = 0.0;
    for (std::size_t i = lo; i <= t; ++i) {
      if (std::isfinite(v[i])) ss += (v[i] - mean) * (v[i] - mean);
    }
    out[t] = std::sqrt(ss / static_cast<double>(n - 1));
  }
  return out;
}

/// Full MACD signal path for one timescale pair; entry t depends on prices <= t.
inline std::vector<double> macd_series(const std::vector<double>& close, MacdSpec spec,
                                       int price_std_window = kPriceStdWindow) {
  spec.validate();
  const auto fast = ewma(close, spec.short_scale);
  const auto slow = ewma(close, spec.long_scale);
  const auto pstd = rolling_std(close, price_std_window);
  std::vector<double> m(close.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t t = 0; t < close.size(); ++t) {
    if (std::isnan(pstd[t])) continue;
    m[t] = (fast[t] - slow[t]) / std::max(pstd[t], kStdFloor);
  }
  const auto mstd = rolling_std(m, kSignalStdWindow);
  std::vector<double> out(close.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t t = 0; t < close.size(); ++t) {
    if (std::isnan(mstd[t])) continue;
    out[t] = m[t] / std::max(mstd[t], kStdFloor);
  }
  return out;
}

inline double macd_indicator(const PriceSeries& p, MacdSpec spec, std::size_t t,
                             int price_std_window = kPriceStdWindow) {
  if (t >= p.size() || t < static_cast<std::size_t>(kFeatureWarmup)) {
    throw std::out_of_range(p.ticker + ": MACD needs 252 prior observations at index " + std::to_string(t));
  }
  std::vector<double> prefix(p.close.begin(), p.close.begin() + static_cast<std::ptrdiff_t>(t) + 1);
  return macd_series(prefix, spec, price_std_window)[t];
}

/// Position response to a MACD value; peaks at y = sqrt(2).
inline double response_function(double y) { return y * std::exp(-y * y / 4.0) / 0.89; }

inline double normalized_return(double r_window, double sigma_t, int horizon) {
  return r_window / (sigma_t * std::sqrt(static_cast<double>(horizon)));
}

/// Model inputs for one asset, one row per price index t >= 252.
struct FeatureMatrix {
  std::string ticker;
  std::vector<Date> dates;
  std::vector<FeatureVec> rows;
  std::vector<std::size_t> price_index;  ///< position of each row in the source PriceSeries

  std::size_t size() const { return rows.size(); }
  FeatureRow row(std::size_t i) const { return {dates[i], ticker, rows[i]}; }
};

inline FeatureMatrix build_feature_matrix(const PriceSeries& p, const ReturnsSeries& r,
                                          int price_std_window = kPriceStdWindow) {
  if (r.size() + 1 != p.size()) throw ValidationError(p.ticker + ": returns not aligned with prices");
  FeatureMatrix fm;
  fm.ticker = p.ticker;
  if (p.size() <= static_cast<std::size_t>(kFeatureWarmup)) return fm;
  std::array<std::vector<double>, 3> macd;
  for (std::size_t j = 0; j < kMacdSpecs.size(); ++j) macd[j] = macd_series(p.close, kMacdSpecs[j], price_std_window);
  for (std::size_t t = kFeatureWarmup; t < p.size(); ++t) {
    FeatureVec x{};
    const double sigma = r.sigma[t - 1];
    for (std::size_t j = 0; j < kReturnHorizons.size(); ++j) {
      x[j] = normalized_return(compute_return(p, t, kReturnHorizons[j]), sigma, kReturnHorizons[j]);
    }
    for (std::size_t j = 0; j < 3; ++j) x[5 + j] = macd[j][t];
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (!std::isfinite(x[j])) {
        throw ValidationError(p.ticker + ": non-finite feature " + feature_names()[j] + " on " + p.dates[t].iso());
      }
    }
    fm.dates.push_back(p.dates[t]);
    fm.rows.push_back(x);
    fm.price_index.push_back(t);
  }
  return fm;
}

inline FeatureMatrix build_feature_matrix(const PriceSeries& p, int price_std_window = kPriceStdWindow) {
  return build_feature_matrix(p, make_returns(p), price_std_window);
}

}  // namespace xtrend
