#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtrend/common.hpp"

namespace xtrend {

enum class AssetClass { CM, EQ, FI, FX };

inline AssetClass parse_asset_class(std::string_view s) {
  if (s == "CM") return AssetClass::CM;
  if (s == "EQ") return AssetClass::EQ;
  if (s == "FI") return AssetClass::FI;
  if (s == "FX") return AssetClass::FX;
  throw ParseError("unknown asset class '" + std::string(s) + "'");
}

inline const char* to_string(AssetClass c) {
  switch (c) {
    case AssetClass::CM: return "CM";
    case AssetClass::EQ: return "EQ";
    case AssetClass::FI: return "FI";
    case AssetClass::FX: return "FX";
  }
  return "?";
}

struct AssetMeta {
  std::string ticker;
  std::string name;
  AssetClass asset_class = AssetClass::CM;
};

/// Ordered universe of assets. The position of a ticker doubles as its
/// categorical id for entity embeddings.
class AssetCatalog {
 public:
  AssetCatalog() = default;
  explicit AssetCatalog(std::vector<AssetMeta> assets) {
    for (auto& a : assets) add(std::move(a));
  }

  void add(AssetMeta meta) {
    if (meta.ticker.empty()) throw ValidationError("empty ticker in asset catalog");
    if (index_.count(meta.ticker)) throw ValidationError("duplicate ticker '" + meta.ticker + "'");
    index_[meta.ticker] = static_cast<int>(assets_.size());
    assets_.push_back(std::move(meta));
  }

  bool contains(const std::string& ticker) const { return index_.count(ticker) > 0; }
  int category(const std::string& ticker) const {
    auto it = index_.find(ticker);
    if (it == index_.end()) throw ValidationError("unknown ticker '" + ticker + "'");
    return it->second;
  }
  const AssetMeta& at(const std::string& ticker) const { return assets_[static_cast<std::size_t>(category(ticker))]; }
  const std::vector<AssetMeta>& assets() const { return assets_; }
  std::size_t size() const { return assets_.size(); }
  bool empty() const { return assets_.empty(); }

  /// Reads `[{"ticker": .., "name": .., "asset_class": ..}, ...]` or `{"assets": [...]}`.
  static AssetCatalog from_json(const nlohmann::json& j) {
    const nlohmann::json& arr = j.is_object() && j.contains("assets") ? j.at("assets") : j;
    if (!arr.is_array()) throw ParseError("asset metadata must be a JSON array");
    AssetCatalog cat;
    for (const auto& e : arr) {
      try {
        cat.add({e.at("ticker").get<std::string>(), e.value("name", std::string{}),
                 parse_asset_class(e.at("asset_class").get<std::string>())});
      } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("bad asset metadata entry: ") + ex.what());
      }
    }
    return cat;
  }

  static AssetCatalog load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open asset metadata '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError("asset metadata '" + path + "': " + ex.what());
    }
    return from_json(j);
  }

 private:
  std::vector<AssetMeta> assets_;
  std::map<std::string, int> index_;
};

/// Daily close prices of one asset.
struct PriceSeries {
  std::string ticker;
  std::vector<Date> dates;
  std::vector<double> close;

  std::size_t size() const { return close.size(); }

  void validate() const {
    if (dates.size() != close.size()) throw ValidationError(ticker + ": dates/close length mismatch");
    for (std::size_t i = 0; i < close.size(); ++i) {
      if (!std::isfinite(close[i]) || close[i] <= 0.0) {
        throw ValidationError(ticker + ": non-positive or non-finite price on " + dates[i].iso());
      }
      if (i > 0 && !(dates[i - 1] < dates[i])) {
        throw ValidationError(ticker + ": dates not strictly increasing at " + dates[i].iso());
      }
    }
  }

  /// Index of the last date <= d, or nullopt.
  std::optional<std::size_t> index_at_or_before(Date d) const {
    auto it = std::upper_bound(dates.begin(), dates.end(), d);
    if (it == dates.begin()) return std::nullopt;
    return static_cast<std::size_t>(it - dates.begin()) - 1;
  }
};

/// Simple daily returns and their ex-ante volatility. Entry k belongs to
/// price index k + 1 (the first price date has no return).
struct ReturnsSeries {
  std::string ticker;
  std::vector<Date> dates;
  std::vector<double> r;
  std::vector<double> sigma;  ///< NaN until the volatility warm-up is complete

  std::size_t size() const { return r.size(); }
};

inline constexpr int kVolSpan = 60;
inline constexpr int kVolWarmup = 10;
inline constexpr double kSigmaFloor = 1e-4;

struct LoadStats {
  std::size_t rows = 0;
  std::size_t rejected_unknown_ticker = 0;
};

/// Parses a `date,ticker,close` CSV stream. Rows whose ticker is absent from
/// `catalog` are dropped (counted in `stats`); a null catalog accepts all.
inline std::vector<PriceSeries> parse_price_csv(std::istream& in, const AssetCatalog* catalog,
                                                LoadStats* stats = nullptr) {
  std::string line;
  std::size_t lineno = 0;
  LoadStats local;
  std::map<std::string, std::vector<std::pair<Date, double>>> rows;

  auto trim = [](std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    return s.substr(i);
  };

  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(trim(f));
    if (!header_seen) {
      header_seen = true;
      if (fields.size() != 3 || fields[0] != "date" || fields[1] != "ticker" || fields[2] != "close") {
        throw ParseError("expected header 'date,ticker,close'", lineno);
      }
      continue;
    }
    if (fields.size() != 3) throw ParseError("expected 3 fields", lineno);
    Date d;
    try {
      d = Date::parse(fields[0]);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    }
    double px = 0.0;
    try {
      std::size_t used = 0;
      px = std::stod(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ParseError("unparseable close '" + fields[2] + "'", lineno);
    }
    ++local.rows;
    if (catalog && !catalog->contains(fields[1])) {
      ++local.rejected_unknown_ticker;
      continue;
    }
    if (!std::isfinite(px) || px <= 0.0) {
      throw ValidationError("non-positive price for " + fields[1] + " on " + fields[0] + " (line " +
                            std::to_string(lineno) + ")");
    }
    rows[fields[1]].emplace_back(d, px);
  }
  if (!header_seen) throw ParseError("empty price file");

  std::vector<PriceSeries> out;
  for (auto& [ticker, v] : rows) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    PriceSeries ps;
    ps.ticker = ticker;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i > 0 && v[i].first == v[i - 1].first) {
        throw ValidationError("duplicate date " + v[i].first.iso() + " for " + ticker);
      }
      ps.dates.push_back(v[i].first);
      ps.close.push_back(v[i].second);
    }
    out.push_back(std::move(ps));
  }
  if (catalog) {
    std::sort(out.begin(), out.end(), [&](const PriceSeries& a, const PriceSeries& b) {
      return catalog->category(a.ticker) < catalog->category(b.ticker);
    });
  }
  if (stats) *stats = local;
  return out;
}

inline std::vector<PriceSeries> load_price_csv(const std::string& path, const AssetCatalog* catalog,
                                               LoadStats* stats = nullptr) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open price file '" + path + "'");
  return parse_price_csv(in, catalog, stats);
}

inline void write_price_csv(std::ostream& out, const std::vector<PriceSeries>& series) {
  out << "date,ticker,close\n";
  char buf[64];
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.10g", s.close[i]);
      out << s.dates[i].iso() << ',' << s.ticker << ',' << buf << '\n';
    }
  }
}

/// Return over `horizon` days ending at price index `t`.
inline double compute_return(const PriceSeries& p, std::size_t t, std::size_t horizon) {
  if (horizon == 0) throw std::invalid_argument("return horizon must be positive");
  if (t >= p.size() || t < horizon) {
    throw std::out_of_range(p.ticker + ": insufficient history for " + std::to_string(horizon) +
                            "-day return at index " + std::to_string(t));
  }
  const double base = p.close[t - horizon];
  return (p.close[t] - base) / base;
}

/// Exponentially weighted standard deviation (decay 2/(span+1)), floored at
/// `floor`. Entries before `warmup` observations are NaN.
inline std::vector<double> ex_ante_volatility(const std::vector<double>& r, int span = kVolSpan,
                                              double floor = kSigmaFloor, int warmup = kVolWarmup) {
  const double alpha = 2.0 / (span + 1.0);
  const double keep = 1.0 - alpha;
  std::vector<double> out(r.size(), std::numeric_limits<double>::quiet_NaN());
  double wsum = 0.0, mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    wsum = keep * wsum + 1.0;
    const double delta = r[i] - mean;
    mean += delta / wsum;
    m2 = keep * m2 + delta * (r[i] - mean);
    if (static_cast<int>(i) + 1 >= warmup) {
      const double var = std::max(0.0, m2 / wsum);
      out[i] = std::max(std::sqrt(var), floor);
    }
  }
  return out;
}

inline ReturnsSeries make_returns(const PriceSeries& p) {
  ReturnsSeries rs;
  rs.ticker = p.ticker;
  for (std::size_t i = 1; i < p.size(); ++i) {
    rs.dates.push_back(p.dates[i]);
    rs.r.push_back(compute_return(p, i, 1));
  }
  rs.sigma = ex_ante_volatility(rs.r);
  return rs;
}

// ---------------------------------------------------------------------------
// Train/test splits

enum class SplitMode { FewShot, ZeroShot };

/// One expanding-window step. Train covers [train_start, train_end), test
/// covers [test_start, test_end).
struct Window {
  Date train_start, train_end, test_start, test_end;

  std::string label() const {
    return std::to_string(test_start.year()) + "-" + std::to_string(test_end.year());
  }
};

struct SplitPlan {
  std::vector<Window> windows;
  std::set<std::string> train_assets;
  std::set<std::string> test_assets;
  SplitMode mode = SplitMode::FewShot;

  void validate() const {
    for (std::size_t i = 0; i < windows.size(); ++i) {
      const auto& w = windows[i];
      if (w.test_start != w.train_end) throw ValidationError("window test_start must equal train_end");
      if (!(w.train_start < w.train_end) || !(w.test_start < w.test_end)) {
        throw ValidationError("empty window range");
      }
      if (i > 0 && windows[i - 1].test_end > w.test_start) {
        throw ValidationError("overlapping test windows");
      }
    }
    if (mode == SplitMode::FewShot && train_assets != test_assets) {
      throw ValidationError("few-shot split must use identical train and test assets");
    }
    if (mode == SplitMode::ZeroShot) {
      for (const auto& t : test_assets) {
        if (train_assets.count(t)) throw ValidationError("zero-shot split overlaps on " + t);
      }
    }
  }
};

/// Expanding windows on calendar-year boundaries: train [start, start+k*step),
/// test the following `step` years, for k = 1, 2, ... while the test fits.
inline std::vector<Window> make_expanding_windows(int start, int end, int step) {
  if (step <= 0 || end - start < 2 * step) {
    throw ValidationError("expanding windows need end - start >= 2 * step");
  }
  std::vector<Window> out;
  for (int k = 1; start + (k + 1) * step <= end; ++k) {
    const Date train_end = Date::year_start(start + k * step);
    out.push_back({Date::year_start(start), train_end, train_end, Date::year_start(start + (k + 1) * step)});
  }
  return out;
}

inline SplitPlan make_few_shot_split(const AssetCatalog& universe) {
  SplitPlan plan;
  plan.mode = SplitMode::FewShot;
  for (const auto& a : universe.assets()) {
    plan.train_assets.insert(a.ticker);
    plan.test_assets.insert(a.ticker);
  }
  return plan;
}

/// Random disjoint split; assets of `exclude_from_test` never land on the test side.
inline SplitPlan make_zero_shot_split(const AssetCatalog& universe, std::size_t n_test, std::uint64_t seed,
                                      std::optional<AssetClass> exclude_from_test = std::nullopt) {
  if (n_test >= universe.size()) throw ValidationError("n_test must be smaller than the universe");
  std::vector<std::string> eligible;
  for (const auto& a : universe.assets()) {
    if (!exclude_from_test || a.asset_class != *exclude_from_test) eligible.push_back(a.ticker);
  }
  if (n_test > eligible.size()) throw ValidationError("not enough eligible assets for the test side");
  Rng rng(seed);
  rng.shuffle(eligible.begin(), eligible.end());
  SplitPlan plan;
  plan.mode = SplitMode::ZeroShot;
  plan.test_assets.insert(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(n_test));
  for (const auto& a : universe.assets()) {
    if (!plan.test_assets.count(a.ticker)) plan.train_assets.insert(a.ticker);
  }
  return plan;
}

}  // namespace xtrend
