#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "xtrend/classical.hpp"
#include "xtrend/common.hpp"
#include "xtrend/cpd.hpp"
#include "xtrend/market_data.hpp"
#include "xtrend/model.hpp"
#include "xtrend/training.hpp"

namespace xtrend {

// ---------------------------------------------------------------------------
// Plan

enum class StrategyKind { Long, Tsmom, Macd, Neural };

inline StrategyKind parse_strategy_kind(const std::string& s) {
  if (s == "long") return StrategyKind::Long;
  if (s == "tsmom") return StrategyKind::Tsmom;
  if (s == "macd") return StrategyKind::Macd;
  if (s == "neural") return StrategyKind::Neural;
  throw ValidationError("unknown strategy kind '" + s + "' (expected long, tsmom, macd or neural)");
}

inline std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::Long: return "long";
    case StrategyKind::Tsmom: return "tsmom";
    case StrategyKind::Macd: return "macd";
    case StrategyKind::Neural: return "neural";
  }
  return "?";
}

struct StrategySpec {
  std::string name;
  StrategyKind kind = StrategyKind::Long;
  ModelConfig model;
  ContextSamplerConfig context;
  TrainConfig train;
  bool search = false;
  /// Reuse the configuration found in the first window instead of searching again.
  bool reuse_search = false;
  SearchGrid grid;

  void validate() const {
    if (name.empty()) throw ValidationError("strategy without a name");
    for (char c : name) {
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
        throw ValidationError("strategy name '" + name + "' may only use letters, digits, '_' and '-'");
      }
    }
    if (kind != StrategyKind::Neural) return;
    model.validate();
    train.validate();
    if (search) grid.validate();
    if (model.uses_context()) {
      context.validate();
      if (context.mode != model.context_mode) throw ValidationError(name + ": context sampler mode differs from the model's");
    }
  }
};

/// A named reporting period [from, to).
struct ReportPeriod {
  std::string name;
  Date from, to;
};

struct BacktestPlan {
  SplitPlan split;
  std::vector<StrategySpec> strategies;
  PortfolioParams portfolio;
  std::vector<ReportPeriod> periods;
  FitOptions cpd_fit;
  bool dump_attention = false;
  int min_test_days = 100;
  double rescale_target = 0.15;
  std::uint64_t seed = 0;

  void validate() const {
    split.validate();
    if (split.windows.empty()) throw ValidationError("backtest plan has no windows");
    if (split.test_assets.empty()) throw ValidationError("backtest plan has no test assets");
    if (strategies.empty()) throw ValidationError("backtest plan has no strategies");
    portfolio.validate();
    if (min_test_days < 1) throw ValidationError("min_test_days must be positive");
    if (!(rescale_target > 0)) throw ValidationError("rescale target must be positive");
    std::set<std::string> names;
    for (const auto& s : strategies) {
      s.validate();
      if (!names.insert(s.name).second) throw ValidationError("duplicate strategy name '" + s.name + "'");
    }
    for (const auto& p : periods) {
      if (p.name.empty() || !(p.from < p.to)) throw ValidationError("invalid report period '" + p.name + "'");
      if (p.name == "full") throw ValidationError("report period name 'full' is reserved");
    }
  }
};

// ---------------------------------------------------------------------------
// Helpers

/// splitmix64 finalizer folded over the parts.
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (std::uint64_t p : parts) {
    h += p + 0x9E3779B97F4A7C15ULL;
    h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ULL;
    h = (h ^ (h >> 27)) * 0x94D049BB133111EBULL;
    h ^= h >> 31;
  }
  return h;
}

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= c[i];
      h_ *= 0x100000001B3ULL;
    }
  }
  template <typename T>
  void pod(const T& v) { bytes(&v, sizeof v); }
  void str(const std::string& s) {
    pod(s.size());
    bytes(s.data(), s.size());
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Digest of everything a model could read from its training set.
inline std::uint64_t training_digest(const std::vector<AssetData>& assets) {
  Fnv1a h;
  for (const auto& a : assets) {
    h.str(a.ticker);
    h.pod(a.category);
    for (std::size_t i = 0; i < a.size(); ++i) {
      h.pod(a.dates[i].days());
      h.pod(a.label_dates[i].days());
      h.pod(a.scaled_return[i]);
      for (Eigen::Index j = 0; j < a.features.cols(); ++j) h.pod(a.features(static_cast<Eigen::Index>(i), j));
    }
    for (const auto& r : a.regimes) {
      h.pod(r.t0);
      h.pod(r.t1);
    }
  }
  return h.value();
}

/// Sorted union of all price dates.
inline std::vector<Date> trading_calendar(const std::vector<PriceSeries>& prices) {
  std::set<Date> all;
  for (const auto& p : prices) all.insert(p.dates.begin(), p.dates.end());
  return {all.begin(), all.end()};
}

inline std::size_t count_days(const std::vector<Date>& calendar, Date from, Date to) {
  return static_cast<std::size_t>(std::lower_bound(calendar.begin(), calendar.end(), to) -
                                  std::lower_bound(calendar.begin(), calendar.end(), from));
}

/// Folds every window with fewer than `min_days` test days into its predecessor.
/// A short first window is kept as is.
inline std::vector<Window> merge_short_windows(const std::vector<Window>& windows, const std::vector<Date>& calendar,
                                               int min_days) {
  std::vector<Window> out;
  for (const auto& w : windows) {
    const auto days = count_days(calendar, w.test_start, w.test_end);
    if (!out.empty() && days < static_cast<std::size_t>(min_days)) {
      out.back().test_end = w.test_end;
    } else {
      out.push_back(w);
    }
  }
  return out;
}

/// Keeps the positions whose next-day return is realized inside [from, to).
inline PositionSeries clip_positions(const PositionSeries& pos, const ReturnsSeries& rs, Date from, Date to) {
  PositionSeries out;
  out.ticker = pos.ticker;
  std::size_t k = 0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    while (k < rs.size() && rs.dates[k] < pos.dates[i]) ++k;
    if (k >= rs.size()) break;
    if (rs.dates[k] != pos.dates[i] || k + 1 >= rs.size()) continue;
    const Date realized = rs.dates[k + 1];
    if (realized < from || !(realized < to)) continue;
    out.dates.push_back(pos.dates[i]);
    out.z.push_back(pos.z[i]);
  }
  return out;
}

/// Concatenates daily returns of consecutive, non-overlapping reports.
inline StrategyReport concatenate_reports(const std::vector<const StrategyReport*>& parts) {
  std::vector<Date> dates;
  std::vector<double> daily;
  for (const auto* p : parts) {
    if (!dates.empty() && !p->dates.empty() && !(dates.back() < p->dates.front())) {
      throw ValidationError("reports to concatenate overlap in time");
    }
    dates.insert(dates.end(), p->dates.begin(), p->dates.end());
    daily.insert(daily.end(), p->daily_returns.begin(), p->daily_returns.end());
  }
  return make_report(std::move(dates), std::move(daily));
}

inline StrategyReport slice_report(const StrategyReport& r, Date from, Date to) {
  std::vector<Date> dates;
  std::vector<double> daily;
  for (std::size_t i = 0; i < r.dates.size(); ++i) {
    if (r.dates[i] < from || !(r.dates[i] < to)) continue;
    dates.push_back(r.dates[i]);
    daily.push_back(r.daily_returns[i]);
  }
  return make_report(std::move(dates), std::move(daily));
}

inline std::optional<StrategyReport> rescaled_report(const StrategyReport& r, double target) {
  if (r.daily_returns.size() < 2) return std::nullopt;
  try {
    return make_report(r.dates, rescale_to_target_vol(r.daily_returns, target));
  } catch (const ValidationError&) {
    return std::nullopt;  // flat series: nothing to rescale
  }
}

// ---------------------------------------------------------------------------
// Run outputs

struct AuditCheck {
  std::string strategy, window, check;
  long passed = 0, failed = 0;
  std::string first_failure;
};

class Auditor {
 public:
  void record(const std::string& strategy, const std::string& window, const std::string& check, bool ok,
              const std::string& detail = {}) {
    auto& c = checks_[{strategy, window, check}];
    c.strategy = strategy;
    c.window = window;
    c.check = check;
    if (ok) {
      ++c.passed;
    } else {
      if (c.failed == 0) c.first_failure = detail;
      ++c.failed;
    }
  }
  bool passed() const {
    for (const auto& [k, c] : checks_) {
      if (c.failed) return false;
    }
    return true;
  }
  std::vector<AuditCheck> checks() const {
    std::vector<AuditCheck> out;
    for (const auto& [k, c] : checks_) out.push_back(c);
    return out;
  }

 private:
  std::map<std::tuple<std::string, std::string, std::string>, AuditCheck> checks_;
};

struct TaggedAttention {
  std::string strategy, window;
  int member = 0;
  AttentionRecord record;
};

struct WindowOutcome {
  std::string strategy, window;
  bool ok = true;
  std::string error;
  std::size_t test_days = 0;
  std::optional<std::uint64_t> train_digest;
  std::vector<PositionSeries> positions;
  StrategyReport report;
  std::optional<nlohmann::json> search_log;
  std::vector<std::string> training_logs;  ///< CSV per ensemble member
  std::vector<int> best_iters;
};

struct ReportRow {
  std::string strategy, period, scale;
  double sharpe = 0, ann_vol = 0, mdd = 0;
  int mdd_days = 0;
  std::size_t n_days = 0;
};

struct RunReport {
  std::vector<Window> windows;
  std::vector<std::string> strategies;
  std::vector<WindowOutcome> outcomes;
  std::map<std::string, StrategyReport> full;  ///< raw concatenation per strategy
  std::map<std::string, StrategyReport> full_rescaled;
  std::vector<ReportRow> rows;
  std::vector<AuditCheck> audit;
  bool audit_passed = true;
  std::vector<TaggedAttention> attention;

  bool failed() const {
    if (!audit_passed) return true;
    for (const auto& o : outcomes) {
      if (!o.ok) return true;
    }
    return false;
  }
  const WindowOutcome* outcome(const std::string& strategy, const std::string& window) const {
    for (const auto& o : outcomes) {
      if (o.strategy == strategy && o.window == window) return &o;
    }
    return nullptr;
  }
  const ReportRow* row(const std::string& strategy, const std::string& period, const std::string& scale = "raw") const {
    for (const auto& r : rows) {
      if (r.strategy == strategy && r.period == period && r.scale == scale) return &r;
    }
    return nullptr;
  }
};

inline ReportRow make_row(const std::string& strategy, const std::string& period, const std::string& scale,
                          const StrategyReport& r) {
  ReportRow row{strategy, period, scale};
  row.sharpe = r.annualized_sharpe;
  row.ann_vol = r.daily_returns.size() >= 2 ? annualized_vol(r.daily_returns) : 0.0;
  row.mdd = r.max_drawdown;
  row.mdd_days = r.drawdown_days;
  row.n_days = r.daily_returns.size();
  return row;
}

// ---------------------------------------------------------------------------
// Neural inference

/// Rows [from, to) of one asset to position, evaluated in chunks of the target
/// length that keep only their last `keep` outputs.
struct InferenceSpan {
  std::size_t asset = 0;
  std::size_t from = 0, to = 0;
};

struct InferenceChunk {
  std::size_t span = 0;
  std::size_t asset = 0;
  std::size_t lo = 0, end = 0;  ///< sequence rows [lo, end]
  std::size_t keep_from = 0;    ///< first row whose output is used
};

inline std::vector<InferenceChunk> make_chunks(const std::vector<InferenceSpan>& spans, int length = kTargetLength,
                                               int keep = kTargetLength - kWarmupSteps) {
  std::vector<InferenceChunk> out;
  const auto L = static_cast<std::size_t>(length);
  const auto K = static_cast<std::size_t>(keep);
  for (std::size_t si = 0; si < spans.size(); ++si) {
    const auto& s = spans[si];
    for (std::size_t first = s.from; first < s.to; first += K) {
      const std::size_t end = std::min(first + K, s.to) - 1;
      const std::size_t lo = end + 1 >= L ? end + 1 - L : 0;
      out.push_back({si, s.asset, lo, end, first});
    }
  }
  return out;
}

struct InferenceResult {
  std::vector<std::vector<double>> z;  ///< per span, one value per row in [from, to)
  std::vector<TaggedAttention> attention;
};

/// Positions for rows of `targets`. Each chunk draws contexts from `context_assets`
/// restricted to labels realized before the chunk's first date.
template <typename T>
InferenceResult infer_positions(const XTrendModel<T>& model, const std::vector<AssetData>& targets,
                                const std::vector<InferenceSpan>& spans, const std::vector<AssetData>* context_assets,
                                const ContextSamplerConfig& sc, Rng& rng, Auditor& audit, const std::string& strategy,
                                const std::string& window, bool dump_attention, int member) {
  InferenceResult res;
  for (const auto& s : spans) res.z.emplace_back(s.to - s.from, 0.0);
  const bool needs_context = model.config().uses_context();
  if (needs_context && !context_assets) throw ValidationError("context model without context assets");

  // chunks sharing a first date, length and kept offset run as one batch
  std::map<std::tuple<Date, std::size_t, std::size_t>, std::vector<std::size_t>> groups;
  const auto chunks = make_chunks(spans);
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const auto& ch = chunks[c];
    const auto& a = targets.at(ch.asset);
    if (needs_context && sc.mode == ContextMode::TimeEquivalent && ch.end + 1 - ch.lo != static_cast<std::size_t>(kTargetLength)) {
      throw ValidationError(a.ticker + ": time-equivalent contexts need " + std::to_string(kTargetLength) +
                            " rows of history before the first test decision");
    }
    groups[{a.dates[ch.lo], ch.end + 1 - ch.lo, ch.keep_from - ch.lo}].push_back(c);
  }

  std::map<Date, ContextPool> pools;
  for (const auto& [key, members] : groups) {
    const auto& [first_date, length, offset] = key;
    const ContextPool* pool = nullptr;
    if (needs_context) {
      auto it = pools.find(first_date);
      if (it == pools.end()) it = pools.emplace(first_date, ContextPool(*context_assets, sc, first_date)).first;
      pool = &it->second;
    }
    for (std::size_t i = 0; i < members.size(); i += static_cast<std::size_t>(64)) {
      const auto last = std::min(members.size(), i + 64);
      std::vector<TargetRef> refs;
      for (std::size_t k = i; k < last; ++k) refs.push_back({chunks[members[k]].asset, chunks[members[k]].end});
      const auto ep = make_episode_batch(targets, refs, pool, rng, static_cast<int>(length), 0);
      if (ep.has_context) {
        const bool ok = ep.max_context_label < first_date;
        audit.record(strategy, window, "context_before_target", ok,
                     "context label " + ep.max_context_label.iso() + " >= target start " + first_date.iso());
      }
      ad::Graph<T> g(const_cast<ad::ParamStore<T>*>(&model.params()));
      const auto out = model.forward(g, ep.target, ep.has_context ? &*ep.context : nullptr);
      const auto& z = g.value(out.position);
      const auto B = static_cast<Eigen::Index>(refs.size());
      for (Eigen::Index b = 0; b < B; ++b) {
        const auto& ch = chunks[members[i + static_cast<std::size_t>(b)]];
        for (std::size_t row = ch.keep_from; row <= ch.end; ++row) {
          const auto t = static_cast<Eigen::Index>(row - ch.lo);
          res.z[ch.span][row - spans[ch.span].from] = static_cast<double>(z(t * B + b, 0));
        }
      }
      if (dump_attention && out.cross_attention.valid()) {
        for (auto& rec : model.attention_dump(g, out, ep.target, *ep.context, ep.tickers, ep.dates, static_cast<int>(offset))) {
          if (rec.head == -1) res.attention.push_back({strategy, window, member, std::move(rec)});
        }
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Expanding-window backtest

namespace detail {

inline std::vector<ReturnsSeries> returns_of(const std::vector<const PriceSeries*>& prices) {
  std::vector<ReturnsSeries> out;
  for (const auto* p : prices) out.push_back(make_returns(*p));
  return out;
}

inline int category_of(const AssetCatalog* catalog, const std::vector<PriceSeries>& prices, const std::string& ticker) {
  if (catalog) return catalog->category(ticker);
  for (std::size_t i = 0; i < prices.size(); ++i) {
    if (prices[i].ticker == ticker) return static_cast<int>(i);
  }
  throw ValidationError("unknown ticker '" + ticker + "'");
}

}  // namespace detail

/// Progress callback: one human-readable line per step.
using ProgressFn = std::function<void(const std::string&)>;

class ExpandingBacktest {
 public:
  ExpandingBacktest(const BacktestPlan& plan, const std::vector<PriceSeries>& prices, const AssetCatalog* catalog = nullptr)
      : plan_(plan), prices_(prices), catalog_(catalog) {
    plan_.validate();
    for (const auto& p : prices_) {
      p.validate();
      by_ticker_[p.ticker] = &p;
    }
    for (const auto& t : plan_.split.test_assets) {
      if (!by_ticker_.count(t)) throw ValidationError("no prices for test asset " + t);
    }
    for (const auto& t : plan_.split.train_assets) {
      if (!by_ticker_.count(t)) throw ValidationError("no prices for training asset " + t);
    }
  }

  RunReport run(const ProgressFn& progress = {}) {
    RunReport rep;
    auto say = [&](const std::string& s) {
      if (progress) progress(s);
    };
    std::vector<const PriceSeries*> test_prices;
    for (const auto& t : plan_.split.test_assets) test_prices.push_back(by_ticker_.at(t));
    std::vector<PriceSeries> test_copy;
    for (const auto* p : test_prices) test_copy.push_back(*p);
    const auto calendar = trading_calendar(test_copy);
    rep.windows = merge_short_windows(plan_.split.windows, calendar, plan_.min_test_days);
    for (const auto& w : rep.windows) {
      if (count_days(calendar, w.test_start, w.test_end) == 0) {
        throw ValidationError("price data does not cover test window " + w.label());
      }
    }
    const auto returns = detail::returns_of(test_prices);
    for (const auto& s : plan_.strategies) rep.strategies.push_back(s.name);

    Auditor audit;
    std::map<std::string, TrainConfig> reused;
    for (std::size_t wi = 0; wi < rep.windows.size(); ++wi) {
      const Window& w = rep.windows[wi];
      std::map<std::string, std::vector<AssetData>> train_cache;
      for (std::size_t si = 0; si < plan_.strategies.size(); ++si) {
        const auto& spec = plan_.strategies[si];
        WindowOutcome o;
        o.strategy = spec.name;
        o.window = w.label();
        say("window " + w.label() + ": " + spec.name);
        try {
          if (spec.kind == StrategyKind::Neural) {
            run_neural(spec, si, wi, w, returns, train_cache, reused, audit, o, rep.attention, say);
          } else {
            run_classical(spec, w, test_prices, returns, o);
          }
          o.report = portfolio_returns(o.positions, returns, plan_.portfolio);
          o.test_days = o.report.daily_returns.size();
        } catch (const std::exception& e) {
          o.ok = false;
          o.error = e.what();
          o.positions.clear();
          o.report = {};
          say("window " + w.label() + ": " + spec.name + " failed: " + e.what());
        }
        rep.outcomes.push_back(std::move(o));
      }
    }

    rep.audit = audit.checks();
    rep.audit_passed = audit.passed();
    aggregate(rep);
    return rep;
  }

 private:
  void run_classical(const StrategySpec& spec, const Window& w, const std::vector<const PriceSeries*>& prices,
                     const std::vector<ReturnsSeries>& returns, WindowOutcome& o) const {
    for (std::size_t a = 0; a < prices.size(); ++a) {
      PositionSeries pos;
      switch (spec.kind) {
        case StrategyKind::Long: pos = long_signal(prices[a]->ticker, prices[a]->dates); break;
        case StrategyKind::Tsmom: pos = tsmom_signal(returns[a]); break;
        case StrategyKind::Macd: pos = macd_signal(*prices[a]); break;
        case StrategyKind::Neural: throw Error("neural strategy routed to the classical path");
      }
      o.positions.push_back(clip_positions(pos, returns[a], w.test_start, w.test_end));
    }
  }

  std::vector<AssetData> training_assets(const StrategySpec& spec, const Window& w,
                                         std::map<std::string, std::vector<AssetData>>& cache) const {
    const bool cpd = spec.model.uses_context() && spec.context.mode == ContextMode::CpdSegments;
    std::string key = "plain";
    if (cpd) {
      const auto& s = spec.context.segmentation;
      key = "cpd:" + format_double(s.nu) + ":" + std::to_string(s.l_lbw) + ":" + std::to_string(s.l_min) + ":" +
            std::to_string(s.l_max);
    }
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<AssetData> out;
    for (const auto& t : plan_.split.train_assets) {
      const PriceSeries& p = *by_ticker_.at(t);
      AssetData a = make_asset_data(p, detail::category_of(catalog_, prices_, t), w.test_start);
      if (a.size() == 0) continue;
      if (cpd) attach_regimes(a, p, spec.context.segmentation, plan_.cpd_fit);
      out.push_back(std::move(a));
    }
    if (out.empty()) throw ValidationError("no training asset has history before " + w.test_start.iso());
    cache[key] = out;
    return out;
  }

  void audit_training(const StrategySpec& spec, const Window& w, const std::vector<AssetData>& assets,
                      Auditor& audit) const {
    Date max_date, max_label;
    for (const auto& a : assets) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        max_date = std::max(max_date, a.dates[i]);
        if (a.has_label(i)) max_label = std::max(max_label, a.label_dates[i]);
      }
    }
    audit.record(spec.name, w.label(), "training_before_test", max_date < w.test_start && max_label < w.test_start,
                 "training data reaches " + std::max(max_date, max_label).iso() + " >= test start " + w.test_start.iso());
    if (plan_.split.mode == SplitMode::ZeroShot) {
      bool clean = true;
      std::string leaked;
      for (const auto& a : assets) {
        if (plan_.split.test_assets.count(a.ticker)) {
          clean = false;
          leaked = a.ticker;
        }
      }
      audit.record(spec.name, w.label(), "zero_shot_disjoint", clean, "test asset " + leaked + " in training data");
    }
  }

  void run_neural(const StrategySpec& spec, std::size_t si, std::size_t wi, const Window& w,
                  const std::vector<ReturnsSeries>& returns, std::map<std::string, std::vector<AssetData>>& cache,
                  std::map<std::string, TrainConfig>& reused, Auditor& audit, WindowOutcome& o,
                  std::vector<TaggedAttention>& attention, const std::function<void(const std::string&)>& say) const {
    const auto assets = training_assets(spec, w, cache);
    audit_training(spec, w, assets, audit);
    o.train_digest = training_digest(assets);

    ModelConfig mc = spec.model;
    mc.zero_shot = plan_.split.mode == SplitMode::ZeroShot;
    const int n_cat = catalog_ ? static_cast<int>(catalog_->size()) : static_cast<int>(prices_.size());
    mc.n_categories = std::max(mc.n_categories, n_cat);

    TrainConfig tc = spec.train;
    if (spec.search) {
      auto it = reused.find(spec.name);
      if (spec.reuse_search && it != reused.end()) {
        tc = it->second;
      } else {
        const auto sr = random_search(spec.grid, tc.n_search, mix_seed({plan_.seed, si, wi, 0x5EA4C4}), tc,
                                      [&](const TrainConfig& c) {
                                        TrainConfig cc = c;
                                        cc.seed = mix_seed({plan_.seed, si, wi, 0x5EA4C4, 1});
                                        return train<float>(mc, assets, cc, spec.context).restored_val_loss;
                                      });
        tc = sr.best;
        o.search_log = search_log_json(sr);
        reused[spec.name] = tc;
      }
    }

    // test rows on the full history; features only look backwards
    std::vector<AssetData> targets;
    std::vector<InferenceSpan> spans;
    for (const auto& t : plan_.split.test_assets) {
      const PriceSeries& p = *by_ticker_.at(t);
      AssetData a = make_asset_data(p, detail::category_of(catalog_, prices_, t));
      std::size_t from = a.size(), to = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a.has_label(i) || a.label_dates[i] < w.test_start || !(a.label_dates[i] < w.test_end)) continue;
        from = std::min(from, i);
        to = std::max(to, i + 1);
      }
      if (to > from) spans.push_back({targets.size(), from, to});
      targets.push_back(std::move(a));
    }

    std::vector<std::vector<PositionSeries>> members;
    for (int m = 0; m < tc.n_ensemble; ++m) {
      TrainConfig mtc = tc;
      mtc.seed = mix_seed({plan_.seed, si, wi, static_cast<std::uint64_t>(m)});
      std::ostringstream log;
      const auto tr = train<float>(mc, assets, mtc, spec.context, &log);
      o.training_logs.push_back(log.str());
      o.best_iters.push_back(tr.best_iter);
      say("window " + w.label() + ": " + spec.name + " member " + std::to_string(m) + " best iter " +
          std::to_string(tr.best_iter) + " val " + format_double(tr.best_val));
      Rng rng(mix_seed({plan_.seed, si, wi, static_cast<std::uint64_t>(m), 0x1F}));
      auto inf = infer_positions(tr.model, targets, spans, mc.uses_context() ? &assets : nullptr, spec.context, rng,
                                 audit, spec.name, w.label(), plan_.dump_attention && m == 0, m);
      std::vector<PositionSeries> pos;
      for (std::size_t s = 0; s < spans.size(); ++s) {
        const auto& a = targets[spans[s].asset];
        PositionSeries ps;
        ps.ticker = a.ticker;
        ps.dates.assign(a.dates.begin() + static_cast<std::ptrdiff_t>(spans[s].from),
                        a.dates.begin() + static_cast<std::ptrdiff_t>(spans[s].to));
        ps.z = std::move(inf.z[s]);
        pos.push_back(std::move(ps));
      }
      members.push_back(std::move(pos));
      for (auto& rec : inf.attention) attention.push_back(std::move(rec));
    }
    o.positions = ensemble_positions(members);
    for (std::size_t a = 0; a < o.positions.size(); ++a) {
      const auto it = std::find_if(returns.begin(), returns.end(),
                                   [&](const ReturnsSeries& r) { return r.ticker == o.positions[a].ticker; });
      o.positions[a] = clip_positions(o.positions[a], *it, w.test_start, w.test_end);
    }
  }

  void aggregate(RunReport& rep) const {
    for (const auto& name : rep.strategies) {
      std::vector<const StrategyReport*> parts;
      for (const auto& w : rep.windows) {
        const auto* o = rep.outcome(name, w.label());
        if (!o || !o->ok) continue;
        parts.push_back(&o->report);
        rep.rows.push_back(make_row(name, w.label(), "raw", o->report));
        if (auto r = rescaled_report(o->report, plan_.rescale_target)) rep.rows.push_back(make_row(name, w.label(), "rescaled", *r));
      }
      const StrategyReport full = concatenate_reports(parts);
      rep.rows.push_back(make_row(name, "full", "raw", full));
      auto full_rescaled = rescaled_report(full, plan_.rescale_target);
      if (full_rescaled) rep.rows.push_back(make_row(name, "full", "rescaled", *full_rescaled));
      for (const auto& p : plan_.periods) {
        const auto part = slice_report(full, p.from, p.to);
        rep.rows.push_back(make_row(name, p.name, "raw", part));
        if (auto r = rescaled_report(part, plan_.rescale_target)) rep.rows.push_back(make_row(name, p.name, "rescaled", *r));
      }
      rep.full[name] = full;
      if (full_rescaled) rep.full_rescaled[name] = std::move(*full_rescaled);
    }
  }

  BacktestPlan plan_;
  const std::vector<PriceSeries>& prices_;
  const AssetCatalog* catalog_;
  std::map<std::string, const PriceSeries*> by_ticker_;
};

inline RunReport run_expanding_backtest(const BacktestPlan& plan, const std::vector<PriceSeries>& prices,
                                        const AssetCatalog* catalog = nullptr, const ProgressFn& progress = {}) {
  return ExpandingBacktest(plan, prices, catalog).run(progress);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const RunReport& rep) {
  using nlohmann::json;
  json windows = json::array();
  for (const auto& w : rep.windows) {
    windows.push_back({{"label", w.label()},
                       {"train_start", w.train_start.iso()},
                       {"train_end", w.train_end.iso()},
                       {"test_start", w.test_start.iso()},
                       {"test_end", w.test_end.iso()}});
  }
  json outcomes = json::array();
  for (const auto& o : rep.outcomes) {
    json e{{"strategy", o.strategy}, {"window", o.window}, {"ok", o.ok}, {"test_days", o.test_days}};
    if (!o.ok) e["error"] = o.error;
    if (o.train_digest) e["train_digest"] = hex64(*o.train_digest);
    if (!o.best_iters.empty()) e["best_iters"] = o.best_iters;
    if (o.search_log) e["search"] = *o.search_log;
    outcomes.push_back(std::move(e));
  }
  json rows = json::array();
  for (const auto& r : rep.rows) {
    rows.push_back({{"strategy", r.strategy},
                    {"period", r.period},
                    {"scale", r.scale},
                    {"sharpe", r.sharpe},
                    {"ann_vol", r.ann_vol},
                    {"mdd", r.mdd},
                    {"mdd_days", r.mdd_days},
                    {"n_days", r.n_days}});
  }
  json audit = json::array();
  for (const auto& c : rep.audit) {
    json e{{"strategy", c.strategy}, {"window", c.window}, {"check", c.check}, {"passed", c.passed}, {"failed", c.failed}};
    if (c.failed) e["first_failure"] = c.first_failure;
    audit.push_back(std::move(e));
  }
  return {{"windows", windows},
          {"strategies", rep.strategies},
          {"outcomes", outcomes},
          {"rows", rows},
          {"audit", {{"passed", rep.audit_passed}, {"checks", audit}}},
          {"failed", rep.failed()}};
}

inline nlohmann::json attention_json(const std::vector<TaggedAttention>& records) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& t : records) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : t.record.entries) {
      entries.push_back({{"ticker", e.ctx_ticker}, {"date", e.ctx_date.iso()}, {"weight", e.weight}});
    }
    out.push_back({{"strategy", t.strategy},
                   {"window", t.window},
                   {"member", t.member},
                   {"ticker", t.record.ticker},
                   {"date", t.record.date.iso()},
                   {"contexts", entries}});
  }
  return out;
}

inline void write_equity_csv(std::ostream& out, const StrategyReport& r) {
  out << "date,portfolio_return,equity\n";
  for (std::size_t i = 0; i < r.dates.size(); ++i) {
    out << r.dates[i].iso() << ',' << format_double(r.daily_returns[i]) << ',' << format_double(r.equity_curve[i]) << '\n';
  }
}

/// Reads an equity CSV back (dates and daily returns).
inline StrategyReport read_equity_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "date,portfolio_return,equity") throw ParseError("not an equity CSV");
  std::vector<Date> dates;
  std::vector<double> daily, equity;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string d, r, e;
    if (!std::getline(ss, d, ',') || !std::getline(ss, r, ',') || !std::getline(ss, e)) throw ParseError("bad equity row: " + line);
    dates.push_back(Date::parse(d));
    daily.push_back(std::stod(r));
    equity.push_back(std::stod(e));
  }
  StrategyReport rep = make_report(std::move(dates), std::move(daily));
  rep.equity_curve = std::move(equity);
  return rep;
}

inline void write_positions_csv(std::ostream& out, const RunReport& rep, const std::string& strategy) {
  out << "window,ticker,date,position\n";
  for (const auto& o : rep.outcomes) {
    if (o.strategy != strategy || !o.ok) continue;
    for (const auto& p : o.positions) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        out << o.window << ',' << p.ticker << ',' << p.dates[i].iso() << ',' << format_double(p.z[i]) << '\n';
      }
    }
  }
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

}  // namespace detail

/// Writes report.json, per-strategy equity and position CSVs, training logs,
/// search logs and the attention dump into `dir`.
inline void write_run_outputs(const RunReport& rep, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  detail::write_text(dir / "report.json", to_json(rep).dump(2) + "\n");
  for (const auto& name : rep.strategies) {
    std::ostringstream eq, eqr, pos;
    write_equity_csv(eq, rep.full.at(name));
    detail::write_text(dir / ("equity_" + name + ".csv"), eq.str());
    if (rep.full_rescaled.count(name)) {
      write_equity_csv(eqr, rep.full_rescaled.at(name));
      detail::write_text(dir / ("equity_" + name + "_rescaled.csv"), eqr.str());
    }
    write_positions_csv(pos, rep, name);
    detail::write_text(dir / ("positions_" + name + ".csv"), pos.str());
  }
  for (const auto& o : rep.outcomes) {
    for (std::size_t m = 0; m < o.training_logs.size(); ++m) {
      fs::create_directories(dir / "logs");
      detail::write_text(dir / "logs" / ("train_" + o.strategy + "_" + o.window + "_m" + std::to_string(m) + ".csv"),
                         o.training_logs[m]);
    }
    if (o.search_log) {
      fs::create_directories(dir / "logs");
      detail::write_text(dir / "logs" / ("search_" + o.strategy + "_" + o.window + ".json"), o.search_log->dump(2) + "\n");
    }
  }
  if (!rep.attention.empty()) detail::write_text(dir / "attention.json", attention_json(rep.attention).dump() + "\n");
}

}  // namespace xtrend
