#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtrend/backtest.hpp"
#include "xtrend/common.hpp"
#include "xtrend/cpd.hpp"
#include "xtrend/gp_harness.hpp"
#include "xtrend/market_data.hpp"
#include "xtrend/synthetic.hpp"
#include "xtrend/training.hpp"

namespace xtrend {

/// Split description before it is resolved against a universe.
struct SplitSpec {
  SplitMode mode = SplitMode::FewShot;
  int start_year = 0, end_year = 0, step_years = 0;
  std::vector<Window> windows;  ///< explicit windows override the year grid
  std::size_t n_test = 0;
  std::optional<AssetClass> exclude_from_test;
  std::uint64_t seed = 0;
};

struct DataSpec {
  std::string prices;  ///< `date,ticker,close` CSV
  std::string assets;  ///< optional asset metadata JSON
  std::optional<UniverseParams> synthetic;
  std::uint64_t synthetic_seed = 0;
};

/// Everything a CLI run can be configured with.
struct RunConfig {
  std::uint64_t seed = 0;
  DataSpec data;
  SplitSpec split;
  BacktestPlan plan;  ///< split is filled by resolve_split
  GpHarnessConfig harness;
  SegmentationConfig segmentation;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ValidationError("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(where + "." + key + ": " + e.what());
  }
}

inline Date read_date(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ValidationError(where + " needs '" + key + "'");
  return Date::parse(j.at(key).get<std::string>());
}

inline void parse_train(const nlohmann::json& j, TrainConfig& t, const std::string& where) {
  check_keys(j, where,
             {"lr", "batch", "dropout", "d_h", "clip", "patience", "max_iters", "val_frac", "n_search", "n_ensemble",
              "target_stride", "max_batches_per_iter"});
  read(j, "lr", t.lr, where);
  read(j, "batch", t.batch, where);
  read(j, "dropout", t.dropout, where);
  read(j, "d_h", t.d_h, where);
  read(j, "clip", t.clip, where);
  read(j, "patience", t.patience, where);
  read(j, "max_iters", t.max_iters, where);
  read(j, "val_frac", t.val_frac, where);
  read(j, "n_search", t.n_search, where);
  read(j, "n_ensemble", t.n_ensemble, where);
  read(j, "target_stride", t.target_stride, where);
  read(j, "max_batches_per_iter", t.max_batches_per_iter, where);
}

inline void parse_segmentation(const nlohmann::json& j, SegmentationConfig& s, const std::string& where) {
  check_keys(j, where, {"nu", "lbw", "l_min", "l_max"});
  read(j, "nu", s.nu, where);
  read(j, "lbw", s.l_lbw, where);
  read(j, "l_min", s.l_min, where);
  read(j, "l_max", s.l_max, where);
}

inline StrategySpec parse_strategy(const nlohmann::json& j, std::size_t index) {
  const std::string where = "strategies[" + std::to_string(index) + "]";
  check_keys(j, where,
             {"name", "kind", "variant", "heads", "quantiles", "context", "train", "search", "reuse_search", "grid",
              "cross_attention"});
  StrategySpec s;
  std::string kind;
  read(j, "kind", kind, where);
  s.kind = parse_strategy_kind(kind);
  s.name = kind;
  read(j, "name", s.name, where);
  if (s.kind != StrategyKind::Neural) {
    for (const char* k : {"variant", "heads", "quantiles", "context", "train", "search", "reuse_search", "grid"}) {
      if (j.contains(k)) throw ValidationError(where + ": '" + k + "' only applies to neural strategies");
    }
    return s;
  }
  std::string variant = "xtrend";
  read(j, "variant", variant, where);
  s.model.variant = parse_variant(variant);
  read(j, "heads", s.model.n_heads, where);
  read(j, "quantiles", s.model.quantiles, where);
  read(j, "cross_attention", s.model.cross_attention, where);
  if (j.contains("context")) {
    const auto& c = j.at("context");
    const std::string cw = where + ".context";
    check_keys(c, cw, {"mode", "size", "length", "nu", "lbw", "l_min"});
    std::string mode = "C";
    read(c, "mode", mode, cw);
    s.context.mode = parse_context_mode(mode);
    read(c, "size", s.context.size, cw);
    read(c, "length", s.context.length, cw);
    auto& seg = s.context.segmentation;
    seg.l_max = s.context.length;
    seg.nu = s.context.length <= 21 ? 0.9 : 0.95;
    read(c, "nu", seg.nu, cw);
    read(c, "lbw", seg.l_lbw, cw);
    read(c, "l_min", seg.l_min, cw);
  }
  s.model.context_mode = s.context.mode;
  if (j.contains("train")) parse_train(j.at("train"), s.train, where + ".train");
  read(j, "search", s.search, where);
  read(j, "reuse_search", s.reuse_search, where);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    const std::string gw = where + ".grid";
    check_keys(g, gw, {"batch", "dropout", "d_h", "clip"});
    read(g, "batch", s.grid.batch, gw);
    read(g, "dropout", s.grid.dropout, gw);
    read(g, "d_h", s.grid.d_h, gw);
    read(g, "clip", s.grid.clip, gw);
  }
  return s;
}

inline void parse_harness(const nlohmann::json& j, GpHarnessConfig& h) {
  const std::string w = "harness";
  check_keys(j, w,
             {"context_sizes", "n_seeds", "d_h", "heads", "steps", "batch", "lr", "clip", "eval_episodes", "lengthscale",
              "amplitude", "noise_var", "dx", "x_min", "x_max", "context_min", "context_max", "target_length"});
  read(j, "context_sizes", h.context_sizes, w);
  read(j, "n_seeds", h.n_seeds, w);
  read(j, "d_h", h.d_h, w);
  read(j, "heads", h.n_heads, w);
  read(j, "steps", h.steps, w);
  read(j, "batch", h.batch, w);
  read(j, "lr", h.lr, w);
  read(j, "clip", h.clip, w);
  read(j, "eval_episodes", h.eval_episodes, w);
  read(j, "lengthscale", h.lengthscale, w);
  read(j, "amplitude", h.amplitude, w);
  read(j, "noise_var", h.noise_var, w);
  read(j, "dx", h.dx, w);
  read(j, "x_min", h.x_min, w);
  read(j, "x_max", h.x_max, w);
  read(j, "context_min", h.context_min, w);
  read(j, "context_max", h.context_max, w);
  read(j, "target_length", h.target_length, w);
}

}  // namespace detail

/// Parses a run configuration. Unknown keys are errors so typos surface early.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, "config",
                     {"seed", "data", "split", "portfolio", "periods", "min_test_days", "dump_attention", "cpd_fit",
                      "strategies", "harness", "segmentation", "rescale_target"});
  RunConfig rc;
  detail::read(j, "seed", rc.seed, "config");

  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, "data", {"prices", "assets", "synthetic"});
    detail::read(d, "prices", rc.data.prices, "data");
    detail::read(d, "assets", rc.data.assets, "data");
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      detail::check_keys(s, "data.synthetic", {"n_assets", "n", "start", "seed"});
      UniverseParams up;
      detail::read(s, "n_assets", up.n_assets, "data.synthetic");
      detail::read(s, "n", up.n, "data.synthetic");
      if (s.contains("start")) up.start_date = Date::parse(s.at("start").get<std::string>());
      detail::read(s, "seed", rc.data.synthetic_seed, "data.synthetic");
      up.validate();
      rc.data.synthetic = up;
    }
    if (rc.data.synthetic && !rc.data.prices.empty()) throw ValidationError("data: give either prices or synthetic, not both");
  }

  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::check_keys(s, "split", {"mode", "start_year", "end_year", "step_years", "windows", "n_test", "exclude_from_test", "seed"});
    std::string mode = "few_shot";
    detail::read(s, "mode", mode, "split");
    if (mode == "few_shot") {
      rc.split.mode = SplitMode::FewShot;
    } else if (mode == "zero_shot") {
      rc.split.mode = SplitMode::ZeroShot;
    } else {
      throw ValidationError("split.mode must be few_shot or zero_shot");
    }
    detail::read(s, "start_year", rc.split.start_year, "split");
    detail::read(s, "end_year", rc.split.end_year, "split");
    detail::read(s, "step_years", rc.split.step_years, "split");
    detail::read(s, "n_test", rc.split.n_test, "split");
    detail::read(s, "seed", rc.split.seed, "split");
    if (s.contains("exclude_from_test")) rc.split.exclude_from_test = parse_asset_class(s.at("exclude_from_test").get<std::string>());
    if (s.contains("windows")) {
      for (const auto& w : s.at("windows")) {
        detail::check_keys(w, "split.windows[]", {"train_start", "test_start", "test_end"});
        const Date ts = detail::read_date(w, "test_start", "split.windows[]");
        rc.split.windows.push_back({detail::read_date(w, "train_start", "split.windows[]"), ts, ts,
                                    detail::read_date(w, "test_end", "split.windows[]")});
      }
    }
  }

  if (j.contains("portfolio")) {
    const auto& p = j.at("portfolio");
    detail::check_keys(p, "portfolio", {"sigma_tgt", "cost"});
    detail::read(p, "sigma_tgt", rc.plan.portfolio.sigma_tgt, "portfolio");
    detail::read(p, "cost", rc.plan.portfolio.cost, "portfolio");
  }
  if (j.contains("periods")) {
    for (const auto& p : j.at("periods")) {
      detail::check_keys(p, "periods[]", {"name", "from", "to"});
      ReportPeriod rp;
      detail::read(p, "name", rp.name, "periods[]");
      rp.from = detail::read_date(p, "from", "periods[]");
      rp.to = detail::read_date(p, "to", "periods[]");
      rc.plan.periods.push_back(rp);
    }
  }
  detail::read(j, "min_test_days", rc.plan.min_test_days, "config");
  detail::read(j, "dump_attention", rc.plan.dump_attention, "config");
  detail::read(j, "rescale_target", rc.plan.rescale_target, "config");
  if (j.contains("cpd_fit")) {
    const auto& c = j.at("cpd_fit");
    detail::check_keys(c, "cpd_fit", {"max_iter", "starts"});
    detail::read(c, "max_iter", rc.plan.cpd_fit.max_iter, "cpd_fit");
    detail::read(c, "starts", rc.plan.cpd_fit.starts, "cpd_fit");
  }
  if (j.contains("strategies")) {
    const auto& arr = j.at("strategies");
    if (!arr.is_array()) throw ValidationError("strategies must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) rc.plan.strategies.push_back(detail::parse_strategy(arr[i], i));
  }
  if (j.contains("harness")) detail::parse_harness(j.at("harness"), rc.harness);
  if (j.contains("segmentation")) detail::parse_segmentation(j.at("segmentation"), rc.segmentation, "segmentation");
  rc.plan.seed = rc.seed;
  rc.harness.seed = rc.seed;
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

/// Prices and catalog of a configured data source. Relative paths resolve against `base`.
struct LoadedData {
  std::vector<PriceSeries> prices;
  std::optional<AssetCatalog> catalog;
};

inline LoadedData load_data(const DataSpec& d, const std::string& base = ".") {
  LoadedData out;
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path.string() : (std::filesystem::path(base) / path).string();
  };
  if (d.synthetic) {
    auto u = gen_mixed_universe(*d.synthetic, d.synthetic_seed);
    out.prices = u.prices();
    out.catalog = std::move(u.catalog);
    return out;
  }
  if (d.prices.empty()) throw ValidationError("config has no data source (data.prices or data.synthetic)");
  if (!d.assets.empty()) out.catalog = AssetCatalog::load(resolve(d.assets));
  out.prices = load_price_csv(resolve(d.prices), out.catalog ? &*out.catalog : nullptr);
  if (!out.catalog) {
    AssetCatalog cat;
    for (const auto& p : out.prices) cat.add({p.ticker, p.ticker, AssetClass::CM});
    out.catalog = std::move(cat);
  }
  return out;
}

/// Turns the split description into a concrete plan over `catalog`.
inline SplitPlan resolve_split(const SplitSpec& s, const AssetCatalog& catalog, const std::vector<PriceSeries>& prices) {
  AssetCatalog present;
  for (const auto& a : catalog.assets()) {
    const bool has = std::any_of(prices.begin(), prices.end(), [&](const PriceSeries& p) { return p.ticker == a.ticker; });
    if (has) present.add(a);
  }
  SplitPlan plan = s.mode == SplitMode::ZeroShot
                       ? make_zero_shot_split(present, s.n_test, s.seed, s.exclude_from_test)
                       : make_few_shot_split(present);
  if (!s.windows.empty()) {
    plan.windows = s.windows;
  } else {
    if (s.step_years <= 0) throw ValidationError("split needs explicit windows or start_year/end_year/step_years");
    plan.windows = make_expanding_windows(s.start_year, s.end_year, s.step_years);
  }
  plan.validate();
  return plan;
}

}  // namespace xtrend
