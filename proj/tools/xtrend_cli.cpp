#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xtrend/backtest.hpp"
#include "xtrend/config.hpp"
#include "xtrend/cpd.hpp"
#include "xtrend/features.hpp"
#include "xtrend/gp_harness.hpp"
#include "xtrend/market_data.hpp"
#include "xtrend/synthetic.hpp"
#include "xtrend/training.hpp"

namespace fs = std::filesystem;
using namespace xtrend;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

RunConfig config_or_default(const Globals& g, bool required) {
  RunConfig rc;
  if (!g.config.empty()) {
    rc = load_run_config(g.config);
  } else if (required) {
    throw ValidationError("this command needs --config <path>");
  }
  if (g.seed) {
    rc.seed = *g.seed;
    rc.plan.seed = *g.seed;
    rc.harness.seed = *g.seed;
  }
  return rc;
}

std::string config_dir(const Globals& g) {
  return g.config.empty() ? "." : fs::path(g.config).parent_path().string();
}

/// Prices from --prices, else from the configured data source.
LoadedData prices_from(const Globals& g, const std::string& prices, const std::string& assets) {
  if (!prices.empty()) {
    DataSpec d;
    d.prices = prices;
    d.assets = assets;
    return load_data(d);
  }
  const RunConfig rc = config_or_default(g, false);
  if (g.config.empty()) throw ValidationError("give --prices <csv> or a --config with a data section");
  return load_data(rc.data, config_dir(g));
}

// ---------------------------------------------------------------------------

int cmd_ingest(const Globals& g, const std::string& prices, const std::string& assets) {
  auto data = prices_from(g, prices, assets);
  LoadStats stats;
  if (!prices.empty()) {
    std::optional<AssetCatalog> cat;
    if (!assets.empty()) cat = AssetCatalog::load(assets);
    data.prices = load_price_csv(prices, cat ? &*cat : nullptr, &stats);
  }
  std::ostringstream csv;
  write_price_csv(csv, data.prices);
  write_file(fs::path(g.out) / "prices.csv", csv.str());
  nlohmann::json summary{{"rows", stats.rows}, {"rejected_unknown_ticker", stats.rejected_unknown_ticker}};
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : data.prices) {
    list.push_back({{"ticker", p.ticker}, {"n", p.size()}, {"first", p.dates.front().iso()}, {"last", p.dates.back().iso()}});
  }
  summary["assets"] = list;
  write_file(fs::path(g.out) / "ingest.json", summary.dump(2) + "\n");
  std::cout << "ingested " << data.prices.size() << " assets into " << (fs::path(g.out) / "prices.csv").string() << "\n";
  return 0;
}

int cmd_features(const Globals& g, const std::string& prices, const std::string& assets) {
  const auto data = prices_from(g, prices, assets);
  std::ostringstream csv;
  csv << "ticker,date";
  for (const char* n : feature_names()) csv << ',' << n;
  csv << '\n';
  std::size_t rows = 0;
  for (const auto& p : data.prices) {
    const auto fm = build_feature_matrix(p, make_returns(p));
    for (std::size_t i = 0; i < fm.size(); ++i) {
      csv << p.ticker << ',' << fm.dates[i].iso();
      for (double v : fm.rows[i]) csv << ',' << format_double(v);
      csv << '\n';
    }
    rows += fm.size();
  }
  write_file(fs::path(g.out) / "features.csv", csv.str());
  std::cout << "wrote " << rows << " feature rows\n";
  return 0;
}

struct SegmentFlags {
  std::optional<double> nu;
  std::optional<int> l_max, l_min, lbw;
  std::string ticker;
};

int cmd_cpd_segment(const Globals& g, const std::string& prices, const std::string& assets, const SegmentFlags& f) {
  const auto data = prices_from(g, prices, assets);
  SegmentationConfig cfg = g.config.empty() ? SegmentationConfig{} : config_or_default(g, false).segmentation;
  if (f.nu) cfg.nu = *f.nu;
  if (f.l_max) cfg.l_max = *f.l_max;
  if (f.l_min) cfg.l_min = *f.l_min;
  if (f.lbw) cfg.l_lbw = *f.lbw;
  cfg.validate();
  std::ostringstream csv;
  csv << "ticker,t0,t1,start,end,length,severity,forced\n";
  std::size_t n = 0;
  for (const auto& p : data.prices) {
    if (!f.ticker.empty() && p.ticker != f.ticker) continue;
    for (const auto& r : segment_series(p, cfg)) {
      csv << p.ticker << ',' << r.t0 << ',' << r.t1 << ',' << p.dates[r.t0].iso() << ',' << p.dates[r.t1 - 1].iso() << ','
          << r.length() << ',' << format_double(r.severity) << ',' << (r.forced ? 1 : 0) << '\n';
      ++n;
    }
    log_line("segmented " + p.ticker);
  }
  write_file(fs::path(g.out) / "regimes.csv", csv.str());
  std::cout << "wrote " << n << " regimes\n";
  return 0;
}

nlohmann::json params_json(const XTrendModel<float>& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : m.params()) {
    std::vector<double> v(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) v[static_cast<std::size_t>(i)] = p.value.data()[i];
    arr.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"values", v}});
  }
  const auto& c = m.config();
  return {{"variant", to_string(c.variant)}, {"context_mode", to_string(c.context_mode)}, {"d_h", c.d_h},
          {"heads", c.n_heads}, {"zero_shot", c.zero_shot}, {"params", arr}};
}

int cmd_train(const Globals& g, const std::string& strategy, const std::string& until) {
  const RunConfig rc = config_or_default(g, true);
  const auto data = load_data(rc.data, config_dir(g));
  const StrategySpec* spec = nullptr;
  for (const auto& s : rc.plan.strategies) {
    if (s.kind == StrategyKind::Neural && (strategy.empty() || s.name == strategy)) {
      spec = &s;
      break;
    }
  }
  if (!spec) throw ValidationError(strategy.empty() ? "config has no neural strategy" : "no neural strategy named '" + strategy + "'");
  spec->validate();
  std::optional<Date> cutoff;
  if (!until.empty()) cutoff = Date::parse(until);

  std::set<std::string> train_assets;
  if (rc.split.mode == SplitMode::ZeroShot || rc.split.step_years > 0 || !rc.split.windows.empty()) {
    train_assets = resolve_split(rc.split, *data.catalog, data.prices).train_assets;
  } else {
    for (const auto& p : data.prices) train_assets.insert(p.ticker);
  }
  std::vector<AssetData> assets;
  const bool cpd = spec->model.uses_context() && spec->context.mode == ContextMode::CpdSegments;
  for (const auto& p : data.prices) {
    if (!train_assets.count(p.ticker)) continue;
    AssetData a = make_asset_data(p, data.catalog->category(p.ticker), cutoff);
    if (a.size() == 0) continue;
    if (cpd) attach_regimes(a, p, spec->context.segmentation, rc.plan.cpd_fit);
    log_line("prepared " + p.ticker + " (" + std::to_string(a.size()) + " rows)");
    assets.push_back(std::move(a));
  }
  ModelConfig mc = spec->model;
  mc.zero_shot = rc.split.mode == SplitMode::ZeroShot;
  mc.n_categories = std::max(mc.n_categories, static_cast<int>(data.catalog->size()));
  TrainConfig tc = spec->train;
  tc.seed = rc.seed;
  if (spec->search) {
    const auto sr = random_search(spec->grid, tc.n_search, mix_seed({rc.seed, 0x5EA4C4}), tc, [&](const TrainConfig& c) {
      TrainConfig cc = c;
      cc.seed = mix_seed({rc.seed, 0x5EA4C4, 1});
      const double v = train<float>(mc, assets, cc, spec->context).restored_val_loss;
      log_line("search trial val " + format_double(v));
      return v;
    });
    tc = sr.best;
    tc.seed = rc.seed;
    write_file(fs::path(g.out) / ("search_" + spec->name + ".json"), search_log_json(sr).dump(2) + "\n");
  }
  for (int m = 0; m < tc.n_ensemble; ++m) {
    TrainConfig mtc = tc;
    mtc.seed = mix_seed({rc.seed, static_cast<std::uint64_t>(m)});
    std::ostringstream log;
    const auto tr = train<float>(mc, assets, mtc, spec->context, &log);
    const std::string stem = spec->name + "_m" + std::to_string(m);
    write_file(fs::path(g.out) / ("train_" + stem + ".csv"), log.str());
    nlohmann::json mj = params_json(tr.model);
    mj["best_iter"] = tr.best_iter;
    mj["best_val_loss"] = tr.best_val;
    write_file(fs::path(g.out) / ("model_" + stem + ".json"), mj.dump() + "\n");
    std::cout << stem << ": best iteration " << tr.best_iter << ", validation loss " << format_double(tr.best_val) << "\n";
  }
  return 0;
}

void print_rows(const nlohmann::json& rows) {
  std::cout << std::left << std::setw(16) << "strategy" << std::setw(14) << "period" << std::setw(10) << "scale"
            << std::right << std::setw(9) << "sharpe" << std::setw(9) << "vol" << std::setw(9) << "mdd" << std::setw(9)
            << "mdd_days" << std::setw(8) << "days" << "\n";
  for (const auto& r : rows) {
    std::cout << std::left << std::setw(16) << r.at("strategy").get<std::string>() << std::setw(14)
              << r.at("period").get<std::string>() << std::setw(10) << r.at("scale").get<std::string>() << std::right
              << std::fixed << std::setprecision(3) << std::setw(9) << r.at("sharpe").get<double>() << std::setw(9)
              << r.at("ann_vol").get<double>() << std::setw(9) << r.at("mdd").get<double>() << std::setw(9)
              << r.at("mdd_days").get<int>() << std::setw(8) << r.at("n_days").get<std::size_t>() << "\n";
  }
  std::cout.unsetf(std::ios::floatfield);
}

int cmd_backtest(const Globals& g) {
  RunConfig rc = config_or_default(g, true);
  const auto data = load_data(rc.data, config_dir(g));
  rc.plan.split = resolve_split(rc.split, *data.catalog, data.prices);
  const auto rep = run_expanding_backtest(rc.plan, data.prices, &*data.catalog, log_line);
  write_run_outputs(rep, g.out);
  print_rows(to_json(rep).at("rows"));
  for (const auto& o : rep.outcomes) {
    if (!o.ok) std::cerr << "window " << o.window << " of " << o.strategy << " failed: " << o.error << "\n";
  }
  if (!rep.audit_passed) std::cerr << "causality audit failed; see report.json\n";
  return rep.failed() ? 1 : 0;
}

int cmd_report(const Globals& g, const std::string& run_dir) {
  const fs::path dir = run_dir.empty() ? fs::path(g.out) : fs::path(run_dir);
  std::ifstream in(dir / "report.json");
  if (!in) throw ValidationError("no report.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("report.json is not valid JSON: " + std::string(e.what()));
  }
  std::ostringstream csv;
  csv << "strategy,period,scale,sharpe,ann_vol,mdd,mdd_days,n_days\n";
  for (const auto& r : j.at("rows")) {
    csv << r.at("strategy").get<std::string>() << ',' << r.at("period").get<std::string>() << ','
        << r.at("scale").get<std::string>() << ',' << format_double(r.at("sharpe").get<double>()) << ','
        << format_double(r.at("ann_vol").get<double>()) << ',' << format_double(r.at("mdd").get<double>()) << ','
        << r.at("mdd_days").get<int>() << ',' << r.at("n_days").get<std::size_t>() << '\n';
  }
  write_file(fs::path(g.out) / "summary.csv", csv.str());
  print_rows(j.at("rows"));
  const bool audit = j.at("audit").at("passed").get<bool>();
  std::cout << "causality audit: " << (audit ? "passed" : "FAILED") << "\n";
  return 0;
}

struct SynthFlags {
  std::string kind = "whitenoise";
  std::size_t n = 1000;
  std::size_t assets = 10;
  std::optional<double> vol, drift;
  std::string ticker = "SYN";
};

int cmd_synth(const Globals& g, const SynthFlags& f) {
  const std::uint64_t seed = g.seed.value_or(0);
  std::ostringstream csv;
  if (f.kind == "mixed") {
    UniverseParams up;
    up.n_assets = f.assets;
    up.n = f.n;
    const auto u = gen_mixed_universe(up, seed);
    write_price_csv(csv, u.prices());
    nlohmann::json cat = nlohmann::json::array();
    for (const auto& a : u.catalog.assets()) {
      cat.push_back({{"ticker", a.ticker}, {"name", a.name}, {"asset_class", to_string(a.asset_class)}});
    }
    write_file(fs::path(g.out) / "assets.json", nlohmann::json{{"assets", cat}}.dump(2) + "\n");
  } else {
    const auto kind = parse_synthetic_kind(f.kind);
    SyntheticParams p;
    p.ticker = f.ticker;
    p.n = f.n;
    if (f.vol) p.vol = *f.vol;
    if (f.drift) p.drift = *f.drift;
    write_price_csv(csv, {gen_synthetic(kind, p, seed).prices});
  }
  write_file(fs::path(g.out) / "synthetic.csv", csv.str());
  std::cout << "wrote " << (fs::path(g.out) / "synthetic.csv").string() << "\n";
  return 0;
}

int cmd_gp_harness(const Globals& g, std::optional<int> steps, std::optional<int> seeds) {
  RunConfig rc = config_or_default(g, false);
  if (steps) rc.harness.steps = *steps;
  if (seeds) rc.harness.n_seeds = *seeds;
  const auto res = gp_fewshot_harness(rc.harness, log_line);
  write_file(fs::path(g.out) / "gp_harness.json", to_json(res).dump(2) + "\n");
  std::cout << std::left << std::setw(22) << "model" << std::setw(6) << "|C|" << std::right << std::setw(10) << "mse"
            << std::setw(10) << "stderr" << "\n";
  for (const auto& a : res.arms) {
    std::cout << std::left << std::setw(22) << to_string(a.model) << std::setw(6) << a.context_size << std::right
              << std::fixed << std::setprecision(4) << std::setw(10) << a.mean << std::setw(10) << a.std_error << "\n";
  }
  std::cout << "unconditional-mean mse " << std::setprecision(4) << res.mean_predictor_mse << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trend-following research toolkit: data preparation, change-point segmentation, "
               "few-shot sequence models and walk-forward backtests."};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "JSON run configuration");
  auto* seed_opt = app.add_option("--seed", seed_value, "Seed overriding the configuration (u64)");
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  std::string prices, assets;
  auto add_data_flags = [&](CLI::App* sub) {
    sub->add_option("--prices", prices, "Price CSV with columns date,ticker,close");
    sub->add_option("--assets", assets, "Asset metadata JSON");
  };

  auto* ingest = app.add_subcommand("ingest", "Validate a price CSV and write a normalized copy");
  add_data_flags(ingest);
  auto* features = app.add_subcommand("features", "Compute the eight model input features per asset and date");
  add_data_flags(features);

  auto* cpd = app.add_subcommand("cpd", "Change-point detection");
  cpd->require_subcommand(1);
  auto* segment = cpd->add_subcommand("segment", "Segment price series into regimes");
  add_data_flags(segment);
  SegmentFlags seg;
  segment->add_option("--nu", seg.nu, "Severity threshold in (0.5, 1)");
  segment->add_option("--l-max", seg.l_max, "Maximum regime length");
  segment->add_option("--l-min", seg.l_min, "Minimum regime length");
  segment->add_option("--lbw", seg.lbw, "Lookback window length");
  segment->add_option("--ticker", seg.ticker, "Only segment this ticker");

  auto* train_cmd = app.add_subcommand("train", "Train a configured neural strategy on all data before --until");
  std::string strategy, until;
  train_cmd->add_option("--strategy", strategy, "Neural strategy name (default: first neural strategy)");
  train_cmd->add_option("--until", until, "Exclusive cutoff date YYYY-MM-DD (default: all data)");

  auto* backtest = app.add_subcommand("backtest", "Run the expanding-window backtest described by --config");

  auto* report = app.add_subcommand("report", "Summarize a backtest output directory");
  std::string run_dir;
  report->add_option("--run", run_dir, "Backtest output directory (default: --out)");

  auto* synth = app.add_subcommand("synth", "Generate synthetic price data");
  SynthFlags sf;
  synth->add_option("--kind", sf.kind, "whitenoise, trend, gpdraw or mixed")
      ->check(CLI::IsMember({"whitenoise", "trend", "gpdraw", "mixed"}))
      ->capture_default_str();
  synth->add_option("--n", sf.n, "Number of prices per asset")->capture_default_str();
  synth->add_option("--assets", sf.assets, "Number of assets (mixed only)")->capture_default_str();
  synth->add_option("--vol", sf.vol, "Daily return volatility");
  synth->add_option("--drift", sf.drift, "Absolute daily drift inside trend regimes");
  synth->add_option("--ticker", sf.ticker, "Ticker of a single synthetic series")->capture_default_str();

  auto* harness = app.add_subcommand("gp-harness", "Few-shot regression study on Gaussian-process draws");
  std::optional<int> h_steps, h_seeds;
  harness->add_option("--steps", h_steps, "Training steps per model");
  harness->add_option("--seeds", h_seeds, "Number of seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (ingest->parsed()) return cmd_ingest(g, prices, assets);
    if (features->parsed()) return cmd_features(g, prices, assets);
    if (segment->parsed()) return cmd_cpd_segment(g, prices, assets, seg);
    if (train_cmd->parsed()) return cmd_train(g, strategy, until);
    if (backtest->parsed()) return cmd_backtest(g);
    if (report->parsed()) return cmd_report(g, run_dir);
    if (synth->parsed()) return cmd_synth(g, sf);
    if (harness->parsed()) return cmd_gp_harness(g, h_steps, h_seeds);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
