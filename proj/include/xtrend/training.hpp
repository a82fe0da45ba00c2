#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtrend/classical.hpp"
#include "xtrend/common.hpp"
#include "xtrend/cpd.hpp"
#include "xtrend/diffcore.hpp"
#include "xtrend/features.hpp"
#include "xtrend/market_data.hpp"
#include "xtrend/model.hpp"

namespace xtrend {

inline constexpr int kTargetLength = 126;
inline constexpr int kWarmupSteps = 63;

// ---------------------------------------------------------------------------
// Per-asset model inputs

/// Feature rows of one asset with the next-day return each row is scored on.
struct AssetData {
  std::string ticker;
  int category = -1;
  std::vector<Date> dates;             ///< decision date of each row
  std::vector<Date> label_dates;       ///< date the next-day return is realized (row has a label)
  ad::Mat<double> features;            ///< rows x kNumFeatures
  std::vector<double> scaled_return;   ///< r_{t+1} / sigma_t, NaN when not yet observed
  std::vector<double> sigma;           ///< ex-ante daily volatility at the decision date
  std::size_t price_offset = 0;        ///< price index of row 0
  std::vector<Regime> regimes;         ///< CPD regimes in price indices (context mode C)

  std::size_t size() const { return dates.size(); }
  bool has_label(std::size_t i) const { return std::isfinite(scaled_return[i]); }
  /// Number of leading rows that carry a label.
  std::size_t labelled() const {
    std::size_t n = 0;
    while (n < size() && has_label(n)) ++n;
    return n;
  }
  /// Rows [lo, hi) as a context sequence: features followed by the scaled return.
  ad::Mat<double> context_rows(std::size_t lo, std::size_t hi) const {
    ad::Mat<double> out(static_cast<Eigen::Index>(hi - lo), kNumFeatures + 1);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto r = static_cast<Eigen::Index>(i - lo);
      out.row(r).head(kNumFeatures) = features.row(static_cast<Eigen::Index>(i));
      out(r, kNumFeatures) = scaled_return[i];
    }
    return out;
  }
  ad::Mat<double> target_rows(std::size_t lo, std::size_t hi) const {
    return features.middleRows(static_cast<Eigen::Index>(lo), static_cast<Eigen::Index>(hi - lo));
  }
};

/// Builds model inputs from prices observed strictly before `cutoff` (all prices
/// when absent). The last row has no label.
inline AssetData make_asset_data(const PriceSeries& prices, int category, std::optional<Date> cutoff = std::nullopt) {
  PriceSeries p = prices;
  if (cutoff) {
    std::size_t n = 0;
    while (n < p.size() && p.dates[n] < *cutoff) ++n;
    p.dates.resize(n);
    p.close.resize(n);
  }
  AssetData a;
  a.ticker = p.ticker;
  a.category = category;
  if (p.size() < 2) return a;
  const auto rs = make_returns(p);
  const auto fm = build_feature_matrix(p, rs);
  a.dates = fm.dates;
  a.features.resize(static_cast<Eigen::Index>(fm.size()), kNumFeatures);
  a.scaled_return.assign(fm.size(), std::numeric_limits<double>::quiet_NaN());
  a.label_dates.assign(fm.size(), Date{});
  a.sigma.resize(fm.size());
  a.price_offset = fm.size() ? fm.price_index[0] : 0;
  for (std::size_t i = 0; i < fm.size(); ++i) {
    for (int j = 0; j < kNumFeatures; ++j) a.features(static_cast<Eigen::Index>(i), j) = fm.rows[i][static_cast<std::size_t>(j)];
    const std::size_t t = fm.price_index[i];
    a.sigma[i] = rs.sigma[t - 1];
    if (t < rs.size()) {
      a.scaled_return[i] = rs.r[t] / a.sigma[i];
      a.label_dates[i] = p.dates[t + 1];
    }
  }
  return a;
}

/// Attaches CPD regimes computed on the same truncated price history.
inline void attach_regimes(AssetData& a, const PriceSeries& prices, const SegmentationConfig& cfg,
                           const FitOptions& opt = {}) {
  PriceSeries p = prices;
  const std::size_t n = a.price_offset + a.size();
  p.dates.resize(std::min(n, p.size()));
  p.close.resize(std::min(n, p.size()));
  a.regimes = segment_series(p, cfg, opt);
}

// ---------------------------------------------------------------------------
// Context sampling

struct ContextSamplerConfig {
  ContextMode mode = ContextMode::CpdSegments;
  int size = 20;       ///< |C|
  int length = 21;     ///< l_c; the maximum regime length in mode C
  SegmentationConfig segmentation{0.9, 21, 5, 21};

  void validate() const {
    if (size < 1) throw ValidationError("context set size must be positive");
    if (length < 1) throw ValidationError("context length must be positive");
    if (mode == ContextMode::TimeEquivalent && length != kTargetLength) {
      throw ValidationError("time-equivalent contexts use the target length " + std::to_string(kTargetLength));
    }
    if (mode == ContextMode::CpdSegments) {
      segmentation.validate();
      if (segmentation.l_max != length) throw ValidationError("CPD context length must equal the maximum regime length");
    }
  }
};

/// One candidate context: rows [lo, hi) of asset `asset`.
struct ContextSpan {
  std::size_t asset = 0;
  std::size_t lo = 0, hi = 0;
};

/// Sequences eligible as contexts. Every row of a candidate carries a label
/// realized strictly before `before` and lies below the per-asset row limit.
class ContextPool {
 public:
  ContextPool(const std::vector<AssetData>& assets, const ContextSamplerConfig& cfg,
              std::optional<Date> before = std::nullopt, const std::vector<std::size_t>* row_limit = nullptr)
      : assets_(&assets), cfg_(cfg) {
    cfg.validate();
    for (std::size_t a = 0; a < assets.size(); ++a) {
      const auto& d = assets[a];
      std::size_t hi = d.labelled();
      if (row_limit) hi = std::min(hi, (*row_limit)[a]);
      if (before) {
        while (hi > 0 && !(d.label_dates[hi - 1] < *before)) --hi;
      }
      if (cfg.mode == ContextMode::CpdSegments) {
        for (const auto& r : d.regimes) {
          if (r.t1 <= d.price_offset) continue;
          const std::size_t lo = std::max(r.t0, d.price_offset) - d.price_offset;
          const std::size_t end = std::min(r.t1 - d.price_offset, hi);
          if (end > lo && end - lo >= static_cast<std::size_t>(cfg.segmentation.l_min)) spans_.push_back({a, lo, end});
        }
      } else {
        const auto len = static_cast<std::size_t>(cfg.length);
        if (hi >= len) {
          // windows ending at rows len-1 .. hi-1, stored as a run
          runs_.push_back({a, len - 1, hi});
          total_ += hi - len + 1;
        }
      }
    }
    if (cfg.mode == ContextMode::CpdSegments) total_ = spans_.size();
  }

  std::size_t size() const { return total_; }

  ContextSpan at(std::size_t k) const {
    if (cfg_.mode == ContextMode::CpdSegments) return spans_.at(k);
    for (const auto& r : runs_) {
      const std::size_t n = r.hi - r.lo;
      if (k < n) {
        const std::size_t end = r.lo + k;
        return {r.asset, end + 1 - static_cast<std::size_t>(cfg_.length), end + 1};
      }
      k -= n;
    }
    throw ValidationError("context index out of range");
  }

  /// |C| distinct candidates, uniformly at random.
  std::vector<ContextSpan> sample(Rng& rng) const {
    const auto need = static_cast<std::size_t>(cfg_.size);
    if (total_ < need) {
      throw ValidationError("context pool holds " + std::to_string(total_) + " sequences but " + std::to_string(need) +
                            " are needed (deficit " + std::to_string(need - total_) + ")");
    }
    std::vector<std::size_t> picked;
    std::set<std::size_t> seen;
    while (picked.size() < need) {
      const std::size_t k = rng.index(total_);
      if (seen.insert(k).second) picked.push_back(k);
    }
    std::vector<ContextSpan> out;
    for (std::size_t k : picked) out.push_back(at(k));
    return out;
  }

  const std::vector<AssetData>& assets() const { return *assets_; }
  const ContextSamplerConfig& config() const { return cfg_; }

 private:
  struct Run {
    std::size_t asset, lo, hi;
  };
  const std::vector<AssetData>* assets_;
  ContextSamplerConfig cfg_;
  std::vector<ContextSpan> spans_;
  std::vector<Run> runs_;
  std::size_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Episodes

/// A target sequence: rows [end + 1 - length, end] of one asset, scored on rows
/// [score_lo, score_hi) after the warm-up.
struct TargetRef {
  std::size_t asset = 0;
  std::size_t end = 0;
  std::size_t score_lo = 0, score_hi = std::numeric_limits<std::size_t>::max();
};

struct EpisodeBatch {
  SequenceBatch target;
  std::optional<ContextBatch> context;
  std::vector<double> returns;  ///< scaled next-day return per target row (0 where unscored)
  std::vector<int> scored;      ///< rows that enter the loss
  std::vector<std::string> tickers;
  std::vector<std::vector<Date>> dates;
  Date max_context_label;       ///< latest label date seen by any context
  bool has_context = false;
};

inline EpisodeBatch make_episode_batch(const std::vector<AssetData>& targets, const std::vector<TargetRef>& refs,
                                       const ContextPool* pool, Rng& rng, int length = kTargetLength,
                                       int warmup = kWarmupSteps) {
  if (refs.empty()) throw ValidationError("empty episode batch");
  EpisodeBatch ep;
  std::vector<ad::Mat<double>> seqs;
  std::vector<int> cats;
  bool all_static = true;
  for (const auto& ref : refs) {
    const auto& a = targets.at(ref.asset);
    if (ref.end + 1 < static_cast<std::size_t>(length) || ref.end >= a.size()) {
      throw ValidationError(a.ticker + ": target sequence out of range");
    }
    const std::size_t lo = ref.end + 1 - static_cast<std::size_t>(length);
    seqs.push_back(a.target_rows(lo, ref.end + 1));
    cats.push_back(a.category);
    all_static = all_static && a.category >= 0;
    ep.tickers.push_back(a.ticker);
    ep.dates.emplace_back(a.dates.begin() + static_cast<std::ptrdiff_t>(lo),
                          a.dates.begin() + static_cast<std::ptrdiff_t>(ref.end + 1));
  }
  ep.target = SequenceBatch::pack(seqs, all_static ? cats : std::vector<int>{});
  const auto B = static_cast<std::size_t>(refs.size());
  ep.returns.assign(B * static_cast<std::size_t>(length), 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& ref = refs[b];
    const auto& a = targets[ref.asset];
    const std::size_t lo = ref.end + 1 - static_cast<std::size_t>(length);
    for (int t = warmup; t < length; ++t) {
      const std::size_t row = lo + static_cast<std::size_t>(t);
      if (row < ref.score_lo || row >= ref.score_hi || !a.has_label(row)) continue;
      const std::size_t k = static_cast<std::size_t>(t) * B + b;
      ep.returns[k] = a.scaled_return[row];
      ep.scored.push_back(static_cast<int>(k));
    }
  }
  std::sort(ep.scored.begin(), ep.scored.end());
  if (pool) {
    ContextBatch ctx;
    std::vector<ad::Mat<double>> cseqs;
    std::vector<int> ccats;
    bool cstatic = true;
    ctx.set_size = pool->config().size;
    for (std::size_t b = 0; b < B; ++b) {
      for (const auto& span : pool->sample(rng)) {
        const auto& a = pool->assets()[span.asset];
        cseqs.push_back(a.context_rows(span.lo, span.hi));
        ccats.push_back(a.category);
        cstatic = cstatic && a.category >= 0;
        ctx.tickers.push_back(a.ticker);
        ctx.dates.emplace_back(a.dates.begin() + static_cast<std::ptrdiff_t>(span.lo),
                               a.dates.begin() + static_cast<std::ptrdiff_t>(span.hi));
        ep.max_context_label = std::max(ep.max_context_label, a.label_dates[span.hi - 1]);
      }
    }
    ctx.sequences = SequenceBatch::pack(cseqs, cstatic ? ccats : std::vector<int>{});
    ep.context = std::move(ctx);
    ep.has_context = true;
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Losses

struct LossConfig {
  Variant variant = Variant::XTrendSharpe;
  double alpha = 0.0;
  std::vector<double> quantiles = kDefaultQuantiles;

  /// Joint weights: 1 for the Gaussian head, 5 for the quantile head.
  static LossConfig for_variant(Variant v, std::vector<double> quantiles = kDefaultQuantiles) {
    LossConfig c;
    c.variant = v;
    c.alpha = v == Variant::XTrendG ? 1.0 : (v == Variant::XTrendQ ? 5.0 : 0.0);
    c.quantiles = std::move(quantiles);
    return c;
  }
};

template <typename T>
std::vector<T> as_scalar_vector(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

/// Negative annualized Sharpe ratio of z * r over the scored rows.
template <typename T>
ad::Var loss_sharpe(ad::Graph<T>& g, ad::Var z, const std::vector<double>& r, const std::vector<int>& rows) {
  if (rows.size() < 2) throw ValidationError("Sharpe loss needs at least two scored returns");
  return g.sharpe_loss(z, as_scalar_vector<T>(r), rows);
}

/// True when every scored product z * r is identical, so the Sharpe loss is
/// guarded by the standard-deviation floor instead of measuring anything.
inline bool sharpe_degenerate(const ad::Mat<double>& z, const std::vector<double>& r, const std::vector<int>& rows) {
  if (rows.empty()) return true;
  const double first = z(rows[0], 0) * r[static_cast<std::size_t>(rows[0])];
  for (int k : rows) {
    if (z(k, 0) * r[static_cast<std::size_t>(k)] != first) return false;
  }
  return true;
}

/// Mean Gaussian negative log-likelihood.
template <typename T>
ad::Var loss_mle(ad::Graph<T>& g, ad::Var mu, ad::Var sigma, const std::vector<double>& r,
                 const std::vector<int>& rows) {
  return g.gaussian_nll(mu, sigma, as_scalar_vector<T>(r), rows);
}

/// Mean pinball loss over scored rows and quantile levels.
template <typename T>
ad::Var loss_qre(ad::Graph<T>& g, ad::Var q, const std::vector<double>& r, const std::vector<int>& rows,
                 const std::vector<double>& levels) {
  if (g.value(q).cols() != static_cast<Eigen::Index>(levels.size())) {
    throw ValidationError("quantile output width does not match the levels");
  }
  return g.pinball_loss(q, as_scalar_vector<T>(r), rows, levels);
}

/// alpha * (forecast loss) + Sharpe loss of the head's positions.
template <typename T>
ad::Var loss_joint(ad::Graph<T>& g, const LossConfig& cfg, const ForwardResult<T>& out, const std::vector<double>& r,
                   const std::vector<int>& rows) {
  ad::Var forecast;
  if (cfg.variant == Variant::XTrendG) {
    if (!out.mu.valid()) throw ValidationError("joint Gaussian loss needs mean and scale outputs");
    forecast = loss_mle(g, out.mu, out.sigma, r, rows);
  } else if (cfg.variant == Variant::XTrendQ) {
    if (!out.quantiles.valid()) throw ValidationError("joint quantile loss needs quantile outputs");
    forecast = loss_qre(g, out.quantiles, r, rows, cfg.quantiles);
  } else {
    throw ValidationError("joint loss applies to the Gaussian and quantile variants only");
  }
  ad::Var sharpe = loss_sharpe(g, out.position, r, rows);
  return g.add(g.scale(forecast, static_cast<T>(cfg.alpha)), sharpe);
}

/// Training objective of the configured variant.
template <typename T>
ad::Var variant_loss(ad::Graph<T>& g, const LossConfig& cfg, const ForwardResult<T>& out,
                     const std::vector<double>& r, const std::vector<int>& rows) {
  if (cfg.variant == Variant::XTrendG || cfg.variant == Variant::XTrendQ) return loss_joint(g, cfg, out, r, rows);
  return loss_sharpe(g, out.position, r, rows);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double lr = 1e-3;
  int batch = 64;
  double dropout = 0.3;
  int d_h = 64;
  double clip = 1.0;
  int patience = 10;
  int max_iters = 100;
  double val_frac = 0.10;
  int n_search = 10;
  int n_ensemble = 10;
  std::uint64_t seed = 0;
  /// Spacing between eligible target end rows (1 = every row).
  int target_stride = 1;
  /// Minibatches per iteration (0 = full pass over the eligible targets).
  int max_batches_per_iter = 0;

  void validate() const {
    if (!(lr > 0)) throw ValidationError("learning rate must be positive");
    if (batch < 1) throw ValidationError("batch size must be positive");
    if (!(dropout >= 0 && dropout < 1)) throw ValidationError("dropout must lie in [0, 1)");
    if (d_h < 1) throw ValidationError("hidden size must be positive");
    if (!(clip > 0)) throw ValidationError("clip norm must be positive");
    if (patience < 1 || max_iters < 1) throw ValidationError("patience and max_iters must be positive");
    if (!(val_frac > 0 && val_frac < 1)) throw ValidationError("val_frac must lie in (0, 1)");
    if (target_stride < 1 || max_batches_per_iter < 0) throw ValidationError("invalid target sampling knobs");
    if (n_search < 1 || n_ensemble < 1) throw ValidationError("n_search and n_ensemble must be positive");
  }
};

struct IterLog {
  int iter = 0;
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;
  long clip_events = 0;
  int degenerate_batches = 0;
};

template <typename T>
struct TrainResult {
  XTrendModel<T> model;
  std::vector<IterLog> history;
  int best_iter = 0;
  double best_val = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
  double restored_val_loss = 0;  ///< validation loss of the returned parameters
};

inline void write_training_log(std::ostream& out, const std::vector<IterLog>& history) {
  out << "iter,train_loss,val_loss,lr,clip_events\n";
  for (const auto& h : history) {
    out << h.iter << ',' << format_double(h.train_loss) << ',' << format_double(h.val_loss) << ','
        << format_double(h.lr) << ',' << h.clip_events << '\n';
  }
}

/// Target references and the validation boundary of a training set.
struct TrainingTargets {
  std::vector<TargetRef> train, validation;
  std::vector<std::size_t> val_start;  ///< first validation row per asset
};

/// Per asset: the last `val_frac` of labelled rows is validation. Training targets
/// end every `stride` rows below the boundary; validation targets tile the
/// validation rows with one scored block per sequence.
inline TrainingTargets split_targets(const std::vector<AssetData>& assets, double val_frac, int stride,
                                     int length = kTargetLength, int warmup = kWarmupSteps) {
  TrainingTargets out;
  const auto L = static_cast<std::size_t>(length);
  const auto block = static_cast<std::size_t>(length - warmup);
  for (std::size_t a = 0; a < assets.size(); ++a) {
    const std::size_t n = assets[a].labelled();
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_frac));
    const std::size_t vs = n - n_val;
    out.val_start.push_back(vs);
    if (vs >= L) {
      for (std::size_t e = vs - 1;; e -= static_cast<std::size_t>(stride)) {
        out.train.push_back({a, e, 0, vs});
        if (e < L - 1 + static_cast<std::size_t>(stride)) break;
      }
    }
    if (n_val > 0) {
      for (std::size_t e = n - 1; e >= vs && e + 1 >= L; e -= block) {
        out.validation.push_back({a, e, vs, n});
        if (e < vs + block) break;
      }
    }
  }
  if (out.train.empty()) throw ValidationError("no asset has enough history for a training target");
  if (out.validation.empty()) throw ValidationError("no asset has enough history for a validation target");
  std::sort(out.train.begin(), out.train.end(),
            [](const TargetRef& x, const TargetRef& y) { return x.asset != y.asset ? x.asset < y.asset : x.end < y.end; });
  return out;
}

/// One optimizer update on an episode batch; returns the loss before the step.
template <typename T>
double train_step(XTrendModel<T>& model, ad::Adam<T>& adam, const LossConfig& loss_cfg, const EpisodeBatch& ep,
                  double dropout, std::uint64_t dropout_seed, bool* degenerate = nullptr) {
  ad::Graph<T> g(&model.params());
  g.set_training(dropout, dropout_seed);
  const auto out = model.forward(g, ep.target, ep.has_context ? &*ep.context : nullptr);
  ad::Var loss = variant_loss(g, loss_cfg, out, ep.returns, ep.scored);
  const double value = static_cast<double>(g.scalar(loss));
  if (!std::isfinite(value)) throw Error("non-finite training loss " + format_double(value));
  if (degenerate) *degenerate = sharpe_degenerate(g.value(out.position).template cast<double>(), ep.returns, ep.scored);
  g.backward(loss);
  adam.step(model.params());
  return value;
}

template <typename T>
double evaluate_loss(const XTrendModel<T>& model, const LossConfig& loss_cfg, const EpisodeBatch& ep) {
  ad::Graph<T> g(const_cast<ad::ParamStore<T>*>(&model.params()));
  const auto out = model.forward(g, ep.target, ep.has_context ? &*ep.context : nullptr);
  return static_cast<double>(g.scalar(variant_loss(g, loss_cfg, out, ep.returns, ep.scored)));
}

/// Trains one model with early stopping on the validation loss and returns the
/// best-validation parameters. Contexts for every episode come from the
/// training rows of `assets`.
template <typename T = float>
TrainResult<T> train(ModelConfig model_cfg, const std::vector<AssetData>& assets, const TrainConfig& tc,
                     const ContextSamplerConfig& sc, std::ostream* log = nullptr) {
  tc.validate();
  model_cfg.d_h = tc.d_h;
  model_cfg.dropout = tc.dropout;
  const LossConfig loss_cfg = LossConfig::for_variant(model_cfg.variant, model_cfg.quantiles);
  const auto targets = split_targets(assets, tc.val_frac, tc.target_stride);
  std::optional<ContextPool> pool;
  if (model_cfg.uses_context()) {
    if (sc.mode != model_cfg.context_mode) throw ValidationError("context sampler mode differs from the model's");
    pool.emplace(assets, sc, std::nullopt, &targets.val_start);
  }

  Rng master(tc.seed);
  Rng init_rng = master.split(1);
  Rng order_rng = master.split(2);
  Rng context_rng = master.split(3);
  const std::uint64_t val_seed = master.split(4).bits();
  const std::uint64_t dropout_seed = master.split(5).bits();

  TrainResult<T> res{XTrendModel<T>(model_cfg, init_rng.bits()), {}, 0, std::numeric_limits<double>::infinity(), false, 0};
  ad::AdamConfig ac;
  ac.lr = tc.lr;
  ac.clip_norm = tc.clip;
  ad::Adam<T> adam(ac);

  // fixed validation episodes so losses are comparable across iterations
  std::vector<EpisodeBatch> val_batches;
  {
    Rng vr(val_seed);
    for (std::size_t i = 0; i < targets.validation.size(); i += static_cast<std::size_t>(tc.batch)) {
      const auto last = std::min(targets.validation.size(), i + static_cast<std::size_t>(tc.batch));
      std::vector<TargetRef> refs(targets.validation.begin() + static_cast<std::ptrdiff_t>(i),
                                  targets.validation.begin() + static_cast<std::ptrdiff_t>(last));
      auto ep = make_episode_batch(assets, refs, pool ? &*pool : nullptr, vr);
      if (ep.scored.size() >= 2) val_batches.push_back(std::move(ep));
    }
  }
  if (val_batches.empty()) throw ValidationError("validation split has too few scored returns");

  auto best = res.model.params();
  int since_best = 0;
  std::uint64_t step_counter = 0;
  for (int it = 1; it <= tc.max_iters; ++it) {
    auto order = targets.train;
    order_rng.shuffle(order.begin(), order.end());
    IterLog entry;
    entry.iter = it;
    entry.lr = tc.lr;
    int batches = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(tc.batch)) {
      if (tc.max_batches_per_iter > 0 && batches >= tc.max_batches_per_iter) break;
      const auto last = std::min(order.size(), i + static_cast<std::size_t>(tc.batch));
      std::vector<TargetRef> refs(order.begin() + static_cast<std::ptrdiff_t>(i),
                                  order.begin() + static_cast<std::ptrdiff_t>(last));
      const auto ep = make_episode_batch(assets, refs, pool ? &*pool : nullptr, context_rng);
      if (ep.scored.size() < 2) continue;
      bool degenerate = false;
      double loss = 0;
      try {
        loss = train_step(res.model, adam, loss_cfg, ep, tc.dropout, dropout_seed + step_counter++, &degenerate);
      } catch (const ValidationError&) {
        throw;
      } catch (const Error& e) {
        throw Error(std::string(e.what()) + " at iteration " + std::to_string(it) + ", batch " +
                    std::to_string(batches) + " (first target " + ep.tickers.front() + " ending " +
                    ep.dates.front().back().iso() + ")");
      }
      entry.train_loss += loss;
      entry.degenerate_batches += degenerate ? 1 : 0;
      ++batches;
    }
    if (batches == 0) throw ValidationError("no training batch has enough scored returns");
    entry.train_loss /= batches;
    for (const auto& ep : val_batches) entry.val_loss += evaluate_loss(res.model, loss_cfg, ep);
    entry.val_loss /= static_cast<double>(val_batches.size());
    if (!std::isfinite(entry.val_loss)) throw Error("non-finite validation loss at iteration " + std::to_string(it));
    entry.clip_events = adam.clip_events();
    res.history.push_back(entry);
    if (entry.val_loss < res.best_val) {
      res.best_val = entry.val_loss;
      res.best_iter = it;
      best = res.model.params();
      since_best = 0;
    } else if (++since_best >= tc.patience) {
      res.stopped_early = true;
      break;
    }
  }
  res.model.params() = best;
  for (const auto& ep : val_batches) res.restored_val_loss += evaluate_loss(res.model, loss_cfg, ep);
  res.restored_val_loss /= static_cast<double>(val_batches.size());
  if (log) write_training_log(*log, res.history);
  return res;
}

// ---------------------------------------------------------------------------
// Hyperparameter search and ensembles

struct SearchGrid {
  std::vector<int> batch{64, 128};
  std::vector<double> dropout{0.3, 0.4, 0.5};
  std::vector<int> d_h{64, 128};
  std::vector<double> clip{1e-2, 1.0, 1e2};

  void validate() const {
    if (batch.empty() || dropout.empty() || d_h.empty() || clip.empty()) throw ValidationError("empty search grid");
  }
};

struct SearchTrial {
  TrainConfig config;
  double val_loss = 0;
};

struct SearchResult {
  TrainConfig best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<SearchTrial> trials;
};

/// Draws `n` configurations uniformly with replacement from the grid.
inline std::vector<TrainConfig> sample_configs(const SearchGrid& grid, int n, std::uint64_t seed, const TrainConfig& base) {
  grid.validate();
  Rng rng(seed);
  std::vector<TrainConfig> out;
  for (int i = 0; i < n; ++i) {
    TrainConfig c = base;
    c.batch = grid.batch[rng.index(grid.batch.size())];
    c.dropout = grid.dropout[rng.index(grid.dropout.size())];
    c.d_h = grid.d_h[rng.index(grid.d_h.size())];
    c.clip = grid.clip[rng.index(grid.clip.size())];
    out.push_back(c);
  }
  return out;
}

/// Evaluates sampled configurations and keeps the lowest validation loss; ties
/// go to the earliest sample.
inline SearchResult random_search(const SearchGrid& grid, int n, std::uint64_t seed, const TrainConfig& base,
                                  const std::function<double(const TrainConfig&)>& evaluate) {
  if (n < 1) throw ValidationError("random search needs at least one trial");
  SearchResult res;
  for (const auto& c : sample_configs(grid, n, seed, base)) {
    const double loss = evaluate(c);
    res.trials.push_back({c, loss});
    if (res.trials.size() == 1 || loss < res.best_loss) {
      res.best_loss = loss;
      res.best = c;
    }
  }
  return res;
}

inline nlohmann::json search_log_json(const SearchResult& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials) {
    trials.push_back({{"batch", t.config.batch},
                      {"dropout", t.config.dropout},
                      {"d_h", t.config.d_h},
                      {"clip", t.config.clip},
                      {"val_loss", t.val_loss}});
  }
  return {{"trials", trials}, {"best_val_loss", r.best_loss}};
}

/// Mean position per (asset, date) across members with identical layouts.
inline std::vector<PositionSeries> ensemble_positions(const std::vector<std::vector<PositionSeries>>& members) {
  if (members.empty()) throw ValidationError("ensemble needs at least one member");
  std::vector<PositionSeries> out = members.front();
  for (std::size_t m = 1; m < members.size(); ++m) {
    if (members[m].size() != out.size()) throw ValidationError("ensemble members cover different assets");
    for (std::size_t a = 0; a < out.size(); ++a) {
      if (members[m][a].ticker != out[a].ticker || members[m][a].dates != out[a].dates) {
        throw ValidationError("ensemble members disagree on " + out[a].ticker + " dates");
      }
      for (std::size_t i = 0; i < out[a].z.size(); ++i) out[a].z[i] += members[m][a].z[i];
    }
  }
  const double k = static_cast<double>(members.size());
  for (auto& s : out) {
    for (auto& z : s.z) z /= k;
  }
  return out;
}

}  // namespace xtrend
