#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtrend/common.hpp"
#include "xtrend/diffcore.hpp"
#include "xtrend/model.hpp"
#include "xtrend/synthetic.hpp"
#include "xtrend/training.hpp"

namespace xtrend {

/// Few-shot regression on Gaussian-process draws: every episode samples one
/// latent RBF function on a grid; the target and its contexts are noisy segments
/// of it. Inputs are (x, y); the model forecasts the next observation.
struct GpHarnessConfig {
  std::vector<int> context_sizes{2, 6, 10};
  int n_seeds = 5;
  std::uint64_t seed = 0;
  int d_h = 32;
  int n_heads = 4;
  int steps = 500;
  int batch = 32;
  double lr = 1e-3;
  double clip = 1.0;
  int eval_episodes = 512;
  double lengthscale = 0.4;
  double amplitude = 1.0;
  double noise_var = 1.0;
  double dx = 0.05;
  double x_min = -2.0, x_max = 2.0;
  int context_min = 10, context_max = 30;
  int target_length = 20;

  int grid_points() const { return static_cast<int>(std::llround((x_max - x_min) / dx)) + 1; }

  void validate() const {
    if (context_sizes.empty()) throw ValidationError("no context sizes");
    for (int c : context_sizes) {
      if (c < 0) throw ValidationError("context sizes must be non-negative");
    }
    if (n_seeds < 1 || steps < 1 || batch < 1 || eval_episodes < 1) throw ValidationError("harness counts must be positive");
    if (d_h < 1 || n_heads < 1 || d_h % n_heads != 0) throw ValidationError("d_h must be a positive multiple of n_heads");
    if (!(lr > 0) || !(clip > 0)) throw ValidationError("learning rate and clip must be positive");
    if (!(lengthscale > 0) || !(amplitude > 0) || noise_var < 0 || !(dx > 0) || !(x_max > x_min)) {
      throw ValidationError("invalid GP parameters");
    }
    if (context_min < 2 || context_max < context_min) throw ValidationError("invalid context length range");
    if (target_length < 1 || std::max(target_length, context_max) + 1 > grid_points()) {
      throw ValidationError("segments do not fit on the input grid");
    }
  }
};

enum class HarnessModel { Full, NoCrossAttention, NoContext };

inline std::string to_string(HarnessModel m) {
  switch (m) {
    case HarnessModel::Full: return "cross_attention";
    case HarnessModel::NoCrossAttention: return "mean_pooled_context";
    case HarnessModel::NoContext: return "no_context";
  }
  return "?";
}

/// Model of a harness arm. A context set of size zero is the no-context model.
inline ModelConfig harness_model_config(const GpHarnessConfig& cfg, HarnessModel kind, int context_size) {
  ModelConfig mc;
  mc.d_h = cfg.d_h;
  mc.n_heads = cfg.n_heads;
  mc.dropout = 0.0;
  mc.variant = Variant::XTrendG;
  mc.context_mode = ContextMode::FinalState;
  mc.n_features = 2;
  mc.n_categories = 1;
  mc.cross_attention = kind != HarnessModel::NoCrossAttention;
  mc.context = kind != HarnessModel::NoContext && context_size > 0;
  if (!mc.context) mc.cross_attention = true;
  return mc;
}

/// A batch of harness episodes in model layout.
struct GpEpisodes {
  SequenceBatch target;
  std::optional<ContextBatch> context;
  std::vector<double> next;  ///< next observation per target row
  std::vector<int> rows;     ///< every target row
};

/// Draws episodes. Functions and targets come from `target_rng`, contexts from
/// `context_rng`, so arms with different context sizes see the same targets.
class GpEpisodeSampler {
 public:
  explicit GpEpisodeSampler(const GpHarnessConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    for (int i = 0; i < cfg_.grid_points(); ++i) xs_.push_back(cfg_.x_min + cfg_.dx * i);
  }

  const std::vector<double>& grid() const { return xs_; }

  GpEpisodes sample(int n_episodes, int context_size, Rng& target_rng, Rng& context_rng) const {
    const auto G = static_cast<int>(xs_.size());
    const double noise_sd = std::sqrt(cfg_.noise_var);
    std::vector<ad::Mat<double>> targets, contexts;
    GpEpisodes ep;
    const int L = cfg_.target_length;
    ep.next.assign(static_cast<std::size_t>(n_episodes * L), 0.0);
    for (int b = 0; b < n_episodes; ++b) {
      const auto f = gp_draw(xs_, cfg_.lengthscale, cfg_.amplitude, 0.0, target_rng);
      const int s = target_rng.integer(0, G - L - 1);
      ad::Mat<double> t(L, 2);
      double y = f[static_cast<std::size_t>(s)] + noise_sd * target_rng.normal();
      for (int k = 0; k < L; ++k) {
        const double y_next = f[static_cast<std::size_t>(s + k + 1)] + noise_sd * target_rng.normal();
        t(k, 0) = xs_[static_cast<std::size_t>(s + k)];
        t(k, 1) = y;
        ep.next[static_cast<std::size_t>(k * n_episodes + b)] = y_next;
        y = y_next;
      }
      targets.push_back(std::move(t));
      for (int c = 0; c < context_size; ++c) {
        const int len = context_rng.integer(cfg_.context_min, cfg_.context_max);
        const int cs = context_rng.integer(0, G - len - 1);
        ad::Mat<double> m(len, 3);
        double cy = f[static_cast<std::size_t>(cs)] + noise_sd * context_rng.normal();
        for (int k = 0; k < len; ++k) {
          const double cy_next = f[static_cast<std::size_t>(cs + k + 1)] + noise_sd * context_rng.normal();
          m(k, 0) = xs_[static_cast<std::size_t>(cs + k)];
          m(k, 1) = cy;
          m(k, 2) = cy_next;
          cy = cy_next;
        }
        contexts.push_back(std::move(m));
      }
    }
    ep.target = SequenceBatch::pack(targets);
    if (context_size > 0) {
      ContextBatch cb;
      cb.sequences = SequenceBatch::pack(contexts);
      cb.set_size = context_size;
      ep.context = std::move(cb);
    }
    ep.rows.resize(ep.next.size());
    for (std::size_t i = 0; i < ep.rows.size(); ++i) ep.rows[i] = static_cast<int>(i);
    return ep;
  }

 private:
  GpHarnessConfig cfg_;
  std::vector<double> xs_;
};

struct GpArmResult {
  HarnessModel model = HarnessModel::Full;
  int context_size = 0;
  std::vector<double> mse;  ///< one per seed
  double mean = 0, std_error = 0;
};

struct GpHarnessResult {
  std::vector<GpArmResult> arms;
  double mean_predictor_mse = 0;  ///< predicting zero, the unconditional mean

  const GpArmResult* arm(HarnessModel m, int size) const {
    for (const auto& a : arms) {
      if (a.model == m && a.context_size == size) return &a;
    }
    return nullptr;
  }
};

/// Mean squared error of the mean forecast over every target row.
template <typename T>
double forecast_mse(const XTrendModel<T>& model, const GpEpisodes& ep) {
  ad::Graph<T> g(const_cast<ad::ParamStore<T>*>(&model.params()));
  const auto out = model.forward(g, ep.target, ep.context ? &*ep.context : nullptr);
  const auto& mu = g.value(out.mu);
  double s = 0;
  for (std::size_t i = 0; i < ep.next.size(); ++i) {
    const double e = static_cast<double>(mu(static_cast<Eigen::Index>(i), 0)) - ep.next[i];
    s += e * e;
  }
  return s / static_cast<double>(ep.next.size());
}

/// Trains one arm with the Gaussian likelihood and returns its held-out MSE.
inline double train_gp_arm(const GpHarnessConfig& cfg, HarnessModel kind, int context_size, int seed_index,
                           const std::vector<GpEpisodes>& eval) {
  const GpEpisodeSampler sampler(cfg);
  const ModelConfig mc = harness_model_config(cfg, kind, context_size);
  const int train_size = mc.context ? context_size : 0;
  const auto s = static_cast<std::uint64_t>(seed_index);
  XTrendModel<float> model(mc, Rng(cfg.seed ^ (0xA11CE + s)).bits());
  ad::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.clip_norm = cfg.clip;
  ad::Adam<float> adam(ac);
  Rng target_rng(Rng(cfg.seed * 7919 + s).bits());
  Rng context_rng(Rng(cfg.seed * 104729 + s * 31 + static_cast<std::uint64_t>(context_size)).bits());
  for (int step = 0; step < cfg.steps; ++step) {
    const auto ep = sampler.sample(cfg.batch, train_size, target_rng, context_rng);
    ad::Graph<float> g(&model.params());
    const auto out = model.forward(g, ep.target, ep.context ? &*ep.context : nullptr);
    ad::Var loss = loss_mle(g, out.mu, out.sigma, ep.next, ep.rows);
    const double value = static_cast<double>(g.scalar(loss));
    if (!std::isfinite(value)) throw Error("non-finite harness loss at step " + std::to_string(step));
    g.backward(loss);
    adam.step(model.params());
  }
  double total = 0;
  std::size_t n = 0;
  for (const auto& ep : eval) {
    total += forecast_mse(model, ep) * static_cast<double>(ep.next.size());
    n += ep.next.size();
  }
  return total / static_cast<double>(n);
}

using HarnessProgress = std::function<void(const std::string&)>;

/// Every arm across all context sizes and seeds. The no-context arm does not
/// depend on the context size and is trained once per seed.
inline GpHarnessResult gp_fewshot_harness(const GpHarnessConfig& cfg, const HarnessProgress& progress = {}) {
  cfg.validate();
  const GpEpisodeSampler sampler(cfg);
  GpHarnessResult res;

  // held-out episodes per seed and size share their functions and targets
  auto eval_set = [&](int seed_index, int size) {
    Rng target_rng(Rng(~cfg.seed * 31 + static_cast<std::uint64_t>(seed_index)).bits());
    Rng context_rng(Rng(~cfg.seed * 131 + static_cast<std::uint64_t>(seed_index) * 17 + static_cast<std::uint64_t>(size)).bits());
    std::vector<GpEpisodes> out;
    for (int done = 0; done < cfg.eval_episodes; done += 64) {
      out.push_back(sampler.sample(std::min(64, cfg.eval_episodes - done), size, target_rng, context_rng));
    }
    return out;
  };

  double zero_se = 0;
  std::size_t zero_n = 0;
  GpArmResult none;
  none.model = HarnessModel::NoContext;
  std::vector<GpArmResult> arms;
  for (int size : cfg.context_sizes) {
    for (auto m : {HarnessModel::Full, HarnessModel::NoCrossAttention}) {
      GpArmResult a;
      a.model = m;
      a.context_size = size;
      arms.push_back(std::move(a));
    }
  }
  for (int s = 0; s < cfg.n_seeds; ++s) {
    const auto base_eval = eval_set(s, 0);
    for (const auto& ep : base_eval) {
      for (double y : ep.next) zero_se += y * y;
      zero_n += ep.next.size();
    }
    none.mse.push_back(train_gp_arm(cfg, HarnessModel::NoContext, 0, s, base_eval));
    if (progress) progress("seed " + std::to_string(s) + " no_context mse " + format_double(none.mse.back()));
    for (int size : cfg.context_sizes) {
      const auto ev = eval_set(s, size);
      for (auto& a : arms) {
        if (a.context_size != size) continue;
        a.mse.push_back(train_gp_arm(cfg, a.model, size, s, ev));
        if (progress) {
          progress("seed " + std::to_string(s) + " " + to_string(a.model) + " |C|=" + std::to_string(size) + " mse " +
                   format_double(a.mse.back()));
        }
      }
    }
  }
  res.mean_predictor_mse = zero_se / static_cast<double>(zero_n);
  arms.push_back(std::move(none));
  for (auto& a : arms) {
    double m = 0;
    for (double v : a.mse) m += v;
    m /= static_cast<double>(a.mse.size());
    double var = 0;
    for (double v : a.mse) var += (v - m) * (v - m);
    a.mean = m;
    a.std_error = a.mse.size() > 1 ? std::sqrt(var / static_cast<double>(a.mse.size() - 1) / static_cast<double>(a.mse.size())) : 0.0;
    res.arms.push_back(std::move(a));
  }
  return res;
}

inline nlohmann::json to_json(const GpHarnessResult& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : r.arms) {
    arms.push_back({{"model", to_string(a.model)},
                    {"context_size", a.context_size},
                    {"mse_mean", a.mean},
                    {"mse_stderr", a.std_error},
                    {"mse_per_seed", a.mse}});
  }
  return {{"arms", arms}, {"mean_predictor_mse", r.mean_predictor_mse}};
}

}  // namespace xtrend
