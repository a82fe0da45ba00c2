#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xtrend/common.hpp"
#include "xtrend/market_data.hpp"

namespace xtrend {

struct Matern32Params {
  double amplitude = 1.0;
  double lengthscale = 1.0;
  double noise_var = 0.1;
};

/// Two Matern-3/2 kernels blended by a logistic switch. Observation noise is
/// shared by both sides and taken from `left.noise_var`.
struct ChangePointParams {
  Matern32Params left, right;
  double location = 0.5;
  double steepness = 1.0;
};

inline constexpr double kNoiseFloor = 1e-8;
inline constexpr double kBaseJitter = 1e-6;

inline double matern32_cov(double x1, double x2, const Matern32Params& p) {
  const double r = std::sqrt(3.0) * std::abs(x1 - x2) / p.lengthscale;
  return p.amplitude * p.amplitude * (1.0 + r) * std::exp(-r);
}

inline double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double changepoint_cov(double x1, double x2, const ChangePointParams& p) {
  const double s1 = logistic(p.steepness * (x1 - p.location));
  const double s2 = logistic(p.steepness * (x2 - p.location));
  return (1.0 - s1) * (1.0 - s2) * matern32_cov(x1, x2, p.left) + s1 * s2 * matern32_cov(x1, x2, p.right);
}

template <typename Kernel>
Eigen::MatrixXd gram_matrix(const std::vector<double>& x, Kernel&& k, double noise_var) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) g(i, j) = g(j, i) = k(x[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(j)]);
    g(i, i) += noise_var;
  }
  return g;
}

struct LmlResult {
  double value = 0.0;
  double jitter = 0.0;  ///< diagonal jitter that made the factorization succeed
};

namespace detail {

/// Cholesky with jitter escalation: none, then 1e-6, 1e-5, 1e-4.
inline bool factorize(const Eigen::MatrixXd& k, Eigen::LLT<Eigen::MatrixXd>& llt, double& jitter_used) {
  double jitter = 0.0;
  for (int attempt = 0; attempt < 4; ++attempt) {
    if (attempt > 0) jitter = kBaseJitter * std::pow(10.0, attempt - 1);
    if (jitter == 0.0) {
      llt.compute(k);
    } else {
      Eigen::MatrixXd kj = k;
      kj.diagonal().array() += jitter;
      llt.compute(kj);
    }
    if (llt.info() == Eigen::Success) {
      const auto d = llt.matrixLLT().diagonal();
      if ((d.array() > 0).all() && d.allFinite()) {
        jitter_used = jitter;
        return true;
      }
    }
  }
  return false;
}

}  // namespace detail

/// Log marginal likelihood of zero-mean data `y` under covariance `k`.
inline LmlResult gp_log_marginal_likelihood(const Eigen::MatrixXd& k, const Eigen::VectorXd& y) {
  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = 0.0;
  if (!detail::factorize(k, llt, jitter)) throw Error("GP covariance factorization failed after jitter escalation");
  const Eigen::VectorXd alpha = llt.solve(y);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double n = static_cast<double>(y.size());
  return {-0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * n * std::log(2.0 * M_PI), jitter};
}

enum class KernelKind { Single, ChangePoint };

struct KernelFit {
  KernelKind kind = KernelKind::Single;
  Matern32Params single;
  ChangePointParams change;
  double lml = -std::numeric_limits<double>::infinity();
  int starts_ok = 0;
};

namespace detail {

/// Negative LML and its gradient with respect to unconstrained parameters.
/// Single:      [log a, log l, log noise]
/// ChangePoint: [log aL, log lL, log aR, log lR, log noise, u, log steepness],
///              location = x0 + (x1 - x0) * logistic(u).
class LmlObjective {
 public:
  LmlObjective(const std::vector<double>& x, const Eigen::VectorXd& y, KernelKind kind)
      : x_(x), y_(y), kind_(kind), lo_(x.front()), hi_(x.back()) {}

  std::size_t dim() const { return kind_ == KernelKind::Single ? 3 : 7; }

  Matern32Params single_params(const Eigen::VectorXd& th) const {
    return {std::exp(th[0]), std::exp(th[1]), kNoiseFloor + std::exp(th[2])};
  }
  ChangePointParams change_params(const Eigen::VectorXd& th) const {
    ChangePointParams p;
    const double noise = kNoiseFloor + std::exp(th[4]);
    p.left = {std::exp(th[0]), std::exp(th[1]), noise};
    p.right = {std::exp(th[2]), std::exp(th[3]), noise};
    p.location = lo_ + (hi_ - lo_) * logistic(th[5]);
    p.steepness = std::exp(th[6]);
    return p;
  }

  /// Returns +inf when the parameters leave the sane box or factorization fails.
  double operator()(const Eigen::VectorXd& th, Eigen::VectorXd& grad) const {
    const auto n = static_cast<Eigen::Index>(x_.size());
    grad.setZero(static_cast<Eigen::Index>(dim()));
    for (Eigen::Index i = 0; i < th.size(); ++i) {
      const bool is_location = kind_ == KernelKind::ChangePoint && i == 5;
      const bool is_noise = static_cast<std::size_t>(i) == (kind_ == KernelKind::Single ? 2u : 4u);
      const double lo = is_location ? -30.0 : (is_noise ? -25.0 : -12.0);
      const double hi = is_location ? 30.0 : 12.0;
      if (!std::isfinite(th[i]) || th[i] < lo || th[i] > hi) {
        return std::numeric_limits<double>::infinity();
      }
    }
    const std::size_t np = dim();
    std::vector<Eigen::MatrixXd> dk(np, Eigen::MatrixXd::Zero(n, n));
    Eigen::MatrixXd k(n, n);
    const double r3 = std::sqrt(3.0);

    if (kind_ == KernelKind::Single) {
      const auto p = single_params(th);
      const double a2 = p.amplitude * p.amplitude;
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double r = r3 * std::abs(x_[static_cast<std::size_t>(i)] - x_[static_cast<std::size_t>(j)]) / p.lengthscale;
          const double e = std::exp(-r);
          const double kv = a2 * (1.0 + r) * e;
          k(i, j) = k(j, i) = kv;
          dk[0](i, j) = dk[0](j, i) = 2.0 * kv;
          dk[1](i, j) = dk[1](j, i) = a2 * r * r * e;
        }
        k(i, i) += p.noise_var;
        dk[2](i, i) = p.noise_var - kNoiseFloor;
      }
    } else {
      const auto p = change_params(th);
      const double aL2 = p.left.amplitude * p.left.amplitude, aR2 = p.right.amplitude * p.right.amplitude;
      std::vector<double> s(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] = logistic(p.steepness * (x_[static_cast<std::size_t>(i)] - p.location));
      const double sig_u = logistic(th[5]);
      const double dloc_du = (hi_ - lo_) * sig_u * (1.0 - sig_u);
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        for (Eigen::Index j = 0; j <= i; ++j) {
          const auto uj = static_cast<std::size_t>(j);
          const double d = std::abs(x_[ui] - x_[uj]);
          const double rl = r3 * d / p.left.lengthscale, rr = r3 * d / p.right.lengthscale;
          const double el = std::exp(-rl), er = std::exp(-rr);
          const double kl = aL2 * (1.0 + rl) * el, kr = aR2 * (1.0 + rr) * er;
          const double wl = (1.0 - s[ui]) * (1.0 - s[uj]), wr = s[ui] * s[uj];
          const double kv = wl * kl + wr * kr;
          k(i, j) = k(j, i) = kv;
          const double g0 = wl * 2.0 * kl, g1 = wl * aL2 * rl * rl * el;
          const double g2 = wr * 2.0 * kr, g3 = wr * aR2 * rr * rr * er;
          dk[0](i, j) = dk[0](j, i) = g0;
          dk[1](i, j) = dk[1](j, i) = g1;
          dk[2](i, j) = dk[2](j, i) = g2;
          dk[3](i, j) = dk[3](j, i) = g3;
          // derivatives through the switch values
          const double dk_ds1 = -(1.0 - s[uj]) * kl + s[uj] * kr;
          const double dk_ds2 = -(1.0 - s[ui]) * kl + s[ui] * kr;
          const double ds1 = s[ui] * (1.0 - s[ui]), ds2 = s[uj] * (1.0 - s[uj]);
          const double dloc = dk_ds1 * (-p.steepness * ds1) + dk_ds2 * (-p.steepness * ds2);
          const double dsteep = dk_ds1 * p.steepness * (x_[ui] - p.location) * ds1 +
                                dk_ds2 * p.steepness * (x_[uj] - p.location) * ds2;
          dk[5](i, j) = dk[5](j, i) = dloc * dloc_du;
          dk[6](i, j) = dk[6](j, i) = dsteep;
        }
        k(i, i) += p.left.noise_var;
        dk[4](i, i) = p.left.noise_var - kNoiseFloor;
      }
    }

    Eigen::LLT<Eigen::MatrixXd> llt;
    double jitter = 0.0;
    if (!factorize(k, llt, jitter)) return std::numeric_limits<double>::infinity();
    const Eigen::VectorXd alpha = llt.solve(y_);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double lml = -0.5 * y_.dot(alpha) - 0.5 * logdet - 0.5 * static_cast<double>(n) * std::log(2.0 * M_PI);
    const Eigen::MatrixXd kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd w = alpha * alpha.transpose() - kinv;
    for (std::size_t q = 0; q < np; ++q) grad[static_cast<Eigen::Index>(q)] = -0.5 * (w.array() * dk[q].array()).sum();
    if (!std::isfinite(lml) || !grad.allFinite()) return std::numeric_limits<double>::infinity();
    return -lml;
  }

 private:
  const std::vector<double>& x_;
  const Eigen::VectorXd& y_;
  KernelKind kind_;
  double lo_, hi_;
};

struct MinimizeResult {
  Eigen::VectorXd x;
  double f = std::numeric_limits<double>::infinity();
  int iterations = 0;
};

/// Limited-memory BFGS with backtracking (Armijo) line search.
template <typename F>
MinimizeResult lbfgs_minimize(const F& f, Eigen::VectorXd x, int max_iter = 100, int memory = 7) {
  MinimizeResult res;
  Eigen::VectorXd g(x.size());
  double fx = f(x, g);
  if (!std::isfinite(fx)) {
    res.x = x;
    return res;
  }
  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  Eigen::VectorXd g_new(x.size());
  int it = 0;
  for (; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < 1e-6) break;
    // two-loop recursion
    Eigen::VectorXd q = g;
    std::vector<double> a(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      a[static_cast<std::size_t>(i)] = rho_hist[static_cast<std::size_t>(i)] * s_hist[static_cast<std::size_t>(i)].dot(q);
      q -= a[static_cast<std::size_t>(i)] * y_hist[static_cast<std::size_t>(i)];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    else gamma = 1.0 / std::max(1.0, g.norm());
    Eigen::VectorXd r = gamma * q;
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double b = rho_hist[i] * y_hist[i].dot(r);
      r += s_hist[i] * (a[i] - b);
    }
    Eigen::VectorXd dir = -r;
    double slope = g.dot(dir);
    if (!(slope < 0)) {
      dir = -g;
      slope = -g.squaredNorm();
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }
    double step = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    Eigen::VectorXd x_new;
    bool accepted = false;
    for (int ls = 0; ls < 30; ++ls) {
      x_new = x + step * dir;
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const Eigen::VectorXd s = x_new - x, yv = g_new - g;
    const double sy = s.dot(yv);
    const double rel = std::abs(fx - f_new) / std::max({std::abs(fx), std::abs(f_new), 1.0});
    x = x_new;
    fx = f_new;
    g = g_new;
    if (sy > 1e-12) {
      s_hist.push_back(s);
      y_hist.push_back(yv);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    if (rel < 1e-10) break;
  }
  res.x = x;
  res.f = fx;
  res.iterations = it;
  return res;
}

}  // namespace detail

struct FitOptions {
  int max_iter = 100;
  int starts = 3;
};

/// Maximizes the LML over kernel hyperparameters from several deterministic
/// starts; `x` should be increasing with y standardized.
inline KernelFit fit_kernel(const std::vector<double>& x, const Eigen::VectorXd& y, KernelKind kind,
                            const FitOptions& opt = {}, const KernelFit* warm = nullptr) {
  if (x.size() < 2 || static_cast<Eigen::Index>(x.size()) != y.size()) throw ValidationError("fit_kernel needs >= 2 aligned points");
  detail::LmlObjective obj(x, y, kind);
  const double span = x.back() - x.front();
  const double dx = span / static_cast<double>(x.size() - 1);
  std::vector<Eigen::VectorXd> starts;
  if (kind == KernelKind::Single) {
    for (double ls : {0.1, 0.3, 1.0}) starts.push_back((Eigen::VectorXd(3) << 0.0, std::log(ls * span), std::log(0.1)).finished());
  } else {
    double la = 0.0, ll = std::log(0.3 * span), ln = std::log(0.1);
    if (warm && warm->kind == KernelKind::Single) {
      la = std::log(warm->single.amplitude);
      ll = std::log(warm->single.lengthscale);
      ln = std::log(std::max(warm->single.noise_var - kNoiseFloor, 1e-6));
    }
    const double steep0 = std::log(1.0 / dx);  // unit steepness in index units
    for (double loc : {0.5, 0.25, 0.75}) {
      starts.push_back((Eigen::VectorXd(7) << la, ll, la, ll, ln, std::log(loc / (1.0 - loc)), steep0).finished());
    }
  }
  starts.resize(std::min<std::size_t>(starts.size(), static_cast<std::size_t>(std::max(1, opt.starts))));

  KernelFit best;
  best.kind = kind;
  double best_f = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_x;
  for (const auto& s0 : starts) {
    auto r = detail::lbfgs_minimize(obj, s0, opt.max_iter);
    if (!std::isfinite(r.f)) continue;
    ++best.starts_ok;
    if (r.f < best_f) {
      best_f = r.f;
      best_x = r.x;
    }
  }
  if (best.starts_ok == 0) throw Error("all GP fit starts failed");
  best.lml = -best_f;
  if (kind == KernelKind::Single) best.single = obj.single_params(best_x);
  else best.change = obj.change_params(best_x);
  return best;
}

struct CpdFit {
  double lml_single = 0.0;
  double lml_change = 0.0;
  double severity = 0.0;
  double location = 0.0;  ///< fractional index within the window
};

/// Change-point severity of one window of raw values; the window is
/// standardized and time is mapped to [0, 1].
inline CpdFit cpd_severity(const std::vector<double>& window, const FitOptions& opt = {}) {
  const std::size_t m = window.size();
  if (m < 5) throw ValidationError("CPD window needs at least 5 points");
  double mean = 0.0;
  for (double v : window) mean += v;
  mean /= static_cast<double>(m);
  double var = 0.0;
  for (double v : window) var += (v - mean) * (v - mean);
  var /= static_cast<double>(m - 1);
  CpdFit out;
  if (!(var > 0.0)) {
    // a flat window carries no evidence of a change
    out.location = 0.5 * static_cast<double>(m - 1);
    return out;
  }
  const double sd = std::sqrt(var);
  Eigen::VectorXd y(static_cast<Eigen::Index>(m));
  std::vector<double> x(m);
  for (std::size_t i = 0; i < m; ++i) {
    y[static_cast<Eigen::Index>(i)] = (window[i] - mean) / sd;
    x[i] = static_cast<double>(i) / static_cast<double>(m - 1);
  }
  const auto single = fit_kernel(x, y, KernelKind::Single, opt);
  const auto change = fit_kernel(x, y, KernelKind::ChangePoint, opt, &single);
  out.lml_single = single.lml;
  out.lml_change = change.lml;
  out.severity = logistic(out.lml_change - out.lml_single);
  out.location = change.change.location * static_cast<double>(m - 1);
  return out;
}

struct SegmentationConfig {
  double nu = 0.9;
  int l_lbw = 21;
  int l_min = 5;
  int l_max = 21;

  void validate() const {
    if (!(l_min < l_max) || l_min < 1) throw ValidationError("segmentation needs 1 <= l_min < l_max");
    if (!(nu > 0.5 && nu < 1.0)) throw ValidationError("severity threshold must lie in (0.5, 1)");
    if (l_lbw < 4) throw ValidationError("lookback window too short");
  }
};

/// A segment [t0, t1) of one asset's price index.
struct Regime {
  std::string ticker;
  std::size_t t0 = 0, t1 = 0;
  double severity = 0.0;  ///< severity of the cut that opened the regime (0 for forced cuts)
  bool forced = false;

  std::size_t length() const { return t1 - t0; }
};

struct SegmentationResult {
  std::vector<Regime> regimes;      ///< ordered by t0
  std::vector<double> cut_points;   ///< fractional change locations that triggered cuts
  std::size_t fits = 0;
};

/// Backward scan from the last observation. A detected change closes the
/// current regime at ceil(location) and resumes scanning below it; otherwise
/// regimes are cut once they reach l_max.
inline SegmentationResult segment_values(const std::vector<double>& v, const SegmentationConfig& cfg,
                                         const std::string& ticker = {}, const FitOptions& opt = {}) {
  cfg.validate();
  SegmentationResult res;
  if (v.size() <= static_cast<std::size_t>(cfg.l_lbw)) throw ValidationError("series shorter than the lookback window");
  const auto l_max = static_cast<long>(cfg.l_max), l_min = static_cast<long>(cfg.l_min);
  long t = static_cast<long>(v.size()) - 1;
  long end = static_cast<long>(v.size());
  while (t >= 0) {
    const long lo = std::max(0L, t - cfg.l_lbw);
    bool changed = false;
    if (t - lo + 1 >= 5) {
      std::vector<double> w(v.begin() + lo, v.begin() + t + 1);
      const auto fit = cpd_severity(w, opt);
      ++res.fits;
      if (fit.severity >= cfg.nu) {
        changed = true;
        const double tc = static_cast<double>(lo) + fit.location;
        res.cut_points.push_back(tc);
        const long t0 = std::max(static_cast<long>(std::ceil(tc)), end - l_max);
        if (end - t0 >= l_min) {
          res.regimes.push_back({ticker, static_cast<std::size_t>(t0), static_cast<std::size_t>(end), fit.severity, false});
        }
        t = static_cast<long>(std::floor(tc)) - 1;
        end = t + 1;
      }
    }
    if (!changed) {
      t -= 1;
      if (end - t > l_max) t = end - l_max;
      if (end - t == l_max) {
        res.regimes.push_back({ticker, static_cast<std::size_t>(t), static_cast<std::size_t>(end), 0.0, true});
        end = t;
      }
    }
  }
  std::reverse(res.regimes.begin(), res.regimes.end());
  return res;
}

inline std::vector<Regime> segment_series(const PriceSeries& p, const SegmentationConfig& cfg,
                                          const FitOptions& opt = {}) {
  return segment_values(p.close, cfg, p.ticker, opt).regimes;
}

}  // namespace xtrend
