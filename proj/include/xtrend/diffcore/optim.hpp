#pragma once

#include <cmath>
#include <vector>

#include "xtrend/diffcore/graph.hpp"

namespace xtrend::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

/// Global gradient norm over every parameter.
template <typename T>
double global_grad_norm(const ParamStore<T>& store) {
  double ss = 0;
  for (const auto& p : store) ss += p.grad.template cast<double>().squaredNorm();
  return std::sqrt(ss);
}

/// Adam with global-norm gradient clipping.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return step_; }
  long clip_events() const { return clips_; }
  /// First-moment estimate of parameter i (empty before the first step).
  const Mat<T>& first_moment(std::size_t i) const { return m_.at(i); }

  /// Applies one update. Returns true when the gradients were clipped.
  bool step(ParamStore<T>& store) {
    if (m_.empty()) {
      for (const auto& p : store) {
        m_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Mat<T>::Zero(p.value.rows(), p.value.cols()));
      }
    }
    if (m_.size() != store.size()) throw Error("adam: parameter store changed size");
    for (const auto& p : store) {
      if (!p.grad.allFinite()) throw Error("non-finite gradient in parameter '" + p.name + "'");
    }
    double factor = 1.0;
    bool clipped = false;
    if (cfg_.clip_norm > 0) {
      const double norm = global_grad_norm(store);
      if (norm > cfg_.clip_norm) {
        factor = cfg_.clip_norm / norm;
        clipped = true;
        ++clips_;
      }
    }
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.lr / c1), eps = static_cast<T>(cfg_.eps);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[i];
      const Mat<T> g = p.grad * static_cast<T>(factor);
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      p.value.array() -= lr * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
    }
    return clipped;
  }

 private:
  AdamConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  long step_ = 0;
  long clips_ = 0;
};

}  // namespace xtrend::ad
