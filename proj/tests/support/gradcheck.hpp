#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xtrend/diffcore/graph.hpp"

namespace xtrend::testing {

using ad::Graph;
using ad::Mat;
using ad::ParamStore;
using ad::Var;

struct GradCheckOptions {
  double step = 1e-5;
  /// Entries checked per tensor; larger tensors are subsampled.
  std::size_t max_entries = 24;
  /// Denominator floor of the relative error.
  double floor = 1e-5;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
};

using BuildFn = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

/// Compares reverse-mode gradients with central finite differences for every
/// parameter in `store` and every tensor in `inputs`.
/// Relative error per entry: |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheckResult gradcheck(ParamStore<double>* store, std::vector<Mat<double>> inputs, const BuildFn& build,
                                 const GradCheckOptions& opt = {}) {
  auto eval = [&](bool with_backward, std::vector<Mat<double>>* input_grads) {
    Graph<double> g(store);
    std::vector<Var> vars;
    for (const auto& m : inputs) vars.push_back(g.input(m));
    Var loss = build(g, vars);
    if (with_backward) {
      g.backward(loss);
      for (std::size_t k = 0; k < vars.size(); ++k) {
        const auto& gr = g.grad(vars[k]);
        input_grads->push_back(gr.size() ? gr : Mat<double>::Zero(inputs[k].rows(), inputs[k].cols()));
      }
    }
    return g.scalar(loss);
  };

  std::vector<Mat<double>> input_grads;
  eval(true, &input_grads);
  std::vector<Mat<double>> param_grads;
  if (store) {
    for (const auto& p : *store) param_grads.push_back(p.grad);
  }

  GradCheckResult res;
  Rng rng(opt.seed);
  auto check_tensor = [&](Mat<double>& value, const Mat<double>& analytic, const std::string& label) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(value.size()));
    for (Eigen::Index i = 0; i < value.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    if (idx.size() > opt.max_entries) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opt.max_entries);
    }
    for (Eigen::Index i : idx) {
      const double keep = value.data()[i];
      value.data()[i] = keep + opt.step;
      const double up = eval(false, nullptr);
      value.data()[i] = keep - opt.step;
      const double down = eval(false, nullptr);
      value.data()[i] = keep;
      const double numeric = (up - down) / (2 * opt.step);
      const double a = analytic.data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst = label + "[" + std::to_string(i) + "] analytic " + std::to_string(a) + " numeric " +
                    std::to_string(numeric);
      }
    }
  };
  if (store) {
    for (std::size_t p = 0; p < store->size(); ++p) check_tensor((*store)[p].value, param_grads[p], (*store)[p].name);
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) check_tensor(inputs[k], input_grads[k], "input" + std::to_string(k));
  return res;
}

inline Mat<double> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Mat<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Fixed random projection of a node to a scalar so every output entry contributes.
/// The weights depend only on `seed` and the node's shape, so repeated graph builds agree.
inline Var project(Graph<double>& g, Var x, std::uint64_t seed = 99) {
  const auto& v = g.value(x);
  Rng rng(seed);
  Var w = g.constant(random_matrix(v.rows(), v.cols(), rng));
  return g.sum(g.mul(x, w));
}

}  // namespace xtrend::testing
