#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xtrend/common.hpp"

namespace xtrend::ad {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Init { Zeros, Ones, Glorot, Normal };

template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
};

/// Named trainable tensors. Matrices follow the row-vector convention `y = x W + b`,
/// so a weight's rows are its fan-in and its columns its fan-out.
template <typename T>
class ParamStore {
 public:
  std::size_t add(const std::string& name, Mat<T> value) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    Mat<T> grad = Mat<T>::Zero(value.rows(), value.cols());
    params_.push_back({name, std::move(value), std::move(grad)});
    return params_.size() - 1;
  }

  /// Glorot: uniform in +-sqrt(6 / (rows + cols)). Normal: N(0, 1 / cols).
  std::size_t add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init, Rng& rng) {
    Mat<T> v = Mat<T>::Zero(rows, cols);
    switch (init) {
      case Init::Zeros:
        break;
      case Init::Ones:
        v.setOnes();
        break;
      case Init::Glorot: {
        const double lim = std::sqrt(6.0 / static_cast<double>(rows + cols));
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(rng.uniform(-lim, lim));
        break;
      }
      case Init::Normal: {
        const double sd = 1.0 / std::sqrt(static_cast<double>(cols));
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(sd * rng.normal());
        break;
      }
    }
    return add(name, std::move(v));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  Parameter<T>& operator[](const std::string& name) { return params_[index(name)]; }
  const Parameter<T>& operator[](const std::string& name) const { return params_[index(name)]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

  /// Copies values from a store with identical names and shapes.
  template <typename U>
  void assign_from(const ParamStore<U>& other) {
    for (auto& p : params_) {
      const auto& src = other[p.name];
      if (src.value.rows() != p.value.rows() || src.value.cols() != p.value.cols()) {
        throw ValidationError("shape mismatch for parameter '" + p.name + "'");
      }
      p.value = src.value.template cast<T>();
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Every op appends a node holding its value and a closure
/// that pushes the node's gradient to its inputs. A graph is single-use: build,
/// call backward once, discard.
template <typename T>
class Graph {
 public:
  using M = Mat<T>;
  using RowMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

  explicit Graph(ParamStore<T>* store = nullptr) : store_(store) {}

  // ---- configuration -------------------------------------------------------

  /// Enables dropout with the given rate; the graph owns its random stream.
  void set_training(double rate, std::uint64_t seed) {
    if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout rate must lie in [0, 1)");
    training_ = true;
    dropout_rate_ = rate;
    rng_ = Rng(seed);
  }
  bool training() const { return training_; }

  // ---- leaves --------------------------------------------------------------

  Var constant(M value) { return push(std::move(value), false); }

  /// A leaf whose gradient is kept (used for input-gradient checks).
  Var input(M value) { return push(std::move(value), true); }

  Var param(std::size_t index) {
    if (!store_) throw Error("graph has no parameter store");
    auto it = param_nodes_.find(index);
    if (it != param_nodes_.end()) return it->second;
    Var v = push((*store_)[index].value, true);
    nodes_[v.id].param = static_cast<int>(index);
    param_nodes_[index] = v;
    return v;
  }
  Var param(const std::string& name) { return param(store_->index(name)); }

  const M& value(Var v) const { return nodes_.at(v.id).value; }
  const M& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::size_t size() const { return nodes_.size(); }

  T scalar(Var v) const {
    const M& m = value(v);
    if (m.size() != 1) throw Error("scalar() on a non-scalar node");
    return m(0, 0);
  }

  // ---- backward ------------------------------------------------------------

  /// Populates gradients of every parameter reachable from `loss`; parameters not
  /// reached end with zero gradient unless `accumulate` keeps earlier values.
  void backward(Var loss, bool accumulate = false) {
    const M& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) throw Error("backward requires a scalar loss");
    if (store_ && !accumulate) store_->zero_grad();
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id].grad = M::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.back) n.back();
      if (n.param >= 0) (*store_)[n.param].grad += n.grad;
    }
  }

  // ---- elementwise and linear algebra ----------------------------------------

  Var matmul(Var a, Var b) {
    check(value(a).cols() == value(b).rows(), "matmul: inner dimensions differ");
    Var out = push(value(a) * value(b), any(a, b));
    set_back(out, [this, a, b, out] {
      const M& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g * value(b).transpose());
      if (needs(b)) acc(b, value(a).transpose() * g);
    });
    return out;
  }

  /// x W + b with `b` a 1 x n row broadcast over rows.
  Var linear(Var x, Var w, Var b) {
    check(value(x).cols() == value(w).rows(), "linear: input width does not match weight rows");
    check(value(b).rows() == 1 && value(b).cols() == value(w).cols(), "linear: bias shape");
    M y = value(x) * value(w);
    y.rowwise() += value(b).row(0);
    Var out = push(std::move(y), any(x, w) || needs(b));
    set_back(out, [this, x, w, b, out] {
      const M& g = nodes_[out.id].grad;
      if (needs(x)) acc(x, g * value(w).transpose());
      if (needs(w)) acc(w, value(x).transpose() * g);
      if (needs(b)) acc(b, g.colwise().sum());
    });
    return out;
  }

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Var out = push(value(a) + value(b), any(a, b));
    set_back(out, [this, a, b, out] {
      const M& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g);
      if (needs(b)) acc(b, g);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Var out = push(value(a) - value(b), any(a, b));
    set_back(out, [this, a, b, out] {
      const M& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g);
      if (needs(b)) acc(b, -g);
    });
    return out;
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    Var out = push(value(a).cwiseProduct(value(b)), any(a, b));
    set_back(out, [this, a, b, out] {
      const M& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g.cwiseProduct(value(b)));
      if (needs(b)) acc(b, g.cwiseProduct(value(a)));
    });
    return out;
  }

  Var scale(Var a, T s) {
    Var out = push(value(a) * s, needs(a));
    set_back(out, [this, a, s, out] { acc(a, nodes_[out.id].grad * s); });
    return out;
  }

  /// Adds a 1 x n row to every row of `a`.
  Var add_row(Var a, Var row) {
    check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row: shape");
    M y = value(a);
    y.rowwise() += value(row).row(0);
    Var out = push(std::move(y), any(a, row));
    set_back(out, [this, a, row, out] {
      const M& g = nodes_[out.id].grad;
      if (needs(a)) acc(a, g);
      if (needs(row)) acc(row, g.colwise().sum());
    });
    return out;
  }

  Var elu(Var a) {
    Var out = push(elu_values(value(a)), needs(a));
    set_back(out, [this, a, out] {
      const M& x = value(a);
      const M& y = value(out);
      acc(a, M((x.array() > T(0)).select(nodes_[out.id].grad.array(), nodes_[out.id].grad.array() * (y.array() + T(1)))));
    });
    return out;
  }

  Var tanh(Var a) {
    Var out = push(value(a).array().tanh().matrix(), needs(a));
    set_back(out, [this, a, out] {
      const M& y = value(out);
      acc(a, (nodes_[out.id].grad.array() * (T(1) - y.array().square())).matrix());
    });
    return out;
  }

  Var sigmoid(Var a) {
    Var out = push(sigmoid_values(value(a)), needs(a));
    set_back(out, [this, a, out] {
      const M& y = value(out);
      acc(a, (nodes_[out.id].grad.array() * y.array() * (T(1) - y.array())).matrix());
    });
    return out;
  }

  Var softplus(Var a) {
    M y = value(a).unaryExpr([](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
    Var out = push(std::move(y), needs(a));
    set_back(out, [this, a, out] {
      M s = value(a).unaryExpr([](T x) { return sigmoid_scalar(x); });
      acc(a, nodes_[out.id].grad.cwiseProduct(s));
    });
    return out;
  }

  Var add_scalar(Var a, T s) {
    Var out = push((value(a).array() + s).matrix(), needs(a));
    set_back(out, [this, a, out] { acc(a, nodes_[out.id].grad); });
    return out;
  }

  // ---- reshaping -----------------------------------------------------------

  Var concat_cols(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_cols: no inputs");
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    bool ng = false;
    for (Var p : parts) {
      check(value(p).rows() == rows, "concat_cols: row counts differ");
      cols += value(p).cols();
      ng = ng || needs(p);
    }
    M y(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      y.middleCols(c, value(p).cols()) = value(p);
      c += value(p).cols();
    }
    Var out = push(std::move(y), ng);
    set_back(out, [this, parts, out] {
      Eigen::Index c0 = 0;
      for (Var p : parts) {
        const Eigen::Index w = value(p).cols();
        if (needs(p)) acc(p, nodes_[out.id].grad.middleCols(c0, w));
        c0 += w;
      }
    });
    return out;
  }

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    check(start >= 0 && start + count <= value(a).cols(), "slice_cols: out of range");
    Var out = push(value(a).middleCols(start, count), needs(a));
    set_back(out, [this, a, start, count, out] {
      M g = M::Zero(value(a).rows(), value(a).cols());
      g.middleCols(start, count) = nodes_[out.id].grad;
      acc(a, g);
    });
    return out;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_rows: no inputs");
    const Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    bool ng = false;
    for (Var p : parts) {
      check(value(p).cols() == cols, "concat_rows: column counts differ");
      rows += value(p).rows();
      ng = ng || needs(p);
    }
    M y(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      y.middleRows(r, value(p).rows()) = value(p);
      r += value(p).rows();
    }
    Var out = push(std::move(y), ng);
    set_back(out, [this, parts, out] {
      Eigen::Index r0 = 0;
      for (Var p : parts) {
        const Eigen::Index h = value(p).rows();
        if (needs(p)) acc(p, nodes_[out.id].grad.middleRows(r0, h));
        r0 += h;
      }
    });
    return out;
  }

  Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
    check(start >= 0 && start + count <= value(a).rows(), "slice_rows: out of range");
    Var out = push(value(a).middleRows(start, count), needs(a));
    set_back(out, [this, a, start, count, out] {
      if (nodes_[a.id].grad.size() == 0) nodes_[a.id].grad = M::Zero(value(a).rows(), value(a).cols());
      nodes_[a.id].grad.middleRows(start, count) += nodes_[out.id].grad;
    });
    return out;
  }

  /// Row i of the output is row idx[i] of `a`; gradients scatter-add back.
  Var gather_rows(Var a, std::vector<int> idx) {
    const M& src = value(a);
    M y(static_cast<Eigen::Index>(idx.size()), src.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      check(idx[i] >= 0 && idx[i] < src.rows(), "gather_rows: index out of range");
      y.row(static_cast<Eigen::Index>(i)) = src.row(idx[i]);
    }
    Var out = push(std::move(y), needs(a));
    set_back(out, [this, a, idx = std::move(idx), out] {
      if (nodes_[a.id].grad.size() == 0) nodes_[a.id].grad = M::Zero(value(a).rows(), value(a).cols());
      M& g = nodes_[a.id].grad;
      const M& go = nodes_[out.id].grad;
      for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += go.row(static_cast<Eigen::Index>(i));
    });
    return out;
  }

  /// Mean over consecutive blocks of `block` rows.
  Var block_mean(Var a, Eigen::Index block) {
    const M& x = value(a);
    check(block > 0 && x.rows() % block == 0, "block_mean: rows not divisible by block");
    const Eigen::Index nb = x.rows() / block;
    M y(nb, x.cols());
    for (Eigen::Index b = 0; b < nb; ++b) y.row(b) = x.middleRows(b * block, block).colwise().mean();
    Var out = push(std::move(y), needs(a));
    set_back(out, [this, a, block, nb, out] {
      M g(value(a).rows(), value(a).cols());
      const M& go = nodes_[out.id].grad;
      for (Eigen::Index b = 0; b < nb; ++b) g.middleRows(b * block, block).rowwise() = go.row(b) / T(block);
      acc(a, g);
    });
    return out;
  }

  // ---- reductions ----------------------------------------------------------

  Var sum(Var a) {
    Var out = push(M::Constant(1, 1, value(a).sum()), needs(a));
    set_back(out, [this, a, out] {
      acc(a, M::Constant(value(a).rows(), value(a).cols(), nodes_[out.id].grad(0, 0)));
    });
    return out;
  }

  Var mean(Var a) {
    const T n = static_cast<T>(value(a).size());
    check(n > 0, "mean of empty tensor");
    return scale(sum(a), T(1) / n);
  }

  // ---- normalization -------------------------------------------------------

  /// Softmax along each row.
  Var softmax_rows(Var a) {
    M y = value(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) softmax_inplace(y.row(r));
    Var out = push(std::move(y), needs(a));
    set_back(out, [this, a, out] {
      const M& y = value(out);
      const M& g = nodes_[out.id].grad;
      M d = y.cwiseProduct(g);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> s = d.rowwise().sum();
      d -= y.cwiseProduct(s.replicate(1, y.cols()));
      acc(a, d);
    });
    return out;
  }

  static constexpr double kLayerNormEps = 1e-5;

  /// Per-row (x - mean) / sqrt(var + 1e-5), then gain and bias (both 1 x d).
  Var layer_norm(Var x, Var gain, Var bias) {
    const M& v = value(x);
    const Eigen::Index d = v.cols();
    check(value(gain).cols() == d && value(bias).cols() == d, "layer_norm: gain/bias width");
    M xhat(v.rows(), d);
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(v.rows());
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      const T mu = v.row(r).mean();
      const T var = (v.row(r).array() - mu).square().mean();
      rstd(r) = T(1) / std::sqrt(var + T(kLayerNormEps));
      xhat.row(r) = (v.row(r).array() - mu) * rstd(r);
    }
    M y = xhat;
    y.array().rowwise() *= value(gain).row(0).array();
    y.rowwise() += value(bias).row(0);
    Var out = push(std::move(y), needs(x) || needs(gain) || needs(bias));
    set_back(out, [this, x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const M& g = nodes_[out.id].grad;
      if (needs(gain)) acc(gain, g.cwiseProduct(xhat).colwise().sum());
      if (needs(bias)) acc(bias, g.colwise().sum());
      if (needs(x)) {
        M dxhat = g;
        dxhat.array().rowwise() *= value(gain).row(0).array();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
        M dx = dxhat;
        dx.colwise() -= m1;
        dx -= xhat.cwiseProduct(m2.replicate(1, xhat.cols()));
        dx.array().colwise() *= rstd.array();
        acc(x, dx);
      }
    });
    return out;
  }

  /// Inverted dropout; identity unless training.
  Var dropout(Var a) {
    if (!training_ || dropout_rate_ == 0.0) return a;
    M mask = dropout_mask(value(a).rows(), value(a).cols());
    Var out = push(value(a).cwiseProduct(mask), needs(a));
    set_back(out, [this, a, out, mask = std::move(mask)] { acc(a, nodes_[out.id].grad.cwiseProduct(mask)); });
    return out;
  }

  // ---- fused layers --------------------------------------------------------

  /// LSTM gate nonlinearities. `gates` holds pre-activations [input, forget, cell, output]
  /// (N x 4d); returns [h | c] (N x 2d).
  Var lstm_pointwise(Var gates, Var c_prev) {
    const M& z = value(gates);
    const Eigen::Index d = value(c_prev).cols();
    check(z.cols() == 4 * d && z.rows() == value(c_prev).rows(), "lstm: gate/state shape mismatch");
    M act(z.rows(), 4 * d);
    act.leftCols(2 * d) = sigmoid_values(z.leftCols(2 * d));
    act.middleCols(2 * d, d) = z.middleCols(2 * d, d).array().tanh().matrix();
    act.rightCols(d) = sigmoid_values(z.rightCols(d));
    M y(z.rows(), 2 * d);
    auto i = act.leftCols(d).array();
    auto f = act.middleCols(d, d).array();
    auto g = act.middleCols(2 * d, d).array();
    auto o = act.rightCols(d).array();
    y.rightCols(d) = (f * value(c_prev).array() + i * g).matrix();
    M tc = y.rightCols(d).array().tanh().matrix();
    y.leftCols(d) = (o * tc.array()).matrix();
    Var out = push(std::move(y), any(gates, c_prev));
    set_back(out, [this, gates, c_prev, out, d, act = std::move(act), tc = std::move(tc)] {
      const M& go = nodes_[out.id].grad;
      auto i = act.leftCols(d).array();
      auto f = act.middleCols(d, d).array();
      auto g = act.middleCols(2 * d, d).array();
      auto o = act.rightCols(d).array();
      auto dh = go.leftCols(d).array();
      M dc = (go.rightCols(d).array() + dh * o * (T(1) - tc.array().square())).matrix();
      if (needs(gates)) {
        M dz(act.rows(), 4 * d);
        dz.leftCols(d) = (dc.array() * g * i * (T(1) - i)).matrix();
        dz.middleCols(d, d) = (dc.array() * value(c_prev).array() * f * (T(1) - f)).matrix();
        dz.middleCols(2 * d, d) = (dc.array() * i * (T(1) - g.square())).matrix();
        dz.rightCols(d) = (dh * tc.array() * o * (T(1) - o)).matrix();
        acc(gates, dz);
      }
      if (needs(c_prev)) acc(c_prev, (dc.array() * f).matrix());
    });
    return out;
  }

  /// Scaled dot-product attention over per-query key blocks, split into heads.
  /// Query row i attends to key/value rows [block[i] * n, block[i] * n + n).
  /// Head h uses columns [h * dk, (h+1) * dk) of Q and K and [h * dv, (h+1) * dv) of V.
  Var attention(Var q, Var k, Var v, std::vector<int> block, Eigen::Index n, int heads) {
    const M& Q = value(q);
    const M& K = value(k);
    const M& V = value(v);
    check(n >= 1, "attention: empty key set");
    check(heads >= 1 && Q.cols() % heads == 0 && V.cols() % heads == 0, "attention: width not divisible by heads");
    check(Q.cols() == K.cols(), "attention: query/key width mismatch");
    check(K.rows() == V.rows() && K.rows() % n == 0, "attention: key/value rows");
    check(static_cast<Eigen::Index>(block.size()) == Q.rows(), "attention: block map size");
    const Eigen::Index dk = Q.cols() / heads, dv = V.cols() / heads;
    const T inv = T(1) / std::sqrt(static_cast<T>(dk));
    M P(Q.rows(), heads * n);
    M y = M::Zero(Q.rows(), V.cols());
    for (Eigen::Index r = 0; r < Q.rows(); ++r) {
      const Eigen::Index base = static_cast<Eigen::Index>(block[r]) * n;
      check(base >= 0 && base + n <= K.rows(), "attention: block index out of range");
      for (int h = 0; h < heads; ++h) {
        auto p = P.row(r).segment(h * n, n);
        for (Eigen::Index j = 0; j < n; ++j) p(j) = Q.row(r).segment(h * dk, dk).dot(K.row(base + j).segment(h * dk, dk)) * inv;
        softmax_inplace(p);
        for (Eigen::Index j = 0; j < n; ++j) y.row(r).segment(h * dv, dv) += p(j) * V.row(base + j).segment(h * dv, dv);
      }
    }
    Var out = push(std::move(y), needs(q) || needs(k) || needs(v));
    probs_[out.id] = P;
    set_back(out, [this, q, k, v, block = std::move(block), n, heads, dk, dv, inv, out] {
      const M& Q = value(q);
      const M& K = value(k);
      const M& V = value(v);
      const M& P = probs_.at(out.id);
      const M& go = nodes_[out.id].grad;
      M dQ = M::Zero(Q.rows(), Q.cols()), dK = M::Zero(K.rows(), K.cols()), dV = M::Zero(V.rows(), V.cols());
      Eigen::Matrix<T, 1, Eigen::Dynamic> dp(n);
      for (Eigen::Index r = 0; r < Q.rows(); ++r) {
        const Eigen::Index base = static_cast<Eigen::Index>(block[r]) * n;
        for (int h = 0; h < heads; ++h) {
          auto p = P.row(r).segment(h * n, n);
          auto gy = go.row(r).segment(h * dv, dv);
          for (Eigen::Index j = 0; j < n; ++j) {
            dV.row(base + j).segment(h * dv, dv) += p(j) * gy;
            dp(j) = gy.dot(V.row(base + j).segment(h * dv, dv));
          }
          const T s = p.dot(dp);
          for (Eigen::Index j = 0; j < n; ++j) {
            const T dl = p(j) * (dp(j) - s) * inv;
            dQ.row(r).segment(h * dk, dk) += dl * K.row(base + j).segment(h * dk, dk);
            dK.row(base + j).segment(h * dk, dk) += dl * Q.row(r).segment(h * dk, dk);
          }
        }
      }
      if (needs(q)) acc(q, dQ);
      if (needs(k)) acc(k, dK);
      if (needs(v)) acc(v, dV);
    });
    return out;
  }

  /// Attention probabilities of an attention node: rows = queries, columns = heads x keys.
  const M& attention_probs(Var att) const {
    auto it = probs_.find(att.id);
    if (it == probs_.end()) throw Error("node is not an attention output");
    return it->second;
  }

  /// Variable selection mixture: sum_j w[:, j] * (ELU(x[:, j] w1_j + b1_j) W3_j + b3_j).
  /// w1, b1, b3 are J x d; w3 stacks the J per-feature d x d maps vertically.
  /// Dropout (when training) is applied to each per-feature hidden layer.
  Var vsn_mix(Var x, Var weights, Var w1, Var b1, Var w3, Var b3) {
    const M& X = value(x);
    const Eigen::Index J = X.cols(), d = value(w1).cols(), N = X.rows();
    check(value(weights).rows() == N && value(weights).cols() == J, "vsn: weight shape");
    check(value(w1).rows() == J && value(b1).rows() == J && value(b3).rows() == J, "vsn: parameter rows");
    check(value(w3).rows() == J * d && value(w3).cols() == d, "vsn: stacked map shape");
    std::vector<M> hidden(static_cast<std::size_t>(J)), feat(static_cast<std::size_t>(J)), slopes, masks;
    M y = M::Zero(N, d);
    const bool drop = training_ && dropout_rate_ > 0.0;
    for (Eigen::Index j = 0; j < J; ++j) {
      M pre = X.col(j) * value(w1).row(j);
      pre.rowwise() += value(b1).row(j);
      M h = elu_values(pre);
      // ELU slope: 1 on the positive side, elu + 1 elsewhere
      slopes.push_back((pre.array() > T(0)).select(M::Ones(N, d).array(), h.array() + T(1)).matrix());
      if (drop) {
        M mask = dropout_mask(N, d);
        h = h.cwiseProduct(mask);
        masks.push_back(std::move(mask));
      }
      M f = h * value(w3).middleRows(j * d, d);
      f.rowwise() += value(b3).row(j);
      y += (f.array().colwise() * value(weights).col(j).array()).matrix();
      hidden[static_cast<std::size_t>(j)] = std::move(h);
      feat[static_cast<std::size_t>(j)] = std::move(f);
    }
    const bool ng = needs(x) || needs(weights) || needs(w1) || needs(b1) || needs(w3) || needs(b3);
    Var out = push(std::move(y), ng);
    set_back(out, [this, x, weights, w1, b1, w3, b3, out, J, d, N, hidden = std::move(hidden), feat = std::move(feat),
                   slopes = std::move(slopes), masks = std::move(masks)] {
      const M& go = nodes_[out.id].grad;
      const M& X = value(x);
      const M& W = value(weights);
      M dW(N, J), dX = M::Zero(N, J), dw1 = M::Zero(J, d), db1 = M::Zero(J, d), dw3(J * d, d), db3(J, d);
      for (Eigen::Index j = 0; j < J; ++j) {
        const M& h = hidden[static_cast<std::size_t>(j)];
        const M& f = feat[static_cast<std::size_t>(j)];
        dW.col(j) = f.cwiseProduct(go).rowwise().sum();
        M df = (go.array().colwise() * W.col(j).array()).matrix();
        dw3.middleRows(j * d, d) = h.transpose() * df;
        db3.row(j) = df.colwise().sum();
        M dh = df * value(w3).middleRows(j * d, d).transpose();
        if (!masks.empty()) dh = dh.cwiseProduct(masks[static_cast<std::size_t>(j)]);
        dh = dh.cwiseProduct(slopes[static_cast<std::size_t>(j)]);
        dw1.row(j) = X.col(j).transpose() * dh;
        db1.row(j) = dh.colwise().sum();
        dX.col(j) = dh * value(w1).row(j).transpose();
      }
      if (needs(x)) acc(x, dX);
      if (needs(weights)) acc(weights, dW);
      if (needs(w1)) acc(w1, dw1);
      if (needs(b1)) acc(b1, db1);
      if (needs(w3)) acc(w3, dw3);
      if (needs(b3)) acc(b3, db3);
    });
    return out;
  }

  // ---- losses (scalar outputs) -----------------------------------------------

  static constexpr double kSharpeStdFloor = 1e-9;

  /// -sqrt(252) * mean(z * r) / max(std(z * r), 1e-9) over the listed rows of column vectors.
  /// Population standard deviation.
  Var sharpe_loss(Var z, const std::vector<T>& r, const std::vector<int>& rows) {
    const M& Z = value(z);
    check(Z.cols() == 1 && static_cast<std::size_t>(Z.rows()) == r.size(), "sharpe_loss: shape");
    check(rows.size() >= 2, "sharpe_loss: need at least two observations");
    const double n = static_cast<double>(rows.size());
    double m = 0;
    for (int k : rows) m += static_cast<double>(Z(k, 0)) * static_cast<double>(r[k]);
    m /= n;
    double ss = 0;
    for (int k : rows) {
      const double e = static_cast<double>(Z(k, 0)) * static_cast<double>(r[k]) - m;
      ss += e * e;
    }
    const double sd = std::sqrt(ss / n);
    const double denom = std::max(sd, kSharpeStdFloor);
    const double ann = std::sqrt(static_cast<double>(kTradingDaysPerYear));
    Var out = push(M::Constant(1, 1, static_cast<T>(-ann * m / denom)), needs(z));
    set_back(out, [this, z, r, rows, n, m, sd, denom, ann, out] {
      const double g = static_cast<double>(nodes_[out.id].grad(0, 0));
      M dz = M::Zero(value(z).rows(), 1);
      const M& Z = value(z);
      for (int k : rows) {
        const double p = static_cast<double>(Z(k, 0)) * static_cast<double>(r[k]);
        double dp = 1.0 / (n * denom);
        if (sd > kSharpeStdFloor) dp -= m * (p - m) / (n * sd * sd * sd);
        dz(k, 0) += static_cast<T>(-ann * g * dp * static_cast<double>(r[k]));
      }
      acc(z, dz);
    });
    return out;
  }

  /// Mean Gaussian negative log-likelihood over the listed rows.
  Var gaussian_nll(Var mu, Var sigma, const std::vector<T>& r, const std::vector<int>& rows) {
    const M& U = value(mu);
    const M& S = value(sigma);
    check(U.cols() == 1 && S.cols() == 1 && U.rows() == S.rows() && static_cast<std::size_t>(U.rows()) == r.size(),
          "gaussian_nll: shape");
    check(!rows.empty(), "gaussian_nll: no observations");
    const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
    double total = 0;
    for (int k : rows) {
      const double s = static_cast<double>(S(k, 0));
      const double e = static_cast<double>(r[k]) - static_cast<double>(U(k, 0));
      total += half_log_2pi + std::log(s) + e * e / (2 * s * s);
    }
    const double n = static_cast<double>(rows.size());
    Var out = push(M::Constant(1, 1, static_cast<T>(total / n)), any(mu, sigma));
    set_back(out, [this, mu, sigma, r, rows, n, out] {
      const double g = static_cast<double>(nodes_[out.id].grad(0, 0)) / n;
      const M& U = value(mu);
      const M& S = value(sigma);
      M du = M::Zero(U.rows(), 1), ds = M::Zero(S.rows(), 1);
      for (int k : rows) {
        const double s = static_cast<double>(S(k, 0));
        const double e = static_cast<double>(r[k]) - static_cast<double>(U(k, 0));
        du(k, 0) += static_cast<T>(-g * e / (s * s));
        ds(k, 0) += static_cast<T>(g * (1.0 / s - e * e / (s * s * s)));
      }
      if (needs(mu)) acc(mu, du);
      if (needs(sigma)) acc(sigma, ds);
    });
    return out;
  }

  /// Mean pinball loss over listed rows and all quantile columns.
  Var pinball_loss(Var q, const std::vector<T>& r, const std::vector<int>& rows, const std::vector<double>& levels) {
    const M& Q = value(q);
    check(static_cast<std::size_t>(Q.cols()) == levels.size() && static_cast<std::size_t>(Q.rows()) == r.size(),
          "pinball_loss: shape");
    check(!rows.empty(), "pinball_loss: no observations");
    double total = 0;
    for (int k : rows) {
      for (std::size_t j = 0; j < levels.size(); ++j) {
        const double e = static_cast<double>(r[k]) - static_cast<double>(Q(k, static_cast<Eigen::Index>(j)));
        total += e > 0 ? levels[j] * e : (levels[j] - 1.0) * e;
      }
    }
    const double n = static_cast<double>(rows.size() * levels.size());
    Var out = push(M::Constant(1, 1, static_cast<T>(total / n)), needs(q));
    set_back(out, [this, q, r, rows, levels, n, out] {
      const double g = static_cast<double>(nodes_[out.id].grad(0, 0)) / n;
      const M& Q = value(q);
      M dq = M::Zero(Q.rows(), Q.cols());
      for (int k : rows) {
        for (std::size_t j = 0; j < levels.size(); ++j) {
          const auto c = static_cast<Eigen::Index>(j);
          const double e = static_cast<double>(r[k]) - static_cast<double>(Q(k, c));
          if (e > 0) dq(k, c) += static_cast<T>(-g * levels[j]);
          else if (e < 0) dq(k, c) += static_cast<T>(g * (1.0 - levels[j]));
        }
      }
      acc(q, dq);
    });
    return out;
  }

  static T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  }

  /// Vectorized logistic function via tanh(x / 2).
  template <typename Derived>
  static M sigmoid_values(const Eigen::MatrixBase<Derived>& x) {
    return ((x.array() * T(0.5)).tanh() * T(0.5) + T(0.5)).matrix();
  }

 private:
  struct Node {
    M value;
    M grad;
    std::function<void()> back;
    int param = -1;
    bool requires_grad = false;
  };

  template <typename Row>
  static void softmax_inplace(Row&& row) {
    const T mx = row.maxCoeff();
    if (!std::isfinite(static_cast<double>(mx))) {
      // all -inf: no defined distribution; spread uniformly so downstream stays finite
      row.setConstant(T(1) / static_cast<T>(row.size()));
      return;
    }
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }

  Var push(M value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(Var out, std::function<void()> f) {
    if (nodes_[out.id].requires_grad) nodes_[out.id].back = std::move(f);
  }

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  bool any(Var a, Var b) const { return needs(a) || needs(b); }

  template <typename Expr>
  void acc(Var v, const Expr& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }

  static void check(bool ok, const char* what) {
    if (!ok) throw ValidationError(what);
  }
  void same_shape(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw ValidationError(std::string(op) + ": shape mismatch");
    }
  }

  std::vector<Node> nodes_;
  ParamStore<T>* store_;
  std::map<std::size_t, Var> param_nodes_;
  std::map<int, M> probs_;
  bool training_ = false;
  static M elu_values(const M& x) {
    return (x.array().max(T(0)) + (x.array().min(T(0)).exp() - T(1))).matrix();
  }

  /// Inverted-dropout mask; each 64-bit draw decides two units.
  M dropout_mask(Eigen::Index rows, Eigen::Index cols) {
    M mask(rows, cols);
    const auto threshold = static_cast<std::uint64_t>(dropout_rate_ * 4294967296.0);
    const T scale = static_cast<T>(1.0 / (1.0 - dropout_rate_));
    // splitmix64 stream seeded from the graph generator
    std::uint64_t state = rng_.bits(), bits = 0;
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      if (i % 2 == 0) {
        std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        bits = z ^ (z >> 31);
      }
      const std::uint64_t u = i % 2 == 0 ? (bits & 0xffffffffULL) : (bits >> 32);
      mask.data()[i] = u < threshold ? T(0) : scale;
    }
    return mask;
  }

  double dropout_rate_ = 0.0;
  Rng rng_{0};
};

}  // namespace xtrend::ad
