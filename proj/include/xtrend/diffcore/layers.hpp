#pragma once

#include <optional>
#include <string>
#include <vector>

#include "xtrend/diffcore/graph.hpp"

namespace xtrend::ad {

/// y = x W + b.
struct Linear {
  std::size_t weight = 0, bias = 0;
  Eigen::Index in = 0, out = 0;

  template <typename T>
  static Linear make(ParamStore<T>& store, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    l.weight = store.add(name + ".W", in, out, Init::Glorot, rng);
    l.bias = store.add(name + ".b", 1, out, Init::Zeros, rng);
    return l;
  }

  template <typename T>
  Var operator()(Graph<T>& g, Var x) const {
    return g.linear(x, g.param(weight), g.param(bias));
  }
};

struct LayerNorm {
  std::size_t gain = 0, bias = 0;

  template <typename T>
  static LayerNorm make(ParamStore<T>& store, const std::string& name, Eigen::Index dim, Rng& rng) {
    return {store.add(name + ".gain", 1, dim, Init::Ones, rng), store.add(name + ".bias", 1, dim, Init::Zeros, rng)};
  }

  template <typename T>
  Var operator()(Graph<T>& g, Var x) const {
    return g.layer_norm(x, g.param(gain), g.param(bias));
  }
};

/// Lookup table with one row per category id.
struct Embedding {
  std::size_t table = 0;
  Eigen::Index count = 0;

  template <typename T>
  static Embedding make(ParamStore<T>& store, const std::string& name, Eigen::Index count, Eigen::Index dim, Rng& rng) {
    return {store.add(name, count, dim, Init::Normal, rng), count};
  }

  template <typename T>
  Var operator()(Graph<T>& g, const std::vector<int>& ids) const {
    for (int id : ids) {
      if (id < 0 || id >= count) throw ValidationError("unknown category id " + std::to_string(id));
    }
    return g.gather_rows(g.param(table), ids);
  }
};

/// out(ELU(hidden(h) + side(s))), with the side branch present only when built with
/// one and only when a static embedding is supplied at call time. Dropout is applied
/// to the hidden layer while training.
struct Ffn {
  Linear hidden, output;
  std::optional<Linear> side;

  template <typename T>
  static Ffn make(ParamStore<T>& store, const std::string& name, Eigen::Index in, Eigen::Index hidden_dim,
                  Eigen::Index out, Rng& rng, std::optional<Eigen::Index> side_dim = std::nullopt) {
    Ffn f;
    f.hidden = Linear::make(store, name + ".l1", in, hidden_dim, rng);
    if (side_dim) f.side = Linear::make(store, name + ".l2", *side_dim, hidden_dim, rng);
    f.output = Linear::make(store, name + ".l3", hidden_dim, out, rng);
    return f;
  }

  template <typename T>
  Var operator()(Graph<T>& g, Var h, std::optional<Var> static_emb = std::nullopt) const {
    Var a = hidden(g, h);
    if (static_emb) {
      if (!side) throw ValidationError("ffn: static input supplied to a network built without a static branch");
      a = g.add(a, side->operator()(g, *static_emb));
    }
    return output(g, g.dropout(g.elu(a)));
  }
};

/// Softmax-weighted mixture of per-feature networks mapping each scalar feature to d.
struct Vsn {
  Ffn selector;
  std::size_t w1 = 0, b1 = 0, w3 = 0, b3 = 0;
  Eigen::Index features = 0, dim = 0;

  template <typename T>
  static Vsn make(ParamStore<T>& store, const std::string& name, Eigen::Index features, Eigen::Index dim, Rng& rng,
                  std::optional<Eigen::Index> side_dim) {
    Vsn v;
    v.features = features;
    v.dim = dim;
    v.selector = Ffn::make(store, name + ".select", features, dim, features, rng, side_dim);
    // per-feature maps: row j of w1/b1/b3 and block j of w3 belong to feature j
    const double lim1 = std::sqrt(6.0 / static_cast<double>(1 + dim));
    const double lim3 = std::sqrt(6.0 / static_cast<double>(2 * dim));
    Mat<T> m1(features, dim), m3(features * dim, dim);
    for (Eigen::Index i = 0; i < m1.size(); ++i) m1.data()[i] = static_cast<T>(rng.uniform(-lim1, lim1));
    for (Eigen::Index i = 0; i < m3.size(); ++i) m3.data()[i] = static_cast<T>(rng.uniform(-lim3, lim3));
    v.w1 = store.add(name + ".feature.W1", std::move(m1));
    v.b1 = store.add(name + ".feature.b1", features, dim, Init::Zeros, rng);
    v.w3 = store.add(name + ".feature.W3", std::move(m3));
    v.b3 = store.add(name + ".feature.b3", features, dim, Init::Zeros, rng);
    return v;
  }

  /// Selection weights only (N x features).
  template <typename T>
  Var weights(Graph<T>& g, Var x, std::optional<Var> static_emb) const {
    return g.softmax_rows(selector(g, x, static_emb));
  }

  template <typename T>
  Var operator()(Graph<T>& g, Var x, std::optional<Var> static_emb = std::nullopt) const {
    if (g.value(x).cols() != features) throw ValidationError("vsn: feature count mismatch");
    Var w = weights(g, x, static_emb);
    return g.dropout(g.vsn_mix(x, w, g.param(w1), g.param(b1), g.param(w3), g.param(b3)));
  }
};

struct LstmState {
  Var h, c;
};

/// Single LSTM cell; gate order [input, forget, cell, output]. Forget bias starts at 1.
struct LstmCell {
  std::size_t wx = 0, wh = 0, bias = 0;
  Eigen::Index in = 0, dim = 0;

  template <typename T>
  static LstmCell make(ParamStore<T>& store, const std::string& name, Eigen::Index in, Eigen::Index dim, Rng& rng) {
    LstmCell c;
    c.in = in;
    c.dim = dim;
    c.wx = store.add(name + ".Wx", in, 4 * dim, Init::Glorot, rng);
    c.wh = store.add(name + ".Wh", dim, 4 * dim, Init::Glorot, rng);
    Mat<T> b = Mat<T>::Zero(1, 4 * dim);
    b.middleCols(dim, dim).setOnes();
    c.bias = store.add(name + ".b", std::move(b));
    return c;
  }

  template <typename T>
  LstmState operator()(Graph<T>& g, Var x, LstmState prev) const {
    if (g.value(x).cols() != in || g.value(prev.h).cols() != dim) throw ValidationError("lstm: shape mismatch");
    Var gates = g.add(g.linear(x, g.param(wx), g.param(bias)), g.matmul(prev.h, g.param(wh)));
    Var hc = g.lstm_pointwise(gates, prev.c);
    return {g.slice_cols(hc, 0, dim), g.slice_cols(hc, dim, dim)};
  }

  /// Input contribution x Wx + b for a whole sequence at once.
  template <typename T>
  Var input_gates(Graph<T>& g, Var x) const {
    if (g.value(x).cols() != in) throw ValidationError("lstm: shape mismatch");
    return g.linear(x, g.param(wx), g.param(bias));
  }

  /// One step from precomputed input gates.
  template <typename T>
  LstmState step(Graph<T>& g, Var x_gates, LstmState prev) const {
    if (g.value(x_gates).cols() != 4 * dim || g.value(prev.h).cols() != dim) throw ValidationError("lstm: shape mismatch");
    Var hc = g.lstm_pointwise(g.add(x_gates, g.matmul(prev.h, g.param(wh))), prev.c);
    return {g.slice_cols(hc, 0, dim), g.slice_cols(hc, dim, dim)};
  }
};

/// Multi-head attention with learned query/key/value projections and an output mix.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int heads = 4;

  template <typename T>
  static MultiHeadAttention make(ParamStore<T>& store, const std::string& name, Eigen::Index query_dim,
                                 Eigen::Index key_dim, Eigen::Index value_dim, Eigen::Index att_dim, int heads,
                                 Rng& rng) {
    if (heads < 1 || att_dim % heads != 0) throw ValidationError("attention dimension must be divisible by heads");
    MultiHeadAttention m;
    m.heads = heads;
    m.wq = Linear::make(store, name + ".q", query_dim, att_dim, rng);
    m.wk = Linear::make(store, name + ".k", key_dim, att_dim, rng);
    m.wv = Linear::make(store, name + ".v", value_dim, att_dim, rng);
    m.wo = Linear::make(store, name + ".o", att_dim, att_dim, rng);
    return m;
  }

  /// Query row i attends to key/value rows [block[i] * n, block[i] * n + n).
  /// `probs`, when given, receives the attention node for weight retrieval.
  template <typename T>
  Var operator()(Graph<T>& g, Var q, Var k, Var v, std::vector<int> block, Eigen::Index n,
                 Var* probs = nullptr) const {
    Var att = g.attention(wq(g, q), wk(g, k), wv(g, v), std::move(block), n, heads);
    if (probs) *probs = att;
    return wo(g, att);
  }
};

}  // namespace xtrend::ad
