#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "xtrend/common.hpp"
#include "xtrend/diffcore.hpp"
#include "xtrend/features.hpp"

namespace xtrend {

enum class Variant { Baseline, XTrendSharpe, XTrendG, XTrendQ };
enum class ContextMode { FinalState, TimeEquivalent, CpdSegments };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::XTrendSharpe: return "xtrend";
    case Variant::XTrendG: return "xtrend-g";
    case Variant::XTrendQ: return "xtrend-q";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::Baseline;
  if (s == "xtrend" || s == "xtrend-sharpe") return Variant::XTrendSharpe;
  if (s == "xtrend-g") return Variant::XTrendG;
  if (s == "xtrend-q") return Variant::XTrendQ;
  throw ValidationError("unknown model variant '" + s + "'");
}

inline std::string to_string(ContextMode m) {
  switch (m) {
    case ContextMode::FinalState: return "F";
    case ContextMode::TimeEquivalent: return "T";
    case ContextMode::CpdSegments: return "C";
  }
  return "?";
}

inline ContextMode parse_context_mode(const std::string& s) {
  if (s == "F" || s == "final") return ContextMode::FinalState;
  if (s == "T" || s == "time") return ContextMode::TimeEquivalent;
  if (s == "C" || s == "cpd") return ContextMode::CpdSegments;
  throw ValidationError("unknown context mode '" + s + "'");
}

inline const std::vector<double> kDefaultQuantiles{0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5,
                                                   0.6,  0.7,  0.8, 0.9, 0.95, 0.99};
inline constexpr double kSigmaFloorHead = 1e-4;

struct ModelConfig {
  int d_h = 64;
  int n_heads = 4;
  double dropout = 0.3;
  Variant variant = Variant::XTrendSharpe;
  ContextMode context_mode = ContextMode::CpdSegments;
  bool zero_shot = false;
  std::vector<double> quantiles = kDefaultQuantiles;
  int n_features = static_cast<int>(kNumFeatures);
  int n_categories = 50;
  /// Ablation: replace the cross-attention read with the mean of the context values.
  bool cross_attention = true;
  /// Ablation: drop the encoders entirely; the decoder then sees the target alone.
  bool context = true;

  bool uses_context() const { return variant != Variant::Baseline && context; }

  void validate() const {
    if (d_h < 1) throw ValidationError("d_h must be positive");
    if (n_heads < 1 || d_h % n_heads != 0) throw ValidationError("d_h must be divisible by the number of heads");
    if (dropout < 0 || dropout >= 1) throw ValidationError("dropout must lie in [0, 1)");
    if (n_features < 1) throw ValidationError("n_features must be positive");
    if (n_categories < 1) throw ValidationError("n_categories must be positive");
    if (variant == Variant::XTrendQ) {
      if (quantiles.empty()) throw ValidationError("quantile list is empty");
      for (std::size_t i = 0; i < quantiles.size(); ++i) {
        if (!(quantiles[i] > 0 && quantiles[i] < 1)) throw ValidationError("quantiles must lie in (0, 1)");
        if (i && !(quantiles[i] > quantiles[i - 1])) throw ValidationError("quantiles must be strictly increasing");
      }
    }
  }
};

/// A batch of variable-length sequences, padded to `steps` and stored time-major:
/// row t * batch + b is step t of sequence b. Sequences are left-aligned, so step t
/// of a sequence with length L is valid for t < L and padding follows.
struct SequenceBatch {
  Eigen::Index batch = 0, steps = 0;
  ad::Mat<double> features;
  std::vector<int> lengths;
  /// Category id per sequence, or -1 to omit static information.
  std::vector<int> categories;

  Eigen::Index width() const { return features.cols(); }
  int row(Eigen::Index t, Eigen::Index b) const { return static_cast<int>(t * batch + b); }
  bool has_static() const { return !categories.empty() && categories.front() >= 0; }

  void validate() const {
    if (batch < 1 || steps < 1) throw ValidationError("empty sequence batch");
    if (features.rows() != batch * steps) throw ValidationError("sequence batch rows != steps * batch");
    if (static_cast<Eigen::Index>(lengths.size()) != batch) throw ValidationError("one length per sequence required");
    for (int l : lengths) {
      if (l < 1 || l > steps) throw ValidationError("sequence length out of range");
    }
    if (!categories.empty()) {
      if (static_cast<Eigen::Index>(categories.size()) != batch) throw ValidationError("one category per sequence required");
      const bool first = categories.front() >= 0;
      for (int c : categories) {
        if ((c >= 0) != first) throw ValidationError("static information must be present for all sequences or none");
      }
    }
  }

  /// Packs sequences (each length_i x width, oldest row first).
  static SequenceBatch pack(const std::vector<ad::Mat<double>>& seqs, std::vector<int> categories = {}) {
    if (seqs.empty()) throw ValidationError("no sequences to pack");
    SequenceBatch out;
    out.batch = static_cast<Eigen::Index>(seqs.size());
    const Eigen::Index width = seqs.front().cols();
    for (const auto& s : seqs) {
      if (s.cols() != width) throw ValidationError("sequences differ in width");
      if (s.rows() < 1) throw ValidationError("empty sequence");
      out.steps = std::max(out.steps, s.rows());
      out.lengths.push_back(static_cast<int>(s.rows()));
    }
    out.features = ad::Mat<double>::Zero(out.batch * out.steps, width);
    for (Eigen::Index b = 0; b < out.batch; ++b) {
      const auto& s = seqs[static_cast<std::size_t>(b)];
      for (Eigen::Index t = 0; t < s.rows(); ++t) out.features.row(t * out.batch + b) = s.row(t);
    }
    out.categories = std::move(categories);
    out.validate();
    return out;
  }
};

/// Context sequences for a batch of targets. Each step carries the target features
/// followed by the scaled next-day return (last column). Sequence b * set_size + c
/// is context c of target b.
struct ContextBatch {
  SequenceBatch sequences;
  Eigen::Index set_size = 0;
  /// Provenance for attention dumps (optional): ticker and per-step dates.
  std::vector<std::string> tickers;
  std::vector<std::vector<Date>> dates;

  void validate(Eigen::Index targets, Eigen::Index features) const {
    sequences.validate();
    if (set_size < 1) throw ValidationError("context set is empty");
    if (sequences.batch != targets * set_size) throw ValidationError("context batch size != targets * set size");
    if (sequences.width() != features + 1) throw ValidationError("context width must be features + 1");
  }
};

template <typename T>
struct ForwardResult {
  Eigen::Index batch = 0, steps = 0;
  ad::Var position;    // (steps * batch) x 1, in (-1, 1)
  ad::Var mu, sigma;   // XTrendG
  ad::Var quantiles;   // XTrendQ, (steps * batch) x |quantiles|
  ad::Var cross_attention;  // attention node (XTrend variants with cross-attention)
};

/// One retrieved attention edge.
struct AttentionEntry {
  std::string ctx_ticker;
  Date ctx_date;
  double weight = 0;
};

/// Attention weights of one target step; head -1 is the average over heads.
struct AttentionRecord {
  Date date;
  std::string ticker;
  int step = 0;
  int head = -1;
  std::vector<AttentionEntry> entries;  // sorted by descending weight
};

/// Encoders, context attention, decoder and heads.
template <typename T>
class XTrendModel {
 public:
  XTrendModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const Eigen::Index d = cfg_.d_h, f = cfg_.n_features;
    embedding_ = ad::Embedding::make(store_, "embedding", cfg_.n_categories, d, rng);
    if (cfg_.uses_context()) {
      query_ = make_rep("query", f, false, rng);
      key_ = make_rep("key", f, false, rng);
      value_ = make_rep("value", f + 1, false, rng);
      self_att_ = ad::MultiHeadAttention::make(store_, "self_att", d, d, d, d, cfg_.n_heads, rng);
      self_ffn_ = ad::Ffn::make(store_, "self_ffn", d, d, d, rng);
      cross_att_ = ad::MultiHeadAttention::make(store_, "cross_att", d, d, d, d, cfg_.n_heads, rng);
      cross_ffn_ = ad::Ffn::make(store_, "cross_ffn", d, d, d, rng);
      cross_ln_ = ad::LayerNorm::make(store_, "cross_ln", d, rng);
    }
    decoder_ = make_rep("decoder", f, cfg_.uses_context(), rng);
    switch (cfg_.variant) {
      case Variant::Baseline:
      case Variant::XTrendSharpe:
        position_head_ = ad::Linear::make(store_, "head.position", d, 1, rng);
        break;
      case Variant::XTrendG:
        mu_head_ = ad::Linear::make(store_, "head.mu", d, 1, rng);
        sigma_head_ = ad::Linear::make(store_, "head.sigma", d, 1, rng);
        ptp_ = ad::Ffn::make(store_, "ptp", 2, d, 1, rng);
        break;
      case Variant::XTrendQ:
        quantile_head_ = ad::Linear::make(store_, "head.quantiles", d, static_cast<Eigen::Index>(cfg_.quantiles.size()), rng);
        ptp_ = ad::Ffn::make(store_, "ptp", static_cast<Eigen::Index>(cfg_.quantiles.size()), d, 1, rng);
        break;
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore<T>& params() { return store_; }
  const ad::ParamStore<T>& params() const { return store_; }

  /// Builds the forward graph. `context` is required for every variant except
  /// Baseline, which never reads it.
  ForwardResult<T> forward(ad::Graph<T>& g, const SequenceBatch& target, const ContextBatch* context) const {
    target.validate();
    if (target.width() != cfg_.n_features) throw ValidationError("target feature width does not match the model");
    ForwardResult<T> out;
    out.batch = target.batch;
    out.steps = target.steps;
    const bool target_static = target.has_static() && !cfg_.zero_shot;

    std::optional<ad::Var> y;
    if (cfg_.uses_context()) {
      if (!context) throw ValidationError("this model variant requires a context set");
      context->validate(target.batch, cfg_.n_features);
      const auto& cs = context->sequences;
      const Eigen::Index n = context->set_size;
      if (cfg_.context_mode == ContextMode::TimeEquivalent) {
        if (cs.steps != target.steps) throw ValidationError("time-equivalent contexts need the target sequence length");
        for (int l : cs.lengths) {
          if (l != cs.steps) throw ValidationError("time-equivalent contexts must be full length");
        }
      }
      ad::Var q = run_rep(g, query_, target, target_static, std::nullopt);
      ad::Var xi = g.constant(cs.features.template cast<T>());
      ad::Var keys_all = run_rep(g, key_, cs, cs.has_static(), std::nullopt, g.slice_cols(xi, 0, cfg_.n_features));
      ad::Var values_all = run_rep(g, value_, cs, cs.has_static(), std::nullopt, xi);

      ad::Var keys, values;
      std::vector<int> value_block, query_block(static_cast<std::size_t>(target.batch * target.steps));
      if (cfg_.context_mode == ContextMode::TimeEquivalent) {
        // row t * (B * n) + b * n + c is step t of context c of target b: already block-ordered
        keys = keys_all;
        values = values_all;
        value_block.resize(static_cast<std::size_t>(g.value(values).rows()));
        for (std::size_t i = 0; i < value_block.size(); ++i) value_block[i] = static_cast<int>(i / static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < query_block.size(); ++i) query_block[i] = static_cast<int>(i);
      } else {
        std::vector<int> last(static_cast<std::size_t>(cs.batch));
        for (Eigen::Index s = 0; s < cs.batch; ++s) last[static_cast<std::size_t>(s)] = cs.row(cs.lengths[static_cast<std::size_t>(s)] - 1, s);
        keys = g.gather_rows(keys_all, last);
        values = g.gather_rows(values_all, std::move(last));
        value_block.resize(static_cast<std::size_t>(cs.batch));
        for (std::size_t i = 0; i < value_block.size(); ++i) value_block[i] = static_cast<int>(i / static_cast<std::size_t>(n));
        for (std::size_t i = 0; i < query_block.size(); ++i) query_block[i] = static_cast<int>(i % static_cast<std::size_t>(target.batch));
      }
      ad::Var v_self = self_att_(g, values, values, values, value_block, n);
      ad::Var v_prime = self_ffn_(g, v_self);
      ad::Var read;
      if (cfg_.cross_attention) {
        read = cross_att_(g, q, keys, v_prime, query_block, n, &out.cross_attention);
      } else {
        ad::Var pooled = g.block_mean(v_prime, n);
        read = g.gather_rows(pooled, query_block);
      }
      y = cross_ln_(g, cross_ffn_(g, read));
    }

    ad::Var dec = run_rep(g, decoder_, target, target_static, y);
    switch (cfg_.variant) {
      case Variant::Baseline:
      case Variant::XTrendSharpe:
        out.position = g.tanh(position_head_(g, dec));
        break;
      case Variant::XTrendG: {
        out.mu = mu_head_(g, dec);
        out.sigma = g.add_scalar(g.softplus(sigma_head_(g, dec)), static_cast<T>(kSigmaFloorHead));
        out.position = g.tanh(ptp_(g, g.concat_cols({out.mu, out.sigma})));
        break;
      }
      case Variant::XTrendQ:
        out.quantiles = quantile_head_(g, dec);
        out.position = g.tanh(ptp_(g, out.quantiles));
        break;
    }
    return out;
  }

  /// Target-sequence representation alone: the query encoder for context models,
  /// the decoder (without an encoder read) for Baseline.
  ad::Var encode(ad::Graph<T>& g, const SequenceBatch& seqs) const {
    seqs.validate();
    const bool use_static = seqs.has_static() && !cfg_.zero_shot;
    return run_rep(g, cfg_.uses_context() ? query_ : decoder_, seqs, use_static, std::nullopt);
  }

  /// Cross-attention weights for every valid target step, per head and head-averaged.
  std::vector<AttentionRecord> attention_dump(const ad::Graph<T>& g, const ForwardResult<T>& res,
                                              const SequenceBatch& target, const ContextBatch& context,
                                              const std::vector<std::string>& target_tickers,
                                              const std::vector<std::vector<Date>>& target_dates,
                                              int first_step = 0) const {
    if (!res.cross_attention.valid()) throw Error("no cross-attention recorded: run a forward pass with context first");
    const auto& P = g.attention_probs(res.cross_attention);
    const Eigen::Index n = context.set_size;
    const int heads = cfg_.n_heads;
    const auto& cs = context.sequences;
    std::vector<AttentionRecord> out;
    for (Eigen::Index b = 0; b < target.batch; ++b) {
      for (Eigen::Index t = first_step; t < target.lengths[static_cast<std::size_t>(b)]; ++t) {
        const Eigen::Index r = t * target.batch + b;
        auto provenance = [&](Eigen::Index c, AttentionEntry& e) {
          const Eigen::Index seq = b * n + c;
          const auto s = static_cast<std::size_t>(seq);
          if (s < context.tickers.size()) e.ctx_ticker = context.tickers[s];
          if (s < context.dates.size()) {
            const Eigen::Index step = cfg_.context_mode == ContextMode::TimeEquivalent ? t : cs.lengths[s] - 1;
            e.ctx_date = context.dates[s][static_cast<std::size_t>(step)];
          }
        };
        AttentionRecord avg;
        avg.step = static_cast<int>(t);
        avg.head = -1;
        if (static_cast<std::size_t>(b) < target_tickers.size()) avg.ticker = target_tickers[static_cast<std::size_t>(b)];
        if (static_cast<std::size_t>(b) < target_dates.size()) avg.date = target_dates[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)];
        avg.entries.resize(static_cast<std::size_t>(n));
        for (int h = 0; h < heads; ++h) {
          AttentionRecord rec = avg;
          rec.head = h;
          for (Eigen::Index c = 0; c < n; ++c) {
            auto& e = rec.entries[static_cast<std::size_t>(c)];
            e.weight = static_cast<double>(P(r, h * n + c));
            provenance(c, e);
            avg.entries[static_cast<std::size_t>(c)].weight += e.weight / heads;
          }
          sort_entries(rec.entries);
          out.push_back(std::move(rec));
        }
        for (Eigen::Index c = 0; c < n; ++c) provenance(c, avg.entries[static_cast<std::size_t>(c)]);
        sort_entries(avg.entries);
        out.push_back(std::move(avg));
      }
    }
    return out;
  }

 private:
  /// Sequence representation: VSN, LSTM with static-conditioned initial state,
  /// two residual LayerNorm stages. With `fuse`, the encoder read is concatenated
  /// with the VSN output and mixed back to d_h first.
  struct Rep {
    ad::Vsn vsn;
    std::optional<ad::Ffn> fuse;
    std::optional<ad::LayerNorm> fuse_ln;
    ad::Ffn init_h, init_c;
    ad::LstmCell lstm;
    ad::LayerNorm ln_skip, ln_out;
    ad::Ffn ffn;
  };

  Rep make_rep(const std::string& name, Eigen::Index in, bool fuse, Rng& rng) {
    const Eigen::Index d = cfg_.d_h;
    Rep r;
    r.vsn = ad::Vsn::make(store_, name + ".vsn", in, d, rng, d);
    if (fuse) {
      r.fuse = ad::Ffn::make(store_, name + ".fuse", 2 * d, d, d, rng);
      r.fuse_ln = ad::LayerNorm::make(store_, name + ".fuse_ln", d, rng);
    }
    r.init_h = ad::Ffn::make(store_, name + ".init_h", d, d, d, rng);
    r.init_c = ad::Ffn::make(store_, name + ".init_c", d, d, d, rng);
    r.lstm = ad::LstmCell::make(store_, name + ".lstm", d, d, rng);
    r.ln_skip = ad::LayerNorm::make(store_, name + ".ln_skip", d, rng);
    r.ln_out = ad::LayerNorm::make(store_, name + ".ln_out", d, rng);
    r.ffn = ad::Ffn::make(store_, name + ".ffn", d, d, d, rng, d);
    return r;
  }

  /// Runs a representation over a packed batch; returns (steps * batch) x d_h.
  ad::Var run_rep(ad::Graph<T>& g, const Rep& rep, const SequenceBatch& seqs, bool use_static, std::optional<ad::Var> y,
                  std::optional<ad::Var> inputs = std::nullopt) const {
    const Eigen::Index B = seqs.batch, S = seqs.steps, d = cfg_.d_h;
    ad::Var x = inputs ? *inputs : g.constant(seqs.features.template cast<T>());
    std::optional<ad::Var> static_rows;
    ad::Var init_in;
    if (use_static) {
      std::vector<int> ids(static_cast<std::size_t>(B * S));
      for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = seqs.categories[i % static_cast<std::size_t>(B)];
      static_rows = embedding_(g, ids);
      init_in = embedding_(g, seqs.categories);
    } else {
      // no static information: the initial state comes from the biases alone
      init_in = g.constant(ad::Mat<T>::Zero(B, d));
    }
    ad::Var xp = rep.vsn(g, x, static_rows);
    if (y) xp = (*rep.fuse_ln)(g, (*rep.fuse)(g, g.concat_cols({xp, *y})));
    ad::LstmState state{rep.init_h(g, init_in), rep.init_c(g, init_in)};
    std::vector<ad::Var> hs;
    hs.reserve(static_cast<std::size_t>(S));
    ad::Var xg = rep.lstm.input_gates(g, xp);
    for (Eigen::Index t = 0; t < S; ++t) {
      state = rep.lstm.step(g, g.slice_rows(xg, t * B, B), state);
      hs.push_back(state.h);
    }
    ad::Var a = rep.ln_skip(g, g.add(g.concat_rows(hs), xp));
    return rep.ln_out(g, g.add(rep.ffn(g, a, static_rows), a));
  }

  static void sort_entries(std::vector<AttentionEntry>& e) {
    std::stable_sort(e.begin(), e.end(), [](const AttentionEntry& a, const AttentionEntry& b) { return a.weight > b.weight; });
  }

  ModelConfig cfg_;
  ad::ParamStore<T> store_;
  ad::Embedding embedding_;
  Rep query_, key_, value_, decoder_;
  ad::MultiHeadAttention self_att_, cross_att_;
  ad::Ffn self_ffn_, cross_ffn_, ptp_;
  ad::LayerNorm cross_ln_;
  ad::Linear position_head_, mu_head_, sigma_head_, quantile_head_;
};

/// Sorts each row of a quantile matrix so predicted quantiles are non-decreasing.
inline ad::Mat<double> sort_quantiles(ad::Mat<double> q) {
  for (Eigen::Index r = 0; r < q.rows(); ++r) std::sort(q.row(r).begin(), q.row(r).end());
  return q;
}

}  // namespace xtrend
