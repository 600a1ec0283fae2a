#pragma once

// Autoregressive attention decoder that scores candidate phrases against
// encoder features. Pre-norm residual blocks: causal self-attention over the
// phrase prefix, cross-attention into the encoder frames, then a GELU MLP.
// All sequences of a scoring batch are packed into one row-stacked matrix so
// the linear algebra runs as a handful of large GEMMs.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ctxbias/core.hpp"
#include "ctxbias/numerics.hpp"
#include "ctxbias/tensor_io.hpp"

namespace ctxbias {

struct DecoderConfig {
  int vocab_size = 0;
  int enc_dim = 0;
  int model_dim = 32;
  int num_heads = 2;
  int num_layers = 2;
  int ffn_dim = 64;

  int head_dim() const { return model_dim / num_heads; }

  void validate() const {
    if (vocab_size < 2) throw ConfigMismatchError("decoder vocab_size must be at least 2");
    if (enc_dim < 1) throw ConfigMismatchError("decoder enc_dim must be positive");
    if (model_dim < 1 || num_heads < 1 || num_layers < 1 || ffn_dim < 1)
      throw ConfigMismatchError("decoder dimensions must be positive");
    if (model_dim % num_heads != 0)
      throw ConfigMismatchError("model_dim must be divisible by num_heads");
  }

  bool operator==(const DecoderConfig&) const = default;
};

struct DecoderParams {
  struct Layer {
    Eigen::MatrixXd sa_wq, sa_wk, sa_wv, sa_wo;  // model_dim x model_dim
    Eigen::MatrixXd ca_wq, ca_wo;                // model_dim x model_dim
    Eigen::MatrixXd ca_wk, ca_wv;                // enc_dim x model_dim
    Eigen::MatrixXd ff_w1;                       // model_dim x ffn_dim
    Eigen::MatrixXd ff_b1;                       // 1 x ffn_dim
    Eigen::MatrixXd ff_w2;                       // ffn_dim x model_dim
    Eigen::MatrixXd ff_b2;                       // 1 x model_dim
  };

  DecoderConfig config;
  Eigen::MatrixXd embed;  // vocab_size x model_dim
  std::vector<Layer> layers;
  Eigen::MatrixXd out_w;  // model_dim x vocab_size
  Eigen::MatrixXd out_b;  // 1 x vocab_size

  /// Visits every tensor as (name, matrix) in a fixed order. Optimizer state,
  /// checkpoints and gradient containers all rely on this order being stable.
  template <class F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  static DecoderParams zeros(const DecoderConfig& config) {
    config.validate();
    DecoderParams p;
    p.config = config;
    const int d = config.model_dim, e = config.enc_dim, f = config.ffn_dim;
    p.embed = Eigen::MatrixXd::Zero(config.vocab_size, d);
    p.layers.resize(config.num_layers);
    for (auto& l : p.layers) {
      l.sa_wq = l.sa_wk = l.sa_wv = l.sa_wo = Eigen::MatrixXd::Zero(d, d);
      l.ca_wq = l.ca_wo = Eigen::MatrixXd::Zero(d, d);
      l.ca_wk = l.ca_wv = Eigen::MatrixXd::Zero(e, d);
      l.ff_w1 = Eigen::MatrixXd::Zero(d, f);
      l.ff_b1 = Eigen::MatrixXd::Zero(1, f);
      l.ff_w2 = Eigen::MatrixXd::Zero(f, d);
      l.ff_b2 = Eigen::MatrixXd::Zero(1, d);
    }
    p.out_w = Eigen::MatrixXd::Zero(d, config.vocab_size);
    p.out_b = Eigen::MatrixXd::Zero(1, config.vocab_size);
    return p;
  }

  /// Uniform [-0.1, 0.1] initialization, reproducible for a given seed.
  static DecoderParams init(const DecoderConfig& config, std::uint64_t seed) {
    DecoderParams p = zeros(config);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-0.1, 0.1);
    p.for_each_tensor([&](const std::string&, Eigen::MatrixXd& m) {
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(rng);
    });
    return p;
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    f(std::string("embed"), self.embed);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      f(p + "sa_wq", l.sa_wq);
      f(p + "sa_wk", l.sa_wk);
      f(p + "sa_wv", l.sa_wv);
      f(p + "sa_wo", l.sa_wo);
      f(p + "ca_wq", l.ca_wq);
      f(p + "ca_wk", l.ca_wk);
      f(p + "ca_wv", l.ca_wv);
      f(p + "ca_wo", l.ca_wo);
      f(p + "ff_w1", l.ff_w1);
      f(p + "ff_b1", l.ff_b1);
      f(p + "ff_w2", l.ff_w2);
      f(p + "ff_b2", l.ff_b2);
    }
    f(std::string("out_w"), self.out_w);
    f(std::string("out_b"), self.out_b);
  }
};

inline Eigen::RowVectorXd positional_encoding(int pos, int dim, double base = 10000.0) {
  Eigen::RowVectorXd pe(dim);
  for (int i = 0; i < dim; i += 2) {
    const double freq = std::exp(-std::log(base) * double(i) / double(dim));
    pe[i] = std::sin(pos * freq);
    if (i + 1 < dim) pe[i + 1] = std::cos(pos * freq);
  }
  return pe;
}

/// Wavelength base for frame positions. Utterances are a few dozen frames
/// long, so a much shorter geometric span than the token-side base keeps all
/// of the feature width's frequency pairs informative instead of leaving the
/// slow ones effectively constant.
inline constexpr double kFramePeBase = 100.0;

/// Parameter-free LayerNorm over each row. Keeps the normalized rows and the
/// inverse standard deviations, which is all the backward pass needs.
inline void layer_norm_rows(const Eigen::MatrixXd& x, Eigen::MatrixXd& y, Eigen::VectorXd& istd) {
  constexpr double kEps = 1e-5;
  const Eigen::Index d = x.cols();
  y.resize(x.rows(), d);
  istd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / double(d);
    const double is = 1.0 / std::sqrt(var + kEps);
    istd[r] = is;
    y.row(r) = ((x.row(r).array() - mu) * is).matrix();
  }
}

/// Encoder-side projections are independent of the decoded prefix, so they
/// are computed once per utterance and shared by every phrase scored and
/// every gradient step against the same features.
struct EncoderCache {
  Eigen::MatrixXd x;                  // frames, num_frames x enc_dim
  std::vector<Eigen::MatrixXd> k, v;  // per layer, num_frames x model_dim
  int num_frames() const { return static_cast<int>(x.rows()); }
};

inline EncoderCache make_encoder_cache(const DecoderParams& params, const EncoderFeatures& features) {
  features.validate();
  if (features.dim() != params.config.enc_dim)
    throw ConfigMismatchError("encoder feature dim " + std::to_string(features.dim()) +
                              " does not match decoder enc_dim " +
                              std::to_string(params.config.enc_dim));
  EncoderCache cache;
  // Sinusoidal frame positions are added before the key/value projections so
  // cross-attention can tell where in the audio a feature occurs, not just
  // that it occurs.
  cache.x = features.frames;
  for (Eigen::Index t = 0; t < cache.x.rows(); ++t)
    cache.x.row(t) += positional_encoding(static_cast<int>(t), params.config.enc_dim, kFramePeBase);
  cache.k.reserve(params.layers.size());
  cache.v.reserve(params.layers.size());
  for (const auto& l : params.layers) {
    cache.k.push_back(cache.x * l.ca_wk);
    cache.v.push_back(cache.x * l.ca_wv);
  }
  return cache;
}

/// Several decoded prefixes stacked into one row-per-position batch.
struct PackedSequences {
  std::vector<TokenId> tokens;   // concatenated prefixes, each starting at <sos>
  std::vector<int> offsets{0};   // row offsets, one past the end per sequence

  int count() const { return static_cast<int>(offsets.size()) - 1; }
  int rows() const { return offsets.back(); }
  int offset(int s) const { return offsets[s]; }
  int length(int s) const { return offsets[s + 1] - offsets[s]; }

  void add(std::span<const TokenId> prefix) {
    if (prefix.empty()) throw InvalidPhraseError("cannot pack an empty prefix");
    if (prefix.front() != kSosId)
      throw InvalidPhraseError("decoded prefixes must start with <sos>");
    tokens.insert(tokens.end(), prefix.begin(), prefix.end());
    offsets.push_back(static_cast<int>(tokens.size()));
  }
};

struct LayerTrace {
  Eigen::MatrixXd ln1_y, ln2_y, ln3_y;
  Eigen::VectorXd ln1_istd, ln2_istd, ln3_istd;
  Eigen::MatrixXd sa_q, sa_k, sa_v;    // rows x model_dim
  std::vector<Eigen::MatrixXd> sa_w;   // [seq * num_heads + head], causal weights
  Eigen::MatrixXd sa_ctx;              // rows x model_dim, before the out projection
  Eigen::MatrixXd ca_q;
  std::vector<Eigen::MatrixXd> ca_w;   // [head], rows x num_frames
  Eigen::MatrixXd ca_ctx;
  Eigen::MatrixXd ff_u;                // preactivation, rows x ffn_dim
  Eigen::MatrixXd ff_g;                // gelu(ff_u)
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Eigen::MatrixXd lnf_y;
  Eigen::VectorXd lnf_istd;
  Eigen::MatrixXd logprobs;  // rows x vocab_size
};

/// Runs the decoder over a packed batch and returns per-row log-probabilities
/// of the next token. Row r of the result conditions on everything up to and
/// including packed row r. Pass a trace to keep the activations the backward
/// pass consumes.
inline Eigen::MatrixXd forward_packed(const DecoderParams& params, const EncoderCache& cache,
                                      const PackedSequences& packed, ForwardTrace* trace = nullptr) {
  const DecoderConfig& cfg = params.config;
  const int rows = packed.rows();
  const int d = cfg.model_dim;
  const int heads = cfg.num_heads;
  const int dh = cfg.head_dim();
  const int frames = cache.num_frames();
  const double scale = 1.0 / std::sqrt(double(dh));

  if (rows == 0) return Eigen::MatrixXd(0, cfg.vocab_size);
  if (static_cast<int>(cache.k.size()) != cfg.num_layers)
    throw ConfigMismatchError("encoder cache layer count does not match decoder");
  for (TokenId t : packed.tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw ConfigMismatchError("token id " + std::to_string(t) + " outside decoder vocab");

  if (trace) {
    trace->layers.clear();
    trace->layers.resize(cfg.num_layers);
  }

  // Embeddings are scaled by sqrt(model_dim) before the positional encoding is
  // added, so token identity and position start at comparable magnitudes.
  const double emb_scale = std::sqrt(double(d));
  Eigen::MatrixXd z(rows, d);
  for (int s = 0; s < packed.count(); ++s) {
    const int off = packed.offset(s);
    for (int t = 0; t < packed.length(s); ++t)
      z.row(off + t) =
          emb_scale * params.embed.row(packed.tokens[off + t]) + positional_encoding(t, d);
  }
  if (!z.allFinite()) throw NumericalError("non-finite token embeddings");

  Eigen::MatrixXd ln_y;
  Eigen::VectorXd ln_istd;
  for (int li = 0; li < cfg.num_layers; ++li) {
    const auto& l = params.layers[li];
    LayerTrace* lt = trace ? &trace->layers[li] : nullptr;

    // Causal self-attention over each prefix.
    layer_norm_rows(z, ln_y, ln_istd);
    Eigen::MatrixXd q = ln_y * l.sa_wq;
    Eigen::MatrixXd k = ln_y * l.sa_wk;
    Eigen::MatrixXd v = ln_y * l.sa_wv;
    Eigen::MatrixXd ctx(rows, d);
    if (lt) lt->sa_w.resize(std::size_t(packed.count()) * heads);
    for (int s = 0; s < packed.count(); ++s) {
      const int off = packed.offset(s), n = packed.length(s);
      for (int h = 0; h < heads; ++h) {
        Eigen::MatrixXd w = q.block(off, h * dh, n, dh) * k.block(off, h * dh, n, dh).transpose();
        w *= scale;
        for (int i = 0; i < n; ++i) softmax_head(w.row(i), i + 1);
        ctx.block(off, h * dh, n, dh).noalias() = w * v.block(off, h * dh, n, dh);
        if (lt) lt->sa_w[std::size_t(s) * heads + h] = std::move(w);
      }
    }
    if (lt) {
      lt->ln1_y = ln_y;
      lt->ln1_istd = ln_istd;
      lt->sa_q = std::move(q);
      lt->sa_k = std::move(k);
      lt->sa_v = std::move(v);
      lt->sa_ctx = ctx;
    }
    z.noalias() += ctx * l.sa_wo;

    // Cross-attention into the encoder frames; all rows attend everywhere, so
    // the whole batch goes through as one matrix per head.
    layer_norm_rows(z, ln_y, ln_istd);
    Eigen::MatrixXd cq = ln_y * l.ca_wq;
    Eigen::MatrixXd cctx(rows, d);
    if (lt) lt->ca_w.resize(heads);
    for (int h = 0; h < heads; ++h) {
      Eigen::MatrixXd w = cq.middleCols(h * dh, dh) * cache.k[li].middleCols(h * dh, dh).transpose();
      w *= scale;
      for (int r = 0; r < rows; ++r) softmax_head(w.row(r), frames);
      cctx.middleCols(h * dh, dh).noalias() = w * cache.v[li].middleCols(h * dh, dh);
      if (lt) lt->ca_w[h] = std::move(w);
    }
    if (lt) {
      lt->ln2_y = ln_y;
      lt->ln2_istd = ln_istd;
      lt->ca_q = std::move(cq);
      lt->ca_ctx = cctx;
    }
    z.noalias() += cctx * l.ca_wo;

    // Position-wise feed-forward.
    layer_norm_rows(z, ln_y, ln_istd);
    Eigen::MatrixXd u = ln_y * l.ff_w1;
    u.rowwise() += l.ff_b1.row(0);
    Eigen::MatrixXd g = u.unaryExpr([](double x) { return gelu(x); });
    if (lt) {
      lt->ln3_y = ln_y;
      lt->ln3_istd = ln_istd;
      lt->ff_u = std::move(u);
      lt->ff_g = g;
    }
    z.noalias() += g * l.ff_w2;
    z.rowwise() += l.ff_b2.row(0);

    if (!z.allFinite())
      throw NumericalError("non-finite activations in decoder layer " + std::to_string(li));
  }

  layer_norm_rows(z, ln_y, ln_istd);
  Eigen::MatrixXd logprobs = ln_y * params.out_w;
  logprobs.rowwise() += params.out_b.row(0);
  for (int r = 0; r < rows; ++r) log_softmax_head(logprobs.row(r), cfg.vocab_size);
  if (!logprobs.allFinite()) throw NumericalError("non-finite decoder output log-probabilities");

  if (trace) {
    trace->lnf_y = std::move(ln_y);
    trace->lnf_istd = std::move(ln_istd);
    trace->logprobs = logprobs;
  }
  return logprobs;
}

/// Log-probabilities of the next token given a prefix that starts at <sos>.
inline Eigen::RowVectorXd next_token_logprobs(const DecoderParams& params, const EncoderCache& cache,
                                              std::span<const TokenId> prefix) {
  PackedSequences packed;
  packed.add(prefix);
  const Eigen::MatrixXd lp = forward_packed(params, cache, packed);
  return lp.row(lp.rows() - 1);
}

/// A scoring batch pairs packed prefixes with the target drawn at every row.
/// For a phrase with tokens t1..tL (tL being <eos>) the packed prefix is
/// [<sos>, t1, .., t(L-1)] and the targets are t1..tL.
struct ScoringBatch {
  PackedSequences packed;
  std::vector<TokenId> targets;
};

inline ScoringBatch make_scoring_batch(std::span<const Phrase> phrases) {
  ScoringBatch batch;
  std::vector<TokenId> prefix;
  for (const Phrase& p : phrases) {
    if (p.tokens.empty()) throw InvalidPhraseError("phrase has no tokens to score");
    prefix.assign(1, kSosId);
    prefix.insert(prefix.end(), p.tokens.begin(), p.tokens.end() - 1);
    batch.packed.add(prefix);
    batch.targets.insert(batch.targets.end(), p.tokens.begin(), p.tokens.end());
  }
  return batch;
}

struct ScoredPhrase {
  double log_prob = 0.0;
  double per_token = 0.0;
};

inline double per_token_score(double log_prob, int length) {
  if (length <= 0) throw InvalidPhraseError("per-token score needs a positive phrase length");
  return log_prob / double(length);
}

/// Scores every phrase in one packed forward pass.
inline std::vector<ScoredPhrase> score_batch(const DecoderParams& params, const EncoderCache& cache,
                                             std::span<const Phrase> phrases) {
  std::vector<ScoredPhrase> out(phrases.size());
  if (phrases.empty()) return out;
  const ScoringBatch batch = make_scoring_batch(phrases);
  const Eigen::MatrixXd lp = forward_packed(params, cache, batch.packed);
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    const int off = batch.packed.offset(int(i)), n = batch.packed.length(int(i));
    double sum = 0.0;
    for (int t = 0; t < n; ++t) sum += lp(off + t, batch.targets[off + t]);
    out[i].log_prob = sum;
    out[i].per_token = per_token_score(sum, n);
  }
  return out;
}

inline double phrase_log_prob(const DecoderParams& params, const EncoderCache& cache,
                              const Phrase& phrase) {
  return score_batch(params, cache, std::span<const Phrase>(&phrase, 1))[0].log_prob;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const DecoderParams& params) {
  TensorFile tf;
  tf.meta["kind"] = "decoder-checkpoint";
  tf.meta["version"] = kCheckpointVersion;
  tf.meta["vocab_size"] = params.config.vocab_size;
  tf.meta["enc_dim"] = params.config.enc_dim;
  tf.meta["model_dim"] = params.config.model_dim;
  tf.meta["num_heads"] = params.config.num_heads;
  tf.meta["num_layers"] = params.config.num_layers;
  tf.meta["ffn_dim"] = params.config.ffn_dim;
  params.for_each_tensor(
      [&](const std::string& name, const Eigen::MatrixXd& m) { tf.add(name, m); });
  tf.save(path);
}

inline DecoderParams load_checkpoint(const std::filesystem::path& path) {
  const TensorFile tf = TensorFile::load(path);
  auto meta_int = [&](const char* key) {
    auto it = tf.meta.find(key);
    if (it == tf.meta.end() || !it->second.is_number_integer())
      throw ParseError("checkpoint is missing integer field '" + std::string(key) + "'");
    return it->second.get<int>();
  };
  if (auto it = tf.meta.find("kind"); it == tf.meta.end() || it->second != "decoder-checkpoint")
    throw ParseError("not a decoder checkpoint: " + path.string());
  if (meta_int("version") != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version in " + path.string());

  DecoderConfig cfg;
  cfg.vocab_size = meta_int("vocab_size");
  cfg.enc_dim = meta_int("enc_dim");
  cfg.model_dim = meta_int("model_dim");
  cfg.num_heads = meta_int("num_heads");
  cfg.num_layers = meta_int("num_layers");
  cfg.ffn_dim = meta_int("ffn_dim");

  DecoderParams params = DecoderParams::zeros(cfg);
  params.for_each_tensor([&](const std::string& name, Eigen::MatrixXd& m) {
    const Eigen::MatrixXd& t = tf.get(name);
    if (t.rows() != m.rows() || t.cols() != m.cols())
      throw ParseError("checkpoint tensor '" + name + "' has shape " + std::to_string(t.rows()) +
                       "x" + std::to_string(t.cols()) + ", expected " + std::to_string(m.rows()) +
                       "x" + std::to_string(m.cols()));
    m = t;
  });
  return params;
}

}  // namespace ctxbias
