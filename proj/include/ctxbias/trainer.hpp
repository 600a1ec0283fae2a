#pragma once

// Training loop for the biasing decoder: per-utterance phrase batches built
// from transcript windows plus distractors pooled across the minibatch, a
// convex combination of the two losses, and Adam on the analytic gradients.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctxbias/core.hpp"
#include "ctxbias/decoder.hpp"
#include "ctxbias/gradients.hpp"
#include "ctxbias/losses.hpp"

namespace ctxbias {

struct TrainConfig {
  double beta = 0.9;
  int phrases_per_utterance = 32;  // one transcript phrase plus distractors
  int phrases_per_pool_entry = 3;  // transcript windows contributed per utterance
  int epochs = 30;
  double lr = 1e-3;
  int minibatch_size = 8;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    check_beta(beta);
    if (phrases_per_utterance < 2)
      throw ConfigMismatchError("phrases_per_utterance must be at least 2");
    if (phrases_per_pool_entry < 1)
      throw ConfigMismatchError("phrases_per_pool_entry must be at least 1");
    if (epochs < 0) throw ConfigMismatchError("epochs must be nonnegative");
    if (!(lr >= 0.0) || !std::isfinite(lr))
      throw ConfigMismatchError("learning rate must be finite and nonnegative");
    if (minibatch_size < 1) throw ConfigMismatchError("minibatch_size must be positive");
  }
};

/// One utterance's training batch. phrases[0] is always the empty phrase and
/// labels[0] its no-bias label, so the batch plugs straight into the losses.
struct PhraseBatch {
  const Utterance* utterance = nullptr;
  std::vector<Phrase> phrases;
  std::vector<PhraseLabel> labels;
};

struct PooledPhrase {
  Phrase phrase;
  std::string source_id;
};
using PhrasePool = std::vector<PooledPhrase>;

/// Uniform draw over every (start, length) window of 1 to 3 words.
inline Phrase sample_transcript_phrase(const Utterance& utt, const Vocab& vocab,
                                       std::mt19937_64& rng) {
  const int w = static_cast<int>(utt.words.size());
  if (w < 1) throw InvalidPhraseError("cannot sample a phrase from an empty transcript");
  const int max_len = std::min(3, w);
  int windows = 0;
  for (int len = 1; len <= max_len; ++len) windows += w - len + 1;
  int pick = std::uniform_int_distribution<int>(0, windows - 1)(rng);
  for (int len = 1; len <= max_len; ++len) {
    const int starts = w - len + 1;
    if (pick < starts) {
      std::vector<std::string> words(utt.words.begin() + pick, utt.words.begin() + pick + len);
      return Phrase::from_words(std::move(words), vocab);
    }
    pick -= starts;
  }
  throw Error("window selection out of range");  // unreachable
}

inline PhrasePool sample_phrase_pool(std::span<const Utterance> minibatch, const Vocab& vocab,
                                     std::mt19937_64& rng, int per_utterance = 3) {
  PhrasePool pool;
  pool.reserve(minibatch.size() * std::size_t(per_utterance));
  for (const Utterance& utt : minibatch)
    for (int i = 0; i < per_utterance; ++i)
      pool.push_back({sample_transcript_phrase(utt, vocab, rng), utt.id});
  return pool;
}

/// Draws one own-transcript phrase plus distractors from other utterances'
/// pool entries (with replacement; a distractor can repeat) and labels all of
/// them against the transcript.
inline PhraseBatch assemble_batch(const Utterance& utt, const PhrasePool& pool, const Vocab& vocab,
                                  std::mt19937_64& rng, int phrases_per_utterance = 32) {
  std::vector<const PooledPhrase*> own, other;
  for (const PooledPhrase& p : pool)
    (p.source_id == utt.id ? own : other).push_back(&p);
  if (own.empty()) throw ConfigMismatchError("phrase pool has no entry for utterance " + utt.id);
  // A minibatch of one utterance has no foreign entries; fall back to the
  // whole pool rather than failing on corpus-size edge cases.
  if (other.empty()) other = own;

  PhraseBatch batch;
  batch.utterance = &utt;
  batch.phrases.push_back(Phrase::empty(vocab));
  batch.phrases.push_back(own[std::uniform_int_distribution<std::size_t>(0, own.size() - 1)(rng)]->phrase);
  std::uniform_int_distribution<std::size_t> pick(0, other.size() - 1);
  for (int i = 1; i < phrases_per_utterance; ++i)
    batch.phrases.push_back(other[pick(rng)]->phrase);

  batch.labels.resize(batch.phrases.size());
  for (std::size_t i = 1; i < batch.phrases.size(); ++i)
    batch.labels[i] = label_phrase(batch.phrases[i], utt);
  batch.labels[0] = label_empty(std::span<const PhraseLabel>(batch.labels).subspan(1));
  return batch;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  DecoderParams m, v;
  std::int64_t step = 0;

  static AdamState zeros(const DecoderConfig& cfg) {
    return AdamState{DecoderParams::zeros(cfg), DecoderParams::zeros(cfg), 0};
  }
};

namespace detail {
inline std::vector<Eigen::MatrixXd*> tensor_list(DecoderParams& p) {
  std::vector<Eigen::MatrixXd*> out;
  p.for_each_tensor([&](const std::string&, Eigen::MatrixXd& m) { out.push_back(&m); });
  return out;
}
inline std::vector<const Eigen::MatrixXd*> tensor_list(const DecoderParams& p) {
  std::vector<const Eigen::MatrixXd*> out;
  p.for_each_tensor([&](const std::string&, const Eigen::MatrixXd& m) { out.push_back(&m); });
  return out;
}
}  // namespace detail

inline void adam_step(DecoderParams& params, const DecoderParams& grads, AdamState& state,
                      const TrainConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, double(state.step));
  auto ps = detail::tensor_list(params);
  auto gs = detail::tensor_list(grads);
  auto ms = detail::tensor_list(state.m);
  auto vs = detail::tensor_list(state.v);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = *ps[i];
    const auto& g = *gs[i];
    auto& m = *ms[i];
    auto& v = *vs[i];
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g.array().square().matrix();
    p.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochStats {
  int epoch = 0;
  double log_loss = 0.0;
  double disc_loss = 0.0;
  double combined = 0.0;
};

struct TrainResult {
  DecoderParams params;
  std::vector<EpochStats> trace;
  bool diverged = false;
  std::string divergence_reason;
};

/// Trains a fresh decoder on the corpus. Deterministic for a fixed seed; a
/// non-finite loss aborts the run but keeps the trace accumulated so far.
inline TrainResult train(std::span<const Utterance> corpus, const Vocab& vocab,
                         const DecoderConfig& decoder_cfg, const TrainConfig& cfg,
                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  decoder_cfg.validate();
  if (corpus.empty()) throw ConfigMismatchError("training corpus is empty");
  for (const Utterance& u : corpus)
    if (u.words.empty())
      throw InvalidPhraseError("utterance " + u.id + " has an empty transcript");

  TrainResult result;
  result.params = DecoderParams::init(decoder_cfg, cfg.seed);
  AdamState adam = AdamState::zeros(decoder_cfg);
  std::mt19937_64 rng(cfg.seed + 1);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats stats{epoch, 0.0, 0.0, 0.0};
    std::size_t seen = 0;

    for (std::size_t begin = 0; begin < order.size(); begin += cfg.minibatch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.minibatch_size);
      std::vector<Utterance> minibatch;
      minibatch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) minibatch.push_back(corpus[order[i]]);

      const PhrasePool pool =
          sample_phrase_pool(minibatch, vocab, rng, cfg.phrases_per_pool_entry);
      DecoderParams grads = DecoderParams::zeros(decoder_cfg);
      bool batch_ok = true;
      for (const Utterance& utt : minibatch) {
        const PhraseBatch batch =
            assemble_batch(utt, pool, vocab, rng, cfg.phrases_per_utterance);
        try {
          const EncoderCache cache = make_encoder_cache(result.params, utt.features);
          const LossReport r = loss_gradients(result.params, cache, batch.phrases, batch.labels,
                                              cfg.beta, grads);
          stats.log_loss += r.log_loss;
          stats.disc_loss += r.disc_loss;
          stats.combined += r.combined;
          seen += 1;
        } catch (const NumericalError& e) {
          result.diverged = true;
          result.divergence_reason = e.what();
          batch_ok = false;
          break;
        }
      }
      if (!batch_ok) break;

      const double inv = 1.0 / double(minibatch.size());
      grads.for_each_tensor([&](const std::string&, Eigen::MatrixXd& g) { g *= inv; });
      adam_step(result.params, grads, adam, cfg);
    }

    if (seen > 0) {
      stats.log_loss /= double(seen);
      stats.disc_loss /= double(seen);
      stats.combined /= double(seen);
      result.trace.push_back(stats);
      if (on_epoch) on_epoch(stats);
    }
    if (result.diverged) break;
  }
  return result;
}

}  // namespace ctxbias
