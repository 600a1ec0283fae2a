#pragma once

// Shallow fusion of a base decoder with the phrase scorer: filter the biasing
// list down to plausible phrases, derive a single per-token bonus, then run
// beam search where partial matches earn the bonus provisionally and lose it
// the moment they stop matching.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxbias/core.hpp"
#include "ctxbias/decoder.hpp"
#include "ctxbias/matcher.hpp"

namespace ctxbias {

struct FilterResult {
  std::vector<int> kept;  // 1-based phrase indices, matching s1..sM
  double bonus = 0.0;
  double tol = 0.0;
  double s0 = 0.0;
};

/// Keeps phrase i iff tol + s_i - s0 >= 0 and sets the utterance bonus to the
/// largest such margin. An empty kept set means no bonus at all.
inline FilterResult filter_phrases(std::span<const ScoredPhrase> scored, double s0, double tol) {
  if (tol < 0.0) throw ConfigMismatchError("tol must be nonnegative");
  FilterResult r;
  r.tol = tol;
  r.s0 = s0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    const double margin = tol + scored[i].per_token - s0;
    if (margin >= 0.0) {
      r.kept.push_back(int(i) + 1);
      r.bonus = std::max(r.bonus, margin);
    }
  }
  return r;
}

struct Hypothesis {
  std::vector<TokenId> tokens;  // emitted tokens, end token never included
  double base_score = 0.0;
  double vested_bias = 0.0;    // bonus x completed_total, never canceled
  double pending_bias = 0.0;   // bonus x max partial length, provisional
  MatchState match_state;
  bool finished = false;

  double total() const { return base_score + vested_bias + pending_bias; }
};

/// Deterministic beam ordering: score first, then shorter, then lexicographic.
inline bool hyp_better(const Hypothesis& a, const Hypothesis& b) {
  if (a.total() != b.total()) return a.total() > b.total();
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

/// Extends a hypothesis by one emitted token and reassigns its bias. Both
/// bias fields are recomputed from the match state rather than incremented,
/// which keeps the decomposition total - base = bonus x (completed + partial)
/// exact and makes cancellation automatic: a dead match zeroes the pending
/// term because max_j m_j falls to 0.
inline Hypothesis apply_bias(const Hypothesis& hyp, TokenId token,
                             std::span<const PartialMatchTable> tables, double bonus) {
  Hypothesis next = hyp;
  next.tokens.push_back(token);
  if (!tables.empty()) {
    next.match_state = step(hyp.match_state, tables, token).state;
    next.vested_bias = bonus * double(next.match_state.completed_total);
    next.pending_bias = bonus * double(next.match_state.max_length());
  }
  return next;
}

/// Base decoding model the fusion drives. Implementations hold whatever
/// per-utterance context they need; the prefix is the emitted tokens so far.
class BaseScorer {
 public:
  virtual ~BaseScorer() = default;
  virtual int vocab_size() const = 0;
  virtual TokenId end_token() const { return kEosId; }
  // Input-only token that can never be emitted; -1 disables the exclusion.
  virtual TokenId start_token() const { return kSosId; }
  virtual Eigen::RowVectorXd next_logprobs(std::span<const TokenId> prefix) const = 0;
};

struct BeamOptions {
  int beam = 30;
  int expansions_per_hyp = 30;
  int max_len = 64;
  // Called after each pruning step with the surviving live hypotheses.
  std::function<void(int step, const std::vector<Hypothesis>&)> on_step;
};

struct BeamResult {
  std::vector<Hypothesis> hypotheses;  // ranked best first
  bool complete = false;               // false when nothing finalized in time
};

/// Beam search with the per-token bonus folded into pruning decisions. Each
/// hypothesis proposes its top base-scorer expansions; the end token routes a
/// copy to the finished pool with its provisional bias canceled.
inline BeamResult beam_search(const BaseScorer& base, std::span<const PartialMatchTable> tables,
                              double bonus, const BeamOptions& opts) {
  if (opts.beam < 1) throw ConfigMismatchError("beam size must be at least 1");
  if (opts.expansions_per_hyp < 1)
    throw ConfigMismatchError("expansions_per_hyp must be at least 1");
  const int v = base.vocab_size();
  const TokenId end = base.end_token();
  const TokenId start = base.start_token();
  const int expansions = std::min(opts.expansions_per_hyp, v);

  Hypothesis root;
  root.match_state = zero_state(tables.size());
  std::vector<Hypothesis> live{root};
  std::vector<Hypothesis> finished;
  std::vector<Hypothesis> partials;  // ran out of budget without finalizing

  std::vector<int> order(v);
  for (int step_idx = 0; step_idx <= opts.max_len && !live.empty(); ++step_idx) {
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& hyp : live) {
      const bool out_of_budget = int(hyp.tokens.size()) >= opts.max_len;
      const Eigen::RowVectorXd lp = base.next_logprobs(hyp.tokens);
      if (lp.size() != v)
        throw ConfigMismatchError("base scorer returned a vector of wrong vocab size");

      for (int i = 0; i < v; ++i) order[i] = i;
      std::partial_sort(order.begin(), order.begin() + expansions, order.end(),
                        [&](int a, int b) { return lp[a] != lp[b] ? lp[a] > lp[b] : a < b; });
      bool finalized = false;
      for (int k = 0; k < expansions; ++k) {
        const TokenId tok = order[k];
        if (tok == start) continue;
        if (tok == end) {
          Hypothesis done = hyp;
          done.base_score += lp[end];
          done.pending_bias = 0.0;
          done.finished = true;
          finished.push_back(std::move(done));
          finalized = true;
        } else if (!out_of_budget) {
          Hypothesis next = apply_bias(hyp, tok, tables, bonus);
          next.base_score += lp[tok];
          candidates.push_back(std::move(next));
        }
      }
      // At the length budget a hypothesis either ends here or it is only a
      // partial result; it cannot grow further.
      if (out_of_budget && !finalized) partials.push_back(hyp);
    }

    std::sort(candidates.begin(), candidates.end(), hyp_better);
    if (int(candidates.size()) > opts.beam) candidates.resize(opts.beam);
    live = std::move(candidates);

    std::sort(finished.begin(), finished.end(), hyp_better);
    if (int(finished.size()) > opts.beam) finished.resize(opts.beam);
    std::sort(partials.begin(), partials.end(), hyp_better);
    if (int(partials.size()) > opts.beam) partials.resize(opts.beam);

    if (opts.on_step) opts.on_step(step_idx, live);
  }

  BeamResult result;
  if (!finished.empty()) {
    result.hypotheses = std::move(finished);
    result.complete = true;
  } else {
    result.hypotheses = std::move(partials);
    result.complete = false;
  }
  return result;
}

struct DecodeResult {
  std::vector<std::string> words;
  Hypothesis best;
  std::vector<ScoredPhrase> scored;  // aligned with the input phrase list
  FilterResult filter;
  bool complete = false;
};

/// Full per-utterance pipeline: score the biasing list, filter it, build the
/// match tables for the kept phrases and decode with the resulting bonus.
inline DecodeResult decode_utterance(const Utterance& utt, std::span<const Phrase> phrases,
                                     const DecoderParams& params, const BaseScorer& base,
                                     const Vocab& vocab, double tol, BeamOptions opts) {
  DecodeResult result;
  const EncoderCache cache = make_encoder_cache(params, utt.features);
  const Phrase empty = Phrase::empty(vocab);
  const double s0 = score_batch(params, cache, std::span<const Phrase>(&empty, 1))[0].per_token;
  result.scored = score_batch(params, cache, phrases);

  result.filter = filter_phrases(result.scored, s0, tol);

  std::vector<PartialMatchTable> tables;
  tables.reserve(result.filter.kept.size());
  for (int idx : result.filter.kept) tables.push_back(build_table(phrases[idx - 1]));

  if (opts.max_len <= 0) opts.max_len = 2 * utt.features.num_frames() + 8;
  const BeamResult beam = beam_search(base, tables, result.filter.bonus, opts);

  result.best = beam.hypotheses.front();
  result.complete = beam.complete;
  result.words = detokenize(result.best.tokens, vocab);
  return result;
}

}  // namespace ctxbias
