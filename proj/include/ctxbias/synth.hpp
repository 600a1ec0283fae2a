#pragma once

// Synthetic desk-scale corpus: random word pools split into frequent and rare
// vocabulary, utterances with noisy per-token encoder features, ground-truth
// biasing phrases, distractor lists, and a toy position-indexed base scorer
// that corrupts rare words toward a per-utterance confusion set. Everything
// is a pure function of the config seed.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ctxbias/core.hpp"
#include "ctxbias/fusion.hpp"

namespace ctxbias {

struct SynthConfig {
  std::uint64_t seed = 1;
  std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
  int frequent_words = 100;
  int rare_words = 2500;
  int num_utterances = 2200;
  int test_utterances = 200;  // taken from the tail of the corpus
  int min_words = 3;
  int max_words = 3;
  int min_chars = 3;
  int max_chars = 5;
  double rare_fraction = 0.1;
  int enc_dim = 16;
  int frames_per_token = 2;
  double code_scale = 1.0;  // standard deviation of each token code dimension
  double sigma = 0.5;
  double rho = 0.4;            // corruption rate for rare-word occurrences
  double frequent_rho_scale = 0.125;  // frequent words corrupt at rho * scale
  double ref_share = 0.75;     // share of diverted mass left on the true token
  int confusion_words_per_utt = 4;
  std::vector<int> distractor_ns = {100, 500, 1000, 2000};

  int max_distractors() const {
    int m = 0;
    for (int n : distractor_ns) m = std::max(m, n);
    return m;
  }

  void validate() const {
    if (alphabet.size() < 2) throw ConfigMismatchError("synth: alphabet needs at least 2 chars");
    if (frequent_words < 1 || rare_words < 1)
      throw ConfigMismatchError("synth: word pools must be nonempty");
    if (num_utterances < 1) throw ConfigMismatchError("synth: num_utterances must be positive");
    if (test_utterances < 0 || test_utterances > num_utterances)
      throw ConfigMismatchError("synth: test_utterances out of range");
    if (min_words < 1 || max_words < min_words)
      throw ConfigMismatchError("synth: bad utterance length range");
    if (min_chars < 1 || max_chars < min_chars)
      throw ConfigMismatchError("synth: bad word length range");
    if (rare_fraction < 0.0 || rare_fraction > 1.0)
      throw ConfigMismatchError("synth: rare_fraction must be in [0, 1]");
    if (enc_dim < 1 || frames_per_token < 1)
      throw ConfigMismatchError("synth: feature dims must be positive");
    if (code_scale <= 0.0) throw ConfigMismatchError("synth: code_scale must be positive");
    if (sigma < 0.0) throw ConfigMismatchError("synth: sigma must be nonnegative");
    if (rho < 0.0 || rho >= 1.0) throw ConfigMismatchError("synth: rho must be in [0, 1)");
    if (frequent_rho_scale < 0.0 || frequent_rho_scale > 1.0)
      throw ConfigMismatchError("synth: frequent_rho_scale must be in [0, 1]");
    if (ref_share <= 0.0 || ref_share >= 1.0)
      throw ConfigMismatchError("synth: ref_share must be in (0, 1)");
    if (confusion_words_per_utt < 1)
      throw ConfigMismatchError("synth: confusion_words_per_utt must be positive");
    if (distractor_ns.empty()) throw ConfigMismatchError("synth: distractor_ns is empty");
    for (int n : distractor_ns)
      if (n < 1) throw ConfigMismatchError("synth: distractor counts must be positive");
    if (max_distractors() + max_words > rare_words)
      throw ConfigMismatchError("synth: rare pool too small for requested distractor counts");
  }
};

/// Everything the toy scorer needs to replay one utterance's base model:
/// which word occurrences it mis-hears and toward which confusion words.
struct BaseInfo {
  double rho = 0.0;
  double ref_share = 0.75;
  std::vector<std::string> confusion_words;
  std::vector<std::pair<int, std::string>> substitutions;  // word index -> heard word

  /// The word sequence the base scorer actually follows.
  std::vector<std::string> corrupted_words(std::span<const std::string> words) const {
    std::vector<std::string> out(words.begin(), words.end());
    for (const auto& [idx, w] : substitutions) out[static_cast<std::size_t>(idx)] = w;
    return out;
  }
};

struct SynthUtterance {
  Utterance utt;
  std::vector<std::string> gt_words;  // rare words of the reference, deduped
  BaseInfo base;
  std::vector<int> distractor_idx;    // indices into SynthCorpus::rare_pool

  /// Distractor lists for smaller N are prefixes of the largest list.
  std::span<const int> distractors(int n) const {
    if (n < 0 || n > static_cast<int>(distractor_idx.size()))
      throw ConfigMismatchError("synth: distractor count " + std::to_string(n) +
                                " was not generated");
    return std::span<const int>(distractor_idx.data(), static_cast<std::size_t>(n));
  }
};

struct SynthCorpus {
  SynthConfig config;
  Vocab vocab;
  std::vector<std::string> frequent_pool;
  std::vector<std::string> rare_pool;
  std::vector<SynthUtterance> utterances;

  /// Biasing list for one utterance: ground-truth words plus N distractors.
  std::vector<std::string> bias_words(const SynthUtterance& u, int n) const {
    std::vector<std::string> words = u.gt_words;
    for (int idx : u.distractors(n)) words.push_back(rare_pool[static_cast<std::size_t>(idx)]);
    return words;
  }
};

namespace detail {

inline std::string random_word(std::mt19937_64& rng, const SynthConfig& cfg) {
  std::uniform_int_distribution<int> len_dist(cfg.min_chars, cfg.max_chars);
  std::uniform_int_distribution<std::size_t> char_dist(0, cfg.alphabet.size() - 1);
  std::string w(static_cast<std::size_t>(len_dist(rng)), ' ');
  for (auto& c : w) c = cfg.alphabet[char_dist(rng)];
  return w;
}

/// Distinct words for both pools; the first block becomes the frequent pool.
inline std::pair<std::vector<std::string>, std::vector<std::string>> make_pools(
    std::mt19937_64& rng, const SynthConfig& cfg) {
  const std::size_t want = static_cast<std::size_t>(cfg.frequent_words + cfg.rare_words);
  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  std::uint64_t attempts = 0;
  while (words.size() < want) {
    if (++attempts > 1000 * want)
      throw ConfigMismatchError("synth: word space too small for requested pool sizes");
    std::string w = random_word(rng, cfg);
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  std::vector<std::string> freq(words.begin(), words.begin() + cfg.frequent_words);
  std::vector<std::string> rare(words.begin() + cfg.frequent_words, words.end());
  return {std::move(freq), std::move(rare)};
}

}  // namespace detail

inline SynthCorpus gen_corpus(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);

  SynthCorpus corpus;
  corpus.config = cfg;
  corpus.vocab = Vocab::chars(cfg.alphabet);
  std::tie(corpus.frequent_pool, corpus.rare_pool) = detail::make_pools(rng, cfg);

  std::unordered_set<std::string> rare_set(corpus.rare_pool.begin(), corpus.rare_pool.end());
  // Rare words grouped by character count, for same-length confusion targets.
  std::map<std::size_t, std::vector<int>> rare_by_len;
  for (int i = 0; i < static_cast<int>(corpus.rare_pool.size()); ++i)
    rare_by_len[corpus.rare_pool[static_cast<std::size_t>(i)].size()].push_back(i);

  // One Gaussian code vector per vocab id, in id order.
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd codes(corpus.vocab.size(), cfg.enc_dim);
  for (int t = 0; t < corpus.vocab.size(); ++t)
    for (int d = 0; d < cfg.enc_dim; ++d) codes(t, d) = cfg.code_scale * gauss(rng);

  std::uniform_int_distribution<int> utt_len(cfg.min_words, cfg.max_words);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> freq_pick(0, corpus.frequent_pool.size() - 1);
  std::uniform_int_distribution<std::size_t> rare_pick(0, corpus.rare_pool.size() - 1);

  corpus.utterances.reserve(static_cast<std::size_t>(cfg.num_utterances));
  for (int u = 0; u < cfg.num_utterances; ++u) {
    SynthUtterance rec;

    // Transcript: each slot is rare with probability rare_fraction.
    const int n_words = utt_len(rng);
    std::vector<std::string> words;
    words.reserve(static_cast<std::size_t>(n_words));
    for (int w = 0; w < n_words; ++w) {
      if (unit(rng) < cfg.rare_fraction)
        words.push_back(corpus.rare_pool[rare_pick(rng)]);
      else
        words.push_back(corpus.frequent_pool[freq_pick(rng)]);
    }
    std::unordered_set<std::string> own(words.begin(), words.end());

    for (const auto& w : words)
      if (rare_set.contains(w) &&
          std::find(rec.gt_words.begin(), rec.gt_words.end(), w) == rec.gt_words.end())
        rec.gt_words.push_back(w);

    // Base model: seed confusion words, then per-occurrence corruption with a
    // same-length confusion target so token streams stay aligned.
    rec.base.rho = cfg.rho;
    rec.base.ref_share = cfg.ref_share;
    std::unordered_set<std::string> confusion_set;
    while (static_cast<int>(rec.base.confusion_words.size()) < cfg.confusion_words_per_utt) {
      const std::string& cand = corpus.rare_pool[rare_pick(rng)];
      if (own.contains(cand) || confusion_set.contains(cand)) continue;
      confusion_set.insert(cand);
      rec.base.confusion_words.push_back(cand);
    }
    for (int w = 0; w < n_words; ++w) {
      const std::string& word = words[static_cast<std::size_t>(w)];
      const bool is_rare = rare_set.contains(word);
      const double p = is_rare ? cfg.rho : cfg.rho * cfg.frequent_rho_scale;
      if (unit(rng) >= p) continue;
      // Prefer an existing confusion word of matching length.
      std::string target;
      for (const auto& c : rec.base.confusion_words)
        if (c.size() == word.size() && c != word) {
          target = c;
          break;
        }
      if (target.empty()) {
        const auto& bucket = rare_by_len[word.size()];
        std::vector<int> cands;
        for (int idx : bucket) {
          const std::string& c = corpus.rare_pool[static_cast<std::size_t>(idx)];
          if (!own.contains(c) && !confusion_set.contains(c)) cands.push_back(idx);
        }
        if (cands.empty()) continue;
        std::uniform_int_distribution<std::size_t> pick(0, cands.size() - 1);
        target = corpus.rare_pool[static_cast<std::size_t>(cands[pick(rng)])];
        confusion_set.insert(target);
        rec.base.confusion_words.push_back(target);
      }
      rec.base.substitutions.emplace_back(w, target);
    }

    // Features: each content token contributes frames_per_token noisy copies
    // of its code vector.
    const std::vector<TokenId> tokens = tokenize(words, corpus.vocab);
    EncoderFeatures feats;
    feats.frames.resize(static_cast<int>(tokens.size()) * cfg.frames_per_token, cfg.enc_dim);
    int row = 0;
    for (TokenId t : tokens)
      for (int r = 0; r < cfg.frames_per_token; ++r, ++row)
        for (int d = 0; d < cfg.enc_dim; ++d)
          feats.frames(row, d) = codes(t, d) + cfg.sigma * gauss(rng);

    char id[32];
    std::snprintf(id, sizeof id, "u%05d", u);
    rec.utt = Utterance::make(id, std::move(words), corpus.vocab, std::move(feats));

    // Distractors: sampled without replacement from the rare pool minus the
    // utterance's own words; smaller lists are prefixes of the largest.
    std::vector<int> eligible;
    eligible.reserve(corpus.rare_pool.size());
    for (int i = 0; i < static_cast<int>(corpus.rare_pool.size()); ++i)
      if (!own.contains(corpus.rare_pool[static_cast<std::size_t>(i)])) eligible.push_back(i);
    const int want = std::min(cfg.max_distractors(), static_cast<int>(eligible.size()));
    for (int k = 0; k < want; ++k) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k),
                                                      eligible.size() - 1);
      std::swap(eligible[static_cast<std::size_t>(k)], eligible[pick(rng)]);
      rec.distractor_idx.push_back(eligible[static_cast<std::size_t>(k)]);
    }

    corpus.utterances.push_back(std::move(rec));
  }
  return corpus;
}

/// Position-indexed stand-in for a frozen hybrid decoder. It walks its own
/// corrupted token stream: at each step most mass sits on the stream token,
/// a ref_share slice of the diverted mass stays on the true token, and the
/// rest spreads over the utterance's confusion characters.
class ToyBaseScorer final : public BaseScorer {
 public:
  ToyBaseScorer(const Vocab& vocab, std::span<const std::string> ref_words, const BaseInfo& base)
      : vocab_size_(vocab.size()) {
    const std::vector<TokenId> ref = tokenize(ref_words, vocab);
    const std::vector<std::string> heard_words = base.corrupted_words(ref_words);
    const std::vector<TokenId> heard = tokenize(heard_words, vocab);
    if (heard.size() != ref.size())
      throw ConfigMismatchError("toy scorer: corrupted stream length differs from reference");

    std::set<TokenId> confusion;
    for (const auto& w : base.confusion_words)
      for (TokenId t : tokenize(std::span<const std::string>(&w, 1), vocab)) confusion.insert(t);

    const int steps = static_cast<int>(ref.size());
    rows_.resize(steps + 1, vocab_size_);
    for (int t = 0; t < steps; ++t) {
      Eigen::RowVectorXd p = Eigen::RowVectorXd::Constant(vocab_size_, kFloor);
      const TokenId truth = ref[static_cast<std::size_t>(t)];
      const TokenId emit = heard[static_cast<std::size_t>(t)];
      std::vector<TokenId> spread;
      for (TokenId c : confusion)
        if (c != truth && c != emit) spread.push_back(c);
      if (emit == truth) {
        p[truth] += 1.0 - base.rho;
        if (spread.empty())
          p[truth] += base.rho;
        else
          for (TokenId c : spread) p[c] += base.rho / static_cast<double>(spread.size());
      } else {
        p[emit] += 1.0 - base.rho;
        p[truth] += base.ref_share * base.rho;
        const double rest = (1.0 - base.ref_share) * base.rho;
        if (spread.empty())
          p[emit] += rest;
        else
          for (TokenId c : spread) p[c] += rest / static_cast<double>(spread.size());
      }
      rows_.row(t) = (p / p.sum()).array().log();
    }

    Eigen::RowVectorXd p = Eigen::RowVectorXd::Constant(vocab_size_, kFloor);
    p[kEosId] += kEosMass;
    for (TokenId t = 0; t < vocab_size_; ++t)
      if (t != kSosId && t != kEosId) p[t] += (1.0 - kEosMass) / (vocab_size_ - 2);
    rows_.row(steps) = (p / p.sum()).array().log();
  }

  int vocab_size() const override { return vocab_size_; }

  /// Position-indexed: only the number of emitted tokens matters, which makes
  /// the scorer trivially deterministic across hypotheses.
  Eigen::RowVectorXd next_logprobs(std::span<const TokenId> prefix) const override {
    const int t =
        std::min(static_cast<int>(prefix.size()), static_cast<int>(rows_.rows()) - 1);
    return rows_.row(t);
  }

 private:
  static constexpr double kFloor = 1e-9;
  static constexpr double kEosMass = 0.98;

  int vocab_size_ = 0;
  Eigen::MatrixXd rows_;  // one log-prob row per step, last row favors <eos>
};

inline ToyBaseScorer make_toy_scorer(const Vocab& vocab, const Utterance& utt,
                                     const BaseInfo& base) {
  return ToyBaseScorer(vocab, utt.words, base);
}

}  // namespace ctxbias
