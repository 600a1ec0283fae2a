#pragma once

// Per-phrase KMP backup tables and the per-hypothesis partial-match state
// machine used by shallow fusion. All-occurrences semantics: on completing a
// phrase the match length falls back to the prefix function of the full
// pattern, so overlapping occurrences are all counted.

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ctxbias/core.hpp"

namespace ctxbias {

/// Classic prefix-function table over a phrase's match tokens (<eos> excluded).
/// backup[k] = length of the longest proper prefix of tokens[0..k] that is
/// also a suffix of it.
struct PartialMatchTable {
  std::vector<TokenId> phrase_tokens;
  std::vector<int> backup;

  int size() const { return static_cast<int>(phrase_tokens.size()); }
};

inline PartialMatchTable build_table(std::span<const TokenId> match_tokens) {
  if (match_tokens.empty())
    throw InvalidPhraseError("build_table: phrase has no match tokens");
  PartialMatchTable t;
  t.phrase_tokens.assign(match_tokens.begin(), match_tokens.end());
  const int n = t.size();
  t.backup.assign(n, 0);
  for (int k = 1; k < n; ++k) {
    int m = t.backup[k - 1];
    while (m > 0 && t.phrase_tokens[k] != t.phrase_tokens[m]) m = t.backup[m - 1];
    if (t.phrase_tokens[k] == t.phrase_tokens[m]) ++m;
    t.backup[k] = m;
  }
  return t;
}

inline PartialMatchTable build_table(const Phrase& phrase) {
  return build_table(phrase.match_tokens());
}

/// Per-hypothesis search state: one partial-match length per active phrase
/// plus the total token count of completed (vested) occurrences. After every
/// transition each length is strictly below its phrase length.
struct MatchState {
  std::vector<int> lengths;
  std::int64_t completed_total = 0;

  bool operator==(const MatchState&) const = default;

  int max_length() const {
    int m = 0;
    for (int v : lengths) m = std::max(m, v);
    return m;
  }
};

inline MatchState zero_state(std::size_t num_phrases) {
  MatchState s;
  s.lengths.assign(num_phrases, 0);
  return s;
}

struct StepResult {
  MatchState state;
  bool extended = false;              // max length > 0 after the transition
  std::vector<int> completions;       // phrase indices completed by this token
};

/// Advance every per-phrase match length by one token using the standard KMP
/// transition. A phrase reaching full length is recorded as a completion,
/// adds its token count to completed_total, and falls back to
/// backup[full - 1] so overlapping occurrences keep matching.
inline StepResult step(const MatchState& state, std::span<const PartialMatchTable> tables,
                       TokenId token) {
  if (state.lengths.size() != tables.size())
    throw Error("matcher step: state does not match table count");
  StepResult r;
  r.state = state;
  for (std::size_t j = 0; j < tables.size(); ++j) {
    const PartialMatchTable& t = tables[j];
    int m = state.lengths[j];
    while (m > 0 && t.phrase_tokens[m] != token) m = t.backup[m - 1];
    if (t.phrase_tokens[m] == token) ++m;
    if (m == t.size()) {
      r.completions.push_back(static_cast<int>(j));
      r.state.completed_total += t.size();
      m = t.backup[t.size() - 1];
    }
    r.state.lengths[j] = m;
    if (m > 0) r.extended = true;
  }
  return r;
}

/// From-scratch fold of step() over a token sequence; the oracle for
/// incrementality.
inline MatchState recompute(std::span<const PartialMatchTable> tables,
                            std::span<const TokenId> sequence) {
  MatchState s = zero_state(tables.size());
  for (TokenId tok : sequence) s = step(s, tables, tok).state;
  return s;
}

/// Debug dump: one line per table, phrase tokens then the backup array.
inline void dump_tables_tsv(std::ostream& out, std::span<const PartialMatchTable> tables,
                            const Vocab* vocab = nullptr) {
  for (const auto& t : tables) {
    std::string phrase;
    std::string backup;
    for (int i = 0; i < t.size(); ++i) {
      if (i > 0) phrase += ' ';
      phrase += vocab ? vocab->id_to_string(t.phrase_tokens[i])
                      : std::to_string(t.phrase_tokens[i]);
    }
    for (std::size_t i = 0; i < t.backup.size(); ++i) {
      if (i > 0) backup += ' ';
      backup += std::to_string(t.backup[i]);
    }
    out << phrase << '\t' << backup << '\n';
  }
}

}  // namespace ctxbias
