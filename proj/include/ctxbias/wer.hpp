#pragma once

// Word-level edit alignment and error-rate reporting. Hypotheses are aligned
// against references with unit-cost Levenshtein distance, then every edit is
// attributed to the biased or unbiased category so that B-WER and U-WER can
// be read off alongside overall WER.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ctxbias/core.hpp"

namespace ctxbias {

enum class OpKind { match, substitution, deletion, insertion };

/// One cell of the alignment path. Matches and substitutions carry both
/// words, deletions only the reference word, insertions only the hypothesis
/// word.
struct AlignmentOp {
  OpKind kind = OpKind::match;
  std::string ref_word;
  std::string hyp_word;

  bool operator==(const AlignmentOp&) const = default;
};

/// Minimal-cost alignment with deterministic tie-breaking: on equal cost the
/// backtrace prefers match over substitution over deletion over insertion.
inline std::vector<AlignmentOp> align(std::span<const std::string> ref,
                                      std::span<const std::string> hyp) {
  const int nr = static_cast<int>(ref.size());
  const int nh = static_cast<int>(hyp.size());
  // cost[i][j] = edit distance between ref[0..i) and hyp[0..j).
  std::vector<std::vector<int>> cost(nr + 1, std::vector<int>(nh + 1, 0));
  for (int i = 1; i <= nr; ++i) cost[i][0] = i;
  for (int j = 1; j <= nh; ++j) cost[0][j] = j;
  for (int i = 1; i <= nr; ++i) {
    for (int j = 1; j <= nh; ++j) {
      const int diag = cost[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const int del = cost[i - 1][j] + 1;
      const int ins = cost[i][j - 1] + 1;
      cost[i][j] = std::min(diag, std::min(del, ins));
    }
  }

  std::vector<AlignmentOp> ops;
  ops.reserve(static_cast<std::size_t>(std::max(nr, nh)));
  int i = nr;
  int j = nh;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] && cost[i][j] == cost[i - 1][j - 1]) {
      ops.push_back({OpKind::match, ref[i - 1], hyp[j - 1]});
      --i, --j;
    } else if (i > 0 && j > 0 && cost[i][j] == cost[i - 1][j - 1] + 1) {
      ops.push_back({OpKind::substitution, ref[i - 1], hyp[j - 1]});
      --i, --j;
    } else if (i > 0 && cost[i][j] == cost[i - 1][j] + 1) {
      ops.push_back({OpKind::deletion, ref[i - 1], {}});
      --i;
    } else {
      ops.push_back({OpKind::insertion, {}, hyp[j - 1]});
      --j;
    }
  }
  std::reverse(ops.begin(), ops.end());
  return ops;
}

/// Raw op counts for one attribution category. Insertions consume no
/// reference word, so they raise the error numerator without widening the
/// denominator.
struct OpCounts {
  std::int64_t matches = 0;
  std::int64_t substitutions = 0;
  std::int64_t deletions = 0;
  std::int64_t insertions = 0;

  std::int64_t errors() const { return substitutions + deletions + insertions; }
  std::int64_t ref_words() const { return matches + substitutions + deletions; }

  OpCounts& operator+=(const OpCounts& o) {
    matches += o.matches;
    substitutions += o.substitutions;
    deletions += o.deletions;
    insertions += o.insertions;
    return *this;
  }

  bool operator==(const OpCounts&) const = default;
};

/// A category with no reference words has an undefined rate; NaN marks it so
/// callers can skip it when averaging or printing.
inline double error_rate(const OpCounts& c) {
  if (c.ref_words() == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(c.errors()) / static_cast<double>(c.ref_words());
}

/// Counts split by bias-list membership. The overall tally is always the
/// fieldwise sum of the two categories, so numerators and denominators
/// decompose exactly.
struct ErrorReport {
  OpCounts biased;
  OpCounts unbiased;

  OpCounts total() const {
    OpCounts t = biased;
    t += unbiased;
    return t;
  }

  double wer() const { return error_rate(total()); }
  double b_wer() const { return error_rate(biased); }
  double u_wer() const { return error_rate(unbiased); }

  ErrorReport& operator+=(const ErrorReport& o) {
    biased += o.biased;
    unbiased += o.unbiased;
    return *this;
  }

  bool operator==(const ErrorReport&) const = default;
};

/// Attribute each op to a category: matches, substitutions, and deletions go
/// by the reference word, insertions by the hypothesis word.
inline ErrorReport report(std::span<const AlignmentOp> alignment,
                          const std::unordered_set<std::string>& bias_words) {
  ErrorReport r;
  for (const AlignmentOp& op : alignment) {
    const std::string& word = op.kind == OpKind::insertion ? op.hyp_word : op.ref_word;
    OpCounts& c = bias_words.contains(word) ? r.biased : r.unbiased;
    switch (op.kind) {
      case OpKind::match: ++c.matches; break;
      case OpKind::substitution: ++c.substitutions; break;
      case OpKind::deletion: ++c.deletions; break;
      case OpKind::insertion: ++c.insertions; break;
    }
  }
  return r;
}

/// Union of the words of every phrase on an utterance's biasing list.
inline std::unordered_set<std::string> bias_word_set(std::span<const Phrase> phrases) {
  std::unordered_set<std::string> words;
  for (const Phrase& p : phrases)
    for (const std::string& w : p.words) words.insert(w);
  return words;
}

inline ErrorReport evaluate_utterance(std::span<const std::string> ref,
                                      std::span<const std::string> hyp,
                                      const std::unordered_set<std::string>& bias_words) {
  const std::vector<AlignmentOp> ops = align(ref, hyp);
  return report(ops, bias_words);
}

}  // namespace ctxbias
