#pragma once

// Vocabulary, tokens, phrases and utterances shared by every other part of
// the library. Tokenization is deliberately small: a whole-word vocab hit
// falls back to character tokens, with an explicit word-separator token.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

namespace ctxbias {

using TokenId = std::int32_t;
using PhraseLabel = int;  // 0 or 1

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnknownSymbolError : public Error {
 public:
  using Error::Error;
};

class InvalidPhraseError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigMismatchError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Vocab

inline constexpr std::string_view kSosToken = "<sos>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kSepToken = "<sep>";

// Vocab files reserve the first two lines for <sos> and <eos>, so their ids
// are fixed and safe to use without a Vocab instance.
inline constexpr TokenId kSosId = 0;
inline constexpr TokenId kEosId = 1;

inline std::string lowercased(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

/// Bijective token-id <-> token-string map. Ids are dense, with ids 0 and 1
/// reserved for <sos> and <eos>; neither is ever produced by tokenize().
class Vocab {
 public:
  Vocab() = default;

  static Vocab from_entries(std::vector<std::string> entries) {
    if (entries.size() < 2) throw ParseError("vocab needs at least <sos> and <eos>");
    if (entries[0] != kSosToken || entries[1] != kEosToken)
      throw ParseError("vocab lines 0 and 1 must be <sos> and <eos>");
    Vocab v;
    v.entries_ = std::move(entries);
    for (TokenId id = 0; id < static_cast<TokenId>(v.entries_.size()); ++id) {
      const std::string& s = v.entries_[id];
      if (s.empty()) throw ParseError("empty vocab entry at id " + std::to_string(id));
      if (!v.index_.emplace(s, id).second)
        throw ParseError("duplicate vocab entry: " + s);
    }
    if (auto it = v.index_.find(std::string(kSepToken)); it != v.index_.end())
      v.sep_id_ = it->second;
    return v;
  }

  /// Character-level vocab: <sos>, <eos>, <sep>, then one entry per character.
  static Vocab chars(std::string_view alphabet) {
    std::vector<std::string> entries{std::string(kSosToken), std::string(kEosToken),
                                     std::string(kSepToken)};
    for (char c : alphabet) entries.emplace_back(1, c);
    return from_entries(std::move(entries));
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open vocab file: " + path);
    std::vector<std::string> entries;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      entries.push_back(line);
    }
    return from_entries(std::move(entries));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write vocab file: " + path);
    for (const auto& e : entries_) out << e << '\n';
  }

  int size() const { return static_cast<int>(entries_.size()); }
  TokenId sos_id() const { return kSosId; }
  TokenId eos_id() const { return kEosId; }
  TokenId sep_id() const { return sep_id_; }  // -1 when the vocab has no <sep>

  const std::string& id_to_string(TokenId id) const {
    if (id < 0 || id >= size()) throw Error("token id out of range: " + std::to_string(id));
    return entries_[id];
  }

  /// Lookup for tokenization; never yields the reserved ids.
  std::optional<TokenId> find(const std::string& s) const {
    auto it = index_.find(s);
    if (it == index_.end() || it->second <= eos_id()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId sep_id_ = -1;
};

// ---------------------------------------------------------------------------
// Tokenization

/// Deterministic word-sequence tokenizer. Each word resolves to a whole-word
/// vocab entry when one exists, otherwise to its characters; words are joined
/// by the <sep> token. Input is lowercased.
inline std::vector<TokenId> tokenize(std::span<const std::string> words, const Vocab& vocab) {
  std::vector<TokenId> out;
  for (std::size_t w = 0; w < words.size(); ++w) {
    if (w > 0) {
      if (vocab.sep_id() < 0)
        throw UnknownSymbolError("vocab has no <sep> token for multi-word input");
      out.push_back(vocab.sep_id());
    }
    const std::string word = lowercased(words[w]);
    if (auto id = vocab.find(word)) {
      out.push_back(*id);
      continue;
    }
    for (char c : word) {
      auto id = vocab.find(std::string(1, c));
      if (!id)
        throw UnknownSymbolError("no token for character '" + std::string(1, c) + "' in word '" +
                                 word + "'");
      out.push_back(*id);
    }
  }
  return out;
}

inline std::vector<std::string> detokenize(std::span<const TokenId> tokens, const Vocab& vocab) {
  std::vector<std::string> words;
  std::string current;
  bool open = false;
  for (TokenId t : tokens) {
    if (t == vocab.sos_id() || t == vocab.eos_id())
      throw Error("detokenize: reserved token id " + std::to_string(t) + " in stream");
    if (t == vocab.sep_id()) {
      words.push_back(current);
      current.clear();
      open = true;
      continue;
    }
    current += vocab.id_to_string(t);
    open = true;
  }
  if (open) words.push_back(current);
  return words;
}

// ---------------------------------------------------------------------------
// Phrase / Utterance

/// Candidate biasing entry: word-level text plus its token sequence. Tokens
/// exclude <sos> and include the terminal <eos>, so length() is L_i >= 1.
/// The empty phrase has no words and tokens == [<eos>].
struct Phrase {
  std::vector<std::string> words;
  std::vector<TokenId> tokens;

  static Phrase from_words(std::vector<std::string> in_words, const Vocab& vocab) {
    Phrase p;
    p.words.reserve(in_words.size());
    for (auto& w : in_words) {
      if (w.empty()) throw InvalidPhraseError("phrase contains an empty word");
      p.words.push_back(lowercased(w));
    }
    p.tokens = tokenize(p.words, vocab);
    p.tokens.push_back(vocab.eos_id());
    return p;
  }

  static Phrase empty(const Vocab& vocab) { return from_words({}, vocab); }

  int length() const { return static_cast<int>(tokens.size()); }
  bool is_empty() const { return words.empty(); }

  /// Tokens that participate in matching; the terminal <eos> is a scorer
  /// concept only and never appears in the search stream.
  std::span<const TokenId> match_tokens() const {
    return std::span<const TokenId>(tokens.data(), tokens.size() - 1);
  }

  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i > 0) out += ' ';
      out += words[i];
    }
    return out;
  }
};

/// T x d real matrix standing in for frozen ASR encoder output.
struct EncoderFeatures {
  Eigen::MatrixXd frames;

  int num_frames() const { return static_cast<int>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }

  void validate() const {
    if (frames.rows() < 1) throw Error("encoder features need at least one frame");
    if (!frames.allFinite()) throw NumericalError("encoder features contain non-finite values");
  }
};

struct Utterance {
  std::string id;
  std::vector<std::string> words;   // reference transcript
  std::vector<TokenId> tokens;      // tokenize(words)
  EncoderFeatures features;

  static Utterance make(std::string id, std::vector<std::string> words, const Vocab& vocab,
                        EncoderFeatures features = {}) {
    Utterance u;
    u.id = std::move(id);
    u.words = std::move(words);
    u.tokens = tokenize(u.words, vocab);
    u.features = std::move(features);
    return u;
  }
};

// ---------------------------------------------------------------------------
// Ground-truth labeling

/// 1 iff the phrase's words occur as a contiguous run of the transcript
/// words. Comparison is lowercased on both sides.
inline PhraseLabel label_phrase(const Phrase& phrase, const Utterance& utt) {
  if (phrase.is_empty())
    throw InvalidPhraseError("label_phrase: empty phrase is labeled by label_empty");
  if (phrase.words.size() > utt.words.size()) return 0;
  auto eq = [](const std::string& a, const std::string& b) {
    return lowercased(a) == lowercased(b);
  };
  auto it = std::search(utt.words.begin(), utt.words.end(), phrase.words.begin(),
                        phrase.words.end(), eq);
  return it == utt.words.end() ? 0 : 1;
}

/// Label for the empty phrase: 1 iff every sampled phrase is a distractor.
/// Vacuously 1 when no phrases were sampled.
inline PhraseLabel label_empty(std::span<const PhraseLabel> other_labels) {
  for (PhraseLabel l : other_labels)
    if (l != 0) return 0;
  return 1;
}

}  // namespace ctxbias
