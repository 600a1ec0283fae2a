#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "ctxbias/core.hpp"

using namespace ctxbias;

namespace {

Vocab test_vocab() { return Vocab::chars("abcdefghijklmnopqrstuvwxyz"); }

std::vector<std::string> random_words(std::mt19937_64& rng, int max_words = 6) {
  std::uniform_int_distribution<int> nwords(0, max_words);
  std::uniform_int_distribution<int> wlen(1, 8);
  std::uniform_int_distribution<int> ch(0, 25);
  std::vector<std::string> words(nwords(rng));
  for (auto& w : words) {
    w.resize(wlen(rng));
    for (auto& c : w) c = static_cast<char>('a' + ch(rng));
  }
  return words;
}

// Brute-force sliding-window scan, independent of label_phrase.
int naive_contains(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return 0;
  for (std::size_t s = 0; s + needle.size() <= hay.size(); ++s) {
    bool ok = true;
    for (std::size_t k = 0; k < needle.size(); ++k)
      if (hay[s + k] != needle[k]) {
        ok = false;
        break;
      }
    if (ok) return 1;
  }
  return 0;
}

}  // namespace

TEST_CASE("tokenize basics") {
  Vocab v = test_vocab();
  CHECK(tokenize(std::vector<std::string>{}, v).empty());

  auto toks = tokenize(std::vector<std::string>{"cat"}, v);
  REQUIRE(toks.size() == 3);
  CHECK(v.id_to_string(toks[0]) == "c");
  CHECK(v.id_to_string(toks[1]) == "a");
  CHECK(v.id_to_string(toks[2]) == "t");

  auto two = tokenize(std::vector<std::string>{"ab", "c"}, v);
  REQUIRE(two.size() == 4);
  CHECK(two[2] == v.sep_id());
}

TEST_CASE("tokenize whole-word entries take precedence") {
  Vocab v = Vocab::from_entries({"<sos>", "<eos>", "<sep>", "a", "b", "ab"});
  auto toks = tokenize(std::vector<std::string>{"ab"}, v);
  REQUIRE(toks.size() == 1);
  CHECK(v.id_to_string(toks[0]) == "ab");
}

TEST_CASE("tokenize errors") {
  Vocab v = test_vocab();
  CHECK_THROWS_AS(tokenize(std::vector<std::string>{"a1"}, v), UnknownSymbolError);
  Vocab no_sep = Vocab::from_entries({"<sos>", "<eos>", "a"});
  CHECK_THROWS_AS(tokenize(std::vector<std::string>{"a", "a"}, no_sep), UnknownSymbolError);
}

TEST_CASE("tokenize never emits reserved ids and round-trips") {
  Vocab v = test_vocab();
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    auto words = random_words(rng);
    auto toks = tokenize(words, v);
    for (TokenId t : toks) {
      CHECK(t != v.sos_id());
      CHECK(t != v.eos_id());
    }
    CHECK(detokenize(toks, v) == words);
  }
}

TEST_CASE("vocab file round-trip") {
  Vocab v = test_vocab();
  std::string path = "vocab_roundtrip.txt";
  v.save(path);
  Vocab loaded = Vocab::load(path);
  REQUIRE(loaded.size() == v.size());
  for (TokenId id = 0; id < v.size(); ++id) CHECK(loaded.id_to_string(id) == v.id_to_string(id));
  CHECK(loaded.sep_id() == v.sep_id());
  std::remove(path.c_str());
}

TEST_CASE("vocab validation") {
  CHECK_THROWS_AS(Vocab::from_entries({"<sos>"}), ParseError);
  CHECK_THROWS_AS(Vocab::from_entries({"<eos>", "<sos>"}), ParseError);
  CHECK_THROWS_AS(Vocab::from_entries({"<sos>", "<eos>", "a", "a"}), ParseError);
  CHECK_THROWS_AS(Vocab::from_entries({"<sos>", "<eos>", ""}), ParseError);
}

TEST_CASE("phrase construction") {
  Vocab v = test_vocab();
  Phrase p = Phrase::from_words({"Quick", "Fox"}, v);
  CHECK(p.words == std::vector<std::string>{"quick", "fox"});
  CHECK(p.length() == 10);  // 5 + <sep> + 3 + <eos>
  CHECK(p.tokens.back() == v.eos_id());
  CHECK(p.match_tokens().size() == 9);

  Phrase e = Phrase::empty(v);
  CHECK(e.is_empty());
  CHECK(e.length() == 1);
  CHECK(e.tokens == std::vector<TokenId>{v.eos_id()});
  CHECK(e.match_tokens().empty());
}

TEST_CASE("label_phrase direct containment") {
  Vocab v = test_vocab();
  Utterance utt = Utterance::make("u1", {"the", "quick", "fox", "ran"}, v);
  CHECK(label_phrase(Phrase::from_words({"quick", "fox"}, v), utt) == 1);
  CHECK(label_phrase(Phrase::from_words({"fox", "quick"}, v), utt) == 0);
  CHECK(label_phrase(Phrase::from_words({"QUICK"}, v), utt) == 1);
  CHECK_THROWS_AS(label_phrase(Phrase::empty(v), utt), InvalidPhraseError);
}

TEST_CASE("label_phrase agrees with sliding-window oracle") {
  Vocab v = test_vocab();
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> ch(0, 2);   // tiny alphabet so matches happen
  std::uniform_int_distribution<int> wl(1, 2);
  std::uniform_int_distribution<int> tl(1, 8);
  std::uniform_int_distribution<int> pl(1, 3);
  auto word = [&] {
    std::string w(wl(rng), 'a');
    for (auto& c : w) c = static_cast<char>('a' + ch(rng));
    return w;
  };
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> transcript(tl(rng));
    for (auto& w : transcript) w = word();
    std::vector<std::string> pw(pl(rng));
    for (auto& w : pw) w = word();
    Utterance utt = Utterance::make("u", transcript, v);
    Phrase p = Phrase::from_words(pw, v);
    CHECK(label_phrase(p, utt) == naive_contains(transcript, p.words));
  }
}

TEST_CASE("label_empty") {
  std::vector<PhraseLabel> all_zero{0, 0, 0};
  std::vector<PhraseLabel> mixed{1, 0};
  std::vector<PhraseLabel> none{};
  CHECK(label_empty(all_zero) == 1);
  CHECK(label_empty(mixed) == 0);
  CHECK(label_empty(none) == 1);
}

TEST_CASE("label_empty complements the max of the other labels") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> n(0, 8), bit(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<PhraseLabel> labels(n(rng));
    for (auto& l : labels) l = bit(rng);
    int mx = 0;
    for (int l : labels) mx = std::max(mx, l);
    CHECK(label_empty(labels) == 1 - mx);
  }
}
