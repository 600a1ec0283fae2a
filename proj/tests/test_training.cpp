#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "ctxbias/gradients.hpp"
#include "ctxbias/losses.hpp"
#include "ctxbias/trainer.hpp"

using namespace ctxbias;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> xs) {
  Eigen::VectorXd v(Eigen::Index(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

Phrase raw_phrase(std::initializer_list<TokenId> body) {
  Phrase p;
  p.tokens.assign(body.begin(), body.end());
  p.tokens.push_back(kEosId);
  return p;
}

Phrase raw_empty() {
  Phrase p;
  p.tokens = {kEosId};
  return p;
}

EncoderFeatures random_features(std::mt19937_64& rng, int frames, int dim) {
  std::normal_distribution<double> n;
  EncoderFeatures f;
  f.frames.resize(frames, dim);
  for (int r = 0; r < frames; ++r)
    for (int c = 0; c < dim; ++c) f.frames(r, c) = n(rng);
  return f;
}

double batch_loss(const DecoderParams& params, const EncoderFeatures& feats,
                  const std::vector<Phrase>& phrases, const std::vector<PhraseLabel>& labels,
                  double beta) {
  const EncoderCache cache = make_encoder_cache(params, feats);
  const auto scored = score_batch(params, cache, phrases);
  return compute_losses(scored, labels, beta).combined;
}

std::vector<Eigen::MatrixXd*> mutable_tensors(DecoderParams& p) {
  std::vector<Eigen::MatrixXd*> out;
  p.for_each_tensor([&](const std::string&, Eigen::MatrixXd& m) { out.push_back(&m); });
  return out;
}

}  // namespace

TEST_CASE("log loss sums negated log-probs of positive phrases") {
  REQUIRE(log_loss(vec({-0.5, -2.3}), std::vector<PhraseLabel>{1, 1}) == Catch::Approx(2.3));
  REQUIRE(log_loss(vec({-0.5, -2.3, -4.0}), std::vector<PhraseLabel>{1, 0, 0}) == 0.0);
  REQUIRE(log_loss(vec({-0.5, -1.0, -2.0}), std::vector<PhraseLabel>{0, 1, 1}) ==
          Catch::Approx(3.0));
}

TEST_CASE("disc loss on pinned cases") {
  // Two equal scores, one positive: softmax is 1/2 each.
  REQUIRE(disc_loss(vec({-1.3, -1.3}), std::vector<PhraseLabel>{0, 1}) ==
          Catch::Approx(std::log(2.0)).margin(1e-12));
  // Saturated: the empty phrase towers over everything else.
  REQUIRE(disc_loss(vec({0.0, -100.0, -100.0}), std::vector<PhraseLabel>{1, 0, 0}) < 1e-6);
}

TEST_CASE("disc loss equals the brute-force formula") {
  std::mt19937_64 rng(71);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 200; ++trial) {
    const int m1 = 2 + int(rng() % 6);
    Eigen::VectorXd s(m1);
    std::vector<PhraseLabel> l(m1);
    for (int i = 0; i < m1; ++i) {
      s[i] = 2.0 * n(rng);
      l[i] = int(rng() % 2);
    }
    double lse = 0.0;
    for (int i = 0; i < m1; ++i) lse += std::exp(s[i]);
    lse = std::log(lse);
    double want = 0.0;
    for (int i = 0; i < m1; ++i) want -= double(l[i]) * (s[i] - lse);
    REQUIRE(disc_loss(s, l) == Catch::Approx(want).margin(1e-12));
    REQUIRE(disc_loss(s, l) >= 0.0);

    // Shift invariance and the closed-form gradient's zero sum.
    REQUIRE(disc_loss((s.array() + 17.5).matrix(), l) ==
            Catch::Approx(disc_loss(s, l)).margin(1e-9));
    const Eigen::VectorXd g = disc_loss_grad(s, l);
    REQUIRE(std::abs(g.sum()) < 1e-12);
  }
}

TEST_CASE("disc loss gradient matches scalar finite differences") {
  const Eigen::VectorXd s0 = vec({0.3, -1.2, 0.8, -0.1});
  const std::vector<PhraseLabel> l{1, 0, 1, 0};
  const Eigen::VectorXd g = disc_loss_grad(s0, l);
  const double eps = 1e-6;
  for (int i = 0; i < 4; ++i) {
    Eigen::VectorXd sp = s0, sm = s0;
    sp[i] += eps;
    sm[i] -= eps;
    const double fd = (disc_loss(sp, l) - disc_loss(sm, l)) / (2.0 * eps);
    REQUIRE(g[i] == Catch::Approx(fd).margin(1e-8));
  }
}

TEST_CASE("combined loss endpoints and weighting") {
  REQUIRE(combined_loss(2.0, 1.0, 0.0) == 2.0);
  REQUIRE(combined_loss(2.0, 1.0, 1.0) == 1.0);
  REQUIRE(combined_loss(2.0, 1.0, 0.9) == Catch::Approx(1.1));
  REQUIRE_THROWS_AS(combined_loss(1.0, 1.0, -0.1), ConfigMismatchError);
  REQUIRE_THROWS_AS(combined_loss(1.0, 1.0, 1.5), ConfigMismatchError);

  // Convexity keeps the combination between the endpoint losses.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const double a = 5.0 * u(rng), b = 5.0 * u(rng), beta = u(rng);
    const double c = combined_loss(a, b, beta);
    REQUIRE(c >= std::min(a, b) - 1e-12);
    REQUIRE(c <= std::max(a, b) + 1e-12);
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  const double betas[] = {0.0, 0.3, 0.5, 0.9, 1.0};
  double worst = 0.0;
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    DecoderConfig cfg;
    cfg.vocab_size = 6;
    cfg.enc_dim = 5;
    cfg.model_dim = 8;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.ffn_dim = 12;
    DecoderParams params = DecoderParams::init(cfg, rng());
    const EncoderFeatures feats = random_features(rng, 4, cfg.enc_dim);
    const double beta = betas[seed];

    std::vector<Phrase> phrases{raw_empty()};
    std::vector<PhraseLabel> labels{0};
    for (int i = 0; i < 3; ++i) {
      Phrase p;
      const int len = 1 + int(rng() % 3);
      for (int t = 0; t < len; ++t) p.tokens.push_back(TokenId(2 + rng() % 4));
      p.tokens.push_back(kEosId);
      phrases.push_back(p);
      labels.push_back(int(rng() % 2));
    }
    PhraseLabel any = 0;
    for (std::size_t i = 1; i < labels.size(); ++i) any = std::max(any, labels[i]);
    labels[0] = 1 - any;

    DecoderParams grads = DecoderParams::zeros(cfg);
    {
      const EncoderCache cache = make_encoder_cache(params, feats);
      loss_gradients(params, cache, phrases, labels, beta, grads);
    }

    auto ps = mutable_tensors(params);
    auto gs = mutable_tensors(grads);
    const double eps = 1e-4;
    for (std::size_t ti = 0; ti < ps.size(); ++ti) {
      Eigen::MatrixXd& t = *ps[ti];
      for (Eigen::Index r = 0; r < t.rows(); ++r) {
        for (Eigen::Index c = 0; c < t.cols(); ++c) {
          const double orig = t(r, c);
          t(r, c) = orig + eps;
          const double lp = batch_loss(params, feats, phrases, labels, beta);
          t(r, c) = orig - eps;
          const double lm = batch_loss(params, feats, phrases, labels, beta);
          t(r, c) = orig;
          const double fd = (lp - lm) / (2.0 * eps);
          const double an = (*gs[ti])(r, c);
          const double rel =
              std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
          worst = std::max(worst, rel);
        }
      }
    }
  }
  INFO("worst relative error " << worst);
  REQUIRE(worst < 1e-4);
}

TEST_CASE("log-loss gradients are additive over duplicated phrases") {
  // At beta = 0 the loss decomposes per positive phrase, so a batch with a
  // duplicate equals the sum of batches holding single instances.
  std::mt19937_64 rng(55);
  DecoderConfig cfg;
  cfg.vocab_size = 6;
  cfg.enc_dim = 4;
  cfg.model_dim = 8;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.ffn_dim = 10;
  const DecoderParams params = DecoderParams::init(cfg, 8);
  const EncoderFeatures feats = random_features(rng, 3, cfg.enc_dim);
  const EncoderCache cache = make_encoder_cache(params, feats);

  const Phrase a = raw_phrase({2, 3});
  const Phrase q = raw_phrase({4});

  DecoderParams dup = DecoderParams::zeros(cfg);
  loss_gradients(params, cache, std::vector<Phrase>{raw_empty(), a, q, q},
                 std::vector<PhraseLabel>{0, 1, 1, 1}, 0.0, dup);

  DecoderParams parts = DecoderParams::zeros(cfg);
  loss_gradients(params, cache, std::vector<Phrase>{raw_empty(), a, q},
                 std::vector<PhraseLabel>{0, 1, 1}, 0.0, parts);
  loss_gradients(params, cache, std::vector<Phrase>{raw_empty(), q},
                 std::vector<PhraseLabel>{0, 1}, 0.0, parts);

  auto want = mutable_tensors(parts);
  auto got = mutable_tensors(dup);
  for (std::size_t i = 0; i < want.size(); ++i)
    REQUIRE((want[i]->array() - got[i]->array()).abs().maxCoeff() < 1e-9);
}

TEST_CASE("no positive phrases and beta zero give a zero gradient") {
  std::mt19937_64 rng(66);
  DecoderConfig cfg;
  cfg.vocab_size = 5;
  cfg.enc_dim = 3;
  cfg.model_dim = 4;
  cfg.num_heads = 2;
  cfg.num_layers = 1;
  cfg.ffn_dim = 6;
  const DecoderParams params = DecoderParams::init(cfg, 10);
  const EncoderFeatures feats = random_features(rng, 3, cfg.enc_dim);
  const EncoderCache cache = make_encoder_cache(params, feats);

  DecoderParams grads = DecoderParams::zeros(cfg);
  const LossReport r =
      loss_gradients(params, cache, std::vector<Phrase>{raw_empty(), raw_phrase({2, 3})},
                     std::vector<PhraseLabel>{1, 0}, 0.0, grads);
  REQUIRE(r.log_loss == 0.0);
  grads.for_each_tensor([](const std::string&, const Eigen::MatrixXd& g) {
    REQUIRE(g.cwiseAbs().maxCoeff() == 0.0);
  });
}

TEST_CASE("phrase windows are sampled uniformly") {
  const Vocab vocab = Vocab::chars("abcdefghijklmnopqrstuvwxyz");
  const Utterance utt =
      Utterance::make("u1", {"alpha", "bravo", "charlie", "delta", "echo"}, vocab);

  std::mt19937_64 rng(2024);
  std::map<std::string, int> counts;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) counts[sample_transcript_phrase(utt, vocab, rng).text()]++;

  // 5 + 4 + 3 windows of lengths 1..3.
  REQUIRE(counts.size() == 12);
  const double p = 1.0 / 12.0;
  const double sigma = std::sqrt(draws * p * (1.0 - p));
  for (const auto& [text, n] : counts) {
    INFO(text << " drawn " << n << " times");
    REQUIRE(std::abs(n - draws * p) <= 3.0 * sigma);
  }

  const Utterance single = Utterance::make("u2", {"word"}, vocab);
  for (int i = 0; i < 3; ++i)
    REQUIRE(sample_transcript_phrase(single, vocab, rng).text() == "word");

  const Utterance none = Utterance::make("u3", {}, vocab);
  REQUIRE_THROWS_AS(sample_transcript_phrase(none, vocab, rng), InvalidPhraseError);
}

TEST_CASE("phrase pool carries three tagged entries per utterance") {
  const Vocab vocab = Vocab::chars("abcdefghijklmnopqrstuvwxyz");
  std::vector<Utterance> batch{
      Utterance::make("a", {"one", "two"}, vocab),
      Utterance::make("b", {"three"}, vocab),
      Utterance::make("c", {"four", "five", "six"}, vocab),
  };
  std::mt19937_64 rng(3);
  const PhrasePool pool = sample_phrase_pool(batch, vocab, rng);
  REQUIRE(pool.size() == 9);
  for (const auto& entry : pool) {
    REQUIRE((entry.source_id == "a" || entry.source_id == "b" || entry.source_id == "c"));
    REQUIRE(!entry.phrase.is_empty());
  }
}

TEST_CASE("assembled batches label phrases against the transcript") {
  const Vocab vocab = Vocab::chars("abcdefghijklmnopqrstuvwxyz");
  const Utterance u1 = Utterance::make("u1", {"red", "green", "blue"}, vocab);
  const Utterance u2 = Utterance::make("u2", {"green", "blue", "yellow"}, vocab);
  std::mt19937_64 rng(9);

  PhrasePool pool;
  pool.push_back({Phrase::from_words({"red"}, vocab), "u1"});
  pool.push_back({Phrase::from_words({"green", "blue"}, vocab), "u2"});  // also in u1
  pool.push_back({Phrase::from_words({"yellow"}, vocab), "u2"});

  for (int trial = 0; trial < 20; ++trial) {
    const PhraseBatch batch = assemble_batch(u1, pool, vocab, rng, 8);
    REQUIRE(batch.phrases.size() == 9);  // empty phrase + 8 sampled
    REQUIRE(batch.labels.size() == 9);
    REQUIRE(batch.phrases[0].is_empty());
    REQUIRE(batch.labels[1] == 1);  // own phrase is a transcript substring
    for (std::size_t i = 1; i < batch.phrases.size(); ++i) {
      const std::string t = batch.phrases[i].text();
      if (t == "green blue") REQUIRE(batch.labels[i] == 1);
      if (t == "yellow") REQUIRE(batch.labels[i] == 0);
    }
    PhraseLabel any = 0;
    for (std::size_t i = 1; i < batch.labels.size(); ++i) any = std::max(any, batch.labels[i]);
    REQUIRE(batch.labels[0] == 1 - any);
  }

  // All-distractor batches exist for an utterance whose pool phrases never
  // hit the transcript; its empty-phrase label must be 1.
  PhrasePool foreign;
  foreign.push_back({Phrase::from_words({"nothing"}, vocab), "u1"});
  foreign.push_back({Phrase::from_words({"yellow"}, vocab), "u2"});
  const Utterance plain = Utterance::make("u1", {"purple", "orange"}, vocab);
  const PhraseBatch all_distractor = assemble_batch(plain, foreign, vocab, rng, 4);
  for (std::size_t i = 1; i < all_distractor.labels.size(); ++i)
    REQUIRE(all_distractor.labels[i] == 0);
  REQUIRE(all_distractor.labels[0] == 1);
}

TEST_CASE("adam takes a bias-corrected first step") {
  DecoderConfig cfg;
  cfg.vocab_size = 3;
  cfg.enc_dim = 2;
  cfg.model_dim = 2;
  cfg.num_heads = 1;
  cfg.num_layers = 1;
  cfg.ffn_dim = 2;
  DecoderParams params = DecoderParams::zeros(cfg);
  DecoderParams grads = DecoderParams::zeros(cfg);
  grads.embed(0, 0) = 1.0;

  TrainConfig tc;
  tc.lr = 1e-3;
  AdamState state = AdamState::zeros(cfg);
  adam_step(params, grads, state, tc);

  // m-hat = 1, v-hat = 1, so the step is lr / (1 + eps).
  REQUIRE(params.embed(0, 0) == Catch::Approx(-1e-3).epsilon(1e-6));
  REQUIRE(params.embed(0, 1) == 0.0);
  REQUIRE(state.step == 1);
}

TEST_CASE("training reduces the loss and is reproducible") {
  const Vocab vocab = Vocab::chars("abcdefghijklmnopqrstuvwxyz");
  std::mt19937_64 rng(40);
  std::vector<Utterance> corpus;
  const std::vector<std::vector<std::string>> transcripts{
      {"cat", "dog"}, {"fish", "bird"}, {"cow", "pig", "hen"}, {"ant", "bee"}};
  for (std::size_t i = 0; i < transcripts.size(); ++i)
    corpus.push_back(Utterance::make("utt" + std::to_string(i), transcripts[i], vocab,
                                     random_features(rng, 3, 4)));

  DecoderConfig dcfg;
  dcfg.vocab_size = vocab.size();
  dcfg.enc_dim = 4;
  dcfg.model_dim = 8;
  dcfg.num_heads = 2;
  dcfg.num_layers = 1;
  dcfg.ffn_dim = 12;

  TrainConfig tcfg;
  tcfg.beta = 0.9;
  tcfg.phrases_per_utterance = 6;
  tcfg.epochs = 12;
  tcfg.minibatch_size = 2;
  tcfg.seed = 17;

  const TrainResult run1 = train(corpus, vocab, dcfg, tcfg);
  REQUIRE(!run1.diverged);
  REQUIRE(run1.trace.size() == 12);
  REQUIRE(run1.trace.back().combined < run1.trace.front().combined);

  const TrainResult run2 = train(corpus, vocab, dcfg, tcfg);
  for (std::size_t e = 0; e < run1.trace.size(); ++e) {
    REQUIRE(run1.trace[e].log_loss == run2.trace[e].log_loss);
    REQUIRE(run1.trace[e].disc_loss == run2.trace[e].disc_loss);
    REQUIRE(run1.trace[e].combined == run2.trace[e].combined);
  }
  const auto t1 = detail::tensor_list(run1.params);
  const auto t2 = detail::tensor_list(run2.params);
  for (std::size_t i = 0; i < t1.size(); ++i)
    REQUIRE((t1[i]->array() == t2[i]->array()).all());
}

TEST_CASE("zero learning rate leaves the initialization untouched") {
  const Vocab vocab = Vocab::chars("abcdefghijklmnopqrstuvwxyz");
  std::mt19937_64 rng(41);
  std::vector<Utterance> corpus{
      Utterance::make("a", {"cat"}, vocab, random_features(rng, 2, 4)),
      Utterance::make("b", {"dog", "cow"}, vocab, random_features(rng, 2, 4))};

  DecoderConfig dcfg;
  dcfg.vocab_size = vocab.size();
  dcfg.enc_dim = 4;
  dcfg.model_dim = 4;
  dcfg.num_heads = 2;
  dcfg.num_layers = 1;
  dcfg.ffn_dim = 6;

  TrainConfig tcfg;
  tcfg.epochs = 3;
  tcfg.phrases_per_utterance = 4;
  tcfg.minibatch_size = 2;
  tcfg.seed = 23;
  tcfg.lr = 0.0;

  const TrainResult run = train(corpus, vocab, dcfg, tcfg);
  const DecoderParams fresh = DecoderParams::init(dcfg, tcfg.seed);
  const auto got = detail::tensor_list(run.params);
  const auto want = detail::tensor_list(fresh);
  for (std::size_t i = 0; i < got.size(); ++i)
    REQUIRE((got[i]->array() == want[i]->array()).all());
}

TEST_CASE("training input validation") {
  const Vocab vocab = Vocab::chars("ab");
  DecoderConfig dcfg;
  dcfg.vocab_size = vocab.size();
  dcfg.enc_dim = 2;

  TrainConfig tcfg;
  REQUIRE_THROWS_AS(train({}, vocab, dcfg, tcfg), ConfigMismatchError);

  TrainConfig bad = tcfg;
  bad.beta = 2.0;
  std::mt19937_64 rng(1);
  std::vector<Utterance> corpus{Utterance::make("a", {"a"}, vocab, random_features(rng, 2, 2))};
  REQUIRE_THROWS_AS(train(corpus, vocab, dcfg, bad), ConfigMismatchError);

  bad = tcfg;
  bad.phrases_per_utterance = 1;
  REQUIRE_THROWS_AS(train(corpus, vocab, dcfg, bad), ConfigMismatchError);
}
