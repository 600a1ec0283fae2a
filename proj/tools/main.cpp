// ctxbias: contextual-biasing pipeline driver.
//
// Subcommands cover the full experiment loop: synth generates a corpus with
// encoder features and biasing lists, train fits the biasing decoder, score
// and filter turn checkpoints into kept-phrase lists, decode runs biased beam
// search over the toy base scorer, and evaluate produces WER/U-WER/B-WER
// reports. Every subcommand accepts --config with flat key=value lines whose
// keys mirror the long option names; explicit flags win over config values.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>

#include "ctxbias/fusion.hpp"
#include "ctxbias/io.hpp"
#include "ctxbias/synth.hpp"
#include "ctxbias/trainer.hpp"
#include "ctxbias/wer.hpp"

namespace {

using namespace ctxbias;

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::vector<Phrase> make_phrases(const std::vector<std::vector<std::string>>& word_lists,
                                 const Vocab& vocab) {
  std::vector<Phrase> out;
  out.reserve(word_lists.size());
  for (const auto& words : word_lists) out.push_back(Phrase::from_words(words, vocab));
  return out;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  SynthConfig config;
  std::string out_dir;
};

int run_synth(const SynthArgs& args) {
  const SynthCorpus corpus = gen_corpus(args.config);
  const std::filesystem::path dir(args.out_dir);
  std::filesystem::create_directories(dir / "features");

  corpus.vocab.save((dir / "vocab.txt").string());
  {
    auto out = detail::open_out((dir / "rare_words.txt").string());
    for (const std::string& w : corpus.rare_pool) out << w << '\n';
  }

  std::vector<CorpusRecord> train_records, test_records;
  const int n_test = args.config.test_utterances;
  const int n_train = args.config.num_utterances - n_test;
  for (int i = 0; i < int(corpus.utterances.size()); ++i) {
    const SynthUtterance& su = corpus.utterances[i];
    CorpusRecord rec;
    rec.id = su.utt.id;
    rec.words = su.utt.words;
    rec.feature_file = "features/" + su.utt.id + ".json";
    rec.base = su.base;
    save_features((dir / rec.feature_file).string(), su.utt.features);
    (i < n_train ? train_records : test_records).push_back(std::move(rec));
  }
  save_corpus((dir / "train.jsonl").string(), train_records);
  save_corpus((dir / "test.jsonl").string(), test_records);

  // Biasing lists for the test split: ground-truth rare words alone, then one
  // list per distractor count with the same ground truth up front.
  auto word_section = [](std::span<const std::string> words) {
    std::vector<std::vector<std::string>> section;
    section.reserve(words.size());
    for (const std::string& w : words) section.push_back({w});
    return section;
  };
  PhraseList gt_list;
  for (int i = n_train; i < int(corpus.utterances.size()); ++i) {
    const SynthUtterance& su = corpus.utterances[i];
    gt_list.sections.emplace_back(su.utt.id, word_section(su.gt_words));
  }
  save_phrase_list((dir / "phrases_gt.txt").string(), gt_list);

  for (int n : args.config.distractor_ns) {
    PhraseList list;
    for (int i = n_train; i < int(corpus.utterances.size()); ++i) {
      const SynthUtterance& su = corpus.utterances[i];
      list.sections.emplace_back(su.utt.id, word_section(corpus.bias_words(su, n)));
    }
    save_phrase_list((dir / ("phrases_n" + std::to_string(n) + ".txt")).string(), list);
  }

  std::cerr << "synth: " << train_records.size() << " train / " << test_records.size()
            << " test utterances in " << args.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string corpus, vocab, out, trace;
  TrainConfig config;
  DecoderConfig decoder;  // vocab_size/enc_dim filled from data
};

int run_train(const TrainArgs& args) {
  const Vocab vocab = Vocab::load(args.vocab);
  const std::vector<CorpusRecord> records = load_corpus(args.corpus);
  if (records.empty()) throw Error("training corpus is empty: " + args.corpus);
  const std::string corpus_dir = parent_dir(args.corpus);

  std::vector<Utterance> utterances;
  utterances.reserve(records.size());
  for (const CorpusRecord& r : records) utterances.push_back(materialize(r, vocab, corpus_dir));

  DecoderConfig dec = args.decoder;
  dec.vocab_size = vocab.size();
  dec.enc_dim = utterances.front().features.dim();

  const TrainResult result =
      train(utterances, vocab, dec, args.config, [](const EpochStats& s) {
        std::fprintf(stderr, "epoch %d  log %.4f  disc %.4f  combined %.4f\n", s.epoch,
                     s.log_loss, s.disc_loss, s.combined);
      });

  if (!args.trace.empty()) save_loss_trace(args.trace, result.trace);
  if (result.diverged) {
    std::cerr << "training diverged: " << result.divergence_reason << "\n";
    return 1;
  }
  save_checkpoint(args.out, result.params);
  std::cerr << "train: saved checkpoint to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// score

struct ScoreArgs {
  std::string corpus, vocab, phrases, checkpoint, out;
  double tol = 0.0;
};

int run_score(const ScoreArgs& args) {
  const Vocab vocab = Vocab::load(args.vocab);
  const DecoderParams params = load_checkpoint(args.checkpoint);
  if (params.config.vocab_size != vocab.size())
    throw ConfigMismatchError("checkpoint vocab size " +
                              std::to_string(params.config.vocab_size) +
                              " does not match vocab file size " + std::to_string(vocab.size()));
  const std::vector<CorpusRecord> records = load_corpus(args.corpus);
  const PhraseList list = load_phrase_list(args.phrases);
  const std::string corpus_dir = parent_dir(args.corpus);

  ScoreTable table;
  table.tol = args.tol;
  for (const CorpusRecord& rec : records) {
    const Utterance utt = materialize(rec, vocab, corpus_dir);
    const auto word_lists = list.for_utterance(utt.id);
    const std::vector<Phrase> phrases = make_phrases(word_lists, vocab);
    const EncoderCache cache = make_encoder_cache(params, utt.features);

    const Phrase empty = Phrase::empty(vocab);
    const double s0 = score_batch(params, cache, std::span<const Phrase>(&empty, 1))[0].per_token;
    const std::vector<ScoredPhrase> scored = score_batch(params, cache, phrases);
    const FilterResult filter = filter_phrases(scored, s0, args.tol);
    std::vector<char> kept(phrases.size(), 0);
    for (int idx : filter.kept) kept[std::size_t(idx) - 1] = 1;

    table.rows.push_back({utt.id, std::string(kEmptyPhraseMarker), s0, s0, true});
    for (std::size_t i = 0; i < phrases.size(); ++i)
      table.rows.push_back({utt.id, join_words(word_lists[i]), scored[i].log_prob,
                            scored[i].per_token, kept[i] != 0});
  }
  save_scores(args.out, table);
  std::cerr << "score: " << table.rows.size() << " rows to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// filter

struct FilterArgs {
  std::string scores, out;
  std::optional<double> tol;
};

int run_filter(const FilterArgs& args) {
  const ScoreTable table = load_scores(args.scores);

  // Rows are grouped by utterance with the empty-phrase row leading each
  // group; a new tol re-thresholds against that row's s0.
  PhraseList list;
  double s0 = 0.0;
  bool have_s0 = false;
  std::vector<std::vector<std::string>>* section = nullptr;
  for (const ScoreRow& row : table.rows) {
    if (row.phrase == kEmptyPhraseMarker) {
      if (list.section_for(row.utt_id))
        throw ParseError(args.scores + ": utterance " + row.utt_id + " appears twice");
      list.sections.emplace_back(row.utt_id, std::vector<std::vector<std::string>>{});
      section = &list.sections.back().second;
      s0 = row.per_token;
      have_s0 = true;
      continue;
    }
    if (!have_s0 || !section || list.sections.back().first != row.utt_id)
      throw ParseError(args.scores + ": missing empty-phrase row before " + row.utt_id);
    const bool keep =
        args.tol ? (*args.tol + row.per_token - s0 >= 0.0) : row.kept;
    if (keep) section->push_back(detail::split_words(row.phrase));
  }
  save_phrase_list(args.out, list);
  std::cerr << "filter: wrote kept phrases to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// decode

struct DecodeArgs {
  std::string corpus, vocab, phrases, checkpoint, out;
  double tol = 0.0;
  int beam = 30;
  int max_len = 0;
};

int run_decode(const DecodeArgs& args) {
  const Vocab vocab = Vocab::load(args.vocab);
  const std::vector<CorpusRecord> records = load_corpus(args.corpus);
  const std::string corpus_dir = parent_dir(args.corpus);

  const bool biased = !args.phrases.empty();
  PhraseList list;
  DecoderParams params;
  if (biased) {
    list = load_phrase_list(args.phrases);
    params = load_checkpoint(args.checkpoint);
    if (params.config.vocab_size != vocab.size())
      throw ConfigMismatchError("checkpoint vocab size does not match vocab file");
  }

  BeamOptions opts;
  opts.beam = args.beam;
  opts.expansions_per_hyp = args.beam;
  opts.max_len = args.max_len;

  std::vector<DecodeRecord> out_records;
  out_records.reserve(records.size());
  for (const CorpusRecord& rec : records) {
    const Utterance utt = materialize(rec, vocab, corpus_dir);
    const ToyBaseScorer base = make_toy_scorer(vocab, utt, rec.base);

    DecodeRecord out;
    out.id = utt.id;
    if (biased) {
      const auto word_lists = list.for_utterance(utt.id);
      const std::vector<Phrase> phrases = make_phrases(word_lists, vocab);
      const DecodeResult result =
          decode_utterance(utt, phrases, params, base, vocab, args.tol, opts);
      out.hypothesis_words = result.words;
      for (int idx : result.filter.kept) out.kept_phrases.push_back(join_words(word_lists[std::size_t(idx) - 1]));
      out.bonus = result.filter.bonus;
      out.base_score = result.best.base_score;
      out.bias_score = result.best.total() - result.best.base_score;
      out.complete = result.complete;
    } else {
      BeamOptions utt_opts = opts;
      if (utt_opts.max_len <= 0) utt_opts.max_len = 2 * utt.features.num_frames() + 8;
      const BeamResult beam = beam_search(base, {}, 0.0, utt_opts);
      const Hypothesis& best = beam.hypotheses.front();
      out.hypothesis_words = detokenize(best.tokens, vocab);
      out.base_score = best.base_score;
      out.complete = beam.complete;
    }
    out_records.push_back(std::move(out));
  }
  save_decodes(args.out, out_records);
  std::cerr << "decode: " << out_records.size() << " utterances to " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string ref, hyp, phrases, out;
};

int run_evaluate(const EvaluateArgs& args) {
  const std::vector<CorpusRecord> refs = load_corpus(args.ref);
  const std::vector<DecodeRecord> hyps = load_decodes(args.hyp);
  const PhraseList list = load_phrase_list(args.phrases);

  std::unordered_map<std::string, const CorpusRecord*> by_id;
  for (const CorpusRecord& r : refs) by_id[r.id] = &r;

  ErrorReport corpus;
  std::vector<UtteranceEval> utts;
  utts.reserve(hyps.size());
  for (const DecodeRecord& hyp : hyps) {
    const auto it = by_id.find(hyp.id);
    if (it == by_id.end())
      throw Error("hypothesis utterance " + hyp.id + " not present in reference corpus");
    std::unordered_set<std::string> bias_words;
    for (const auto& words : list.for_utterance(hyp.id))
      bias_words.insert(words.begin(), words.end());
    const ErrorReport report =
        evaluate_utterance(it->second->words, hyp.hypothesis_words, bias_words);
    corpus += report;
    utts.push_back({hyp.id, report});
  }
  save_report(args.out, corpus, utts);
  std::printf("wer %s  u_wer %s  b_wer %s\n", format_double(corpus.wer()).c_str(),
              format_double(corpus.u_wer()).c_str(), format_double(corpus.b_wer()).c_str());
  return 0;
}

void add_config_support(CLI::App* sub) {
  sub->set_config("--config", "", "Flat key=value file; keys match long option names");
  sub->allow_config_extras(false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contextual-biasing toolkit: phrase scoring, filtering and biased decoding"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic corpus with features");
  synth->add_option("--out-dir", synth_args.out_dir, "Output directory")->required();
  synth->add_option("--seed", synth_args.config.seed);
  synth->add_option("--frequent-words", synth_args.config.frequent_words);
  synth->add_option("--rare-words", synth_args.config.rare_words);
  synth->add_option("--num-utterances", synth_args.config.num_utterances);
  synth->add_option("--test-utterances", synth_args.config.test_utterances);
  synth->add_option("--min-words", synth_args.config.min_words);
  synth->add_option("--max-words", synth_args.config.max_words);
  synth->add_option("--min-chars", synth_args.config.min_chars);
  synth->add_option("--max-chars", synth_args.config.max_chars);
  synth->add_option("--rare-fraction", synth_args.config.rare_fraction);
  synth->add_option("--enc-dim", synth_args.config.enc_dim);
  synth->add_option("--frames-per-token", synth_args.config.frames_per_token);
  synth->add_option("--sigma", synth_args.config.sigma);
  synth->add_option("--rho", synth_args.config.rho);
  synth->add_option("--frequent-rho-scale", synth_args.config.frequent_rho_scale);
  synth->add_option("--ref-share", synth_args.config.ref_share);
  synth->add_option("--confusion-words", synth_args.config.confusion_words_per_utt);
  add_config_support(synth);

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "Train the biasing decoder");
  train_cmd->add_option("--corpus", train_args.corpus, "Training corpus JSONL")->required();
  train_cmd->add_option("--vocab", train_args.vocab, "Vocab file")->required();
  train_cmd->add_option("--out", train_args.out, "Checkpoint output path")->required();
  train_cmd->add_option("--trace", train_args.trace, "Loss trace CSV output path");
  train_cmd->add_option("--beta", train_args.config.beta);
  train_cmd->add_option("--epochs", train_args.config.epochs);
  train_cmd->add_option("--lr", train_args.config.lr);
  train_cmd->add_option("--minibatch", train_args.config.minibatch_size);
  train_cmd->add_option("--seed", train_args.config.seed);
  train_cmd->add_option("--model-dim", train_args.decoder.model_dim);
  train_cmd->add_option("--num-heads", train_args.decoder.num_heads);
  train_cmd->add_option("--num-layers", train_args.decoder.num_layers);
  train_cmd->add_option("--ffn-dim", train_args.decoder.ffn_dim);
  add_config_support(train_cmd);

  ScoreArgs score_args;
  CLI::App* score = app.add_subcommand("score", "Score a biasing list against a corpus");
  score->add_option("--corpus", score_args.corpus)->required();
  score->add_option("--vocab", score_args.vocab)->required();
  score->add_option("--phrases", score_args.phrases)->required();
  score->add_option("--checkpoint", score_args.checkpoint)->required();
  score->add_option("--out", score_args.out, "Score TSV output path")->required();
  score->add_option("--tol", score_args.tol, "Filter tolerance");
  add_config_support(score);

  FilterArgs filter_args;
  double filter_tol = 0.0;
  CLI::App* filter = app.add_subcommand("filter", "Turn a score TSV into a kept-phrase list");
  filter->add_option("--scores", filter_args.scores)->required();
  filter->add_option("--out", filter_args.out, "Phrase list output path")->required();
  CLI::Option* tol_opt = filter->add_option("--tol", filter_tol, "Re-threshold with a new tolerance");
  add_config_support(filter);

  DecodeArgs decode_args;
  CLI::App* decode = app.add_subcommand("decode", "Beam-search decode with optional biasing");
  decode->add_option("--corpus", decode_args.corpus)->required();
  decode->add_option("--vocab", decode_args.vocab)->required();
  decode->add_option("--phrases", decode_args.phrases, "Biasing list; omit for unbiased decoding");
  decode->add_option("--checkpoint", decode_args.checkpoint);
  decode->add_option("--out", decode_args.out, "Decode JSONL output path")->required();
  decode->add_option("--tol", decode_args.tol);
  decode->add_option("--beam", decode_args.beam);
  decode->add_option("--max-len", decode_args.max_len, "0 derives a budget from the frame count");
  add_config_support(decode);

  EvaluateArgs eval_args;
  CLI::App* evaluate = app.add_subcommand("evaluate", "Score hypotheses against references");
  evaluate->add_option("--ref", eval_args.ref, "Reference corpus JSONL")->required();
  evaluate->add_option("--hyp", eval_args.hyp, "Decode JSONL")->required();
  evaluate->add_option("--phrases", eval_args.phrases, "Biasing list defining B-WER words")->required();
  evaluate->add_option("--out", eval_args.out, "Report JSON output path")->required();
  add_config_support(evaluate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      synth_args.config.validate();
      return run_synth(synth_args);
    }
    if (*train_cmd) return run_train(train_args);
    if (*score) return run_score(score_args);
    if (*filter) {
      if (tol_opt->count() > 0) filter_args.tol = filter_tol;
      return run_filter(filter_args);
    }
    if (*decode) {
      if (!decode_args.phrases.empty() && decode_args.checkpoint.empty()) {
        std::cerr << "decode with --phrases requires --checkpoint\n"
                  << decode->help() << "\n";
        return 2;
      }
      return run_decode(decode_args);
    }
    if (*evaluate) return run_evaluate(eval_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
