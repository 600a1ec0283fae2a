#pragma once

// File formats for the pipeline: corpus JSONL, phrase-list text files,
// loss-trace CSV, score TSV, decode JSONL, and the evaluation report. Every
// writer has a matching reader, numbers are written with shortest
// round-trip formatting, and all readers validate what they parse.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ctxbias/core.hpp"
#include "ctxbias/synth.hpp"
#include "ctxbias/tensor_io.hpp"
#include "ctxbias/trainer.hpp"
#include "ctxbias/wer.hpp"

namespace ctxbias {

// ---------------------------------------------------------------------------
// Number formatting

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ParseError("bad floating-point value: '" + std::string(s) + "'");
  return v;
}

inline std::int64_t parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ParseError("bad integer value: '" + std::string(s) + "'");
  return v;
}

namespace detail {

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      return out;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::vector<std::string> split_words(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream in{std::string(line)};
  std::string w;
  while (in >> w) out.push_back(std::move(w));
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file: " + path);
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write file: " + path);
  return out;
}

inline std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace detail

/// Directory containing a file, for resolving paths stored relative to it.
inline std::string parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  return parent.empty() ? std::string(".") : parent.string();
}

// ---------------------------------------------------------------------------
// Corpus JSONL

/// One corpus line: transcript, a relative path to the encoder features, and
/// the toy base model needed to decode the utterance later.
struct CorpusRecord {
  std::string id;
  std::vector<std::string> words;
  std::string feature_file;
  BaseInfo base;
};

inline void save_corpus(const std::string& path, std::span<const CorpusRecord> records) {
  auto out = detail::open_out(path);
  for (const CorpusRecord& r : records) {
    nlohmann::json line;
    line["id"] = r.id;
    line["words"] = r.words;
    line["feature_file"] = r.feature_file;
    nlohmann::json base;
    base["rho"] = r.base.rho;
    base["ref_share"] = r.base.ref_share;
    base["confusion_words"] = r.base.confusion_words;
    base["substitutions"] = nlohmann::json::array();
    for (const auto& [idx, word] : r.base.substitutions)
      base["substitutions"].push_back({idx, word});
    line["base"] = std::move(base);
    out << line.dump() << '\n';
  }
}

inline std::vector<CorpusRecord> load_corpus(const std::string& path) {
  auto in = detail::open_in(path);
  std::vector<CorpusRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(std::move(line));
    if (line.empty()) continue;
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    try {
      CorpusRecord r;
      r.id = doc.at("id").get<std::string>();
      r.words = doc.at("words").get<std::vector<std::string>>();
      r.feature_file = doc.at("feature_file").get<std::string>();
      const auto& base = doc.at("base");
      r.base.rho = base.at("rho").get<double>();
      r.base.ref_share = base.at("ref_share").get<double>();
      r.base.confusion_words = base.at("confusion_words").get<std::vector<std::string>>();
      for (const auto& sub : base.at("substitutions"))
        r.base.substitutions.emplace_back(sub.at(0).get<int>(), sub.at(1).get<std::string>());
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": missing corpus field: " +
                       e.what());
    }
  }
  return records;
}

/// Loads the referenced feature file and builds the runtime utterance.
inline Utterance materialize(const CorpusRecord& record, const Vocab& vocab,
                             const std::string& corpus_dir) {
  EncoderFeatures feats =
      load_features((std::filesystem::path(corpus_dir) / record.feature_file).string());
  return Utterance::make(record.id, record.words, vocab, std::move(feats));
}

// ---------------------------------------------------------------------------
// Phrase lists

/// Text phrase list: one space-separated phrase per line. Lines before the
/// first `#utt <id>` header apply to every utterance; each section's lines
/// apply only to that utterance. Everything is lowercased on load.
struct PhraseList {
  std::vector<std::vector<std::string>> global;
  std::vector<std::pair<std::string, std::vector<std::vector<std::string>>>> sections;

  const std::vector<std::vector<std::string>>* section_for(const std::string& id) const {
    for (const auto& [sid, phrases] : sections)
      if (sid == id) return &phrases;
    return nullptr;
  }

  /// Global phrases followed by the utterance's own section, if any.
  std::vector<std::vector<std::string>> for_utterance(const std::string& id) const {
    std::vector<std::vector<std::string>> out = global;
    if (const auto* own = section_for(id)) out.insert(out.end(), own->begin(), own->end());
    return out;
  }
};

inline constexpr std::string_view kUttHeader = "#utt ";

inline void save_phrase_list(const std::string& path, const PhraseList& list) {
  auto out = detail::open_out(path);
  auto write_block = [&](const std::vector<std::vector<std::string>>& phrases) {
    for (const auto& words : phrases) {
      if (words.empty()) throw InvalidPhraseError("phrase list cannot contain empty phrases");
      for (std::size_t i = 0; i < words.size(); ++i) out << (i ? " " : "") << words[i];
      out << '\n';
    }
  };
  write_block(list.global);
  for (const auto& [id, phrases] : list.sections) {
    out << kUttHeader << id << '\n';
    write_block(phrases);
  }
}

inline PhraseList load_phrase_list(const std::string& path) {
  auto in = detail::open_in(path);
  PhraseList list;
  std::vector<std::vector<std::string>>* block = &list.global;
  bool in_section = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(std::move(line));
    if (line.starts_with(kUttHeader)) {
      std::string id = line.substr(kUttHeader.size());
      if (id.empty())
        throw ParseError(path + ":" + std::to_string(lineno) + ": #utt header without an id");
      if (list.section_for(id))
        throw ParseError(path + ":" + std::to_string(lineno) + ": duplicate section: " + id);
      list.sections.emplace_back(std::move(id), std::vector<std::vector<std::string>>{});
      block = &list.sections.back().second;
      in_section = true;
      continue;
    }
    std::vector<std::string> words = detail::split_words(line);
    if (words.empty()) {
      if (in_section)
        throw ParseError(path + ":" + std::to_string(lineno) + ": empty line inside a section");
      continue;
    }
    for (auto& w : words) w = lowercased(w);
    block->push_back(std::move(words));
  }
  return list;
}

// ---------------------------------------------------------------------------
// Loss trace CSV

inline void save_loss_trace(const std::string& path, std::span<const EpochStats> trace) {
  auto out = detail::open_out(path);
  out << "epoch,log_loss,disc_loss,combined\n";
  for (const EpochStats& s : trace)
    out << s.epoch << ',' << format_double(s.log_loss) << ',' << format_double(s.disc_loss)
        << ',' << format_double(s.combined) << '\n';
}

inline std::vector<EpochStats> load_loss_trace(const std::string& path) {
  auto in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line) || detail::strip_cr(line) != "epoch,log_loss,disc_loss,combined")
    throw ParseError(path + ": bad loss trace header");
  std::vector<EpochStats> trace;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(std::move(line));
    if (line.empty()) continue;
    const auto cells = detail::split(line, ',');
    if (cells.size() != 4)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 4 columns");
    EpochStats s;
    s.epoch = static_cast<int>(parse_int(cells[0]));
    s.log_loss = parse_double(cells[1]);
    s.disc_loss = parse_double(cells[2]);
    s.combined = parse_double(cells[3]);
    trace.push_back(s);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Score TSV

inline constexpr std::string_view kEmptyPhraseMarker = "<empty>";

/// One scored (utterance, phrase) pair; the empty-phrase row anchors s0 and
/// is definitionally kept.
struct ScoreRow {
  std::string utt_id;
  std::string phrase;  // kEmptyPhraseMarker for the s0 row
  double log_prob = 0.0;
  double per_token = 0.0;
  bool kept = false;
};

struct ScoreTable {
  double tol = 0.0;
  std::vector<ScoreRow> rows;
};

inline void save_scores(const std::string& path, const ScoreTable& table) {
  auto out = detail::open_out(path);
  out << "# tol " << format_double(table.tol) << '\n';
  out << "utt_id\tphrase\tlog_prob\tper_token_score\tkept\n";
  for (const ScoreRow& r : table.rows)
    out << r.utt_id << '\t' << r.phrase << '\t' << format_double(r.log_prob) << '\t'
        << format_double(r.per_token) << '\t' << (r.kept ? 1 : 0) << '\n';
}

inline ScoreTable load_scores(const std::string& path) {
  auto in = detail::open_in(path);
  ScoreTable table;
  std::string line;
  if (!std::getline(in, line) || !detail::strip_cr(line).starts_with("# tol "))
    throw ParseError(path + ": missing tol header");
  table.tol = parse_double(std::string_view(detail::strip_cr(line)).substr(6));
  if (!std::getline(in, line) ||
      detail::strip_cr(line) != "utt_id\tphrase\tlog_prob\tper_token_score\tkept")
    throw ParseError(path + ": bad score column header");
  int lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(std::move(line));
    if (line.empty()) continue;
    const auto cells = detail::split(line, '\t');
    if (cells.size() != 5)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 5 columns");
    ScoreRow r;
    r.utt_id = cells[0];
    r.phrase = cells[1];
    r.log_prob = parse_double(cells[2]);
    r.per_token = parse_double(cells[3]);
    const std::int64_t kept = parse_int(cells[4]);
    if (kept != 0 && kept != 1)
      throw ParseError(path + ":" + std::to_string(lineno) + ": kept flag must be 0 or 1");
    r.kept = kept == 1;
    table.rows.push_back(std::move(r));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Decode JSONL

struct DecodeRecord {
  std::string id;
  std::vector<std::string> hypothesis_words;
  std::vector<std::string> kept_phrases;
  double bonus = 0.0;
  double base_score = 0.0;
  double bias_score = 0.0;
  bool complete = true;
};

inline void save_decodes(const std::string& path, std::span<const DecodeRecord> records) {
  auto out = detail::open_out(path);
  for (const DecodeRecord& r : records) {
    nlohmann::json line;
    line["id"] = r.id;
    line["hypothesis_words"] = r.hypothesis_words;
    line["kept_phrases"] = r.kept_phrases;
    line["bonus"] = r.bonus;
    line["base_score"] = r.base_score;
    line["bias_score"] = r.bias_score;
    line["complete"] = r.complete;
    out << line.dump() << '\n';
  }
}

inline std::vector<DecodeRecord> load_decodes(const std::string& path) {
  auto in = detail::open_in(path);
  std::vector<DecodeRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::strip_cr(std::move(line));
    if (line.empty()) continue;
    try {
      const nlohmann::json doc = nlohmann::json::parse(line);
      DecodeRecord r;
      r.id = doc.at("id").get<std::string>();
      r.hypothesis_words = doc.at("hypothesis_words").get<std::vector<std::string>>();
      r.kept_phrases = doc.at("kept_phrases").get<std::vector<std::string>>();
      r.bonus = doc.at("bonus").get<double>();
      r.base_score = doc.at("base_score").get<double>();
      r.bias_score = doc.at("bias_score").get<double>();
      r.complete = doc.at("complete").get<bool>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad decode record: " + e.what());
    }
  }
  return records;
}

// ---------------------------------------------------------------------------
// Evaluation report JSON

struct UtteranceEval {
  std::string id;
  ErrorReport report;
};

namespace detail {

inline nlohmann::json rate_json(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

inline nlohmann::json counts_json(const OpCounts& c) {
  nlohmann::json j;
  j["matches"] = c.matches;
  j["substitutions"] = c.substitutions;
  j["deletions"] = c.deletions;
  j["insertions"] = c.insertions;
  return j;
}

inline OpCounts counts_from_json(const nlohmann::json& j) {
  OpCounts c;
  c.matches = j.at("matches").get<std::int64_t>();
  c.substitutions = j.at("substitutions").get<std::int64_t>();
  c.deletions = j.at("deletions").get<std::int64_t>();
  c.insertions = j.at("insertions").get<std::int64_t>();
  return c;
}

inline nlohmann::json report_json(const ErrorReport& r) {
  nlohmann::json j;
  j["wer"] = rate_json(r.wer());
  j["u_wer"] = rate_json(r.u_wer());
  j["b_wer"] = rate_json(r.b_wer());
  j["counts"]["biased"] = counts_json(r.biased);
  j["counts"]["unbiased"] = counts_json(r.unbiased);
  return j;
}

inline ErrorReport report_from_json(const nlohmann::json& j) {
  ErrorReport r;
  r.biased = counts_from_json(j.at("counts").at("biased"));
  r.unbiased = counts_from_json(j.at("counts").at("unbiased"));
  return r;
}

}  // namespace detail

inline void save_report(const std::string& path, const ErrorReport& corpus,
                        std::span<const UtteranceEval> utterances) {
  nlohmann::json doc = detail::report_json(corpus);
  doc["utterances"] = nlohmann::json::array();
  for (const UtteranceEval& u : utterances) {
    nlohmann::json j = detail::report_json(u.report);
    j["id"] = u.id;
    doc["utterances"].push_back(std::move(j));
  }
  auto out = detail::open_out(path);
  out << doc.dump(2) << '\n';
}

inline std::pair<ErrorReport, std::vector<UtteranceEval>> load_report(const std::string& path) {
  auto in = detail::open_in(path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": bad report JSON: " + e.what());
  }
  try {
    ErrorReport corpus = detail::report_from_json(doc);
    std::vector<UtteranceEval> utts;
    for (const auto& j : doc.at("utterances"))
      utts.push_back({j.at("id").get<std::string>(), detail::report_from_json(j)});
    return {corpus, std::move(utts)};
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": missing report field: " + e.what());
  }
}

}  // namespace ctxbias
