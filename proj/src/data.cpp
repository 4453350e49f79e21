#include "leafseq/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "leafseq/errors.hpp"

namespace leafseq {

namespace {

constexpr std::string_view kPunct = ".,!?;:\"()";

bool is_punct(char c) { return kPunct.find(c) != std::string_view::npos; }

const char* const kSpecials[kSpecialCount] = {"<pad>", "<unk>", "<bos>", "<eos>"};

}  // namespace

// ---- Vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* s : kSpecials) add(s, 0);
}

std::int64_t Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnkId); }

std::optional<std::int64_t> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " outside [0," + std::to_string(size()) + ")");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocabulary::count(std::int64_t id) const {
  token(id);
  return counts_[static_cast<std::size_t>(id)];
}

std::int64_t Vocabulary::add(std::string token, std::uint64_t count) {
  if (index_.contains(token)) throw ContractError("vocabulary: duplicate token '" + token + "'");
  const auto id = static_cast<std::int64_t>(tokens_.size());
  index_.emplace(token, id);
  tokens_.push_back(std::move(token));
  counts_.push_back(count);
  return id;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (std::size_t i = kSpecialCount; i < tokens_.size(); ++i) out << tokens_[i] << ' ' << counts_[i] << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path, std::size_t max_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocabulary file " + path.string());
  Vocabulary vocab;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (max_size != 0 && vocab.size() >= max_size) break;
    const auto sp = line.rfind(' ');
    if (sp == std::string::npos || sp == 0) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 'token count'");
    }
    std::uint64_t count = 0;
    try {
      count = std::stoull(line.substr(sp + 1));
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad count");
    }
    vocab.add(line.substr(0, sp), count);
  }
  return vocab;
}

// ---- tokenization ----------------------------------------------------------------

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string word(text.substr(i, j - i));
    for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::size_t lo = 0;
    std::size_t hi = word.size();
    while (lo < hi && is_punct(word[lo])) out.emplace_back(1, word[lo++]);
    Tokens tail;
    while (hi > lo && is_punct(word[hi - 1])) tail.emplace_back(1, word[--hi]);
    if (hi > lo) out.push_back(word.substr(lo, hi - lo));
    out.insert(out.end(), tail.rbegin(), tail.rend());
    i = j;
  }
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---- vocabulary construction --------------------------------------------------------

Vocabulary build_vocab(std::span<const Document> documents, std::size_t max_size) {
  if (max_size <= kSpecialCount) throw ContractError("build_vocab: max_size must exceed the 4 special ids");
  std::map<std::string, std::uint64_t> counts;
  auto tally = [&](const Tokens& toks) {
    for (const auto& t : toks) ++counts[t];
  };
  for (const auto& d : documents) {
    tally(d.text);
    if (d.summary) tally(*d.summary);
    if (d.title) tally(*d.title);
  }
  if (counts.empty()) throw ContractError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::uint64_t>> ranked;
  for (auto& [tok, n] : counts) {
    bool special = false;
    for (const char* s : kSpecials) special = special || tok == s;
    if (!special) ranked.emplace_back(tok, n);
  }
  // counts is ordered by token, so a stable sort on count keeps ties lexicographic
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  for (auto& [tok, n] : ranked) {
    if (vocab.size() >= max_size) break;
    vocab.add(tok, n);
  }
  return vocab;
}

// ---- OOV extension ----------------------------------------------------------------

OovEncoding encode_with_oov(std::span<const std::string> tokens, const Vocabulary& vocab) {
  OovEncoding enc;
  enc.ids.reserve(tokens.size());
  enc.extended.reserve(tokens.size());
  const auto base = static_cast<std::int64_t>(vocab.size());
  for (const auto& tok : tokens) {
    if (auto id = vocab.find(tok)) {
      enc.ids.push_back(*id);
      enc.extended.push_back(*id);
      continue;
    }
    enc.ids.push_back(kUnkId);
    auto it = std::find(enc.oovs.begin(), enc.oovs.end(), tok);
    if (it == enc.oovs.end()) {
      enc.oovs.push_back(tok);
      it = enc.oovs.end() - 1;
    }
    enc.extended.push_back(base + (it - enc.oovs.begin()));
  }
  return enc;
}

std::vector<std::int64_t> encode_target(std::span<const std::string> tokens, const Vocabulary& vocab,
                                        std::span<const std::string> oovs) {
  std::vector<std::int64_t> out;
  out.reserve(tokens.size());
  const auto base = static_cast<std::int64_t>(vocab.size());
  for (const auto& tok : tokens) {
    if (auto id = vocab.find(tok)) {
      out.push_back(*id);
      continue;
    }
    auto it = std::find(oovs.begin(), oovs.end(), tok);
    out.push_back(it == oovs.end() ? kUnkId : base + (it - oovs.begin()));
  }
  return out;
}

Tokens decode_extended(std::span<const std::int64_t> ids, const Vocabulary& vocab, std::span<const std::string> oovs) {
  Tokens out;
  out.reserve(ids.size());
  const auto base = static_cast<std::int64_t>(vocab.size());
  for (auto id : ids) {
    if (id >= 0 && id < base) {
      out.push_back(vocab.token(id));
    } else if (id >= base && static_cast<std::size_t>(id - base) < oovs.size()) {
      out.push_back(oovs[static_cast<std::size_t>(id - base)]);
    } else {
      throw ContractError("decode_extended: id " + std::to_string(id) + " is neither in the vocabulary (" +
                          std::to_string(base) + ") nor among " + std::to_string(oovs.size()) + " source OOVs");
    }
  }
  return out;
}

// ---- batching -----------------------------------------------------------------------

EncodedExample encode_example(std::span<const std::string> source, std::span<const std::string> target,
                              const Vocabulary& vocab, std::size_t max_src_len, std::size_t max_tgt_len) {
  if (source.empty()) throw ContractError("encode_example: empty source");
  EncodedExample ex;
  const auto src_len = max_src_len == 0 ? source.size() : std::min(source.size(), max_src_len);
  const auto tgt_len = max_tgt_len == 0 ? target.size() : std::min(target.size(), max_tgt_len);
  ex.src_tokens.assign(source.begin(), source.begin() + static_cast<std::ptrdiff_t>(src_len));
  ex.tgt_tokens.assign(target.begin(), target.begin() + static_cast<std::ptrdiff_t>(tgt_len));
  auto enc = encode_with_oov(ex.src_tokens, vocab);
  ex.src_ids = std::move(enc.ids);
  ex.src_ext = std::move(enc.extended);
  ex.oovs = std::move(enc.oovs);
  ex.tgt_in.push_back(kBosId);
  for (const auto& tok : ex.tgt_tokens) ex.tgt_in.push_back(vocab.id(tok));
  ex.tgt_out = encode_target(ex.tgt_tokens, vocab, ex.oovs);
  ex.tgt_out.push_back(kEosId);
  return ex;
}

ExtendedBatch collate(std::vector<EncodedExample> examples, std::string task) {
  ExtendedBatch batch;
  batch.task = std::move(task);
  std::size_t src_max = 0;
  std::size_t tgt_max = 0;
  for (const auto& ex : examples) {
    src_max = std::max(src_max, ex.src_ids.size());
    tgt_max = std::max(tgt_max, ex.tgt_in.size());
  }
  for (const auto& ex : examples) {
    auto pad = [](std::vector<std::int64_t> v, std::size_t n) {
      v.resize(n, kPadId);
      return v;
    };
    auto mask = [](std::size_t real, std::size_t n) {
      std::vector<std::uint8_t> m(n, 0);
      std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(real), std::uint8_t{1});
      return m;
    };
    batch.src_ids.push_back(pad(ex.src_ids, src_max));
    batch.src_ext.push_back(pad(ex.src_ext, src_max));
    batch.src_mask.push_back(mask(ex.src_ids.size(), src_max));
    batch.tgt_in.push_back(pad(ex.tgt_in, tgt_max));
    batch.tgt_out.push_back(pad(ex.tgt_out, tgt_max));
    batch.tgt_mask.push_back(mask(ex.tgt_in.size(), tgt_max));
  }
  batch.examples = std::move(examples);
  return batch;
}

std::vector<Document> with_target(std::span<const Document> docs, TargetField field) {
  std::vector<Document> out;
  for (const auto& d : docs) {
    if (field == TargetField::summary ? d.summary.has_value() : d.title.has_value()) out.push_back(d);
  }
  return out;
}

std::vector<EncodedExample> encode_documents(std::span<const Document> docs, const Vocabulary& vocab,
                                             const BatchOptions& options) {
  std::vector<EncodedExample> out;
  out.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& target = options.target == TargetField::summary ? docs[i].summary : docs[i].title;
    if (!target) {
      throw ContractError("document " + std::to_string(i) + " lacks the " +
                          (options.target == TargetField::summary ? "summary" : "title") + " field");
    }
    out.push_back(encode_example(docs[i].text, *target, vocab, options.max_src_len, options.max_tgt_len));
  }
  return out;
}

std::vector<ExtendedBatch> make_batches(std::span<const Document> docs, const Vocabulary& vocab,
                                        const BatchOptions& options, std::optional<std::uint64_t> seed) {
  if (options.batch_size == 0) throw ContractError("make_batches: batch_size must be at least 1");
  if (docs.empty()) throw ContractError("make_batches: empty dataset");
  auto encoded = encode_documents(docs, vocab, options);
  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (seed) {
    std::mt19937_64 rng(*seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<ExtendedBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
    std::vector<EncodedExample> chunk;
    for (std::size_t k = start; k < std::min(order.size(), start + options.batch_size); ++k) {
      chunk.push_back(std::move(encoded[order[k]]));
    }
    batches.push_back(collate(std::move(chunk), options.task));
  }
  return batches;
}

// ---- corpus import ----------------------------------------------------------------

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "jsonl") return CorpusFormat::jsonl;
  if (name == "tsv") return CorpusFormat::tsv;
  throw ContractError("unknown corpus format '" + std::string(name) + "' (expected jsonl or tsv)");
}

ImportResult import_corpus(const std::filesystem::path& path, CorpusFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus " + path.string());
  ImportResult result;
  std::string line;
  std::size_t lineno = 0;
  auto skip = [&](const std::string& why) {
    ++result.skipped;
    spdlog::warn("{}:{}: skipped record ({})", path.string(), lineno, why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    Document doc;
    if (format == CorpusFormat::jsonl) {
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object()) {
        skip("malformed JSON");
        continue;
      }
      auto field = [&](const char* key) -> std::optional<Tokens> {
        auto it = j.find(key);
        if (it == j.end() || !it->is_string()) return std::nullopt;
        return tokenize(it->get<std::string>());
      };
      auto text = field("text");
      if (!text || text->empty()) {
        skip("missing text");
        continue;
      }
      doc.text = std::move(*text);
      doc.summary = field("summary");
      doc.title = field("title");
    } else {
      std::vector<std::string> cols;
      std::stringstream ss(line);
      std::string col;
      while (std::getline(ss, col, '\t')) cols.push_back(col);
      if (cols.empty() || tokenize(cols[0]).empty()) {
        skip("missing text");
        continue;
      }
      doc.text = tokenize(cols[0]);
      if (cols.size() > 1 && !cols[1].empty()) doc.summary = tokenize(cols[1]);
      if (cols.size() > 2 && !cols[2].empty()) doc.title = tokenize(cols[2]);
    }
    if (!doc.summary && !doc.title) {
      skip("neither summary nor title");
      continue;
    }
    result.documents.push_back(std::move(doc));
  }
  return result;
}

}  // namespace leafseq
