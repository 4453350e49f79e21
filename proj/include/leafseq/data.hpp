#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace leafseq {

using Tokens = std::vector<std::string>;

inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kUnkId = 1;
inline constexpr std::int64_t kBosId = 2;
inline constexpr std::int64_t kEosId = 3;
inline constexpr std::size_t kSpecialCount = 4;

class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  // Unknown id for tokens outside the vocabulary.
  std::int64_t id(std::string_view token) const;
  std::optional<std::int64_t> find(std::string_view token) const;
  const std::string& token(std::int64_t id) const;
  std::uint64_t count(std::int64_t id) const;

  // Appends a new token; throws ContractError on duplicates.
  std::int64_t add(std::string token, std::uint64_t count);

  // One "token count" line per non-special entry, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path, std::size_t max_size = 0);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_ && counts_ == other.counts_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, std::int64_t> index_;
};

// Lowercases, splits on whitespace and peels . , ! ? ; : " ( ) off the ends of
// each word as standalone tokens.
Tokens tokenize(std::string_view text);
std::string join_tokens(std::span<const std::string> tokens);

struct Document {
  Tokens text;
  std::optional<Tokens> summary;
  std::optional<Tokens> title;
};

enum class TargetField { summary, title };

// Counts tokens over text, summary and title. Keeps the max_size - 4 most
// frequent; equal counts ordered lexicographically.
Vocabulary build_vocab(std::span<const Document> documents, std::size_t max_size);

struct OovEncoding {
  std::vector<std::int64_t> ids;       // OOVs mapped to unk
  std::vector<std::int64_t> extended;  // OOVs mapped to |V| + k
  Tokens oovs;                         // k -> surface form, first-occurrence order
};

OovEncoding encode_with_oov(std::span<const std::string> tokens, const Vocabulary& vocab);

// Target ids over the extended vocabulary of one source: in-vocab ids, source
// OOV slots, unk otherwise.
std::vector<std::int64_t> encode_target(std::span<const std::string> tokens, const Vocabulary& vocab,
                                        std::span<const std::string> oovs);

// Inverse of the extended encoding; throws ContractError for unresolvable ids.
Tokens decode_extended(std::span<const std::int64_t> ids, const Vocabulary& vocab, std::span<const std::string> oovs);

struct EncodedExample {
  Tokens src_tokens;
  std::vector<std::int64_t> src_ids;
  std::vector<std::int64_t> src_ext;
  Tokens oovs;
  Tokens tgt_tokens;
  std::vector<std::int64_t> tgt_in;   // bos + tokens (unk-mapped)
  std::vector<std::int64_t> tgt_out;  // tokens + eos (extended)
};

EncodedExample encode_example(std::span<const std::string> source, std::span<const std::string> target,
                              const Vocabulary& vocab, std::size_t max_src_len, std::size_t max_tgt_len);

// Rows are padded to the batch maximum; masks mark real tokens.
struct ExtendedBatch {
  std::vector<EncodedExample> examples;
  std::vector<std::vector<std::int64_t>> src_ids;
  std::vector<std::vector<std::int64_t>> src_ext;
  std::vector<std::vector<std::uint8_t>> src_mask;
  std::vector<std::vector<std::int64_t>> tgt_in;
  std::vector<std::vector<std::int64_t>> tgt_out;
  std::vector<std::vector<std::uint8_t>> tgt_mask;
  std::string task;

  std::size_t size() const { return examples.size(); }
};

ExtendedBatch collate(std::vector<EncodedExample> examples, std::string task = {});

struct BatchOptions {
  std::size_t batch_size = 16;
  std::size_t max_src_len = 400;
  std::size_t max_tgt_len = 100;
  TargetField target = TargetField::summary;
  std::string task;
};

std::vector<EncodedExample> encode_documents(std::span<const Document> docs, const Vocabulary& vocab,
                                             const BatchOptions& options);

// Encodes, optionally shuffles (deterministic per seed) and chunks.
std::vector<ExtendedBatch> make_batches(std::span<const Document> docs, const Vocabulary& vocab,
                                        const BatchOptions& options, std::optional<std::uint64_t> seed);

enum class CorpusFormat { jsonl, tsv };

struct ImportResult {
  std::vector<Document> documents;
  std::size_t skipped = 0;
};

// jsonl: {"text", "summary", "title"}; tsv: text<TAB>summary[<TAB>title].
ImportResult import_corpus(const std::filesystem::path& path, CorpusFormat format);
CorpusFormat parse_corpus_format(std::string_view name);

std::vector<Document> with_target(std::span<const Document> docs, TargetField field);

}  // namespace leafseq
