#include <doctest.h>

#include <fstream>
#include <set>

#include "leafseq/errors.hpp"
#include "leafseq/data.hpp"
#include "support.hpp"

using namespace leafseq;

namespace {

Document doc(std::string_view text, std::string_view summary) {
  Document d;
  d.text = tokenize(text);
  d.summary = tokenize(summary);
  return d;
}

Vocabulary vocab_of(std::initializer_list<const char*> words) {
  Vocabulary v;
  for (const char* w : words) v.add(w, 1);
  return v;
}

void write_file(const std::filesystem::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

}  // namespace

TEST_CASE("tokenize") {
  CHECK(tokenize("Hello, world!") == Tokens{"hello", ",", "world", "!"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("a a a") == Tokens{"a", "a", "a"});
  CHECK(tokenize("  \"Quoted\"  (x).") == Tokens{"\"", "quoted", "\"", "(", "x", ")", "."});
  CHECK(tokenize("U.S. e-mail") == Tokens{"u.s", ".", "e-mail"});
}

TEST_CASE("tokenize then join round-trips token boundaries") {
  std::mt19937_64 rng(9);
  const std::string alphabet = "ab.,!? ()\"\t";
  for (int trial = 0; trial < 200; ++trial) {
    std::string text;
    const auto n = leafseq::testing::uniform_size(rng, 0, 20);
    for (std::size_t i = 0; i < n; ++i) text.push_back(alphabet[leafseq::testing::uniform_size(rng, 0, alphabet.size() - 1)]);
    const Tokens toks = tokenize(text);
    CHECK(tokenize(join_tokens(toks)) == toks);
  }
}

TEST_CASE("build_vocab orders by count then lexicographically") {
  std::vector<Document> docs{doc("a a b", "")};
  docs[0].summary.reset();
  Vocabulary v = build_vocab(docs, 6);
  CHECK(v.size() == 6);
  CHECK(v.token(0) == "<pad>");
  CHECK(v.token(3) == "<eos>");
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK(v.count(4) == 2);

  Vocabulary capped = build_vocab(docs, 5);
  CHECK(capped.size() == 5);
  CHECK(capped.id("b") == kUnkId);

  std::vector<Document> ties{doc("z y x", "")};
  Vocabulary t = build_vocab(ties, 10);
  CHECK(t.token(4) == "x");
  CHECK(t.token(6) == "z");
  CHECK(build_vocab(docs, 6) == v);

  CHECK_THROWS_AS(build_vocab(docs, 4), ContractError);
  CHECK_THROWS_AS(build_vocab(std::vector<Document>{}, 10), ContractError);
}

TEST_CASE("vocabulary save and load") {
  leafseq::testing::TempDir dir;
  Vocabulary v = build_vocab(std::vector<Document>{doc("c b b a a a", "d")}, 100);
  v.save(dir / "vocab.txt");
  CHECK(Vocabulary::load(dir / "vocab.txt") == v);
  Vocabulary cut = Vocabulary::load(dir / "vocab.txt", 6);
  CHECK(cut.size() == 6);
  CHECK(cut.token(5) == "b");
  write_file(dir / "bad.txt", "novalue\n");
  CHECK_THROWS_AS(Vocabulary::load(dir / "bad.txt"), IoError);
  CHECK_THROWS_AS(Vocabulary::load(dir / "missing.txt"), IoError);
}

TEST_CASE("encode_with_oov assigns extended ids in first-occurrence order") {
  Vocabulary v = vocab_of({"the", "cat"});
  const Tokens in{"the", "cat"};
  OovEncoding plain = encode_with_oov(in, v);
  CHECK(plain.ids == plain.extended);
  CHECK(plain.oovs.empty());

  const Tokens toks{"the", "florp", "the", "florp"};
  OovEncoding e = encode_with_oov(toks, v);
  const auto V = static_cast<std::int64_t>(v.size());
  CHECK(e.extended == std::vector<std::int64_t>{4, V, 4, V});
  CHECK(e.ids == std::vector<std::int64_t>{4, kUnkId, 4, kUnkId});
  CHECK(e.oovs == Tokens{"florp"});

  const Tokens two{"zork", "the", "florp", "zork"};
  OovEncoding e2 = encode_with_oov(two, v);
  CHECK(e2.extended == std::vector<std::int64_t>{V, 4, V + 1, V});
  CHECK(decode_extended(e2.extended, v, e2.oovs) == two);
  CHECK_THROWS_AS(decode_extended(std::vector<std::int64_t>{V + 2}, v, e2.oovs), ContractError);

  const Tokens target{"florp", "cat", "unseen"};
  CHECK(encode_target(target, v, e.oovs) == std::vector<std::int64_t>{V, 5, kUnkId});
}

TEST_CASE("extended encoding round trip and range over random sequences") {
  std::mt19937_64 rng(21);
  Vocabulary v;
  for (int i = 0; i < 10; ++i) v.add("v" + std::to_string(i), 1);
  for (int trial = 0; trial < 300; ++trial) {
    Tokens toks;
    const auto n = leafseq::testing::uniform_size(rng, 1, 15);
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = leafseq::testing::uniform_size(rng, 0, 17);
      toks.push_back((k < 10 ? "v" : "o") + std::to_string(k));
    }
    OovEncoding e = encode_with_oov(toks, v);
    CHECK(decode_extended(e.extended, v, e.oovs) == toks);
    std::int64_t expect_next = static_cast<std::int64_t>(v.size());
    for (std::size_t i = 0; i < toks.size(); ++i) {
      CHECK(e.extended[i] < static_cast<std::int64_t>(v.size() + e.oovs.size()));
      if (e.extended[i] >= static_cast<std::int64_t>(v.size())) {
        CHECK(e.extended[i] <= expect_next);
        if (e.extended[i] == expect_next) ++expect_next;
      } else {
        CHECK(e.extended[i] == e.ids[i]);
      }
    }
  }
}

TEST_CASE("encode_example truncates and frames the target") {
  Vocabulary v = vocab_of({"a", "b"});
  const Tokens src{"a", "b", "x", "a", "b", "a", "b"};
  const Tokens tgt{"x", "b", "y"};
  EncodedExample ex = encode_example(src, tgt, v, 5, 100);
  CHECK(ex.src_tokens == Tokens{"a", "b", "x", "a", "b"});
  CHECK(ex.tgt_in == std::vector<std::int64_t>{kBosId, kUnkId, 5, kUnkId});
  CHECK(ex.tgt_out == std::vector<std::int64_t>{6, 5, kUnkId, kEosId});
  EncodedExample cut = encode_example(src, tgt, v, 0, 1);
  CHECK(cut.tgt_out == std::vector<std::int64_t>{6, kEosId});
  CHECK_THROWS_AS(encode_example(Tokens{}, tgt, v, 5, 5), ContractError);
}

TEST_CASE("make_batches partitions, pads and is deterministic") {
  std::vector<Document> docs{doc("a b c", "a"), doc("b c", "c b"), doc("c", "c"), doc("a a", "a")};
  Vocabulary v = build_vocab(docs, 50);
  BatchOptions o;
  o.batch_size = 3;
  auto batches = make_batches(std::span(docs).first(3), v, o, std::nullopt);
  REQUIRE(batches.size() == 1);
  o.batch_size = 2;
  batches = make_batches(std::span(docs).first(3), v, o, std::nullopt);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].size() == 2);
  CHECK(batches[1].size() == 1);
  CHECK(batches[0].src_ids[1] == std::vector<std::int64_t>{v.id("b"), v.id("c"), kPadId});
  CHECK(batches[0].src_mask[1] == std::vector<std::uint8_t>{1, 1, 0});
  CHECK(batches[0].tgt_mask[0] == std::vector<std::uint8_t>{1, 1, 0});

  std::vector<Document> same{doc("a b", "a"), doc("b a", "b")};
  auto flat = make_batches(same, v, o, std::nullopt);
  for (const auto& row : flat[0].src_mask) CHECK(std::count(row.begin(), row.end(), 0) == 0);

  auto s1 = make_batches(docs, v, o, 42);
  auto s2 = make_batches(docs, v, o, 42);
  std::multiset<Tokens> seen;
  for (std::size_t b = 0; b < s1.size(); ++b) {
    CHECK(s1[b].src_ids == s2[b].src_ids);
    for (const auto& ex : s1[b].examples) seen.insert(ex.src_tokens);
  }
  std::multiset<Tokens> all;
  for (const auto& d : docs) all.insert(d.text);
  CHECK(seen == all);

  o.batch_size = 0;
  CHECK_THROWS_AS(make_batches(docs, v, o, 1), ContractError);
  o.batch_size = 2;
  CHECK_THROWS_AS(make_batches(std::vector<Document>{}, v, o, 1), ContractError);
  o.target = TargetField::title;
  CHECK_THROWS_AS(make_batches(docs, v, o, 1), ContractError);
}

TEST_CASE("import_corpus") {
  leafseq::testing::TempDir dir;
  write_file(dir / "c.jsonl",
             "{\"text\":\"a b\",\"summary\":\"a\"}\n"
             "{\"text\":\"no target\"}\n"
             "not json\n"
             "\n"
             "{\"text\":\"T x\",\"title\":\"X\"}\n");
  ImportResult r = import_corpus(dir / "c.jsonl", CorpusFormat::jsonl);
  REQUIRE(r.documents.size() == 2);
  CHECK(r.skipped == 2);
  CHECK(r.documents[0].text == Tokens{"a", "b"});
  CHECK(r.documents[0].summary == Tokens{"a"});
  CHECK(!r.documents[0].title);
  CHECK(r.documents[1].title == Tokens{"x"});
  CHECK(with_target(r.documents, TargetField::title).size() == 1);

  write_file(dir / "c.tsv", "a b\ta\n\tno text\nc d\t\tc\n");
  ImportResult t = import_corpus(dir / "c.tsv", CorpusFormat::tsv);
  CHECK(t.documents.size() == 2);
  CHECK(t.skipped == 1);
  CHECK(t.documents[1].title == Tokens{"c"});

  write_file(dir / "empty.jsonl", "");
  CHECK(import_corpus(dir / "empty.jsonl", CorpusFormat::jsonl).documents.empty());
  CHECK_THROWS_AS(import_corpus(dir / "missing.jsonl", CorpusFormat::jsonl), IoError);
  CHECK_THROWS_AS(parse_corpus_format("xml"), ContractError);
}
