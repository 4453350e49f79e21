#include <doctest.h>

#include "leafseq/errors.hpp"
#include "leafseq/rouge.hpp"
#include "oracles.hpp"

using namespace leafseq;

TEST_CASE("worked unigram example") {
  const Tokens cand{"the", "cat", "sat"};
  const Tokens ref{"the", "cat"};
  const RougeScore s = rouge_n(cand, ref, 1);
  CHECK(std::abs(s.precision - 2.0 / 3.0) <= 1e-12);
  CHECK(std::abs(s.recall - 1.0) <= 1e-12);
  CHECK(std::abs(s.f1 - 0.8) <= 1e-12);
}

TEST_CASE("clipping, empty inputs and contract errors") {
  const Tokens cand{"a", "a", "a"};
  const Tokens ref{"a", "b"};
  CHECK(rouge_n(cand, ref, 1).precision == doctest::Approx(1.0 / 3.0));
  CHECK(rouge_n(cand, ref, 2).f1 == 0.0);
  CHECK(rouge_n(Tokens{}, ref, 1).f1 == 0.0);
  CHECK(rouge_l(cand, Tokens{}).f1 == 0.0);
  CHECK_THROWS_AS(rouge_n(cand, ref, 0), ContractError);
  CHECK_THROWS_AS(corpus_rouge(std::span<const std::pair<Tokens, Tokens>>{}), ContractError);
  CHECK(rouge_l(Tokens{"a", "b", "c", "d"}, Tokens{"a", "c", "x", "d"}).f1 == doctest::Approx(0.75));
}

TEST_CASE("rouge matches the brute-force oracle") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const auto c = oracle::random_words(rng, 10, 4);
    const auto r = oracle::random_words(rng, 10, 4);
    for (std::size_t n : {1, 2, 3}) {
      const auto got = rouge_n(c, r, n);
      const auto want = oracle::rouge_n(c, r, n);
      CHECK(got.precision == want.p);
      CHECK(got.recall == want.r);
      CHECK(got.f1 == want.f);
    }
    CHECK(lcs_length(c, r) == oracle::lcs(c, r));
    CHECK(rouge_l(c, r).f1 == oracle::rouge_l(c, r).f);
  }
}

TEST_CASE("rouge-l bounds the full-length n-gram score") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto c = oracle::random_words(rng, 6, 3);
    auto r = oracle::random_words(rng, 6, 3);
    if (c.empty()) continue;
    r.resize(c.size(), "a");
    CHECK(rouge_l(c, r).f1 >= rouge_n(c, r, c.size()).f1);
    CHECK(rouge_l(c, c).f1 == 1.0);
  }
}

TEST_CASE("corpus report averages F1 times one hundred") {
  const std::vector<std::pair<Tokens, Tokens>> pairs{{{"the", "cat", "sat"}, {"the", "cat"}}, {{"x"}, {"y"}}};
  const RougeReport r = corpus_rouge(pairs);
  CHECK(r.pairs == 2);
  CHECK(r.r1 == doctest::Approx(40.0));
  CHECK(r.r2 == doctest::Approx(100.0 * (2.0 * 0.5 * 1.0 / 1.5) / 2.0));
  CHECK(r.rl == doctest::Approx(40.0));
  CHECK(r.machine_line() == "R1=40.00 R2=33.33 RL=40.00");
  CHECK(r.text().find("R-1 40.00") != std::string::npos);
}
