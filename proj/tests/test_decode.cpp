#include <doctest.h>

#include "leafseq/decode.hpp"
#include "leafseq/errors.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace leafseq;

namespace {

// Deterministic pseudo-random distributions keyed by the token history.
struct TableScorer {
  using State = std::vector<std::int64_t>;
  std::size_t vocab = 5;
  std::uint64_t seed = 0;
  double sharpness = 3.0;

  State initial() const { return {}; }

  ScoredStep<State> step(const State& history, std::int64_t token) const {
    std::uint64_t key = seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(token + 7);
    for (auto t : history) key = key * 1315423911ULL + static_cast<std::uint64_t>(t + 11);
    std::mt19937_64 rng(key);
    std::uniform_real_distribution<double> u(0.0, sharpness);
    ScoredStep<State> out;
    double z = 0.0;
    for (std::size_t w = 0; w < vocab; ++w) {
      out.probs.push_back(std::exp(u(rng)));
      z += out.probs.back();
    }
    for (auto& p : out.probs) p /= z;
    out.attention = {0.25, 0.75};
    out.p_gen = u(rng) / sharpness;
    out.state = history;
    out.state.push_back(token);
    return out;
  }
};

}  // namespace

TEST_CASE("exhaustive beam matches brute-force enumeration on table scorers") {
  for (std::uint64_t seed = 0; seed < 150; ++seed) {
    TableScorer s;
    s.vocab = 4 + seed % 3;
    s.seed = seed;
    const std::size_t max_len = 1 + seed % 4;
    const auto want = oracle::brute_force_best(s, max_len);
    const auto got = beam_search(s, {oracle::ipow(s.vocab, max_len), max_len});
    REQUIRE(!got.empty());
    CAPTURE(seed);
    CHECK(got.front().tokens == want.tokens);
    CHECK(got.front().log_prob == want.log_prob);
  }
}

TEST_CASE("exhaustive beam matches brute-force enumeration on tiny models") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto c = oracle::tiny_case(seed);
    REQUIRE(c.extended_size() <= 6);
    PointerGeneratorScorer scorer(c.model->net(), c.source);
    const auto want = oracle::brute_force_best(scorer, c.max_len);
    const auto got = beam_search(scorer, {oracle::ipow(c.extended_size(), c.max_len), c.max_len});
    CAPTURE(seed);
    CHECK(got.front().tokens == want.tokens);
  }
}

TEST_CASE("beam of one is greedy decoding") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    TableScorer s;
    s.seed = seed;
    s.vocab = 6;
    const auto g = greedy_decode(s, 8);
    const auto b = beam_search(s, {1, 8});
    REQUIRE(b.size() == 1);
    CHECK(b[0].tokens == g.tokens);
    CHECK(b[0].log_prob == g.log_prob);
    CHECK(b[0].finished == g.finished);
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = oracle::tiny_case(seed);
    PointerGeneratorScorer scorer(c.model->net(), c.source);
    const auto g = greedy_decode(scorer, 6);
    const auto b = beam_search(scorer, {1, 6});
    CHECK(b[0].tokens == g.tokens);
    CHECK(b[0].attention == g.attention);
    CHECK(b[0].p_gen == g.p_gen);
  }
}

TEST_CASE("exhaustive width is never beaten by a narrower beam") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    TableScorer s;
    s.seed = seed;
    const std::size_t max_len = 3;
    const double best = beam_search(s, {oracle::ipow(s.vocab, max_len), max_len}).front().normalized_score();
    for (std::size_t B : {1, 2, 3, 5}) CHECK(beam_search(s, {B, max_len}).front().normalized_score() <= best);
  }
}

TEST_CASE("hypothesis scores are the sum of teacher-forced step log-probabilities") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = oracle::tiny_case(seed);
    PointerGeneratorScorer scorer(c.model->net(), c.source);
    const auto hyps = beam_search(scorer, {3, 4});
    for (std::size_t i = 1; i < hyps.size(); ++i) CHECK(!better_final(hyps[i], hyps[i - 1]));
    for (const auto& h : hyps) {
      EncodedExample ex = c.source;
      ex.tgt_in = {kBosId};
      for (std::size_t t = 0; t + 1 < h.tokens.size(); ++t) {
        const auto id = h.tokens[t];
        ex.tgt_in.push_back(static_cast<std::size_t>(id) < c.vocab.size() ? id : kUnkId);
      }
      ex.tgt_out = h.tokens;
      const auto trace = c.model->net().teacher_force(ex);
      REQUIRE(trace.p_final.size() == h.tokens.size());
      double lp = 0.0;
      for (std::size_t t = 0; t < h.tokens.size(); ++t) {
        lp += step_log_prob(trace.p_final[t].values()[static_cast<std::size_t>(h.tokens[t])]);
        CHECK(leafseq::testing::row_sum(h.attention[t]) == doctest::Approx(1.0).epsilon(1e-9));
      }
      CHECK(h.log_prob == doctest::Approx(lp).epsilon(1e-12));
      CHECK(h.finished == (h.tokens.back() == kEosId));
    }
  }
}

TEST_CASE("step log-probabilities are floored and capped") {
  CHECK(step_log_prob(0.0) == doctest::Approx(std::log(1e-12)));
  CHECK(step_log_prob(1.0 + 1e-15) == 0.0);
  CHECK(step_log_prob(0.5) == doctest::Approx(std::log(0.5)));
}

TEST_CASE("trace_for_ui resolves words and survives a json round trip") {
  Vocabulary v;
  v.add("the", 1);
  v.add("cat", 1);
  const Tokens src{"the", "zorp", "cat"};
  const Tokens oovs{"zorp"};
  HypothesisTrace h;
  h.tokens = {4, 6, kEosId};
  h.attention = {{0.7, 0.2, 0.1}, {0.1, 0.8, 0.1}, {0.3, 0.3, 0.4}};
  h.p_gen = {0.9, 0.1, 0.5};
  h.log_prob = -1.5;
  h.finished = true;
  GenerationRecord r = trace_for_ui(h, src, v, oovs);
  CHECK(r.words == Tokens{"the", "zorp"});
  CHECK(r.text == "the zorp");
  CHECK(r.focus == std::vector<std::size_t>{0, 1});
  CHECK(r.copied == std::vector<bool>{false, true});
  CHECK(r.attention.size() == 2);
  CHECK(r.score == doctest::Approx(-0.5));

  GenerationRecord back = GenerationRecord::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(back.words == r.words);
  CHECK(back.ids == r.ids);
  CHECK(back.copied == r.copied);
  for (const auto& row : back.attention) CHECK(std::abs(leafseq::testing::row_sum(row) - 1.0) <= 1e-6);

  h.p_gen.pop_back();
  CHECK_THROWS_AS(trace_for_ui(h, src, v, oovs), ContractError);
  h.p_gen.push_back(0.5);
  CHECK_THROWS_AS(trace_for_ui(h, Tokens{"x"}, v, oovs), ContractError);
}

TEST_CASE("decoded attention rows stay normalized after rounding") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto c = oracle::tiny_case(seed);
    GenerationRecord r = decode_example(*c.model, c.source, c.vocab, {{2, 5}, ""});
    auto j = nlohmann::json::parse(r.to_json().dump());
    for (const auto& row : j.at("attention")) {
      double s = 0.0;
      for (double a : row) s += a;
      CHECK(std::abs(s - 1.0) <= 1e-6);
      CHECK(row.size() == c.source.src_tokens.size());
    }
    CHECK(r.words.size() == r.p_gen.size());
    for (std::size_t i = 0; i < r.ids.size(); ++i) {
      CHECK(r.ids[i] != kEosId);
      if (r.copied[i]) CHECK(r.words[i] == c.source.oovs.at(static_cast<std::size_t>(r.ids[i]) - c.vocab.size()));
    }
  }
}

TEST_CASE("round_significant") {
  CHECK(round_significant(0.12345678949) == 0.123456789);
  CHECK(round_significant(12345678949.0) == 12345678900.0);
  CHECK(round_significant(0.0) == 0.0);
}
