#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "leafseq/data.hpp"
#include "leafseq/models.hpp"

namespace leafseq {

// Per-step log-probabilities are taken of max(p, 1e-12) and capped at 0.
inline double step_log_prob(double p) { return std::min(0.0, std::log(std::max(p, 1e-12))); }

struct HypothesisTrace {
  std::vector<std::int64_t> tokens;  // extended ids, eos included when finished
  double log_prob = 0.0;
  std::vector<std::vector<double>> attention;
  std::vector<double> p_gen;
  bool finished = false;

  double normalized_score() const {
    return tokens.empty() ? log_prob : log_prob / static_cast<double>(tokens.size());
  }
};

template <typename State>
struct Hypothesis : HypothesisTrace {
  State state;
};

template <typename State>
struct ScoredStep {
  std::vector<double> probs;  // over the extended vocabulary
  std::vector<double> attention;
  double p_gen = 1.0;
  State state;
};

template <typename S>
concept StepScorer = requires(const S& s, const typename S::State& st, std::int64_t token) {
  { s.initial() } -> std::convertible_to<typename S::State>;
  { s.step(st, token) } -> std::convertible_to<ScoredStep<typename S::State>>;
};

struct BeamConfig {
  std::size_t beam = 4;
  std::size_t max_len = 30;
};

// Orders by normalized score, then lexicographically smaller token ids.
inline bool better_final(const HypothesisTrace& a, const HypothesisTrace& b) {
  const double sa = a.normalized_score();
  const double sb = b.normalized_score();
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;
}

// Starts from bos; each step expands every live hypothesis over the whole
// extended vocabulary and keeps the top `beam` by cumulative log-prob (ties:
// earlier parent, then lower id). eos-ending survivors move to the finished
// pool. Stops once `beam` hypotheses finished, nothing is live, or max_len
// steps ran; in the last case the live ones join the pool unfinished.
template <StepScorer S>
std::vector<Hypothesis<typename S::State>> beam_search(const S& scorer, const BeamConfig& config) {
  using State = typename S::State;
  using Hyp = Hypothesis<State>;
  const std::size_t beam = std::max<std::size_t>(1, config.beam);
  const std::size_t max_len = std::max<std::size_t>(1, config.max_len);

  std::vector<Hyp> live(1);
  live[0].state = scorer.initial();
  std::vector<Hyp> pool;
  bool capped = true;

  struct Candidate {
    double score;
    std::size_t parent;
    std::int64_t token;
  };

  for (std::size_t step = 0; step < max_len; ++step) {
    std::vector<ScoredStep<State>> expansions;
    expansions.reserve(live.size());
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const auto prev = live[i].tokens.empty() ? kBosId : live[i].tokens.back();
      expansions.push_back(scorer.step(live[i].state, prev));
      const auto& probs = expansions.back().probs;
      for (std::size_t w = 0; w < probs.size(); ++w) {
        cands.push_back({live[i].log_prob + step_log_prob(probs[w]), i, static_cast<std::int64_t>(w)});
      }
    }
    const std::size_t keep = std::min(beam, cands.size());
    auto order = [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    };
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), order);

    std::vector<Hyp> next;
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = cands[k];
      const Hyp& parent = live[c.parent];
      const auto& ex = expansions[c.parent];
      Hyp h;
      h.tokens = parent.tokens;
      h.tokens.push_back(c.token);
      h.log_prob = c.score;
      h.attention = parent.attention;
      h.attention.push_back(ex.attention);
      h.p_gen = parent.p_gen;
      h.p_gen.push_back(ex.p_gen);
      h.state = ex.state;
      if (c.token == kEosId) {
        h.finished = true;
        pool.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    if (pool.size() >= beam || live.empty()) {
      capped = false;
      break;
    }
  }
  if (capped) {
    for (auto& h : live) pool.push_back(std::move(h));
  }
  std::stable_sort(pool.begin(), pool.end(), [](const Hyp& a, const Hyp& b) { return better_final(a, b); });
  if (pool.size() > beam) pool.resize(beam);
  return pool;
}

// Argmax decoding (ties to the lower id) until eos or max_len.
template <StepScorer S>
Hypothesis<typename S::State> greedy_decode(const S& scorer, std::size_t max_len) {
  Hypothesis<typename S::State> h;
  h.state = scorer.initial();
  for (std::size_t step = 0; step < std::max<std::size_t>(1, max_len); ++step) {
    const auto prev = h.tokens.empty() ? kBosId : h.tokens.back();
    auto out = scorer.step(h.state, prev);
    std::size_t best = 0;
    for (std::size_t w = 1; w < out.probs.size(); ++w) {
      if (step_log_prob(out.probs[w]) > step_log_prob(out.probs[best])) best = w;
    }
    h.tokens.push_back(static_cast<std::int64_t>(best));
    h.log_prob += step_log_prob(out.probs[best]);
    h.attention.push_back(std::move(out.attention));
    h.p_gen.push_back(out.p_gen);
    h.state = std::move(out.state);
    if (static_cast<std::int64_t>(best) == kEosId) {
      h.finished = true;
      break;
    }
  }
  return h;
}

// Inference-time scorer over one encoded source. Copied OOV ids are fed back
// as the unknown id.
class PointerGeneratorScorer {
 public:
  using State = DecoderState;

  PointerGeneratorScorer(const PointerGeneratorNet& net, const EncodedExample& source);

  State initial() const;
  ScoredStep<State> step(const State& state, std::int64_t prev_token) const;
  std::size_t extended_size() const { return net_.vocab_size() + oov_count_; }

 private:
  const PointerGeneratorNet& net_;
  std::vector<std::int64_t> src_ext_;
  std::size_t oov_count_;
  EncoderStates enc_;
};

// Output of one decoded sequence prepared for display: trailing eos dropped,
// extended ids resolved, one attention row and p_gen per output word.
struct GenerationRecord {
  Tokens words;
  std::vector<std::int64_t> ids;
  std::vector<std::vector<double>> attention;
  std::vector<double> p_gen;
  std::vector<std::size_t> focus;  // argmax source index per word
  std::vector<bool> copied;        // id >= |V|
  double score = 0.0;
  std::string text;

  nlohmann::json to_json() const;
  static GenerationRecord from_json(const nlohmann::json& j);
};

GenerationRecord trace_for_ui(const HypothesisTrace& hyp, std::span<const std::string> source_tokens,
                              const Vocabulary& vocab, std::span<const std::string> oovs);

// Rounds to 9 significant digits.
double round_significant(double v);

struct DecodeConfig {
  BeamConfig beam;
  std::string task;
};

GenerationRecord decode_example(const Seq2SeqModel& model, const EncodedExample& ex, const Vocabulary& vocab,
                                const DecodeConfig& config);

}  // namespace leafseq
