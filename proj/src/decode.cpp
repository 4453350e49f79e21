#include "leafseq/decode.hpp"

#include <cstdio>
#include <cstdlib>

#include "leafseq/errors.hpp"

namespace leafseq {

PointerGeneratorScorer::PointerGeneratorScorer(const PointerGeneratorNet& net, const EncodedExample& source)
    : net_(net), src_ext_(source.src_ext), oov_count_(source.oovs.size()), enc_(net.encode(source)) {}

PointerGeneratorScorer::State PointerGeneratorScorer::initial() const {
  return initial_decoder_state(enc_, net_.decoder, net_.options);
}

ScoredStep<PointerGeneratorScorer::State> PointerGeneratorScorer::step(const State& state,
                                                                       std::int64_t prev_token) const {
  const std::int64_t input =
      prev_token >= 0 && static_cast<std::size_t>(prev_token) < net_.vocab_size() ? prev_token : kUnkId;
  const std::int64_t ids[1] = {input};
  Tensor x = reshape(net_.embedder.embed(ids), {net_.embedder.dim()});
  const CopySource source{src_ext_, net_.vocab_size(), oov_count_};
  StepOutput out = pointer_generator_step(x, state, enc_, source, net_.decoder, net_.output, net_.options);
  ScoredStep<State> result;
  result.probs.assign(out.p_final.values().begin(), out.p_final.values().end());
  result.attention.assign(out.alpha.values().begin(), out.alpha.values().end());
  result.p_gen = out.p_gen.item();
  result.state = std::move(out.state);
  return result;
}

double round_significant(double v) {
  if (v == 0.0 || !std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

GenerationRecord trace_for_ui(const HypothesisTrace& hyp, std::span<const std::string> source_tokens,
                              const Vocabulary& vocab, std::span<const std::string> oovs) {
  if (hyp.attention.size() != hyp.tokens.size() || hyp.p_gen.size() != hyp.tokens.size()) {
    throw ContractError("trace_for_ui: " + std::to_string(hyp.tokens.size()) + " tokens but " +
                        std::to_string(hyp.attention.size()) + " attention rows and " +
                        std::to_string(hyp.p_gen.size()) + " p_gen values");
  }
  std::size_t n = hyp.tokens.size();
  if (n > 0 && hyp.tokens[n - 1] == kEosId) --n;
  GenerationRecord rec;
  rec.ids.assign(hyp.tokens.begin(), hyp.tokens.begin() + static_cast<std::ptrdiff_t>(n));
  rec.words = decode_extended(rec.ids, vocab, oovs);
  rec.attention.assign(hyp.attention.begin(), hyp.attention.begin() + static_cast<std::ptrdiff_t>(n));
  rec.p_gen.assign(hyp.p_gen.begin(), hyp.p_gen.begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = rec.attention[i];
    if (row.size() != source_tokens.size()) {
      throw ContractError("trace_for_ui: attention row of " + std::to_string(row.size()) + " for " +
                          std::to_string(source_tokens.size()) + " source tokens");
    }
    rec.focus.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    rec.copied.push_back(static_cast<std::size_t>(rec.ids[i]) >= vocab.size());
  }
  rec.score = hyp.normalized_score();
  rec.text = join_tokens(rec.words);
  return rec;
}

nlohmann::json GenerationRecord::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : attention) {
    nlohmann::json r = nlohmann::json::array();
    for (double a : row) r.push_back(round_significant(a));
    rows.push_back(std::move(r));
  }
  nlohmann::json pg = nlohmann::json::array();
  for (double p : p_gen) pg.push_back(round_significant(p));
  return {{"tokens", words}, {"ids", ids},      {"text", text},   {"attention", rows},
          {"p_gen", pg},     {"focus", focus}, {"copied", copied}, {"score", round_significant(score)}};
}

GenerationRecord GenerationRecord::from_json(const nlohmann::json& j) {
  GenerationRecord r;
  r.words = j.at("tokens").get<Tokens>();
  r.text = j.at("text").get<std::string>();
  r.attention = j.at("attention").get<std::vector<std::vector<double>>>();
  r.p_gen = j.at("p_gen").get<std::vector<double>>();
  r.score = j.at("score").get<double>();
  if (j.contains("ids")) r.ids = j.at("ids").get<std::vector<std::int64_t>>();
  if (j.contains("focus")) r.focus = j.at("focus").get<std::vector<std::size_t>>();
  if (j.contains("copied")) r.copied = j.at("copied").get<std::vector<bool>>();
  return r;
}

GenerationRecord decode_example(const Seq2SeqModel& model, const EncodedExample& ex, const Vocabulary& vocab,
                                const DecodeConfig& config) {
  PointerGeneratorScorer scorer(model.net(config.task), ex);
  auto hyps = beam_search(scorer, config.beam);
  if (hyps.empty()) throw ContractError("decode: beam search produced no hypothesis");
  return trace_for_ui(hyps.front(), ex.src_tokens, vocab, ex.oovs);
}

}  // namespace leafseq
