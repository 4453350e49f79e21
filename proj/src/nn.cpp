#include "leafseq/nn.hpp"

#include <string>

#include "leafseq/errors.hpp"

namespace leafseq {

namespace {

Tensor row_of(const Tensor& m, std::size_t r) { return reshape(slice(m, r, r + 1), {m.dim(1)}); }

Tensor mask_bias(std::span<const std::uint8_t> mask) {
  std::vector<double> bias(mask.size());
  bool any = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    bias[i] = mask[i] ? 0.0 : kMaskedScore;
    any = any || mask[i];
  }
  if (!any) throw ContractError("attention: every source position is masked");
  return Tensor::vector(std::move(bias));
}

// Shared gate arithmetic once x W is known.
LstmState lstm_from_input_projection(const Tensor& xw, const LstmState& prev, const LstmParams& p) {
  const std::size_t h = p.hidden_size();
  Tensor z = add(add(xw, matmul(prev.h, p.U)), p.b);
  Tensor i = sigmoid(slice(z, 0, h));
  Tensor f = sigmoid(slice(z, h, 2 * h));
  Tensor o = sigmoid(slice(z, 2 * h, 3 * h));
  Tensor g = tanh(slice(z, 3 * h, 4 * h));
  Tensor c = add(mul(f, prev.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

void check_lstm(const LstmParams& p, std::size_t in, const LstmState& prev) {
  const std::size_t h = p.hidden_size();
  if (p.W.rank() != 2 || p.U.rank() != 2 || p.W.dim(1) != 4 * h || p.U.dim(1) != 4 * h || p.b.numel() != 4 * h) {
    throw DimensionError("lstm_cell: parameter shapes W" + shape_string(p.W.shape()) + " U" +
                         shape_string(p.U.shape()) + " b" + shape_string(p.b.shape()) + " do not conform");
  }
  if (in != p.input_size()) {
    throw DimensionError("lstm_cell: input of " + std::to_string(in) + " for W" + shape_string(p.W.shape()));
  }
  if (prev.h.numel() != h || prev.c.numel() != h) {
    throw DimensionError("lstm_cell: state " + shape_string(prev.h.shape()) + "/" + shape_string(prev.c.shape()) +
                         " for hidden size " + std::to_string(h));
  }
}

}  // namespace

Tensor Embedder::embed(std::span<const std::int64_t> ids) const { return embedding_lookup(table, ids); }

LstmState zero_state(std::size_t hidden) { return {Tensor::zeros({hidden}), Tensor::zeros({hidden})}; }

LstmState lstm_cell(const Tensor& x, const LstmState& prev, const LstmParams& params) {
  check_lstm(params, x.numel(), prev);
  return lstm_from_input_projection(matmul(x, params.W), prev, params);
}

EncoderStates bilstm_encode(const Tensor& embedded, std::span<const std::uint8_t> mask, const BiLstmParams& params) {
  if (!embedded.defined() || embedded.rank() != 2) throw ContractError("bilstm_encode: empty sequence");
  const std::size_t T = embedded.dim(0);
  if (mask.size() != T) {
    throw DimensionError("bilstm_encode: mask of " + std::to_string(mask.size()) + " for sequence " +
                         shape_string(embedded.shape()));
  }
  bool any = false;
  for (auto m : mask) any = any || m;
  if (!any) throw ContractError("bilstm_encode: no unmasked position");

  const std::size_t h = params.fwd.hidden_size();
  check_lstm(params.fwd, embedded.dim(1), zero_state(h));
  check_lstm(params.bwd, embedded.dim(1), zero_state(h));

  Tensor proj_f = matmul(embedded, params.fwd.W);
  Tensor proj_b = matmul(embedded, params.bwd.W);
  const Tensor zero = Tensor::zeros({h});

  std::vector<Tensor> fwd_rows(T, zero);
  std::vector<Tensor> bwd_rows(T, zero);
  LstmState fwd = zero_state(h);
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    fwd = lstm_from_input_projection(row_of(proj_f, t), fwd, params.fwd);
    fwd_rows[t] = fwd.h;
  }
  LstmState bwd = zero_state(h);
  for (std::size_t t = T; t-- > 0;) {
    if (!mask[t]) continue;
    bwd = lstm_from_input_projection(row_of(proj_b, t), bwd, params.bwd);
    bwd_rows[t] = bwd.h;
  }
  EncoderStates out;
  out.H = concat({stack_rows(fwd_rows), stack_rows(bwd_rows)}, 1);
  out.mask.assign(mask.begin(), mask.end());
  out.final_fwd = fwd;
  out.final_bwd = bwd;
  return out;
}

Tensor attention_scores(const Tensor& s, const EncoderStates& enc, const Tensor* coverage,
                        const AttentionParams& params, AttentionMode mode) {
  const std::size_t T = enc.length();
  if (mode == AttentionMode::bilinear) {
    return matmul(enc.H, matmul(s, params.W_a));
  }
  const Tensor keys = enc.keys.defined() ? enc.keys : matmul(enc.H, params.W_h);
  Tensor pre = add_bias(keys, add(matmul(s, params.W_s), params.b));
  if (coverage != nullptr && coverage->defined()) {
    if (coverage->numel() != T) {
      throw DimensionError("attend: coverage of " + std::to_string(coverage->numel()) + " for " + std::to_string(T) +
                           " source positions");
    }
    const std::size_t a = params.w_c.numel();
    pre = add(pre, matmul(reshape(*coverage, {T, 1}), reshape(params.w_c, {1, a})));
  }
  return matmul(tanh(pre), params.v);
}

Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> mask) {
  if (scores.numel() != mask.size()) {
    throw DimensionError("masked_softmax: " + std::to_string(scores.numel()) + " scores for mask of " +
                         std::to_string(mask.size()));
  }
  return softmax_rows(add(scores, mask_bias(mask)));
}

Tensor weighted_context(const Tensor& alpha, const Tensor& H) { return matmul(alpha, H); }

Attention attend(const Tensor& s, const EncoderStates& enc, const Tensor* coverage, const AttentionParams& params,
                 AttentionMode mode) {
  Attention out;
  out.scores = attention_scores(s, enc, coverage, params, mode);
  out.alpha = masked_softmax(out.scores, enc.mask);
  out.context = weighted_context(out.alpha, enc.H);
  return out;
}

Tensor temporal_attend(const Tensor& scores, std::span<const Tensor> history, std::span<const std::uint8_t> mask) {
  if (history.empty()) return masked_softmax(scores, mask);
  Tensor acc = exp(history[0]);
  for (std::size_t k = 1; k < history.size(); ++k) acc = add(acc, exp(history[k]));
  return masked_softmax(sub(scores, log(acc)), mask);
}

Tensor intra_decoder_attend(const Tensor& s, std::span<const Tensor> history, const Tensor& W_d) {
  if (history.empty()) return Tensor::zeros({s.numel()});
  Tensor S = stack_rows(history);
  Tensor weights = softmax_rows(matmul(S, matmul(s, W_d)));
  return matmul(weights, S);
}

Tensor OutputLayer::logits(const Tensor& q) const { return matmul(E, add(matmul(q, W_proj), b_proj)); }

DecoderState initial_decoder_state(const EncoderStates& enc, const DecoderParams& params, const DecoderOptions& options) {
  DecoderState st;
  Tensor h = concat({enc.final_fwd.h, enc.final_bwd.h});
  Tensor c = concat({enc.final_fwd.c, enc.final_bwd.c});
  st.lstm.h = tanh(add(matmul(h, params.reduce_h_W), params.reduce_h_b));
  st.lstm.c = add(matmul(c, params.reduce_c_W), params.reduce_c_b);
  if (options.coverage) st.coverage = Tensor::zeros({enc.length()});
  return st;
}

StepOutput pointer_generator_step(const Tensor& x, const DecoderState& state, const EncoderStates& enc,
                                  const CopySource& source, const DecoderParams& params, const OutputLayer& output,
                                  const DecoderOptions& options) {
  const std::size_t T = enc.length();
  if (source.extended_ids.size() != T) {
    throw DimensionError("pointer_generator_step: " + std::to_string(source.extended_ids.size()) +
                         " extended ids for " + std::to_string(T) + " source positions");
  }
  const std::size_t ext = source.extended_size();
  for (auto id : source.extended_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= ext) {
      throw ContractError("pointer_generator_step: extended id " + std::to_string(id) +
                          " outside declared range of " + std::to_string(ext));
    }
  }
  if (options.coverage && !state.coverage.defined()) {
    throw ContractError("pointer_generator_step: coverage enabled but state carries none");
  }

  StepOutput out;
  LstmState lstm = lstm_cell(x, state.lstm, params.cell);
  const Tensor& s = lstm.h;

  const Tensor* cov = options.coverage ? &state.coverage : nullptr;
  Tensor scores = attention_scores(s, enc, cov, params.attention, options.mode);
  Tensor alpha = options.temporal ? temporal_attend(scores, state.score_history, enc.mask)
                                  : masked_softmax(scores, enc.mask);
  Tensor context = weighted_context(alpha, enc.H);

  std::vector<Tensor> q_parts{s, context};
  if (options.intra_decoder) q_parts.push_back(intra_decoder_attend(s, state.state_history, params.intra_W));
  Tensor p_vocab = softmax_rows(output.logits(concat(q_parts)));
  if (p_vocab.numel() != source.vocab_size) {
    throw DimensionError("pointer_generator_step: output layer yields " + std::to_string(p_vocab.numel()) +
                         " ids, copy source declares " + std::to_string(source.vocab_size));
  }

  Tensor p_gen;
  if (options.force_p_gen) {
    p_gen = Tensor::scalar(*options.force_p_gen);
  } else {
    const auto& pp = params.pointer;
    p_gen = sigmoid(add(add(add(matmul(context, pp.w_c), matmul(s, pp.w_s)), matmul(x, pp.w_x)), pp.b));
  }

  Tensor vocab_part = source.oov_count > 0 ? concat({p_vocab, Tensor::zeros({source.oov_count})}) : p_vocab;
  Tensor copy_part = scatter_add(alpha, source.extended_ids, ext);
  out.p_final = add(mul_scalar(vocab_part, p_gen), mul_scalar(copy_part, sub(Tensor::scalar(1.0), p_gen)));
  out.p_gen = p_gen;
  out.alpha = alpha;

  DecoderState next;
  next.lstm = lstm;
  if (options.coverage) {
    out.coverage = state.coverage;
    next.coverage = add(state.coverage, alpha);
  }
  next.attention_history = state.attention_history;
  next.attention_history.push_back(alpha);
  if (options.temporal) {
    next.score_history = state.score_history;
    next.score_history.push_back(scores);
  }
  if (options.intra_decoder) {
    next.state_history = state.state_history;
    next.state_history.push_back(s);
  }
  out.state = std::move(next);
  return out;
}

Tensor coverage_loss(std::span<const Tensor> alphas, std::span<const Tensor> coverages,
                     std::span<const std::uint8_t> step_mask) {
  if (alphas.size() != coverages.size() || alphas.size() != step_mask.size()) {
    throw ContractError("coverage_loss: " + std::to_string(alphas.size()) + " attention rows, " +
                        std::to_string(coverages.size()) + " coverage rows, " + std::to_string(step_mask.size()) +
                        " mask entries");
  }
  std::vector<Tensor> terms;
  for (std::size_t t = 0; t < alphas.size(); ++t) {
    if (!step_mask[t]) continue;
    if (!coverages[t].defined()) throw ContractError("coverage_loss: missing coverage row at step " + std::to_string(t));
    terms.push_back(sum(minimum(alphas[t], coverages[t])));
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return mean(stack_rows(terms));
}

Tensor nll_loss(std::span<const Tensor> p_final, std::span<const std::int64_t> targets,
                std::span<const std::uint8_t> step_mask) {
  if (p_final.size() != targets.size() || p_final.size() != step_mask.size()) {
    throw ContractError("nll_loss: sequence lengths disagree");
  }
  std::vector<Tensor> terms;
  for (std::size_t t = 0; t < p_final.size(); ++t) {
    if (!step_mask[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= p_final[t].numel()) {
      throw ContractError("nll_loss: target " + std::to_string(targets[t]) + " outside distribution of " +
                          std::to_string(p_final[t].numel()));
    }
    terms.push_back(log(pick(p_final[t], static_cast<std::size_t>(targets[t])), 1e-12));
  }
  if (terms.empty()) return Tensor::scalar(0.0);
  return scale(mean(stack_rows(terms)), -1.0);
}

}  // namespace leafseq
