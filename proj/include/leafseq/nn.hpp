#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "leafseq/tensor.hpp"

namespace leafseq {

// Pre-softmax score added at padded positions.
inline constexpr double kMaskedScore = -1e9;

// Embedding table. Copies share storage; `shared` marks that the output layer
// reads the same matrix.
struct Embedder {
  Tensor table;  // |V| x d_emb
  bool shared = false;

  std::size_t vocab_size() const { return table.dim(0); }
  std::size_t dim() const { return table.dim(1); }
  // Rows of the table for each id; throws std::out_of_range for id >= |V|.
  Tensor embed(std::span<const std::int64_t> ids) const;
};

// Gates are packed [input, forget, output, candidate] along the 4h axis.
struct LstmParams {
  Tensor W;  // in x 4h
  Tensor U;  // h x 4h
  Tensor b;  // 4h

  std::size_t input_size() const { return W.dim(0); }
  std::size_t hidden_size() const { return U.dim(0); }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

LstmState zero_state(std::size_t hidden);

LstmState lstm_cell(const Tensor& x, const LstmState& prev, const LstmParams& params);

struct BiLstmParams {
  LstmParams fwd;
  LstmParams bwd;
};

struct EncoderStates {
  Tensor H;                        // T x 2h; zero rows at masked positions
  std::vector<std::uint8_t> mask;  // 1 = real token
  LstmState final_fwd;
  LstmState final_bwd;
  Tensor keys;  // optional cache of H * W_h for additive attention

  std::size_t length() const { return mask.size(); }
  std::size_t width() const { return H.dim(1); }
};

// Masked positions are skipped by both directions (state carried through).
EncoderStates bilstm_encode(const Tensor& embedded, std::span<const std::uint8_t> mask, const BiLstmParams& params);

enum class AttentionMode { additive, bilinear };

struct AttentionParams {
  // additive: e_i = v . tanh(H_i W_h + s W_s + cov_i w_c + b)
  Tensor W_h;  // 2h x a
  Tensor W_s;  // h x a
  Tensor w_c;  // a
  Tensor b;    // a
  Tensor v;    // a
  // bilinear: e_i = s W_a H_i
  Tensor W_a;  // h x 2h
};

// Raw, unmasked scores (T). `coverage` may be null; it is only read in
// additive mode.
Tensor attention_scores(const Tensor& s, const EncoderStates& enc, const Tensor* coverage,
                        const AttentionParams& params, AttentionMode mode);

Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> mask);

// alpha (T) x H (T x 2h).
Tensor weighted_context(const Tensor& alpha, const Tensor& H);

struct Attention {
  Tensor context;
  Tensor alpha;
  Tensor scores;  // pre-mask
};

Attention attend(const Tensor& s, const EncoderStates& enc, const Tensor* coverage, const AttentionParams& params,
                 AttentionMode mode);

// Scores damped by exp-sum of the same position's earlier raw scores, then
// normalized over unmasked positions. Empty history reduces to softmax.
Tensor temporal_attend(const Tensor& scores, std::span<const Tensor> history, std::span<const std::uint8_t> mask);

// Bilinear attention over earlier decoder hiddens; zero vector when empty.
Tensor intra_decoder_attend(const Tensor& s, std::span<const Tensor> history, const Tensor& W_d);

struct PointerParams {
  Tensor w_c;  // 2h x 1
  Tensor w_s;  // h x 1
  Tensor w_x;  // d_emb x 1
  Tensor b;    // 1
};

// logits = E (q W_proj + b_proj); E is the embedder table when weights are tied.
struct OutputLayer {
  Tensor W_proj;  // q x d_emb
  Tensor b_proj;  // d_emb
  Tensor E;       // |V| x d_emb

  Tensor logits(const Tensor& q) const;
};

struct DecoderParams {
  LstmParams cell;
  Tensor reduce_h_W;  // 2h x h
  Tensor reduce_h_b;
  Tensor reduce_c_W;
  Tensor reduce_c_b;
  AttentionParams attention;
  Tensor intra_W;  // h x h, only when intra-decoder attention is on
  PointerParams pointer;
};

struct DecoderOptions {
  AttentionMode mode = AttentionMode::additive;
  bool coverage = false;
  bool temporal = false;
  bool intra_decoder = false;
  std::optional<double> force_p_gen;
};

struct DecoderState {
  LstmState lstm;
  Tensor coverage;  // undefined when coverage is off
  std::vector<Tensor> attention_history;
  std::vector<Tensor> score_history;
  std::vector<Tensor> state_history;
};

DecoderState initial_decoder_state(const EncoderStates& enc, const DecoderParams& params, const DecoderOptions& options);

// Source side of the copy distribution for one example.
struct CopySource {
  std::span<const std::int64_t> extended_ids;  // T
  std::size_t vocab_size = 0;
  std::size_t oov_count = 0;

  std::size_t extended_size() const { return vocab_size + oov_count; }
};

struct StepOutput {
  Tensor p_final;   // |V| + |oov|
  Tensor p_gen;     // shape (1)
  Tensor alpha;     // T
  Tensor coverage;  // coverage read at this step (undefined when off)
  DecoderState state;
};

StepOutput pointer_generator_step(const Tensor& x, const DecoderState& state, const EncoderStates& enc,
                                  const CopySource& source, const DecoderParams& params, const OutputLayer& output,
                                  const DecoderOptions& options);

// Mean over unmasked steps of sum_i min(alpha_ti, cov_ti).
Tensor coverage_loss(std::span<const Tensor> alphas, std::span<const Tensor> coverages,
                     std::span<const std::uint8_t> step_mask);

// Mean over unmasked steps of -log max(P_t[target_t], 1e-12).
Tensor nll_loss(std::span<const Tensor> p_final, std::span<const std::int64_t> targets,
                std::span<const std::uint8_t> step_mask);

}  // namespace leafseq
