#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "leafseq/checkpoint.hpp"
#include "leafseq/config.hpp"
#include "leafseq/data.hpp"
#include "leafseq/nn.hpp"

namespace leafseq {

// splitmix64 of the master seed mixed with a component label.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component);

enum class ModelKind { pointer_generator, multitask };

enum class TaskTag { newsroom_summary, newsroom_headline, cnndm_summary, bytecup_headline };

std::string_view task_name(TaskTag tag);
TaskTag parse_task(std::string_view name);
bool is_headline_task(std::string_view name);
const std::vector<std::string>& default_tasks();

struct ModelConfig {
  ModelKind kind = ModelKind::pointer_generator;
  std::size_t d_emb = 128;
  std::size_t hidden = 256;
  std::size_t vocab_size = 50000;
  std::size_t encoder_layers = 1;  // pointer-generator only
  AttentionMode attention = AttentionMode::additive;
  bool coverage = false;
  bool temporal = false;
  bool intra_decoder = false;
  bool share_embedding = true;
  double coverage_weight = 1.0;
  std::uint64_t seed = 1;
  std::vector<std::string> tasks;  // multitask only; defaults to the four tags

  // Reads "model.*" keys; absent keys keep defaults.
  static ModelConfig from_config(const KeyValueConfig& cfg);
  static ModelConfig from_metadata(const std::map<std::string, std::string>& meta);
  void to_metadata(std::map<std::string, std::string>& meta) const;
  void validate() const;
};

// One encoder-decoder path: every tensor here is a handle into a ParamStore,
// so several nets may share embedder, encoder layers or output layer.
struct PointerGeneratorNet {
  Embedder embedder;
  std::vector<BiLstmParams> encoder;
  DecoderParams decoder;
  OutputLayer output;
  DecoderOptions options;
  double coverage_weight = 1.0;

  std::size_t vocab_size() const { return embedder.vocab_size(); }

  // Stacked bi-LSTM over unk-mapped ids; caches attention keys.
  EncoderStates encode(std::span<const std::int64_t> src_ids, std::span<const std::uint8_t> mask) const;
  EncoderStates encode(const EncodedExample& ex) const;

  struct Trace {
    std::vector<Tensor> p_final;
    std::vector<Tensor> alpha;
    std::vector<Tensor> coverage;
    std::vector<Tensor> p_gen;
  };
  // Teacher-forced pass over tgt_in.
  Trace teacher_force(const EncodedExample& ex) const;
  // NLL plus coverage_weight * coverage loss when coverage is on.
  Tensor example_loss(const EncodedExample& ex, bool include_coverage = true) const;
};

struct ParamCount {
  std::vector<std::pair<std::string, std::size_t>> modules;  // module path -> count
  std::size_t shared = 0;
  std::size_t task_specific = 0;
  std::size_t total = 0;

  std::string report() const;
};

// Abstract model surface used by the engine, decoder and service.
class Seq2SeqModel {
 public:
  virtual ~Seq2SeqModel() = default;

  const ParamStore& params() const { return params_; }
  const ModelConfig& config() const { return config_; }

  // Task name routes to a branch; empty picks the default path.
  virtual const PointerGeneratorNet& net(std::string_view task) const = 0;
  virtual std::vector<std::string> tasks() const = 0;

  // Mean per-example loss of the batch, routed by batch.task.
  Tensor batch_loss(const ExtendedBatch& batch, bool include_coverage = true) const;

  // Applies to every branch: coverage on/off, forced p_gen, etc.
  void set_decoder_options(const DecoderOptions& options);
  void set_coverage(bool enabled, double weight);

  std::map<std::string, std::string> metadata() const;

 protected:
  explicit Seq2SeqModel(ModelConfig config) : config_(std::move(config)) {}
  virtual std::vector<PointerGeneratorNet*> mutable_nets() = 0;

  ModelConfig config_;
  ParamStore params_;
};

class PointerGeneratorModel final : public Seq2SeqModel {
 public:
  explicit PointerGeneratorModel(ModelConfig config);

  const PointerGeneratorNet& net(std::string_view task = {}) const override;
  std::vector<std::string> tasks() const override { return {""}; }

 protected:
  std::vector<PointerGeneratorNet*> mutable_nets() override { return {&net_}; }

 private:
  PointerGeneratorNet net_;
};

// Shared embedder, shared first encoder layer and shared output layer; one
// bi-LSTM layer plus pointer-generator decoder per task.
class MultiTaskModel final : public Seq2SeqModel {
 public:
  explicit MultiTaskModel(ModelConfig config);

  const PointerGeneratorNet& net(std::string_view task) const override;
  std::vector<std::string> tasks() const override { return config_.tasks; }

  // Names of the shared tensors, in registration order.
  std::vector<std::string> shared_names() const;

 protected:
  std::vector<PointerGeneratorNet*> mutable_nets() override;

 private:
  std::map<std::string, PointerGeneratorNet, std::less<>> branches_;
};

std::unique_ptr<Seq2SeqModel> build_model(const ModelConfig& config);
std::unique_ptr<PointerGeneratorModel> build_pointer_generator(const ModelConfig& config);
std::unique_ptr<MultiTaskModel> build_multitask(const ModelConfig& config);

// Rebuilds the architecture from checkpoint metadata and loads every tensor.
std::unique_ptr<Seq2SeqModel> model_from_checkpoint(const Checkpoint& ckpt);

ParamCount count_params(const Seq2SeqModel& model);
ParamCount count_params(const ParamStore& params);

// Reference multi-task configuration: d_emb=128, h=256, |V|=50000, four tasks.
ModelConfig reference_multitask_config();

}  // namespace leafseq
