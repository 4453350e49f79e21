#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "leafseq/checkpoint.hpp"
#include "leafseq/data.hpp"
#include "leafseq/decode.hpp"
#include "leafseq/models.hpp"
#include "leafseq/optim.hpp"
#include "leafseq/rouge.hpp"

namespace leafseq {

struct ReuseEntry {
  std::filesystem::path checkpoint;
  std::string filter;  // glob over parameter names
};

struct TrainPlan {
  std::vector<std::string> trainable{"*"};  // globs; everything else stays frozen
  std::vector<ReuseEntry> reuse;            // preloaded before the first step
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: bounded by epochs only
  double learning_rate = 1e-3;
  double clip_norm = 2.0;
  std::size_t validate_every = 0;  // steps; 0: at the end of each epoch
  std::size_t n_best = 3;
  std::filesystem::path checkpoint_dir;  // empty: keep checkpoints in memory only
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> resume_from;

  // "train.*" keys of a key=value config.
  static TrainPlan from_config(const KeyValueConfig& cfg);
};

// Batches for one epoch; `shuffle_seed` is derived from the plan seed and the
// epoch number.
using BatchProvider = std::function<std::vector<ExtendedBatch>(std::size_t epoch, std::uint64_t shuffle_seed)>;

struct CheckpointInfo {
  std::filesystem::path path;
  std::size_t step = 0;
  std::size_t epoch = 0;
  double score = 0.0;  // validation NLL
};

struct TrainResult {
  std::vector<double> losses;            // per step, before the update
  std::vector<CheckpointInfo> history;   // every validation pass
  std::vector<CheckpointInfo> retained;  // n-best, best first
  std::size_t steps = 0;                 // global step count at exit
  Checkpoint last;                       // parameters + optimizer state at exit
};

TrainResult train(const Seq2SeqModel& model, const BatchProvider& batches, std::span<const ExtendedBatch> validation,
                  const TrainPlan& plan);

// Mean batch NLL (coverage term excluded). Throws ContractError when empty.
double evaluate_nll(const Seq2SeqModel& model, std::span<const ExtendedBatch> validation);

// Ranks by ascending score, ties to the earlier step; files of entries past
// n_best are deleted when prune_files is set.
std::vector<CheckpointInfo> validate_select(std::vector<CheckpointInfo> checkpoints, std::size_t n_best,
                                            bool prune_files = true);

// Scores each checkpoint file on the validation data, then ranks as above.
// Model parameters are restored afterwards.
std::vector<CheckpointInfo> validate_select(const Seq2SeqModel& model, const std::vector<std::filesystem::path>& files,
                                            std::span<const ExtendedBatch> validation, std::size_t n_best,
                                            bool prune_files = true);

// Copies tensors whose names match `filter` and exist in both. Optimizer
// entries are never matched. Returns the number of tensors loaded.
std::size_t load_partial(const ParamStore& params, const Checkpoint& ckpt, std::string_view filter);

// Parameters plus model metadata.
Checkpoint snapshot(const Seq2SeqModel& model);

struct GenerationReport {
  std::vector<Tokens> outputs;
  std::vector<Tokens> references;
  std::vector<GenerationRecord> records;
  std::optional<RougeReport> rouge;  // absent for an empty test set
};

GenerationReport test_generate(const Seq2SeqModel& model, std::span<const EncodedExample> test_data,
                               const Vocabulary& vocab, const DecodeConfig& config);

}  // namespace leafseq
