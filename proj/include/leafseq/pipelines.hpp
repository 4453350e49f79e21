#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "leafseq/data.hpp"
#include "leafseq/engine.hpp"
#include "leafseq/models.hpp"

namespace leafseq {

struct TaskCorpus {
  std::string task;
  std::vector<Document> documents;
  TargetField target = TargetField::summary;
};

// Takes one batch from each task in turn; when a task runs out the rest keep
// alternating.
std::vector<ExtendedBatch> round_robin(std::vector<std::vector<ExtendedBatch>> per_task);

// Per-epoch batches of every corpus, shuffled with seeds derived from the
// epoch seed and the task name, then interleaved.
BatchProvider round_robin_provider(std::vector<TaskCorpus> corpora, Vocabulary vocab, BatchOptions options);

// Trains every branch of a multi-task model on its own corpus.
TrainResult multitask_train_pipeline(const MultiTaskModel& model, std::span<const TaskCorpus> corpora,
                                     const Vocabulary& vocab, const BatchOptions& options,
                                     std::span<const ExtendedBatch> validation, const TrainPlan& plan);

struct TransferResult {
  std::unique_ptr<MultiTaskModel> model;
  std::size_t shared_loaded = 0;
  TrainResult train;
};

// Builds the pretrained architecture (adding corpus.task as a branch if
// needed), loads shared.* from the checkpoint and trains the new branch.
// Shared tensors stay frozen unless unfreeze_shared is set.
TransferResult transfer_pipeline(const Checkpoint& pretrained, const TaskCorpus& corpus, const Vocabulary& vocab,
                                 const BatchOptions& options, std::span<const ExtendedBatch> validation,
                                 TrainPlan plan, bool unfreeze_shared = false);

// ---- synthetic corpora ----------------------------------------------------------

// Word list "w0".."w{n-1}".
Tokens synthetic_words(std::size_t n);

// Sources of src_len random words; summary is the first summary_len words,
// title the last title_len words in reverse order.
std::vector<Document> synthetic_copy_corpus(std::size_t pairs, std::size_t words, std::size_t src_len,
                                            std::size_t summary_len, std::size_t title_len, std::uint64_t seed);

// Sources are random filler words with "mr <name>" inserted at a random
// position; the summary is "mr <name> spoke". Names are fresh per document
// and never occur twice, so a vocabulary built over filler words leaves them
// out.
std::vector<Document> synthetic_oov_corpus(std::size_t pairs, std::size_t filler_words, std::size_t src_len,
                                           std::uint64_t seed);

}  // namespace leafseq
