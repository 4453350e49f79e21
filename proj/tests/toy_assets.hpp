#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "leafseq/checkpoint.hpp"
#include "leafseq/config.hpp"
#include "leafseq/engine.hpp"
#include "leafseq/pipelines.hpp"

namespace leafseq::testing {

// A small multi-task checkpoint over the four default tasks plus its
// vocabulary, written to `dir`, and the matching service config.
struct ToyAssets {
  std::vector<Document> docs;
  Vocabulary vocab;
  std::filesystem::path checkpoint;
  std::filesystem::path vocab_path;
  KeyValueConfig config;
};

inline ToyAssets write_toy_assets(const std::filesystem::path& dir, std::size_t train_epochs = 0,
                                  std::size_t hidden = 8) {
  ToyAssets a;
  a.docs = synthetic_copy_corpus(8, 16, 6, 3, 2, 11);
  a.vocab = build_vocab(a.docs, 30);
  ModelConfig c;
  c.kind = ModelKind::multitask;
  c.d_emb = 6;
  c.hidden = hidden;
  c.vocab_size = a.vocab.size();
  c.tasks = default_tasks();
  c.seed = 3;
  auto model = build_multitask(c);
  if (train_epochs > 0) {
    std::vector<TaskCorpus> corpora;
    for (const auto& task : c.tasks) {
      corpora.push_back({task, a.docs, is_headline_task(task) ? TargetField::title : TargetField::summary});
    }
    BatchOptions o;
    o.batch_size = 4;
    TrainPlan plan;
    plan.epochs = train_epochs;
    plan.learning_rate = 1e-2;
    multitask_train_pipeline(*model, corpora, a.vocab, o, {}, plan);
  }
  a.checkpoint = dir / "model.lnats";
  a.vocab_path = dir / "vocab.txt";
  save_checkpoint(a.checkpoint, snapshot(*model));
  a.vocab.save(a.vocab_path);
  std::string text;
  for (const auto& task : c.tasks) {
    text += "task." + task + ".checkpoint=model.lnats\n";
    text += "task." + task + ".vocab=vocab.txt\n";
    text += "task." + task + ".beam=3\n";
    text += "task." + task + ".max_len=6\n";
  }
  a.config = KeyValueConfig::parse(text);
  return a;
}

}  // namespace leafseq::testing
