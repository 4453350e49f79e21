#include "leafseq/pipelines.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "leafseq/errors.hpp"

namespace leafseq {

std::vector<ExtendedBatch> round_robin(std::vector<std::vector<ExtendedBatch>> per_task) {
  std::vector<ExtendedBatch> out;
  std::size_t longest = 0;
  for (const auto& batches : per_task) longest = std::max(longest, batches.size());
  for (std::size_t i = 0; i < longest; ++i) {
    for (auto& batches : per_task) {
      if (i < batches.size()) out.push_back(std::move(batches[i]));
    }
  }
  return out;
}

BatchProvider round_robin_provider(std::vector<TaskCorpus> corpora, Vocabulary vocab, BatchOptions options) {
  for (const auto& c : corpora) {
    if (c.documents.empty()) throw ContractError("corpus for task '" + c.task + "' is empty");
  }
  return [corpora = std::move(corpora), vocab = std::move(vocab), options](std::size_t, std::uint64_t seed) {
    std::vector<std::vector<ExtendedBatch>> per_task;
    for (const auto& c : corpora) {
      BatchOptions o = options;
      o.task = c.task;
      o.target = c.target;
      per_task.push_back(make_batches(c.documents, vocab, o, derive_seed(seed, c.task)));
    }
    return round_robin(std::move(per_task));
  };
}

TrainResult multitask_train_pipeline(const MultiTaskModel& model, std::span<const TaskCorpus> corpora,
                                     const Vocabulary& vocab, const BatchOptions& options,
                                     std::span<const ExtendedBatch> validation, const TrainPlan& plan) {
  if (corpora.empty()) throw ContractError("multitask pipeline: no corpora");
  for (const auto& c : corpora) model.net(c.task);
  auto provider = round_robin_provider({corpora.begin(), corpora.end()}, vocab, options);
  return train(model, provider, validation, plan);
}

TransferResult transfer_pipeline(const Checkpoint& pretrained, const TaskCorpus& corpus, const Vocabulary& vocab,
                                 const BatchOptions& options, std::span<const ExtendedBatch> validation,
                                 TrainPlan plan, bool unfreeze_shared) {
  if (pretrained.meta("model.kind") != "multitask") {
    throw ContractError("transfer: pretrained checkpoint is not a multi-task model");
  }
  ModelConfig config = ModelConfig::from_metadata(pretrained.metadata);
  if (std::find(config.tasks.begin(), config.tasks.end(), corpus.task) == config.tasks.end()) {
    config.tasks.push_back(corpus.task);
  }
  TransferResult result;
  result.model = build_multitask(config);
  const auto shared = result.model->shared_names();
  for (const auto& name : shared) {
    if (pretrained.find(name) == nullptr) throw ContractError("transfer: pretrained checkpoint lacks '" + name + "'");
  }
  result.shared_loaded = load_partial(result.model->params(), pretrained, "shared.*");
  if (result.shared_loaded != shared.size()) {
    throw ContractError("transfer: loaded " + std::to_string(result.shared_loaded) + " shared tensors, expected " +
                        std::to_string(shared.size()));
  }
  plan.trainable = {"task." + corpus.task + ".*"};
  if (unfreeze_shared) plan.trainable.push_back("shared.*");
  std::vector<TaskCorpus> one{corpus};
  auto provider = round_robin_provider(std::move(one), vocab, options);
  result.train = train(*result.model, provider, validation, plan);
  return result;
}

Tokens synthetic_words(std::size_t n) {
  Tokens words;
  words.reserve(n);
  for (std::size_t i = 0; i < n; ++i) words.push_back("w" + std::to_string(i));
  return words;
}

std::vector<Document> synthetic_copy_corpus(std::size_t pairs, std::size_t words, std::size_t src_len,
                                            std::size_t summary_len, std::size_t title_len, std::uint64_t seed) {
  if (words == 0 || src_len == 0 || summary_len > src_len || title_len > src_len) {
    throw ContractError("synthetic_copy_corpus: invalid lengths");
  }
  const Tokens vocab = synthetic_words(words);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, words - 1);
  std::vector<Document> docs;
  for (std::size_t i = 0; i < pairs; ++i) {
    Document d;
    for (std::size_t t = 0; t < src_len; ++t) d.text.push_back(vocab[pick(rng)]);
    d.summary = Tokens(d.text.begin(), d.text.begin() + static_cast<std::ptrdiff_t>(summary_len));
    d.title = Tokens(d.text.rbegin(), d.text.rbegin() + static_cast<std::ptrdiff_t>(title_len));
    docs.push_back(std::move(d));
  }
  return docs;
}

std::vector<Document> synthetic_oov_corpus(std::size_t pairs, std::size_t filler_words, std::size_t src_len,
                                           std::uint64_t seed) {
  if (filler_words == 0 || src_len < 3) throw ContractError("synthetic_oov_corpus: invalid lengths");
  const Tokens filler = synthetic_words(filler_words);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, filler_words - 1);
  std::uniform_int_distribution<int> letter('a', 'z');
  std::set<std::string> used;
  std::vector<Document> docs;
  for (std::size_t i = 0; i < pairs; ++i) {
    std::string name;
    do {
      name = "n";
      for (int k = 0; k < 6; ++k) name.push_back(static_cast<char>(letter(rng)));
    } while (!used.insert(name).second);
    Document d;
    for (std::size_t t = 0; t + 2 < src_len; ++t) d.text.push_back(filler[pick(rng)]);
    std::uniform_int_distribution<std::size_t> at(0, d.text.size());
    const auto pos = static_cast<std::ptrdiff_t>(at(rng));
    d.text.insert(d.text.begin() + pos, {"mr", name});
    d.summary = Tokens{"mr", name, "spoke"};
    d.title = Tokens{name};
    docs.push_back(std::move(d));
  }
  return docs;
}

}  // namespace leafseq
