#include "leafseq/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <spdlog/spdlog.h>

#include "leafseq/errors.hpp"

namespace leafseq {

namespace {

// Parameters outside the trainable set stop requiring grad while training so
// the backward pass skips them; flags are restored on exit.
class FreezeGuard {
 public:
  FreezeGuard(const ParamStore& params, const std::vector<bool>& trainable) : params_(params) {
    for (std::size_t i = 0; i < params.entries().size(); ++i) {
      const Tensor& t = params.entries()[i].second;
      saved_.push_back(t.requires_grad());
      t.set_requires_grad(trainable[i]);
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < saved_.size(); ++i) params_.entries()[i].second.set_requires_grad(saved_[i]);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  const ParamStore& params_;
  std::vector<bool> saved_;
};

std::size_t meta_size(const Checkpoint& ckpt, const char* key) {
  const auto v = ckpt.meta(key);
  if (v.empty()) throw ContractError(std::string("resume checkpoint lacks metadata '") + key + "'");
  return static_cast<std::size_t>(std::stoull(v));
}

std::string checkpoint_name(std::size_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "ckpt-step%08zu.lnats", step);
  return buf;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

TrainPlan TrainPlan::from_config(const KeyValueConfig& cfg) {
  TrainPlan p;
  if (auto t = cfg.get("train.trainable")) p.trainable = split_list(*t);
  auto count = [&](const char* key, std::size_t fallback) {
    const auto v = cfg.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ContractError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  p.epochs = count("train.epochs", p.epochs);
  p.max_steps = count("train.max_steps", p.max_steps);
  p.learning_rate = cfg.get_double("train.lr", p.learning_rate);
  p.clip_norm = cfg.get_double("train.clip_norm", p.clip_norm);
  p.validate_every = count("train.validate_every", p.validate_every);
  p.n_best = count("train.n_best", p.n_best);
  p.checkpoint_dir = cfg.get_string("train.checkpoint_dir", "");
  p.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", static_cast<long long>(p.seed)));
  if (auto r = cfg.get("train.resume_from"); r && !r->empty()) p.resume_from = *r;
  if (auto reuse = cfg.get("train.reuse")) {
    for (const auto& entry : split_list(*reuse, ';')) {
      const auto colon = entry.rfind(':');
      if (colon == std::string::npos) throw ContractError("train.reuse entry '" + entry + "' is not path:filter");
      p.reuse.push_back({entry.substr(0, colon), entry.substr(colon + 1)});
    }
  }
  if (p.n_best == 0) throw ContractError("train.n_best must be at least 1");
  return p;
}

std::size_t load_partial(const ParamStore& params, const Checkpoint& ckpt, std::string_view filter) {
  std::size_t loaded = 0;
  for (const auto& [name, param] : params.entries()) {
    if (!glob_match(filter, name)) continue;
    const Tensor* src = ckpt.find(name);
    if (src == nullptr) continue;
    if (src->shape() != param.shape()) {
      throw ContractError("load_partial: tensor '" + name + "' is " + shape_string(src->shape()) +
                          " in the checkpoint but " + shape_string(param.shape()) + " in the model");
    }
    std::copy(src->values().begin(), src->values().end(), param.mutable_values().begin());
    ++loaded;
  }
  return loaded;
}

Checkpoint snapshot(const Seq2SeqModel& model) {
  Checkpoint ckpt;
  ckpt.metadata = model.metadata();
  for (const auto& [name, t] : model.params().entries()) ckpt.add(name, t.clone());
  return ckpt;
}

double evaluate_nll(const Seq2SeqModel& model, std::span<const ExtendedBatch> validation) {
  if (validation.empty()) throw ContractError("evaluate_nll: empty validation set");
  double total = 0.0;
  for (const auto& batch : validation) total += model.batch_loss(batch, false).item();
  return total / static_cast<double>(validation.size());
}

std::vector<CheckpointInfo> validate_select(std::vector<CheckpointInfo> checkpoints, std::size_t n_best,
                                            bool prune_files) {
  if (n_best == 0) throw ContractError("validate_select: n_best must be at least 1");
  std::stable_sort(checkpoints.begin(), checkpoints.end(), [](const CheckpointInfo& a, const CheckpointInfo& b) {
    if (a.score != b.score) return a.score < b.score;
    return a.step < b.step;
  });
  if (checkpoints.size() > n_best) {
    for (std::size_t i = n_best; i < checkpoints.size(); ++i) {
      if (prune_files && !checkpoints[i].path.empty()) {
        std::error_code ec;
        std::filesystem::remove(checkpoints[i].path, ec);
      }
    }
    checkpoints.resize(n_best);
  }
  return checkpoints;
}

std::vector<CheckpointInfo> validate_select(const Seq2SeqModel& model, const std::vector<std::filesystem::path>& files,
                                            std::span<const ExtendedBatch> validation, std::size_t n_best,
                                            bool prune_files) {
  if (validation.empty()) throw ContractError("validate_select: empty validation set");
  const Checkpoint saved = snapshot(model);
  std::vector<CheckpointInfo> scored;
  try {
    for (const auto& file : files) {
      const Checkpoint ckpt = load_checkpoint(file);
      load_partial(model.params(), ckpt, "*");
      CheckpointInfo info;
      info.path = file;
      info.step = static_cast<std::size_t>(std::stoull(ckpt.meta("train.step", "0")));
      info.epoch = static_cast<std::size_t>(std::stoull(ckpt.meta("train.epoch", "0")));
      info.score = evaluate_nll(model, validation);
      scored.push_back(std::move(info));
    }
  } catch (...) {
    load_partial(model.params(), saved, "*");
    throw;
  }
  load_partial(model.params(), saved, "*");
  return validate_select(std::move(scored), n_best, prune_files);
}

TrainResult train(const Seq2SeqModel& model, const BatchProvider& batches, std::span<const ExtendedBatch> validation,
                  const TrainPlan& plan) {
  if (plan.n_best == 0) throw ContractError("train: n_best must be at least 1");
  const ParamStore& params = model.params();
  std::vector<bool> is_trainable;
  std::vector<Tensor> trainable;
  std::vector<std::string> trainable_names;
  for (const auto& [name, t] : params.entries()) {
    const bool on = glob_match_any(plan.trainable, name);
    is_trainable.push_back(on);
    if (on) {
      trainable.push_back(t);
      trainable_names.push_back(name);
    }
  }

  AdamState adam;
  adam.config.alpha = plan.learning_rate;
  std::size_t global_step = 0;
  std::size_t start_epoch = 0;
  std::size_t start_batch = 0;

  if (plan.resume_from) {
    const Checkpoint ckpt = load_checkpoint(*plan.resume_from);
    const std::size_t loaded = load_partial(params, ckpt, "*");
    if (loaded != params.size()) {
      throw ContractError("resume: checkpoint " + plan.resume_from->string() + " restores " + std::to_string(loaded) +
                          " of " + std::to_string(params.size()) + " parameters");
    }
    global_step = meta_size(ckpt, "train.step");
    start_epoch = meta_size(ckpt, "train.epoch");
    start_batch = meta_size(ckpt, "train.batch_in_epoch");
    adam.step = meta_size(ckpt, "optim.step");
    for (const auto& name : trainable_names) {
      const Tensor* m = ckpt.find("optim.m." + name);
      const Tensor* v = ckpt.find("optim.v." + name);
      if (m == nullptr || v == nullptr) {
        throw ContractError("resume: checkpoint lacks optimizer state for '" + name + "'");
      }
      adam.m.emplace_back(m->values().begin(), m->values().end());
      adam.v.emplace_back(v->values().begin(), v->values().end());
    }
  } else {
    for (const auto& reuse : plan.reuse) {
      const auto n = load_partial(params, load_checkpoint(reuse.checkpoint), reuse.filter);
      spdlog::info("reused {} tensors from {} ({})", n, reuse.checkpoint.string(), reuse.filter);
    }
  }

  FreezeGuard freeze(params, is_trainable);
  TrainResult result;
  std::size_t pos_epoch = start_epoch;
  std::size_t pos_batch = start_batch;

  auto validate = [&]() {
    if (validation.empty()) return;
    CheckpointInfo info;
    info.step = global_step;
    info.epoch = pos_epoch;
    info.score = evaluate_nll(model, validation);
    if (!plan.checkpoint_dir.empty()) {
      Checkpoint ckpt = snapshot(model);
      ckpt.metadata["train.step"] = std::to_string(global_step);
      ckpt.metadata["train.epoch"] = std::to_string(pos_epoch);
      ckpt.metadata["validation.nll"] = format_double(info.score);
      info.path = plan.checkpoint_dir / checkpoint_name(global_step);
      save_checkpoint(info.path, ckpt);
    }
    spdlog::debug("step {} validation nll {:.6f}", global_step, info.score);
    result.history.push_back(info);
    result.retained.push_back(info);
    result.retained = validate_select(std::move(result.retained), plan.n_best, true);
  };

  const auto out_of_steps = [&]() { return plan.max_steps != 0 && global_step >= plan.max_steps; };
  for (std::size_t epoch = start_epoch; epoch < plan.epochs && !out_of_steps(); ++epoch) {
    const auto epoch_batches = batches(epoch, derive_seed(plan.seed, "shuffle/" + std::to_string(epoch)));
    std::size_t b = epoch == start_epoch ? start_batch : 0;
    bool interrupted = false;
    for (; b < epoch_batches.size(); ++b) {
      if (out_of_steps()) {
        interrupted = true;
        break;
      }
      for (const auto& [name, t] : params.entries()) t.zero_grad();
      double loss_value = 0.0;
      {
        Graph tape;
        Tensor loss = model.batch_loss(epoch_batches[b]);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw NumericError("train: non-finite loss at step " + std::to_string(global_step + 1) + " (epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(b) + ")");
        }
        if (loss.requires_grad()) tape.backward(loss);
      }
      std::vector<std::vector<double>> grads;
      grads.reserve(trainable.size());
      for (const auto& t : trainable) {
        if (t.has_grad()) {
          grads.emplace_back(t.grad().begin(), t.grad().end());
        } else {
          grads.emplace_back(t.numel(), 0.0);
        }
      }
      clip_global_norm(grads, plan.clip_norm);
      adam_step(trainable, grads, adam);
      ++global_step;
      result.losses.push_back(loss_value);
      pos_epoch = epoch;
      pos_batch = b + 1;
      if (pos_batch == epoch_batches.size()) {
        pos_epoch = epoch + 1;
        pos_batch = 0;
      }
      if (plan.validate_every != 0 && global_step % plan.validate_every == 0) validate();
    }
    if (!interrupted && plan.validate_every == 0) validate();
  }
  for (const auto& [name, t] : params.entries()) t.zero_grad();

  result.steps = global_step;
  result.last = snapshot(model);
  result.last.metadata["train.step"] = std::to_string(global_step);
  result.last.metadata["train.epoch"] = std::to_string(pos_epoch);
  result.last.metadata["train.batch_in_epoch"] = std::to_string(pos_batch);
  result.last.metadata["train.seed"] = std::to_string(plan.seed);
  result.last.metadata["optim.step"] = std::to_string(adam.step);
  for (std::size_t i = 0; i < trainable_names.size() && i < adam.m.size(); ++i) {
    const Shape& shape = trainable[i].shape();
    result.last.add("optim.m." + trainable_names[i], Tensor(shape, adam.m[i]));
    result.last.add("optim.v." + trainable_names[i], Tensor(shape, adam.v[i]));
  }
  if (!plan.checkpoint_dir.empty()) save_checkpoint(plan.checkpoint_dir / "last.lnats", result.last);
  return result;
}

GenerationReport test_generate(const Seq2SeqModel& model, std::span<const EncodedExample> test_data,
                               const Vocabulary& vocab, const DecodeConfig& config) {
  GenerationReport report;
  std::vector<std::pair<Tokens, Tokens>> pairs;
  for (const auto& ex : test_data) {
    GenerationRecord rec = decode_example(model, ex, vocab, config);
    report.outputs.push_back(rec.words);
    report.references.push_back(ex.tgt_tokens);
    pairs.emplace_back(rec.words, ex.tgt_tokens);
    report.records.push_back(std::move(rec));
  }
  if (!pairs.empty()) report.rouge = corpus_rouge(pairs);
  return report;
}

}  // namespace leafseq
