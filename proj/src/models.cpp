#include "leafseq/models.hpp"

#include <random>
#include <sstream>

#include "leafseq/errors.hpp"

namespace leafseq {

std::uint64_t derive_seed(std::uint64_t master, std::string_view component) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : component) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = master + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---- tasks -----------------------------------------------------------------------------

std::string_view task_name(TaskTag tag) {
  switch (tag) {
    case TaskTag::newsroom_summary: return "newsroom_summary";
    case TaskTag::newsroom_headline: return "newsroom_headline";
    case TaskTag::cnndm_summary: return "cnndm_summary";
    case TaskTag::bytecup_headline: return "bytecup_headline";
  }
  return "";
}

TaskTag parse_task(std::string_view name) {
  for (auto tag : {TaskTag::newsroom_summary, TaskTag::newsroom_headline, TaskTag::cnndm_summary,
                   TaskTag::bytecup_headline}) {
    if (task_name(tag) == name) return tag;
  }
  throw ContractError("unknown task '" + std::string(name) + "'");
}

bool is_headline_task(std::string_view name) { return name.find("headline") != std::string_view::npos; }

const std::vector<std::string>& default_tasks() {
  static const std::vector<std::string> tasks{"newsroom_summary", "newsroom_headline", "cnndm_summary",
                                              "bytecup_headline"};
  return tasks;
}

// ---- configuration -----------------------------------------------------------------------

namespace {

ModelConfig read_config(const std::map<std::string, std::string>& kv) {
  KeyValueConfig cfg;
  for (const auto& [k, v] : kv) cfg.set(k, v);
  ModelConfig c;
  const auto kind = cfg.get_string("model.kind", "pointer_generator");
  if (kind == "pointer_generator") {
    c.kind = ModelKind::pointer_generator;
  } else if (kind == "multitask") {
    c.kind = ModelKind::multitask;
  } else {
    throw ContractError("model.kind must be pointer_generator or multitask, got '" + kind + "'");
  }
  auto dim = [&](const char* key, std::size_t fallback) {
    const auto v = cfg.get_int(key, static_cast<long long>(fallback));
    if (v <= 0) throw ContractError(std::string(key) + " must be positive");
    return static_cast<std::size_t>(v);
  };
  c.d_emb = dim("model.d_emb", c.d_emb);
  c.hidden = dim("model.hidden", c.hidden);
  c.vocab_size = dim("model.vocab_size", c.vocab_size);
  c.encoder_layers = dim("model.encoder_layers", c.encoder_layers);
  const auto attn = cfg.get_string("model.attention", "additive");
  if (attn == "additive") {
    c.attention = AttentionMode::additive;
  } else if (attn == "bilinear") {
    c.attention = AttentionMode::bilinear;
  } else {
    throw ContractError("model.attention must be additive or bilinear, got '" + attn + "'");
  }
  c.coverage = cfg.get_bool("model.coverage", c.coverage);
  c.temporal = cfg.get_bool("model.temporal", c.temporal);
  c.intra_decoder = cfg.get_bool("model.intra_decoder", c.intra_decoder);
  c.share_embedding = cfg.get_bool("model.share_embedding", c.share_embedding);
  c.coverage_weight = cfg.get_double("model.coverage_weight", c.coverage_weight);
  c.seed = static_cast<std::uint64_t>(cfg.get_int("model.seed", static_cast<long long>(c.seed)));
  if (auto tasks = cfg.get("model.tasks")) c.tasks = split_list(*tasks);
  if (c.kind == ModelKind::multitask && c.tasks.empty()) c.tasks = default_tasks();
  return c;
}

}  // namespace

ModelConfig ModelConfig::from_config(const KeyValueConfig& cfg) { return read_config(cfg.values()); }

ModelConfig ModelConfig::from_metadata(const std::map<std::string, std::string>& meta) { return read_config(meta); }

void ModelConfig::to_metadata(std::map<std::string, std::string>& meta) const {
  meta["model.kind"] = kind == ModelKind::multitask ? "multitask" : "pointer_generator";
  meta["model.d_emb"] = std::to_string(d_emb);
  meta["model.hidden"] = std::to_string(hidden);
  meta["model.vocab_size"] = std::to_string(vocab_size);
  meta["model.encoder_layers"] = std::to_string(encoder_layers);
  meta["model.attention"] = attention == AttentionMode::bilinear ? "bilinear" : "additive";
  meta["model.coverage"] = coverage ? "true" : "false";
  meta["model.temporal"] = temporal ? "true" : "false";
  meta["model.intra_decoder"] = intra_decoder ? "true" : "false";
  meta["model.share_embedding"] = share_embedding ? "true" : "false";
  std::ostringstream w;
  w.precision(17);
  w << coverage_weight;
  meta["model.coverage_weight"] = w.str();
  meta["model.seed"] = std::to_string(seed);
  std::string t;
  for (const auto& task : tasks) t += (t.empty() ? "" : ",") + task;
  if (!t.empty()) meta["model.tasks"] = t;
}

void ModelConfig::validate() const {
  if (d_emb == 0 || hidden == 0 || vocab_size == 0 || encoder_layers == 0) {
    throw ContractError("model config: dimensions must be positive (d_emb=" + std::to_string(d_emb) +
                        ", hidden=" + std::to_string(hidden) + ", vocab_size=" + std::to_string(vocab_size) + ")");
  }
  if (vocab_size <= kSpecialCount) throw ContractError("model config: vocab_size must exceed the special ids");
  if (kind == ModelKind::multitask && tasks.empty()) throw ContractError("model config: multitask needs tasks");
}

// ---- net --------------------------------------------------------------------------------

EncoderStates PointerGeneratorNet::encode(std::span<const std::int64_t> src_ids,
                                          std::span<const std::uint8_t> mask) const {
  if (src_ids.empty()) throw ContractError("encode: empty source");
  Tensor x = embedder.embed(src_ids);
  EncoderStates enc;
  for (const auto& layer : encoder) {
    enc = bilstm_encode(x, mask, layer);
    x = enc.H;
  }
  if (options.mode == AttentionMode::additive) enc.keys = matmul(enc.H, decoder.attention.W_h);
  return enc;
}

EncoderStates PointerGeneratorNet::encode(const EncodedExample& ex) const {
  std::vector<std::uint8_t> mask(ex.src_ids.size(), 1);
  return encode(ex.src_ids, mask);
}

PointerGeneratorNet::Trace PointerGeneratorNet::teacher_force(const EncodedExample& ex) const {
  if (ex.tgt_in.size() != ex.tgt_out.size()) throw ContractError("teacher_force: target input/output lengths differ");
  const EncoderStates enc = encode(ex);
  const CopySource source{ex.src_ext, vocab_size(), ex.oovs.size()};
  DecoderState state = initial_decoder_state(enc, decoder, options);
  Tensor inputs = embedder.embed(ex.tgt_in);
  const std::size_t d = embedder.dim();
  Trace trace;
  for (std::size_t t = 0; t < ex.tgt_in.size(); ++t) {
    Tensor x = reshape(slice(inputs, t, t + 1), {d});
    StepOutput step = pointer_generator_step(x, state, enc, source, decoder, output, options);
    trace.p_final.push_back(step.p_final);
    trace.alpha.push_back(step.alpha);
    trace.coverage.push_back(step.coverage);
    trace.p_gen.push_back(step.p_gen);
    state = std::move(step.state);
  }
  return trace;
}

Tensor PointerGeneratorNet::example_loss(const EncodedExample& ex, bool include_coverage) const {
  const Trace trace = teacher_force(ex);
  const std::vector<std::uint8_t> mask(ex.tgt_out.size(), 1);
  Tensor loss = nll_loss(trace.p_final, ex.tgt_out, mask);
  if (include_coverage && options.coverage && coverage_weight > 0) {
    loss = add(loss, scale(coverage_loss(trace.alpha, trace.coverage, mask), coverage_weight));
  }
  return loss;
}

// ---- builders -----------------------------------------------------------------------------

namespace {

class Builder {
 public:
  Builder(ParamStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  Tensor make(const std::string& name, Shape shape) {
    const auto n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = dist_(rng_);
    return store_.add(name, Tensor(std::move(shape), std::move(v)));
  }

  LstmParams lstm(const std::string& prefix, std::size_t in, std::size_t h) {
    LstmParams p{make(prefix + ".W", {in, 4 * h}), make(prefix + ".U", {h, 4 * h}), make(prefix + ".b", {4 * h})};
    auto b = p.b.mutable_values();
    for (std::size_t i = h; i < 2 * h; ++i) b[i] += 1.0;
    return p;
  }

  BiLstmParams bilstm(const std::string& prefix, std::size_t in, std::size_t h) {
    auto fwd = lstm(prefix + ".fwd", in, h);
    auto bwd = lstm(prefix + ".bwd", in, h);
    return {fwd, bwd};
  }

  DecoderParams decoder(const std::string& prefix, const ModelConfig& c) {
    const std::size_t h = c.hidden;
    DecoderParams p;
    p.cell = lstm(prefix + ".cell", c.d_emb, h);
    p.reduce_h_W = make(prefix + ".reduce_h.W", {2 * h, h});
    p.reduce_h_b = make(prefix + ".reduce_h.b", {h});
    p.reduce_c_W = make(prefix + ".reduce_c.W", {2 * h, h});
    p.reduce_c_b = make(prefix + ".reduce_c.b", {h});
    if (c.attention == AttentionMode::additive) {
      p.attention.W_h = make(prefix + ".attention.W_h", {2 * h, h});
      p.attention.W_s = make(prefix + ".attention.W_s", {h, h});
      p.attention.w_c = make(prefix + ".attention.w_c", {h});
      p.attention.b = make(prefix + ".attention.b", {h});
      p.attention.v = make(prefix + ".attention.v", {h});
    } else {
      p.attention.W_a = make(prefix + ".attention.W_a", {h, 2 * h});
    }
    if (c.intra_decoder) p.intra_W = make(prefix + ".intra.W", {h, h});
    p.pointer.w_c = make(prefix + ".pointer.w_c", {2 * h, 1});
    p.pointer.w_s = make(prefix + ".pointer.w_s", {h, 1});
    p.pointer.w_x = make(prefix + ".pointer.w_x", {c.d_emb, 1});
    p.pointer.b = make(prefix + ".pointer.b", {1});
    return p;
  }

  OutputLayer output(const std::string& prefix, const ModelConfig& c, const Embedder& emb) {
    const std::size_t q = 3 * c.hidden + (c.intra_decoder ? c.hidden : 0);
    OutputLayer out;
    out.W_proj = make(prefix + ".proj.W", {q, c.d_emb});
    out.b_proj = make(prefix + ".proj.b", {c.d_emb});
    out.E = c.share_embedding ? emb.table : make(prefix + ".E", {c.vocab_size, c.d_emb});
    return out;
  }

  Embedder embedder(const std::string& prefix, const ModelConfig& c) {
    return Embedder{make(prefix + ".E", {c.vocab_size, c.d_emb}), c.share_embedding};
  }

 private:
  ParamStore& store_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> dist_{-0.1, 0.1};
};

DecoderOptions options_for(const ModelConfig& c) {
  DecoderOptions o;
  o.mode = c.attention;
  o.coverage = c.coverage;
  o.temporal = c.temporal;
  o.intra_decoder = c.intra_decoder;
  return o;
}

}  // namespace

Tensor Seq2SeqModel::batch_loss(const ExtendedBatch& batch, bool include_coverage) const {
  if (batch.examples.empty()) throw ContractError("batch_loss: empty batch");
  const PointerGeneratorNet& path = net(batch.task);
  std::vector<Tensor> losses;
  losses.reserve(batch.size());
  for (const auto& ex : batch.examples) losses.push_back(path.example_loss(ex, include_coverage));
  if (losses.size() == 1) return losses[0];
  return mean(stack_rows(losses));
}

void Seq2SeqModel::set_decoder_options(const DecoderOptions& options) {
  for (auto* n : mutable_nets()) n->options = options;
  config_.coverage = options.coverage;
  config_.temporal = options.temporal;
  config_.intra_decoder = options.intra_decoder;
}

void Seq2SeqModel::set_coverage(bool enabled, double weight) {
  if (enabled && config_.attention != AttentionMode::additive) {
    throw ContractError("coverage requires additive attention");
  }
  for (auto* n : mutable_nets()) {
    n->options.coverage = enabled;
    n->coverage_weight = weight;
  }
  config_.coverage = enabled;
  config_.coverage_weight = weight;
}

std::map<std::string, std::string> Seq2SeqModel::metadata() const {
  std::map<std::string, std::string> meta;
  config_.to_metadata(meta);
  return meta;
}

PointerGeneratorModel::PointerGeneratorModel(ModelConfig config) : Seq2SeqModel(std::move(config)) {
  config_.kind = ModelKind::pointer_generator;
  config_.validate();
  const auto& c = config_;
  Builder b(params_, derive_seed(c.seed, "init"));
  net_.embedder = b.embedder("embedder", c);
  for (std::size_t l = 0; l < c.encoder_layers; ++l) {
    net_.encoder.push_back(b.bilstm("encoder.l" + std::to_string(l), l == 0 ? c.d_emb : 2 * c.hidden, c.hidden));
  }
  net_.decoder = b.decoder("decoder", c);
  net_.output = b.output("output", c, net_.embedder);
  net_.options = options_for(c);
  net_.coverage_weight = c.coverage_weight;
}

const PointerGeneratorNet& PointerGeneratorModel::net(std::string_view) const { return net_; }

MultiTaskModel::MultiTaskModel(ModelConfig config) : Seq2SeqModel(std::move(config)) {
  config_.kind = ModelKind::multitask;
  if (config_.tasks.empty()) config_.tasks = default_tasks();
  config_.validate();
  const auto& c = config_;
  Builder b(params_, derive_seed(c.seed, "init"));
  Embedder embedder = b.embedder("shared.embedder", c);
  BiLstmParams shared_encoder = b.bilstm("shared.encoder.l0", c.d_emb, c.hidden);
  std::vector<std::pair<std::string, PointerGeneratorNet>> built;
  for (const auto& task : c.tasks) {
    if (branches_.contains(task)) throw ContractError("multitask: duplicate task '" + task + "'");
    PointerGeneratorNet n;
    n.embedder = embedder;
    n.encoder.push_back(shared_encoder);
    n.encoder.push_back(b.bilstm("task." + task + ".encoder.l1", 2 * c.hidden, c.hidden));
    n.decoder = b.decoder("task." + task + ".decoder", c);
    n.options = options_for(c);
    n.coverage_weight = c.coverage_weight;
    branches_.emplace(task, std::move(n));
  }
  OutputLayer output = b.output("shared.output", c, embedder);
  for (auto& [task, n] : branches_) n.output = output;
}

const PointerGeneratorNet& MultiTaskModel::net(std::string_view task) const {
  auto it = branches_.find(task);
  if (it == branches_.end()) throw ContractError("multitask: unknown task '" + std::string(task) + "'");
  return it->second;
}

std::vector<PointerGeneratorNet*> MultiTaskModel::mutable_nets() {
  std::vector<PointerGeneratorNet*> out;
  for (auto& [task, n] : branches_) out.push_back(&n);
  return out;
}

std::vector<std::string> MultiTaskModel::shared_names() const { return params_.names_matching("shared.*"); }

std::unique_ptr<PointerGeneratorModel> build_pointer_generator(const ModelConfig& config) {
  return std::make_unique<PointerGeneratorModel>(config);
}

std::unique_ptr<MultiTaskModel> build_multitask(const ModelConfig& config) {
  return std::make_unique<MultiTaskModel>(config);
}

std::unique_ptr<Seq2SeqModel> build_model(const ModelConfig& config) {
  if (config.kind == ModelKind::multitask) return build_multitask(config);
  return build_pointer_generator(config);
}

std::unique_ptr<Seq2SeqModel> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = build_model(ModelConfig::from_metadata(ckpt.metadata));
  for (const auto& [name, param] : model->params().entries()) {
    const Tensor* src = ckpt.find(name);
    if (src == nullptr) throw ContractError("checkpoint lacks tensor '" + name + "'");
    if (src->shape() != param.shape()) {
      throw ContractError("tensor '" + name + "' has shape " + shape_string(src->shape()) + ", model expects " +
                          shape_string(param.shape()));
    }
    std::copy(src->values().begin(), src->values().end(), param.mutable_values().begin());
  }
  return model;
}

ParamCount count_params(const Seq2SeqModel& model) { return count_params(model.params()); }

ParamCount count_params(const ParamStore& params) {
  ParamCount out;
  for (const auto& [name, t] : params.entries()) {
    const auto dot = name.rfind('.');
    const std::string module = dot == std::string::npos ? name : name.substr(0, dot);
    if (out.modules.empty() || out.modules.back().first != module) out.modules.emplace_back(module, 0);
    out.modules.back().second += t.numel();
    if (name.rfind("shared.", 0) == 0) out.shared += t.numel();
    if (name.rfind("task.", 0) == 0) out.task_specific += t.numel();
    out.total += t.numel();
  }
  return out;
}

std::string ParamCount::report() const {
  std::ostringstream os;
  for (const auto& [module, n] : modules) os << module << ' ' << n << '\n';
  os << "shared " << shared << '\n';
  os << "task_specific " << task_specific << '\n';
  os << "total " << total << '\n';
  return os.str();
}

ModelConfig reference_multitask_config() {
  ModelConfig c;
  c.kind = ModelKind::multitask;
  c.d_emb = 128;
  c.hidden = 256;
  c.vocab_size = 50000;
  c.tasks = default_tasks();
  return c;
}

}  // namespace leafseq
