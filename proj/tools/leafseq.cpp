#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "leafseq/checkpoint.hpp"
#include "leafseq/config.hpp"
#include "leafseq/data.hpp"
#include "leafseq/decode.hpp"
#include "leafseq/engine.hpp"
#include "leafseq/errors.hpp"
#include "leafseq/models.hpp"
#include "leafseq/rouge.hpp"
#include "leafseq/service.hpp"

using namespace leafseq;

namespace {

constexpr std::size_t kParamBudget = 20'000'000;

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->stop();
}

TargetField parse_target(const std::string& name) {
  if (name == "summary") return TargetField::summary;
  if (name == "title") return TargetField::title;
  throw ContractError("target must be summary or title, got '" + name + "'");
}

KeyValueConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValueConfig cfg = path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path);
  cfg.apply_overrides(overrides);
  return cfg;
}

int run_serve(const std::string& config_path, const std::string& host, int port) {
  const auto cfg = KeyValueConfig::load(config_path);
  const auto base = std::filesystem::path(config_path).parent_path();
  ModelRegistry registry = ModelRegistry::load(cfg, base);
  spdlog::info("loaded {} task(s)", registry.size());
  PostStore posts(data_dir(cfg.get_string("service.data_dir", "data")));
  ServiceOptions options;
  options.max_src_len = static_cast<std::size_t>(cfg.get_int("service.max_src_len", 400));
  Service service(registry, posts, options);
  HttpServer server(service);
  const int bound = server.bind(host, port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  spdlog::info("listening on {}:{}", host, bound);
  server.listen();
  g_server = nullptr;
  return 0;
}

int run_train(const KeyValueConfig& cfg) {
  const auto format = parse_corpus_format(cfg.get_string("data.format", "jsonl"));
  const auto target = parse_target(cfg.get_string("data.target", "summary"));
  auto imported = import_corpus(cfg.require("data.train"), format);
  const auto docs = with_target(imported.documents, target);
  Vocabulary vocab;
  const auto vocab_path = cfg.get_string("data.vocab", "");
  if (!vocab_path.empty() && std::filesystem::exists(vocab_path)) {
    vocab = Vocabulary::load(vocab_path);
  } else {
    vocab = build_vocab(docs, static_cast<std::size_t>(cfg.get_int("data.vocab_size", 50000)));
    if (!vocab_path.empty()) vocab.save(vocab_path);
  }
  ModelConfig mc = ModelConfig::from_config(cfg);
  mc.vocab_size = vocab.size();
  auto model = build_model(mc);

  BatchOptions bo;
  bo.batch_size = static_cast<std::size_t>(cfg.get_int("data.batch_size", 16));
  bo.max_src_len = static_cast<std::size_t>(cfg.get_int("data.max_src_len", 400));
  bo.max_tgt_len = static_cast<std::size_t>(cfg.get_int("data.max_tgt_len", 100));
  bo.target = target;
  bo.task = cfg.get_string("data.task", "");
  if (mc.kind == ModelKind::multitask) model->net(bo.task);

  std::vector<ExtendedBatch> validation;
  if (auto valid = cfg.get("data.valid")) {
    const auto vdocs = with_target(import_corpus(*valid, format).documents, target);
    validation = make_batches(vdocs, vocab, bo, std::nullopt);
  }
  TrainPlan plan = TrainPlan::from_config(cfg);
  if (!plan.checkpoint_dir.empty()) std::filesystem::create_directories(plan.checkpoint_dir);
  BatchProvider provider = [&](std::size_t, std::uint64_t seed) { return make_batches(docs, vocab, bo, seed); };
  const auto result = train(*model, provider, validation, plan);
  std::cout << "steps " << result.steps << '\n';
  if (!result.losses.empty()) {
    std::cout << "loss first " << result.losses.front() << " last " << result.losses.back() << '\n';
  }
  for (const auto& info : result.retained) {
    std::cout << "retained step " << info.step << " nll " << info.score << ' ' << info.path.string() << '\n';
  }
  return 0;
}

struct LoadedModel {
  std::unique_ptr<Seq2SeqModel> model;
  Vocabulary vocab;
};

LoadedModel load_model(const std::string& checkpoint, const std::string& vocab_path) {
  LoadedModel m;
  m.model = model_from_checkpoint(load_checkpoint(checkpoint));
  m.vocab = Vocabulary::load(vocab_path);
  if (m.vocab.size() != m.model->config().vocab_size) {
    throw ContractError("vocabulary " + vocab_path + " has " + std::to_string(m.vocab.size()) +
                        " entries, checkpoint expects " + std::to_string(m.model->config().vocab_size));
  }
  return m;
}

int run_eval(const std::string& checkpoint, const std::string& vocab_path, const std::string& data,
             const std::string& format, const std::string& target, const std::string& task, std::size_t beam,
             std::size_t max_len, const std::string& output) {
  auto m = load_model(checkpoint, vocab_path);
  const auto docs = with_target(import_corpus(data, parse_corpus_format(format)).documents, parse_target(target));
  BatchOptions bo;
  bo.target = parse_target(target);
  const auto examples = encode_documents(docs, m.vocab, bo);
  DecodeConfig dc;
  dc.beam = {beam, max_len};
  dc.task = task;
  const auto report = test_generate(*m.model, examples, m.vocab, dc);
  if (!output.empty()) {
    std::ofstream out(output);
    for (const auto& rec : report.records) out << rec.text << '\n';
    if (!out) throw IoError("cannot write " + output);
  }
  if (report.rouge) {
    std::cout << report.rouge->text() << '\n' << report.rouge->machine_line() << '\n';
  } else {
    std::cout << "empty test set\n";
  }
  return 0;
}

int run_decode(const std::string& checkpoint, const std::string& vocab_path, const std::string& text,
               const std::string& task, std::size_t beam, std::size_t max_len) {
  auto m = load_model(checkpoint, vocab_path);
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw ContractError("decode: text is empty");
  const auto ex = encode_example(tokens, {}, m.vocab, 0, 0);
  DecodeConfig dc;
  dc.beam = {beam, max_len};
  dc.task = task;
  const auto rec = decode_example(*m.model, ex, m.vocab, dc);
  nlohmann::json out = rec.to_json();
  out["src_tokens"] = ex.src_tokens;
  std::cout << out.dump() << '\n';
  return 0;
}

int run_preprocess(const std::string& input, const std::string& format, const std::string& vocab_out,
                   std::size_t max_size) {
  const auto imported = import_corpus(input, parse_corpus_format(format));
  const auto vocab = build_vocab(imported.documents, max_size);
  vocab.save(vocab_out);
  std::cout << "documents " << imported.documents.size() << " skipped " << imported.skipped << " vocab "
            << vocab.size() << '\n';
  return 0;
}

int run_params(const std::string& config_path, const std::vector<std::string>& overrides) {
  ModelConfig mc = reference_multitask_config();
  if (!config_path.empty() || !overrides.empty()) {
    KeyValueConfig cfg = load_config(config_path, overrides);
    KeyValueConfig base;
    std::map<std::string, std::string> meta;
    mc.to_metadata(meta);
    for (const auto& [k, v] : meta) base.set(k, v);
    for (const auto& [k, v] : cfg.values()) base.set(k, v);
    mc = ModelConfig::from_config(base);
  }
  const auto model = build_model(mc);
  const auto count = count_params(*model);
  std::cout << count.report();
  const bool ok = count.total < kParamBudget;
  std::cout << "budget " << kParamBudget << ' ' << (ok ? "ok" : "exceeded") << '\n';
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"leafseq: pointer-generator summarization toolkit"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

  auto* serve = app.add_subcommand("serve", "Run the generation and post service");
  std::string serve_config;
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--config", serve_config, "Service config (key=value)")->required();
  serve->add_option("--port", port, "Port, 0 for any free port");
  serve->add_option("--host", host, "Bind address");

  auto* train_cmd = app.add_subcommand("train", "Train a model from a key=value config");
  std::string train_config;
  std::vector<std::string> train_overrides;
  train_cmd->add_option("--config", train_config, "Training config")->required();
  train_cmd->add_option("--set", train_overrides, "key=value override (repeatable)");

  auto* eval = app.add_subcommand("eval", "Decode a corpus and report ROUGE");
  std::string checkpoint;
  std::string vocab_path;
  std::string data;
  std::string format = "jsonl";
  std::string target = "summary";
  std::string task;
  std::size_t beam = 4;
  std::size_t max_len = 100;
  std::string output;
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--vocab", vocab_path)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--format", format, "jsonl or tsv");
  eval->add_option("--target", target, "summary or title");
  eval->add_option("--task", task, "Multi-task branch");
  eval->add_option("--beam", beam)->check(CLI::PositiveNumber);
  eval->add_option("--max-len", max_len)->check(CLI::PositiveNumber);
  eval->add_option("--output", output, "Write generated text, one line per document");

  auto* decode = app.add_subcommand("decode", "Decode one text and print the trace as JSON");
  std::string text;
  decode->add_option("--checkpoint", checkpoint)->required();
  decode->add_option("--vocab", vocab_path)->required();
  decode->add_option("--text", text)->required();
  decode->add_option("--task", task, "Multi-task branch");
  decode->add_option("--beam", beam)->check(CLI::PositiveNumber);
  decode->add_option("--max-len", max_len)->check(CLI::PositiveNumber);

  auto* preprocess = app.add_subcommand("preprocess", "Import a corpus and build a vocabulary");
  std::string input;
  std::string vocab_out;
  std::size_t vocab_size = 50000;
  preprocess->add_option("--input", input)->required();
  preprocess->add_option("--format", format, "jsonl or tsv");
  preprocess->add_option("--vocab-out", vocab_out)->required();
  preprocess->add_option("--vocab-size", vocab_size)->check(CLI::PositiveNumber);

  auto* params = app.add_subcommand("params", "Count parameters of the reference multi-task model");
  std::string params_config;
  std::vector<std::string> params_overrides;
  params->add_option("--config", params_config, "Model config overriding the reference dims");
  params->add_option("--set", params_overrides, "key=value override (repeatable)");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));
  try {
    if (*serve) return run_serve(serve_config, host, port);
    if (*train_cmd) return run_train(load_config(train_config, train_overrides));
    if (*eval) return run_eval(checkpoint, vocab_path, data, format, target, task, beam, max_len, output);
    if (*decode) return run_decode(checkpoint, vocab_path, text, task, beam, max_len);
    if (*preprocess) return run_preprocess(input, format, vocab_out, vocab_size);
    if (*params) return run_params(params_config, params_overrides);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
