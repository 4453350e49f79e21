#include "leafseq/service.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <random>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "leafseq/checkpoint.hpp"
#include "leafseq/errors.hpp"

namespace leafseq {

using nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t entropy() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
         static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path;
}

Response json_response(int status, const json& body) { return {status, body.dump()}; }

Response bad_request(std::string_view message) { return {400, error_body(message)}; }

std::optional<json> parse_object(std::string_view body) {
  json j = json::parse(body.begin(), body.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

// Reads an optional string field; returns false when present with the wrong type.
bool optional_string(const json& j, const char* key, std::optional<std::string>& out) {
  if (!j.contains(key)) return true;
  if (!j.at(key).is_string()) return false;
  out = j.at(key).get<std::string>();
  return true;
}

}  // namespace

std::string error_body(std::string_view message) { return json{{"error", std::string(message)}}.dump(); }

// ---- registry -------------------------------------------------------------------------

ModelRegistry ModelRegistry::load(const KeyValueConfig& cfg, const std::filesystem::path& base_dir) {
  ModelRegistry reg;
  std::map<std::string, std::shared_ptr<const Seq2SeqModel>> models;
  std::map<std::string, std::shared_ptr<const Vocabulary>> vocabs;
  std::vector<std::string> names;
  for (const auto& [key, value] : cfg.with_prefix("task.")) {
    const auto dot = key.rfind('.');
    if (dot == std::string::npos) throw ContractError("config key 'task." + key + "' lacks a field");
    const auto name = key.substr(0, dot);
    if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
  }
  for (const auto& name : names) {
    const std::string prefix = "task." + name + ".";
    TaskEntry entry;
    entry.name = name;
    entry.checkpoint = resolve(base_dir, cfg.require(prefix + "checkpoint"));
    const auto vocab_path = resolve(base_dir, cfg.require(prefix + "vocab"));
    const auto ckey = entry.checkpoint.lexically_normal().string();
    try {
      auto& model = models[ckey];
      if (!model) model = model_from_checkpoint(load_checkpoint(entry.checkpoint));
      entry.model = model;
    } catch (const std::exception& e) {
      throw IoError("task " + name + ": cannot load checkpoint " + entry.checkpoint.string() + ": " + e.what());
    }
    try {
      auto& vocab = vocabs[vocab_path.lexically_normal().string()];
      if (!vocab) vocab = std::make_shared<const Vocabulary>(Vocabulary::load(vocab_path));
      entry.vocab = vocab;
    } catch (const std::exception& e) {
      throw IoError("task " + name + ": cannot load vocabulary " + vocab_path.string() + ": " + e.what());
    }
    if (entry.vocab->size() != entry.model->config().vocab_size) {
      throw IoError("task " + name + ": vocabulary " + vocab_path.string() + " has " +
                    std::to_string(entry.vocab->size()) + " entries, checkpoint " + entry.checkpoint.string() +
                    " expects " + std::to_string(entry.model->config().vocab_size));
    }
    const bool multitask = entry.model->config().kind == ModelKind::multitask;
    entry.branch = cfg.get_string(prefix + "branch", multitask ? name : "");
    const auto beam = cfg.get_int(prefix + "beam", 4);
    const auto max_len = cfg.get_int(prefix + "max_len", is_headline_task(name) ? 20 : 100);
    if (beam < 1 || max_len < 1) throw ContractError("task " + name + ": beam and max_len must be positive");
    entry.beam.beam = static_cast<std::size_t>(beam);
    entry.beam.max_len = static_cast<std::size_t>(max_len);
    try {
      entry.model->net(entry.branch);
    } catch (const std::exception& e) {
      throw IoError("task " + name + ": checkpoint " + entry.checkpoint.string() + ": " + e.what());
    }
    reg.add(std::move(entry));
  }
  reg.smoke_test();
  return reg;
}

void ModelRegistry::add(TaskEntry entry) {
  if (!entry.model || !entry.vocab) throw ContractError("registry: task '" + entry.name + "' lacks model or vocab");
  auto name = entry.name;
  if (!entries_.emplace(name, std::move(entry)).second) throw ContractError("registry: duplicate task '" + name + "'");
}

const TaskEntry* ModelRegistry::find(std::string_view task) const {
  auto it = entries_.find(task);
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<std::string> ModelRegistry::tasks() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

void ModelRegistry::smoke_test() const {
  for (const auto& [name, e] : entries_) {
    try {
      const Tokens probe{e.vocab->size() > kSpecialCount ? e.vocab->token(kSpecialCount) : "probe"};
      const auto ex = encode_example(probe, {}, *e.vocab, 0, 0);
      DecodeConfig dc;
      dc.beam = {1, 2};
      dc.task = e.branch;
      decode_example(*e.model, ex, *e.vocab, dc);
    } catch (const std::exception& ex) {
      throw IoError("task " + name + ": smoke decode failed for checkpoint " + e.checkpoint.string() + ": " +
                    ex.what());
    }
  }
}

// ---- posts ------------------------------------------------------------------------------

json Post::to_json() const {
  return {{"id", id},           {"title", title},     {"summary", summary}, {"text", text},
          {"created", created}, {"updated", updated}, {"seq", seq}};
}

Post Post::from_json(const json& j) {
  Post p;
  p.id = j.at("id").get<std::string>();
  p.title = j.value("title", "");
  p.summary = j.value("summary", "");
  p.text = j.at("text").get<std::string>();
  p.created = j.value("created", std::int64_t{0});
  p.updated = j.value("updated", p.created);
  p.seq = j.value("seq", std::uint64_t{0});
  return p;
}

std::filesystem::path data_dir(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv("LEAFSEQ_DATA_DIR"); env != nullptr && *env != '\0') return env;
  return fallback;
}

PostStore::PostStore(std::filesystem::path dir) : id_state_(entropy()) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create data directory " + dir.string() + ": " + ec.message());
  journal_ = dir / "posts.jsonl";
  if (std::ifstream in(journal_); in) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const json op = json::parse(line);
        const auto kind = op.at("op").get<std::string>();
        if (kind == "put") {
          Post p = Post::from_json(op.at("post"));
          next_seq_ = std::max(next_seq_, p.seq + 1);
          posts_[p.id] = std::move(p);
        } else if (kind == "del") {
          posts_.erase(op.at("id").get<std::string>());
        }
      } catch (const std::exception& e) {
        spdlog::warn("{}:{}: skipping unreadable journal line ({})", journal_.string(), lineno, e.what());
      }
    }
  }
  const auto tmp = journal_.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    std::vector<const Post*> order;
    for (const auto& [id, p] : posts_) order.push_back(&p);
    std::sort(order.begin(), order.end(), [](const Post* a, const Post* b) { return a->seq < b->seq; });
    for (const Post* p : order) out << json{{"op", "put"}, {"post", p->to_json()}}.dump() << '\n';
    out.flush();
    if (!out) throw IoError("cannot write " + tmp);
  }
  std::filesystem::rename(tmp, journal_, ec);
  if (ec) throw IoError("cannot replace " + journal_.string() + ": " + ec.message());
}

void PostStore::append(const json& op) {
  std::ofstream out(journal_, std::ios::app);
  out << op.dump() << '\n';
  out.flush();
  if (!out) throw IoError("cannot append to " + journal_.string());
}

std::string PostStore::fresh_id() {
  std::string id;
  do {
    id = hex64(splitmix(id_state_));
  } while (posts_.contains(id));
  return id;
}

Post PostStore::create(std::string title, std::string summary, std::string text) {
  if (text.empty()) throw ContractError("post text must be non-empty");
  std::lock_guard lock(mutex_);
  Post p;
  p.id = fresh_id();
  p.title = std::move(title);
  p.summary = std::move(summary);
  p.text = std::move(text);
  p.created = now_ms();
  p.updated = p.created;
  p.seq = next_seq_++;
  append({{"op", "put"}, {"post", p.to_json()}});
  posts_[p.id] = p;
  return p;
}

std::optional<Post> PostStore::get(std::string_view id) const {
  std::lock_guard lock(mutex_);
  auto it = posts_.find(id);
  if (it == posts_.end()) return std::nullopt;
  return it->second;
}

std::vector<Post> PostStore::list() const {
  std::vector<Post> out;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, p] : posts_) out.push_back(p);
  }
  std::sort(out.begin(), out.end(), [](const Post& a, const Post& b) {
    if (a.created != b.created) return a.created > b.created;
    return a.seq > b.seq;
  });
  return out;
}

std::optional<Post> PostStore::update(std::string_view id, const std::optional<std::string>& title,
                                      const std::optional<std::string>& summary,
                                      const std::optional<std::string>& text) {
  if (text && text->empty()) throw ContractError("post text must be non-empty");
  std::lock_guard lock(mutex_);
  auto it = posts_.find(id);
  if (it == posts_.end()) return std::nullopt;
  Post p = it->second;
  if (title) p.title = *title;
  if (summary) p.summary = *summary;
  if (text) p.text = *text;
  p.updated = std::max(now_ms(), p.created);
  append({{"op", "put"}, {"post", p.to_json()}});
  it->second = p;
  return p;
}

bool PostStore::remove(std::string_view id) {
  std::lock_guard lock(mutex_);
  auto it = posts_.find(id);
  if (it == posts_.end()) return false;
  append({{"op", "del"}, {"id", std::string(id)}});
  posts_.erase(it);
  return true;
}

// ---- handlers -------------------------------------------------------------------------

Service::Service(const ModelRegistry& registry, PostStore& posts, ServiceOptions options)
    : registry_(registry), posts_(posts), options_(options) {}

Response Service::generate(std::string_view body) const {
  const auto req = parse_object(body);
  if (!req) return bad_request("body must be a JSON object");
  if (!req->contains("text") || !req->at("text").is_string()) return bad_request("text must be a string");
  if (!req->contains("tasks") || !req->at("tasks").is_array()) return bad_request("tasks must be a list");
  std::optional<std::size_t> beam;
  std::optional<std::size_t> max_len;
  if (req->contains("beam")) {
    const auto& b = req->at("beam");
    if (!b.is_number_integer() || b.get<long long>() < 1) return bad_request("beam must be an integer >= 1");
    beam = b.get<std::size_t>();
  }
  if (req->contains("max_len")) {
    const auto& m = req->at("max_len");
    if (!m.is_number_integer() || m.get<long long>() < 1 ||
        m.get<unsigned long long>() > options_.max_len_cap) {
      return bad_request("max_len must be an integer in [1, " + std::to_string(options_.max_len_cap) + "]");
    }
    max_len = m.get<std::size_t>();
  }
  std::vector<const TaskEntry*> entries;
  for (const auto& t : req->at("tasks")) {
    if (!t.is_string()) return bad_request("tasks must be a list of strings");
    const auto* entry = registry_.find(t.get<std::string>());
    if (entry == nullptr) return bad_request("unknown task '" + t.get<std::string>() + "'");
    entries.push_back(entry);
  }
  Tokens tokens = tokenize(req->at("text").get<std::string>());
  if (tokens.empty()) return bad_request("text is empty");
  if (tokens.size() > options_.max_src_len) tokens.resize(options_.max_src_len);

  std::vector<std::future<GenerationRecord>> jobs;
  for (const auto* entry : entries) {
    jobs.push_back(std::async(std::launch::async, [entry, &tokens, beam, max_len] {
      const auto ex = encode_example(tokens, {}, *entry->vocab, 0, 0);
      DecodeConfig dc;
      dc.beam = entry->beam;
      if (beam) dc.beam.beam = *beam;
      if (max_len) dc.beam.max_len = *max_len;
      dc.task = entry->branch;
      return decode_example(*entry->model, ex, *entry->vocab, dc);
    }));
  }
  json results = json::array();
  std::string failure;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    try {
      const json rec = jobs[i].get().to_json();
      results.push_back({{"task", entries[i]->name},
                         {"tokens", rec.at("tokens")},
                         {"text", rec.at("text")},
                         {"attention", rec.at("attention")},
                         {"p_gen", rec.at("p_gen")},
                         {"score", rec.at("score")}});
    } catch (const std::exception& e) {
      if (failure.empty()) {
        failure = hex64(entropy()).substr(0, 12);
        spdlog::error("generate failure {}: task {}: {}", failure, entries[i]->name, e.what());
      }
    }
  }
  if (!failure.empty()) return {500, error_body("internal error " + failure)};
  return json_response(200, {{"src_tokens", tokens}, {"results", std::move(results)}});
}

Response Service::create_post(std::string_view body) {
  const auto req = parse_object(body);
  if (!req) return bad_request("body must be a JSON object");
  std::optional<std::string> title;
  std::optional<std::string> summary;
  std::optional<std::string> text;
  if (!optional_string(*req, "title", title) || !optional_string(*req, "summary", summary) ||
      !optional_string(*req, "text", text)) {
    return bad_request("title, summary and text must be strings");
  }
  if (!text || text->empty()) return bad_request("text must be a non-empty string");
  const Post p = posts_.create(title.value_or(""), summary.value_or(""), *text);
  return json_response(201, p.to_json());
}

Response Service::list_posts() const {
  json items = json::array();
  for (const auto& p : posts_.list()) items.push_back(p.to_json());
  return json_response(200, {{"posts", std::move(items)}});
}

Response Service::get_post(std::string_view id) const {
  const auto p = posts_.get(id);
  if (!p) return {404, error_body("no post '" + std::string(id) + "'")};
  return json_response(200, p->to_json());
}

Response Service::update_post(std::string_view id, std::string_view body) {
  const auto req = parse_object(body);
  if (!req) return bad_request("body must be a JSON object");
  std::optional<std::string> title;
  std::optional<std::string> summary;
  std::optional<std::string> text;
  if (!optional_string(*req, "title", title) || !optional_string(*req, "summary", summary) ||
      !optional_string(*req, "text", text)) {
    return bad_request("title, summary and text must be strings");
  }
  if (text && text->empty()) return bad_request("text must be a non-empty string");
  const auto p = posts_.update(id, title, summary, text);
  if (!p) return {404, error_body("no post '" + std::string(id) + "'")};
  return json_response(200, p->to_json());
}

Response Service::delete_post(std::string_view id) {
  if (!posts_.remove(id)) return {404, error_body("no post '" + std::string(id) + "'")};
  return {204, ""};
}

Response Service::handle(std::string_view method, std::string_view path, std::string_view body) {
  constexpr std::string_view posts_prefix = "/v1/posts/";
  if (path == "/v1/generate") {
    if (method == "POST") return generate(body);
    return {405, error_body("method not allowed")};
  }
  if (path == "/v1/posts") {
    if (method == "POST") return create_post(body);
    if (method == "GET") return list_posts();
    return {405, error_body("method not allowed")};
  }
  if (path.starts_with(posts_prefix) && path.size() > posts_prefix.size()) {
    const auto id = path.substr(posts_prefix.size());
    if (id.find('/') != std::string_view::npos) return {404, error_body("not found")};
    if (method == "GET") return get_post(id);
    if (method == "PUT") return update_post(id, body);
    if (method == "DELETE") return delete_post(id);
    return {405, error_body("method not allowed")};
  }
  return {404, error_body("not found")};
}

// ---- http -------------------------------------------------------------------------------

HttpServer::HttpServer(Service& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    Response r;
    try {
      r = service_.handle(req.method, req.path, req.body);
    } catch (const std::exception& e) {
      const auto id = hex64(entropy()).substr(0, 12);
      spdlog::error("request failure {}: {} {}: {}", id, req.method, req.path, e.what());
      r = {500, error_body("internal error " + id)};
    }
    res.status = r.status;
    if (r.status != 204) res.set_content(r.body, "application/json; charset=utf-8");
  };
  const char* generate = "/v1/generate";
  const char* posts = "/v1/posts";
  const char* post = R"(/v1/posts/[^/]+)";
  server_->Post(generate, route);
  server_->Post(posts, route);
  server_->Get(posts, route);
  server_->Get(post, route);
  server_->Put(post, route);
  server_->Delete(post, route);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound <= 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { server_->listen_after_bind(); }

void HttpServer::stop() {
  if (server_) server_->stop();
}

}  // namespace leafseq
