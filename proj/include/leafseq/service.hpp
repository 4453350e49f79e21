#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "leafseq/config.hpp"
#include "leafseq/data.hpp"
#include "leafseq/decode.hpp"
#include "leafseq/models.hpp"

namespace httplib {
class Server;
}

namespace leafseq {

struct TaskEntry {
  std::string name;
  std::shared_ptr<const Seq2SeqModel> model;
  std::shared_ptr<const Vocabulary> vocab;
  std::string branch;  // multi-task branch; ignored by single-path models
  BeamConfig beam;
  std::filesystem::path checkpoint;
};

// Task name -> model, vocabulary and decode defaults. Immutable once built.
class ModelRegistry {
 public:
  // Keys per task: task.<name>.checkpoint, .vocab, optional .branch, .beam,
  // .max_len. Relative paths resolve against base_dir. Models and
  // vocabularies are loaded once per path. Every task is smoke-decoded; any
  // failure throws IoError naming the offending file.
  static ModelRegistry load(const KeyValueConfig& cfg, const std::filesystem::path& base_dir = {});

  void add(TaskEntry entry);
  const TaskEntry* find(std::string_view task) const;
  std::vector<std::string> tasks() const;
  std::size_t size() const { return entries_.size(); }

  // Decodes a one-token probe with every task.
  void smoke_test() const;

 private:
  std::map<std::string, TaskEntry, std::less<>> entries_;
};

struct Post {
  std::string id;
  std::string title;
  std::string summary;
  std::string text;
  std::int64_t created = 0;  // ms since epoch
  std::int64_t updated = 0;
  std::uint64_t seq = 0;

  nlohmann::json to_json() const;
  static Post from_json(const nlohmann::json& j);
};

// File-backed post store: a JSON-lines journal of put/del operations under
// `dir`, replayed and compacted on open. Writes are serialized.
class PostStore {
 public:
  explicit PostStore(std::filesystem::path dir);

  Post create(std::string title, std::string summary, std::string text);
  std::optional<Post> get(std::string_view id) const;
  // Newest first: created descending, then creation order descending.
  std::vector<Post> list() const;
  std::optional<Post> update(std::string_view id, const std::optional<std::string>& title,
                             const std::optional<std::string>& summary, const std::optional<std::string>& text);
  bool remove(std::string_view id);

  const std::filesystem::path& journal() const { return journal_; }

 private:
  void append(const nlohmann::json& op);
  std::string fresh_id();

  std::filesystem::path journal_;
  mutable std::mutex mutex_;
  std::map<std::string, Post, std::less<>> posts_;
  std::uint64_t next_seq_ = 1;
  std::uint64_t id_state_;
};

// LEAFSEQ_DATA_DIR if set, else `fallback`.
std::filesystem::path data_dir(const std::filesystem::path& fallback);

struct Response {
  int status = 200;
  std::string body;
};

struct ServiceOptions {
  std::size_t max_src_len = 400;
  std::size_t max_len_cap = 400;
};

// Request handlers over a registry and a post store. Safe to call
// concurrently.
class Service {
 public:
  Service(const ModelRegistry& registry, PostStore& posts, ServiceOptions options = {});

  Response generate(std::string_view body) const;
  Response create_post(std::string_view body);
  Response list_posts() const;
  Response get_post(std::string_view id) const;
  Response update_post(std::string_view id, std::string_view body);
  Response delete_post(std::string_view id);

  // Routes a request by method and path; 404 for unknown routes.
  Response handle(std::string_view method, std::string_view path, std::string_view body);

 private:
  const ModelRegistry& registry_;
  PostStore& posts_;
  ServiceOptions options_;
};

std::string error_body(std::string_view message);

// HTTP front end for a Service.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Port 0 picks a free port. Returns the bound port; throws IoError.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void listen();
  void stop();

 private:
  Service& service_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace leafseq
