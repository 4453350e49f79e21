#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "leafseq/tensor.hpp"

namespace leafseq {

// Shell-style wildcard match ('*', '?', '[...]') over dotted parameter names.
bool glob_match(std::string_view pattern, std::string_view name);
bool glob_match_any(const std::vector<std::string>& patterns, std::string_view name);

// Ordered, uniquely named parameters. Names are module paths such as
// "shared.embedder.E".
class ParamStore {
 public:
  const Tensor& add(std::string name, Tensor tensor);
  const Tensor* find(std::string_view name) const;
  const Tensor& at(std::string_view name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> names_matching(std::string_view pattern) const;

  // FNV-1a over names and value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, Tensor tensor);
  const Tensor* find(std::string_view name) const;
  std::string meta(std::string_view key, std::string fallback = {}) const;
};

inline constexpr std::string_view kCheckpointMagic = "LNATSCKPT1";

// Layout: magic, u64 metadata length, "key=value\n" lines, then per tensor
// u64 name length, name bytes, rank, dims, f64 payload (all little-endian).
// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace leafseq
