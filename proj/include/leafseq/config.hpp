#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace leafseq {

// UTF-8 "key=value" lines; '#' starts a comment, blank lines ignored, the
// last assignment of a key wins.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text, std::string_view origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  void set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }
  // Applies "key=value" overrides on top of this config.
  void apply_overrides(const std::vector<std::string>& assignments);

  bool contains(std::string_view key) const { return values_.contains(std::string(key)); }
  std::optional<std::string> get(std::string_view key) const;
  std::string get_string(std::string_view key, std::string fallback) const;
  long long get_int(std::string_view key, long long fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::string require(std::string_view key) const;

  // Keys starting with prefix, prefix stripped.
  std::map<std::string, std::string> with_prefix(std::string_view prefix) const;
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string serialize() const;

 private:
  std::map<std::string, std::string> values_;
};

std::vector<std::string> split_list(std::string_view text, char sep = ',');

}  // namespace leafseq
