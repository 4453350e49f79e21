#include "leafseq/checkpoint.hpp"

#include <fnmatch.h>

#include <bit>
#include <fstream>
#include <set>
#include <sstream>

#include "leafseq/errors.hpp"

namespace leafseq {

bool glob_match(std::string_view pattern, std::string_view name) {
  return fnmatch(std::string(pattern).c_str(), std::string(name).c_str(), 0) == 0;
}

bool glob_match_any(const std::vector<std::string>& patterns, std::string_view name) {
  for (const auto& p : patterns) {
    if (glob_match(p, name)) return true;
  }
  return false;
}

// ---- ParamStore ---------------------------------------------------------------------

const Tensor& ParamStore::add(std::string name, Tensor tensor) {
  if (index_.contains(name)) throw ContractError("parameter '" + name + "' registered twice");
  tensor.set_requires_grad(true);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
  return entries_.back().second;
}

const Tensor* ParamStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second].second;
}

const Tensor& ParamStore::at(std::string_view name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw ContractError("no parameter named '" + std::string(name) + "'");
  return *t;
}

std::vector<std::string> ParamStore::names_matching(std::string_view pattern) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : entries_) {
    if (glob_match(pattern, name)) out.push_back(name);
  }
  return out;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](std::uint64_t byte) {
    h ^= byte;
    h *= 1099511628211ull;
  };
  for (const auto& [name, t] : entries_) {
    for (char c : name) mix(static_cast<unsigned char>(c));
    for (double v : t.values()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) mix((bits >> (8 * i)) & 0xffu);
    }
  }
  return h;
}

// ---- Checkpoint -----------------------------------------------------------------------

void Checkpoint::add(std::string name, Tensor tensor) {
  if (find(name) != nullptr) throw ContractError("checkpoint: duplicate tensor '" + name + "'");
  tensors.emplace_back(std::move(name), std::move(tensor));
}

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::string Checkpoint::meta(std::string_view key, std::string fallback) const {
  auto it = metadata.find(std::string(key));
  return it == metadata.end() ? fallback : it->second;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::set<std::string> seen;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!seen.insert(name).second) throw ContractError("checkpoint: duplicate tensor '" + name + "'");
  }
  std::string meta;
  for (const auto& [k, v] : ckpt.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint: metadata entry '" + k + "' contains a separator");
    }
    meta += k + "=" + v + "\n";
  }
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
    write_u64(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      write_u64(out, name.size());
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_tensor(out, t);
    }
    out.flush();
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const auto fail = [&](const std::string& why) -> IoError {
    return IoError("corrupt checkpoint " + path.string() + ": " + why);
  };
  std::string magic(kCheckpointMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (in.gcount() != static_cast<std::streamsize>(magic.size()) || magic != kCheckpointMagic) throw fail("bad magic");
  Checkpoint ckpt;
  try {
    const auto meta_len = read_u64(in);
    if (meta_len > (1u << 24)) throw fail("metadata block too large");
    std::string meta(meta_len, '\0');
    in.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (in.gcount() != static_cast<std::streamsize>(meta_len)) throw fail("truncated metadata");
    std::istringstream lines(meta);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw fail("metadata line without '='");
      ckpt.metadata[line.substr(0, eq)] = line.substr(eq + 1);
    }
    while (in.peek() != std::char_traits<char>::eof()) {
      const auto name_len = read_u64(in);
      if (name_len == 0 || name_len > 4096) throw fail("implausible tensor name length");
      std::string name(name_len, '\0');
      in.read(name.data(), static_cast<std::streamsize>(name_len));
      if (in.gcount() != static_cast<std::streamsize>(name_len)) throw fail("truncated tensor name");
      ckpt.add(std::move(name), read_tensor(in));
    }
  } catch (const IoError& e) {
    const std::string what = e.what();
    if (what.rfind("corrupt checkpoint", 0) == 0) throw;
    throw fail(what);
  } catch (const ContractError& e) {
    throw fail(e.what());
  } catch (const DimensionError& e) {
    throw fail(e.what());
  }
  return ckpt;
}

}  // namespace leafseq
