#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "leafseq/data.hpp"
#include "leafseq/models.hpp"
#include "leafseq/nn.hpp"
#include "leafseq/tensor.hpp"

namespace leafseq::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::size_t uniform_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline ModelConfig tiny_config(std::size_t d, std::size_t h, std::size_t vocab, std::uint64_t seed) {
  ModelConfig c;
  c.d_emb = d;
  c.hidden = h;
  c.vocab_size = vocab;
  c.seed = seed;
  return c;
}

inline double row_sum(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  }
  return true;
}

// Grad checks run at a random point with O(1) weights; the training init is
// small enough that many gradients sit near double round-off.
inline void randomize_params(const ParamStore& params, std::mt19937_64& rng, double scale = 0.8) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (const auto& [name, t] : params.entries()) {
    for (auto& v : t.mutable_values()) v = dist(rng);
  }
}

inline constexpr double kModelGradEps = 1e-3;

// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("leafseq-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Encoder states for a random source of length T and width 2h.
inline EncoderStates random_encoder(std::size_t T, std::size_t h, std::mt19937_64& rng, bool requires_grad = true) {
  EncoderStates enc;
  enc.H = random_tensor({T, 2 * h}, rng, -1.0, 1.0, requires_grad);
  enc.mask.assign(T, 1);
  enc.final_fwd = {random_tensor({h}, rng, -1, 1, requires_grad), random_tensor({h}, rng, -1, 1, requires_grad)};
  enc.final_bwd = {random_tensor({h}, rng, -1, 1, requires_grad), random_tensor({h}, rng, -1, 1, requires_grad)};
  return enc;
}

}  // namespace leafseq::testing
