#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "leafseq/tensor.hpp"

namespace leafseq {

struct AdamConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Moments are positional: entry i belongs to params[i] of every adam_step call.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Bias-corrected Adam update, in place on the parameter storage.
void adam_step(std::span<const Tensor> params, std::span<const std::vector<double>> grads, AdamState& state);

// Scales grads so their joint L2 norm is at most max_norm. Returns the norm
// before clipping.
double clip_global_norm(std::span<std::vector<double>> grads, double max_norm);

}  // namespace leafseq
