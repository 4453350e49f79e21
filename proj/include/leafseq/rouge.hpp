#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "leafseq/data.hpp"

namespace leafseq {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Clipped n-gram overlap. Empty candidate or reference gives zeros.
RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n);

// Longest-common-subsequence F1 (balanced, no beta weighting).
RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

struct RougeReport {
  double r1 = 0.0;  // mean F1 x 100
  double r2 = 0.0;
  double rl = 0.0;
  std::size_t pairs = 0;

  // "R1=<x> R2=<y> RL=<z>" with two decimals.
  std::string machine_line() const;
  std::string text() const;
};

// (candidate, reference) pairs; throws ContractError when empty.
RougeReport corpus_rouge(std::span<const std::pair<Tokens, Tokens>> pairs);

}  // namespace leafseq
