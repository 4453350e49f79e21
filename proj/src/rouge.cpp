#include "leafseq/rouge.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

#include "leafseq/errors.hpp"

namespace leafseq {

namespace {

RougeScore from_counts(double overlap, double cand_total, double ref_total) {
  RougeScore s;
  if (cand_total <= 0 || ref_total <= 0) return s;
  s.precision = overlap / cand_total;
  s.recall = overlap / ref_total;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::map<std::vector<std::string>, std::size_t> ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

RougeScore rouge_n(std::span<const std::string> candidate, std::span<const std::string> reference, std::size_t n) {
  if (n == 0) throw ContractError("rouge_n: n must be at least 1");
  if (candidate.size() < n || reference.size() < n) return {};
  const auto cand = ngram_counts(candidate, n);
  const auto ref = ngram_counts(reference, n);
  std::size_t overlap = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return from_counts(static_cast<double>(overlap), static_cast<double>(candidate.size() - n + 1),
                     static_cast<double>(reference.size() - n + 1));
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(std::span<const std::string> candidate, std::span<const std::string> reference) {
  if (candidate.empty() || reference.empty()) return {};
  return from_counts(static_cast<double>(lcs_length(candidate, reference)), static_cast<double>(candidate.size()),
                     static_cast<double>(reference.size()));
}

RougeReport corpus_rouge(std::span<const std::pair<Tokens, Tokens>> pairs) {
  if (pairs.empty()) throw ContractError("corpus_rouge: no pairs");
  RougeReport r;
  for (const auto& [cand, ref] : pairs) {
    r.r1 += rouge_n(cand, ref, 1).f1;
    r.r2 += rouge_n(cand, ref, 2).f1;
    r.rl += rouge_l(cand, ref).f1;
  }
  const double n = static_cast<double>(pairs.size());
  r.r1 = 100.0 * r.r1 / n;
  r.r2 = 100.0 * r.r2 / n;
  r.rl = 100.0 * r.rl / n;
  r.pairs = pairs.size();
  return r;
}

std::string RougeReport::machine_line() const {
  char buf[96];
  std::snprintf(buf, sizeof buf, "R1=%.2f R2=%.2f RL=%.2f", r1, r2, rl);
  return buf;
}

std::string RougeReport::text() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "ROUGE over %zu pairs (mean F1 x 100)\nR-1 %.2f\nR-2 %.2f\nR-L %.2f\n", pairs, r1, r2,
                rl);
  return std::string(buf) + machine_line() + "\n";
}

}  // namespace leafseq
