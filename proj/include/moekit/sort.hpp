#pragma once

#include <cstdint>
#include <vector>

#include "moekit/arch.hpp"

namespace moekit {

// Stable counting sort of token slots by expert id. permutation[i] is the
// input slot sitting at sorted position i; inverse undoes it.
struct SortResult {
  std::vector<int32_t> permutation;
  std::vector<int32_t> inverse;
  std::vector<int32_t> offsets;  // n_experts + 1, offsets[e+1]-offsets[e] == counts[e]
  std::vector<int32_t> counts;
};

inline SortResult counting_sort_by_expert(const std::vector<int32_t>& assignments,
                                          int n_experts) {
  if (n_experts < 0) throw DomainError("n_experts must be >= 0");
  SortResult r;
  r.counts.assign(n_experts, 0);
  r.offsets.assign(n_experts + 1, 0);
  const int32_t n = static_cast<int32_t>(assignments.size());
  for (int32_t id : assignments) {
    if (id < 0 || id >= n_experts) throw DomainError("expert id out of range");
    ++r.counts[id];
  }
  for (int e = 0; e < n_experts; ++e) r.offsets[e + 1] = r.offsets[e] + r.counts[e];
  r.permutation.assign(n, 0);
  r.inverse.assign(n, 0);
  std::vector<int32_t> cursor(r.offsets.begin(), r.offsets.end() - 1);
  for (int32_t i = 0; i < n; ++i) {
    const int32_t pos = cursor[assignments[i]]++;
    r.permutation[pos] = i;
    r.inverse[i] = pos;
  }
  return r;
}

}  // namespace moekit
