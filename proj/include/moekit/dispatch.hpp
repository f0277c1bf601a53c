#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "moekit/arch.hpp"
#include "moekit/router.hpp"
#include "moekit/sort.hpp"

namespace moekit {

// Token->expert permutation with per-expert contiguous slices. In
// drop-and-pad mode each expert keeps at most `capacity` slots (earliest
// sequence positions win); dropless keeps everything.
struct DispatchPlan {
  DispatchMode mode = DispatchMode::kDropless;
  int64_t n_tokens = 0;
  int64_t topk = 0;
  int64_t n_experts = 0;
  int64_t capacity = 0;
  // Kept slots only, grouped by expert. slot_token[i] / slot_rank[i] identify
  // the (token, topk-slot) pair at permuted position i.
  std::vector<int32_t> slot_token;
  std::vector<int32_t> slot_rank;
  std::vector<int32_t> offsets;           // n_experts + 1
  std::vector<uint8_t> dropped;           // [n_tokens, topk]
  std::vector<int64_t> load;              // kept slots per expert

  int64_t kept_slots() const { return static_cast<int64_t>(slot_token.size()); }
};

inline DispatchPlan build_dispatch(const RouterOutput& routing,
                                   DispatchMode mode, double capacity_factor,
                                   int64_t n_experts) {
  const int64_t n_tokens = routing.n_tokens;
  const int64_t topk = routing.topk;
  DispatchPlan plan;
  plan.mode = mode;
  plan.n_tokens = n_tokens;
  plan.topk = topk;
  plan.n_experts = n_experts;
  plan.dropped.assign(n_tokens * topk, 0);
  plan.load.assign(n_experts, 0);
  plan.offsets.assign(n_experts + 1, 0);
  if (n_tokens == 0) return plan;

  // Slots in (token, rank) order so the stable sort keeps earliest sequence
  // positions first within each expert.
  std::vector<int32_t> assignments(n_tokens * topk);
  for (int64_t t = 0; t < n_tokens; ++t) {
    for (int64_t j = 0; j < topk; ++j) {
      assignments[t * topk + j] = routing.selected[t * topk + j];
    }
  }
  const SortResult sorted = counting_sort_by_expert(assignments,
                                                    static_cast<int>(n_experts));

  int64_t capacity = 0;
  if (mode == DispatchMode::kDropAndPad) {
    capacity = static_cast<int64_t>(
        std::ceil(capacity_factor * static_cast<double>(n_tokens) *
                  static_cast<double>(topk) / static_cast<double>(n_experts)));
  } else {
    for (int e = 0; e < n_experts; ++e) {
      capacity = std::max<int64_t>(capacity, sorted.counts[e]);
    }
  }
  plan.capacity = capacity;

  for (int64_t e = 0; e < n_experts; ++e) {
    const int32_t begin = sorted.offsets[e];
    const int32_t end = sorted.offsets[e + 1];
    int64_t kept = 0;
    for (int32_t pos = begin; pos < end; ++pos) {
      const int32_t slot = sorted.permutation[pos];
      if (mode == DispatchMode::kDropAndPad && kept >= capacity) {
        plan.dropped[slot] = 1;
        continue;
      }
      plan.slot_token.push_back(slot / static_cast<int32_t>(topk));
      plan.slot_rank.push_back(slot % static_cast<int32_t>(topk));
      ++kept;
    }
    plan.load[e] = kept;
    plan.offsets[e + 1] = static_cast<int32_t>(plan.slot_token.size());
  }
  return plan;
}

}  // namespace moekit
