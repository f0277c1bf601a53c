#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "moekit/arch.hpp"

namespace moekit {

// Sigmoid router with selection-only balance biases. The gate matrix stays
// full precision regardless of the model's weight precision.
struct RouterState {
  int64_t d_model = 0;
  int64_t routed_count = 0;
  std::vector<double> gate;          // [routed_count, d_model], row-major
  std::vector<double> balance_bias;  // per expert, selection only
  double lambda_lb = 1e-3;           // bias update rate
  double lambda_z = 1e-4;            // z-loss weight

  void init(int64_t d, int64_t experts) {
    d_model = d;
    routed_count = experts;
    gate.assign(experts * d, 0.0);
    balance_bias.assign(experts, 0.0);
  }
};

struct RouterOutput {
  int64_t n_tokens = 0;
  int64_t topk = 0;
  std::vector<int32_t> selected;   // [n_tokens, topk], distinct per token
  std::vector<double> weights;     // [n_tokens, topk], sums to 1 per token
  std::vector<double> raw_scores;  // [n_tokens, routed_count], sigmoid scores
  std::vector<double> logits;      // [n_tokens, routed_count]
  double z_loss = 0.0;             // mean over tokens of logsumexp(logits)^2
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Selection ranks experts by score + balance_bias (ties to the lowest
// index); combine weights come from the raw scores alone, normalized over
// the selected set.
inline RouterOutput router_forward(const std::vector<double>& x,
                                   int64_t n_tokens, const RouterState& state,
                                   int64_t topk) {
  if (topk < 1 || topk > state.routed_count) {
    throw DomainError("topk out of range");
  }
  const int64_t d = state.d_model;
  const int64_t ne = state.routed_count;
  RouterOutput out;
  out.n_tokens = n_tokens;
  out.topk = topk;
  out.selected.assign(n_tokens * topk, 0);
  out.weights.assign(n_tokens * topk, 0.0);
  out.raw_scores.assign(n_tokens * ne, 0.0);
  out.logits.assign(n_tokens * ne, 0.0);

  std::vector<int32_t> order(ne);
  double z_sum = 0.0;
  for (int64_t t = 0; t < n_tokens; ++t) {
    double* logits = &out.logits[t * ne];
    double* scores = &out.raw_scores[t * ne];
    double max_logit = -1e300;
    for (int64_t e = 0; e < ne; ++e) {
      double acc = 0.0;
      const double* row = &state.gate[e * d];
      const double* xt = &x[t * d];
      for (int64_t i = 0; i < d; ++i) acc += row[i] * xt[i];
      logits[e] = acc;
      scores[e] = sigmoid(acc);
      max_logit = std::max(max_logit, acc);
    }
    // z-loss on the raw logits
    double lse = 0.0;
    for (int64_t e = 0; e < ne; ++e) lse += std::exp(logits[e] - max_logit);
    lse = max_logit + std::log(lse);
    z_sum += lse * lse;

    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
      const double sa = scores[a] + state.balance_bias[a];
      const double sb = scores[b] + state.balance_bias[b];
      if (sa != sb) return sa > sb;
      return a < b;
    });
    std::sort(order.begin(), order.begin() + topk);  // ascending expert id

    double sum = 0.0;
    for (int64_t j = 0; j < topk; ++j) {
      out.selected[t * topk + j] = order[j];
      sum += scores[order[j]];
    }
    for (int64_t j = 0; j < topk; ++j) {
      out.weights[t * topk + j] = scores[order[j]] / sum;
    }
  }
  out.z_loss = n_tokens > 0 ? z_sum / static_cast<double>(n_tokens) : 0.0;
  return out;
}

// Auxiliary-loss-free balancing: nudge each bias by lambda_lb against the
// sign of its load imbalance. No gradients involved.
inline void update_balance_bias(RouterState& state,
                                const std::vector<int64_t>& load) {
  if (static_cast<int64_t>(load.size()) != state.routed_count) {
    throw DomainError("load vector length must equal routed_count");
  }
  double mean = 0.0;
  for (int64_t v : load) mean += static_cast<double>(v);
  mean /= static_cast<double>(load.size());
  for (size_t e = 0; e < load.size(); ++e) {
    const double gap = mean - static_cast<double>(load[e]);
    const double sign = gap > 0.0 ? 1.0 : (gap < 0.0 ? -1.0 : 0.0);
    state.balance_bias[e] += state.lambda_lb * sign;
  }
}

}  // namespace moekit
