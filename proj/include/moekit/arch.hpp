#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace moekit {

// Thrown on domain errors (invalid configs, infeasible budgets, ...).
// The CLI maps these to exit code 1.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DispatchMode { kDropAndPad, kDropless };

inline std::string to_string(DispatchMode m) {
  return m == DispatchMode::kDropAndPad ? "drop-and-pad" : "dropless";
}

inline DispatchMode dispatch_mode_from_string(const std::string& s) {
  if (s == "drop-and-pad") return DispatchMode::kDropAndPad;
  if (s == "dropless") return DispatchMode::kDropless;
  throw DomainError("unknown dispatch mode: " + s);
}

// Dense decoder backbone: embedding width, FFN width, attention heads,
// layer count. d_model == n_h * d_h always.
struct BaseArch {
  int64_t d_model = 768;
  int64_t d_ff = 3072;
  int64_t n_h = 12;
  int64_t n_kv = 4;
  int64_t d_h = 64;
  int64_t n_l = 20;
  int64_t vocab_size = 128256;
  double rope_theta = 500000.0;

  void validate() const {
    if (d_model <= 0 || d_ff <= 0 || n_h <= 0 || n_kv <= 0 || d_h <= 0 ||
        n_l <= 0 || vocab_size <= 0) {
      throw DomainError("backbone dimensions must be positive");
    }
    if (d_model != n_h * d_h) {
      throw DomainError("d_model must equal n_h * d_h");
    }
    if (n_h % n_kv != 0) {
      throw DomainError("n_h must be divisible by n_kv");
    }
  }
};

// MoE layer shape: E coarse experts split into g sub-experts each, top-(g*k)
// routing, with an optional always-on shared expert that replaces
// `shared_units` of the active fine experts.
struct MoeSpec {
  int64_t e = 1;
  int64_t g = 1;
  int64_t k = 1;
  bool shared = false;
  int64_t shared_units = 0;  // fine-expert units folded into the shared expert
  double capacity_factor = 1.5;
  DispatchMode dispatch = DispatchMode::kDropless;

  static MoeSpec dense() { return MoeSpec{}; }

  static MoeSpec with_shared(int64_t e, int64_t g, int64_t k = 1,
                             int64_t units = 4) {
    MoeSpec m;
    m.e = e;
    m.g = g;
    m.k = k;
    m.shared = true;
    m.shared_units = units;
    return m;
  }

  int64_t n_fine_total() const { return g * e; }
  int64_t routed_count() const { return g * e - (shared ? shared_units : 0); }
  int64_t routed_topk() const { return g * k - (shared ? shared_units : 0); }

  bool is_dense() const { return e == 1 && g == 1 && !shared; }

  void validate_against(const BaseArch& base) const {
    if (e < 1 || g < 1 || k < 1) throw DomainError("e, g, k must be >= 1");
    if (k > e) throw DomainError("k must not exceed e");
    if (shared_units < 0) throw DomainError("shared_units must be >= 0");
    if (!shared && shared_units != 0) {
      throw DomainError("shared_units requires shared == true");
    }
    if (base.d_ff % g != 0) {
      throw DomainError("d_ff must be divisible by granularity g");
    }
    if (shared && shared_units > g * k) {
      throw DomainError("shared_units must not exceed g*k");
    }
    if (routed_count() >= 1 && routed_topk() < 1) {
      throw DomainError("routed_topk must be >= 1");
    }
    if (routed_count() < 1) {
      throw DomainError("routed_count must be >= 1");
    }
    if (capacity_factor <= 0.0) {
      throw DomainError("capacity_factor must be positive");
    }
  }
};

// Exact parameter accounting, split by component.
struct ParamCounts {
  int64_t n_act = 0;
  int64_t n_total = 0;
  std::map<std::string, int64_t> breakdown;  // sums to n_total

  double n_act_b() const { return static_cast<double>(n_act) / 1e9; }
  double n_total_b() const { return static_cast<double>(n_total) / 1e9; }
};

// Deployment memory budget. GB means 10^9 bytes throughout.
struct MemoryBudget {
  int bits_weight = 4;  // {4, 8, 16}
  int bits_kv = 8;      // {8, 16}
  int64_t context = 8192;
  double budget_gb = 5.0;

  void validate() const {
    if (bits_weight != 4 && bits_weight != 8 && bits_weight != 16) {
      throw DomainError("bits_weight must be one of {4, 8, 16}");
    }
    if (bits_kv != 8 && bits_kv != 16) {
      throw DomainError("bits_kv must be one of {8, 16}");
    }
    if (context < 0) throw DomainError("context must be >= 0");
    if (budget_gb <= 0.0) throw DomainError("budget_gb must be positive");
  }
};

struct MemoryReport {
  double weight_gb = 0.0;
  double kv_cache_gb = 0.0;
  double total_gb = 0.0;
  bool feasible = false;
};

// Counting scheme (tied embedding counted once; SwiGLU experts have
// gate/up/down projections; RMS gains 2 per layer + 1 final; no biases):
//   embedding   = vocab * d_model
//   attention   = n_l * (q + k + v + o) projections
//   router      = n_l * d_model * routed_count
//   routed      = n_l * routed_count * 3 * d_model * (d_ff / g)
//   shared      = n_l * 3 * d_model * (shared_units * d_ff / g)
//   norms       = (2*n_l + 1) * d_model
// n_act replaces routed_count with routed_topk in the routed term.
inline ParamCounts count_params(const BaseArch& base, const MoeSpec& moe) {
  if (base.d_model != base.n_h * base.d_h) {
    throw DomainError("d_model must equal n_h * d_h");
  }
  moe.validate_against(base);

  const int64_t d = base.d_model;
  const int64_t fine_width = base.d_ff / moe.g;
  const int64_t fine_expert = 3 * d * fine_width;

  ParamCounts out;
  const int64_t embedding = base.vocab_size * d;
  const int64_t attention =
      base.n_l * (d * (base.n_h * base.d_h) + 2 * d * (base.n_kv * base.d_h) +
                  (base.n_h * base.d_h) * d);
  const int64_t router = base.n_l * d * moe.routed_count();
  const int64_t routed = base.n_l * moe.routed_count() * fine_expert;
  const int64_t shared_units = moe.shared ? moe.shared_units : 0;
  const int64_t shared = base.n_l * 3 * d * (shared_units * fine_width);
  const int64_t norms = (2 * base.n_l + 1) * d;

  out.breakdown["embedding"] = embedding;
  out.breakdown["attention"] = attention;
  out.breakdown["router"] = router;
  out.breakdown["routed_experts"] = routed;
  out.breakdown["shared_expert"] = shared;
  out.breakdown["norms"] = norms;

  out.n_total = embedding + attention + router + routed + shared + norms;
  out.n_act = embedding + attention + router + norms + shared +
              base.n_l * moe.routed_topk() * fine_expert;
  return out;
}

// F_inf = 2 * N_act, per token, forward pass only.
inline double inference_flops(const ParamCounts& counts) {
  return 2.0 * static_cast<double>(counts.n_act);
}

// F_train = 6 * N_act * D.
inline double training_flops(const ParamCounts& counts, double d_tokens) {
  if (d_tokens < 0.0) throw DomainError("token count must be >= 0");
  return 6.0 * static_cast<double>(counts.n_act) * d_tokens;
}

// Weight + KV-cache memory proxy in GB (decimal):
//   (b_w/8) * N_total / 1e9  +  (b_kv/8) * 2 * T * n_l * n_kv * d_h / 1e9
// Static state only; transient activation buffers are out of scope.
inline MemoryReport memory_proxy(const ParamCounts& counts,
                                 const BaseArch& base,
                                 const MemoryBudget& budget) {
  budget.validate();
  MemoryReport r;
  r.weight_gb = budget.bits_weight / 8.0 *
                static_cast<double>(counts.n_total) / 1e9;
  r.kv_cache_gb = budget.bits_kv / 8.0 * 2.0 *
                  static_cast<double>(budget.context) *
                  static_cast<double>(base.n_l) *
                  static_cast<double>(base.n_kv) *
                  static_cast<double>(base.d_h) / 1e9;
  r.total_gb = r.weight_gb + r.kv_cache_gb;
  r.feasible = r.total_gb <= budget.budget_gb;
  return r;
}

// --- JSON config schema ---------------------------------------------------
// {"backbone": {"d_model", "d_ff", "n_h", "n_kv", "d_h", "n_l", "vocab_size",
//               "rope_theta"},
//  "moe": {"e", "g", "k", "shared", "shared_units", "capacity_factor",
//          "dispatch"}}

struct ModelConfig {
  BaseArch backbone;
  MoeSpec moe;

  void validate() const {
    backbone.validate();
    moe.validate_against(backbone);
  }
};

inline nlohmann::json to_json(const BaseArch& b) {
  return {{"d_model", b.d_model}, {"d_ff", b.d_ff},
          {"n_h", b.n_h},         {"n_kv", b.n_kv},
          {"d_h", b.d_h},         {"n_l", b.n_l},
          {"vocab_size", b.vocab_size}, {"rope_theta", b.rope_theta}};
}

inline nlohmann::json to_json(const MoeSpec& m) {
  return {{"e", m.e},
          {"g", m.g},
          {"k", m.k},
          {"shared", m.shared},
          {"shared_units", m.shared_units},
          {"capacity_factor", m.capacity_factor},
          {"dispatch", to_string(m.dispatch)}};
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"backbone", to_json(c.backbone)}, {"moe", to_json(c.moe)}};
}

inline BaseArch base_arch_from_json(const nlohmann::json& j) {
  BaseArch b;
  b.d_model = j.at("d_model").get<int64_t>();
  b.d_ff = j.at("d_ff").get<int64_t>();
  b.n_h = j.at("n_h").get<int64_t>();
  b.n_kv = j.at("n_kv").get<int64_t>();
  b.d_h = j.value("d_h", b.d_model / b.n_h);
  b.n_l = j.at("n_l").get<int64_t>();
  b.vocab_size = j.value("vocab_size", int64_t{128256});
  b.rope_theta = j.value("rope_theta", 500000.0);
  return b;
}

inline MoeSpec moe_spec_from_json(const nlohmann::json& j) {
  MoeSpec m;
  m.e = j.value("e", int64_t{1});
  m.g = j.value("g", int64_t{1});
  m.k = j.value("k", int64_t{1});
  m.shared = j.value("shared", false);
  m.shared_units = j.value("shared_units", m.shared ? int64_t{4} : int64_t{0});
  m.capacity_factor = j.value("capacity_factor", 1.5);
  m.dispatch = dispatch_mode_from_string(j.value("dispatch", "dropless"));
  return m;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.backbone = base_arch_from_json(j.at("backbone"));
  c.moe = moe_spec_from_json(j.value("moe", nlohmann::json::object()));
  return c;
}

inline nlohmann::json to_json(const ParamCounts& c) {
  nlohmann::json breakdown = nlohmann::json::object();
  for (const auto& [name, v] : c.breakdown) breakdown[name] = v;
  return {{"n_act", c.n_act},
          {"n_total", c.n_total},
          {"n_act_b", c.n_act_b()},
          {"n_total_b", c.n_total_b()},
          {"breakdown", breakdown}};
}

}  // namespace moekit
