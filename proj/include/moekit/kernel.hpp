#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moekit/container.hpp"
#include "moekit/model.hpp"
#include "moekit/quant.hpp"
#include "moekit/sort.hpp"

namespace moekit {

// --- grouped GEMM ------------------------------------------------------------

// Per-expert contiguous row slices multiplied by that expert's weights.
// offsets has n_experts + 1 entries over the permuted row block.

inline std::vector<double> grouped_gemm(
    const std::vector<double>& rows, int64_t in_dim,
    const std::vector<int32_t>& offsets,
    const std::vector<const std::vector<double>*>& expert_weights,
    int64_t out_dim) {
  const int64_t n_rows = in_dim > 0 ? static_cast<int64_t>(rows.size()) / in_dim : 0;
  if (offsets.empty() || offsets.back() != n_rows) {
    throw DomainError("grouped_gemm offsets do not cover the row block");
  }
  std::vector<double> out(n_rows * out_dim, 0.0);
  for (size_t e = 0; e + 1 < offsets.size(); ++e) {
    const std::vector<double>& w = *expert_weights[e];
    if (static_cast<int64_t>(w.size()) != out_dim * in_dim) {
      throw DomainError("grouped_gemm weight shape mismatch");
    }
    for (int32_t r = offsets[e]; r < offsets[e + 1]; ++r) {
      nn::matvec(w, &rows[r * in_dim], &out[r * out_dim], out_dim, in_dim);
    }
  }
  return out;
}

// INT8 activations against INT4 group-32 weights: integer dot per group,
// scales folded afterwards, accumulation in double with a fixed order.
inline void q4_matvec(const QuantizedTensor& w, const int8_t* a_codes,
                      double a_scale, double* out) {
  const int64_t in = w.cols;
  const int64_t gpr = w.groups_per_row();
  const int64_t rcb = w.row_code_bytes();
  for (int64_t o = 0; o < w.rows; ++o) {
    const uint8_t* row = &w.codes[o * rcb];
    const float* scales = &w.scales[o * gpr];
    double acc = 0.0;
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t c0 = g * w.group_size;
      const int64_t c1 = std::min<int64_t>(in, c0 + w.group_size);
      int32_t idot = 0;
      for (int64_t c = c0; c < c1; ++c) {
        const uint8_t byte = row[c / 2];
        const int code = ((c % 2 == 0) ? (byte & 0x0F) : (byte >> 4)) - 8;
        idot += code * static_cast<int32_t>(a_codes[c]);
      }
      acc += static_cast<double>(idot) * static_cast<double>(scales[g]);
    }
    out[o] = acc * a_scale;
  }
}

inline std::vector<double> grouped_gemm_q4(
    const std::vector<int8_t>& row_codes, const std::vector<double>& row_scales,
    int64_t in_dim, const std::vector<int32_t>& offsets,
    const std::vector<const QuantizedTensor*>& expert_weights, int64_t out_dim) {
  const int64_t n_rows = in_dim > 0 ? static_cast<int64_t>(row_codes.size()) / in_dim : 0;
  if (offsets.empty() || offsets.back() != n_rows) {
    throw DomainError("grouped_gemm offsets do not cover the row block");
  }
  std::vector<double> out(n_rows * out_dim, 0.0);
  for (size_t e = 0; e + 1 < offsets.size(); ++e) {
    const QuantizedTensor& w = *expert_weights[e];
    if (w.rows != out_dim || w.cols != in_dim) {
      throw DomainError("grouped_gemm weight shape mismatch");
    }
    for (int32_t r = offsets[e]; r < offsets[e + 1]; ++r) {
      q4_matvec(w, &row_codes[r * in_dim], row_scales[r], &out[r * out_dim]);
    }
  }
  return out;
}

// --- fused MoE layer -----------------------------------------------------------

// One expert's weights for the fused path. Gate and up are stacked into a
// single [2*width, d] matrix so both projections run as one GEMM.
struct FusedExpert {
  int64_t width = 0;
  bool quantized = false;
  // float route
  std::vector<double> gate_up;  // [2*width, d]
  std::vector<double> down;     // [d, width]
  // int4 route
  QuantizedTensor q_gate_up;
  QuantizedTensor q_down;

  static FusedExpert from_float(const ExpertWeights& ex) {
    FusedExpert f;
    f.width = ex.width;
    f.quantized = false;
    f.gate_up = ex.gate;
    f.gate_up.insert(f.gate_up.end(), ex.up.begin(), ex.up.end());
    f.down = ex.down;
    return f;
  }

  static FusedExpert from_quantized(const QuantizedTensor& gate,
                                    const QuantizedTensor& up,
                                    const QuantizedTensor& down) {
    if (gate.rows != up.rows || gate.cols != up.cols) {
      throw DomainError("gate/up shapes differ");
    }
    FusedExpert f;
    f.width = gate.rows;
    f.quantized = true;
    f.q_gate_up = gate;
    f.q_gate_up.rows = gate.rows + up.rows;
    f.q_gate_up.codes.insert(f.q_gate_up.codes.end(), up.codes.begin(),
                             up.codes.end());
    f.q_gate_up.scales.insert(f.q_gate_up.scales.end(), up.scales.begin(),
                              up.scales.end());
    f.q_down = down;
    return f;
  }
};

struct FusedMoeLayer {
  int64_t d_model = 0;
  int64_t topk = 0;
  const RouterState* router = nullptr;  // always full precision
  std::vector<FusedExpert> experts;
  FusedExpert shared;
  bool has_shared = false;

  // instrumentation: layer-input INT8 quantizations, one expected per token
  mutable int64_t input_quant_count = 0;
};

// Single fused call: top-k selection -> counting sort -> one INT8
// quantization per token (reused by every expert the token touches and the
// shared branch) -> grouped gate+up GEMM -> SwiGLU -> grouped down GEMM ->
// weighted scatter-add through the inverse permutation -> shared branch.
inline std::vector<double> fused_moe_forward(const FusedMoeLayer& layer,
                                             const std::vector<double>& x,
                                             int64_t n_tokens,
                                             RouterOutput* routing_out = nullptr) {
  const int64_t d = layer.d_model;
  if (static_cast<int64_t>(x.size()) != n_tokens * d) {
    throw DomainError("fused moe input shape mismatch");
  }
  const int64_t n_experts = static_cast<int64_t>(layer.experts.size());
  const RouterOutput routing = router_forward(x, n_tokens, *layer.router, layer.topk);
  if (routing_out) *routing_out = routing;

  // dropless dispatch: sort every (token, rank) slot by expert
  std::vector<int32_t> assignments(n_tokens * layer.topk);
  for (int64_t i = 0; i < n_tokens * layer.topk; ++i) {
    assignments[i] = routing.selected[i];
  }
  const SortResult sorted =
      counting_sort_by_expert(assignments, static_cast<int>(n_experts));

  const bool quantized = !layer.experts.empty() && layer.experts[0].quantized;

  // per-token INT8 codes, computed once
  QuantizedActivations qa;
  if (quantized || (layer.has_shared && layer.shared.quantized)) {
    qa = quantize_activations_int8(x, n_tokens, d);
    layer.input_quant_count += n_tokens;
  }

  std::vector<double> y(n_tokens * d, 0.0);
  std::vector<double> gate_up, m, down_out;
  for (int64_t e = 0; e < n_experts; ++e) {
    const FusedExpert& ex = layer.experts[e];
    const int64_t rows = sorted.offsets[e + 1] - sorted.offsets[e];
    if (rows == 0) continue;
    const int64_t w = ex.width;
    gate_up.assign(rows * 2 * w, 0.0);
    m.assign(rows * w, 0.0);
    down_out.assign(rows * d, 0.0);

    for (int64_t r = 0; r < rows; ++r) {
      const int32_t slot = sorted.permutation[sorted.offsets[e] + r];
      const int32_t t = slot / static_cast<int32_t>(layer.topk);
      if (ex.quantized) {
        q4_matvec(ex.q_gate_up, &qa.codes[t * d], qa.scales[t],
                  &gate_up[r * 2 * w]);
      } else {
        nn::matvec(ex.gate_up, &x[t * d], &gate_up[r * 2 * w], 2 * w, d);
      }
      double* mr = &m[r * w];
      const double* gu = &gate_up[r * 2 * w];
      for (int64_t i = 0; i < w; ++i) mr[i] = nn::silu(gu[i]) * gu[w + i];
      if (ex.quantized) {
        // dynamic INT8 on the SwiGLU intermediate, one row per slot
        double r_max = 0.0;
        for (int64_t i = 0; i < w; ++i) r_max = std::max(r_max, std::abs(mr[i]));
        const double m_scale = r_max == 0.0 ? 0.0 : r_max / 127.0;
        std::vector<int8_t> m_codes(w, 0);
        if (m_scale > 0.0) {
          for (int64_t i = 0; i < w; ++i) {
            m_codes[i] = quantize_row_value(mr[i], m_scale);
          }
        }
        q4_matvec(ex.q_down, m_codes.data(), m_scale, &down_out[r * d]);
      } else {
        nn::matvec(ex.down, mr, &down_out[r * d], d, w);
      }
    }
    // weighted scatter-add back to token order; slots within one expert hit
    // distinct tokens, and experts are walked in ascending id order
    for (int64_t r = 0; r < rows; ++r) {
      const int32_t slot = sorted.permutation[sorted.offsets[e] + r];
      const int32_t t = slot / static_cast<int32_t>(layer.topk);
      const int32_t rank = slot % static_cast<int32_t>(layer.topk);
      const double wgt = routing.weights[t * layer.topk + rank];
      const double* src = &down_out[r * d];
      double* dst = &y[t * d];
      for (int64_t i = 0; i < d; ++i) dst[i] += wgt * src[i];
    }
  }

  if (layer.has_shared) {
    const FusedExpert& sh = layer.shared;
    const int64_t w = sh.width;
    std::vector<double> gu(2 * w), mm(w), oo(d);
    for (int64_t t = 0; t < n_tokens; ++t) {
      if (sh.quantized) {
        q4_matvec(sh.q_gate_up, &qa.codes[t * d], qa.scales[t], gu.data());
      } else {
        nn::matvec(sh.gate_up, &x[t * d], gu.data(), 2 * w, d);
      }
      for (int64_t i = 0; i < w; ++i) mm[i] = nn::silu(gu[i]) * gu[w + i];
      if (sh.quantized) {
        double r_max = 0.0;
        for (int64_t i = 0; i < w; ++i) r_max = std::max(r_max, std::abs(mm[i]));
        const double m_scale = r_max == 0.0 ? 0.0 : r_max / 127.0;
        std::vector<int8_t> m_codes(w, 0);
        if (m_scale > 0.0) {
          for (int64_t i = 0; i < w; ++i) {
            m_codes[i] = quantize_row_value(mm[i], m_scale);
          }
        }
        q4_matvec(sh.q_down, m_codes.data(), m_scale, oo.data());
      } else {
        nn::matvec(sh.down, mm.data(), oo.data(), d, w);
      }
      double* dst = &y[t * d];
      for (int64_t i = 0; i < d; ++i) dst[i] += oo[i];
    }
  }
  return y;
}

// --- inference engine ------------------------------------------------------------

// Loads a container (float or INT4-quantized) for generation and
// benchmarking. Attention and embeddings run as dense float math
// (dequantized once at load); the MoE block runs either the fused
// quantized path or the naive per-token loop for comparison.
struct InferenceEngine {
  ModelWeights model;  // float view of everything
  std::vector<FusedMoeLayer> fused;
  bool moe_quantized = false;

  // per-op wall-time accumulators (seconds), reset per run
  mutable double attention_s = 0.0;
  mutable double moe_s = 0.0;
  mutable double other_s = 0.0;

  void reset_timers() const { attention_s = moe_s = other_s = 0.0; }
  int64_t input_quant_count() const {
    int64_t n = 0;
    for (const auto& f : fused) n += f.input_quant_count;
    return n;
  }
};

inline InferenceEngine load_engine(const std::string& path) {
  InferenceEngine eng;
  const auto entries = read_container(path);
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  if (!by_name.count("hparams")) throw IoError("container missing hparams");
  const ModelConfig cfg =
      containerdetail::hparams_config(f32_values(*by_name.at("hparams")));
  Rng rng(0);
  eng.model.init(cfg, rng);

  auto fetch = [&](const std::string& name, std::vector<double>& dst) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("container missing tensor: " + name);
    const TensorEntry& e = *it->second;
    std::vector<double> v =
        e.dtype == "f32" ? f32_values(e) : dequantize(q4_tensor(e));
    if (v.size() != dst.size()) throw IoError("tensor size mismatch: " + name);
    dst = std::move(v);
  };
  eng.model.for_each_param(
      [&](const std::string& name, std::vector<double>& w) { fetch(name, w); });
  for (size_t l = 0; l < eng.model.layers.size(); ++l) {
    fetch("layers." + std::to_string(l) + ".router.bias",
          eng.model.layers[l].router.balance_bias);
  }

  // fused expert bundles, keeping INT4 codes when present
  eng.fused.resize(eng.model.layers.size());
  for (size_t l = 0; l < eng.model.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    FusedMoeLayer& f = eng.fused[l];
    f.d_model = cfg.backbone.d_model;
    f.topk = cfg.moe.routed_topk();
    f.router = &eng.model.layers[l].router;
    f.experts.resize(cfg.moe.routed_count());
    for (int64_t e = 0; e < cfg.moe.routed_count(); ++e) {
      const std::string ep = p + "expert." + std::to_string(e) + ".";
      const TensorEntry& tg = *by_name.at(ep + "gate");
      if (tg.dtype == "q4g32") {
        f.experts[e] = FusedExpert::from_quantized(
            q4_tensor(tg), q4_tensor(*by_name.at(ep + "up")),
            q4_tensor(*by_name.at(ep + "down")));
        eng.moe_quantized = true;
      } else {
        f.experts[e] = FusedExpert::from_float(eng.model.layers[l].experts[e]);
      }
    }
    f.has_shared = cfg.moe.shared;
    if (cfg.moe.shared) {
      const TensorEntry& tg = *by_name.at(p + "shared.gate");
      if (tg.dtype == "q4g32") {
        f.shared = FusedExpert::from_quantized(
            q4_tensor(tg), q4_tensor(*by_name.at(p + "shared.up")),
            q4_tensor(*by_name.at(p + "shared.down")));
      } else {
        f.shared = FusedExpert::from_float(eng.model.layers[l].shared);
      }
    }
  }
  return eng;
}

// Forward through the engine; `use_fused` picks the fused MoE path, the
// alternative is the naive dropless per-token loop over dequantized experts.
inline ForwardOutput engine_forward(const InferenceEngine& eng,
                                    const std::vector<int32_t>& tokens,
                                    KvCache* cache, bool use_fused) {
  const BaseArch& arch = eng.model.config.backbone;
  const MoeSpec& moe = eng.model.config.moe;
  const int64_t d = arch.d_model;
  const int64_t n = static_cast<int64_t>(tokens.size());
  const int64_t pos0 = cache ? cache->length : 0;
  if (cache && cache->keys.empty()) cache->init(arch.n_l, arch.n_kv * arch.d_h);

  const auto now = [] { return std::chrono::steady_clock::now(); };
  auto elapsed = [](auto a, auto b) {
    return std::chrono::duration<double>(b - a).count();
  };

  auto t0 = now();
  std::vector<double> x(n * d);
  for (int64_t t = 0; t < n; ++t) {
    if (tokens[t] < 0 || tokens[t] >= arch.vocab_size) {
      throw DomainError("token id out of range");
    }
    std::copy_n(&eng.model.embedding[tokens[t] * d], d, &x[t * d]);
  }
  ForwardOutput out;
  out.layer_loads.assign(arch.n_l, std::vector<int64_t>(moe.routed_count(), 0));
  std::vector<double> h(n * d);
  eng.other_s += elapsed(t0, now());

  for (int64_t l = 0; l < arch.n_l; ++l) {
    const LayerWeights& L = eng.model.layers[l];
    t0 = now();
    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm(&x[t * d], L.att_norm.data(), &h[t * d], d);
    }
    const std::vector<double> att = modeldetail::attention_forward(
        L, arch, h, n, pos0, cache ? &cache->keys[l] : nullptr,
        cache ? &cache->values[l] : nullptr);
    for (int64_t i = 0; i < n * d; ++i) x[i] += att[i];
    eng.attention_s += elapsed(t0, now());

    t0 = now();
    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm(&x[t * d], L.moe_norm.data(), &h[t * d], d);
    }
    std::vector<double> y;
    RouterOutput routing;
    if (use_fused) {
      y = fused_moe_forward(eng.fused[l], h, n, &routing);
      std::vector<int64_t> load(moe.routed_count(), 0);
      for (int32_t e : routing.selected) ++load[e];
      for (int64_t e = 0; e < moe.routed_count(); ++e) {
        out.layer_loads[l][e] += load[e];
      }
    } else {
      routing = router_forward(h, n, L.router, moe.routed_topk());
      const DispatchPlan plan = build_dispatch(routing, DispatchMode::kDropless,
                                               moe.capacity_factor,
                                               moe.routed_count());
      for (int64_t e = 0; e < moe.routed_count(); ++e) {
        out.layer_loads[l][e] += plan.load[e];
      }
      y = moe_layer_forward(h, n, L, moe, plan, routing);
    }
    out.z_loss_sum += routing.z_loss;
    for (int64_t i = 0; i < n * d; ++i) x[i] += y[i];
    eng.moe_s += elapsed(t0, now());
  }

  t0 = now();
  out.logits.resize(n * arch.vocab_size);
  for (int64_t t = 0; t < n; ++t) {
    nn::rmsnorm(&x[t * d], eng.model.final_norm.data(), &h[t * d], d);
    nn::matvec(eng.model.embedding, &h[t * d], &out.logits[t * arch.vocab_size],
               arch.vocab_size, d);
  }
  if (cache) cache->length += n;
  eng.other_s += elapsed(t0, now());
  return out;
}

inline int32_t argmax_token(const double* logits, int64_t vocab) {
  int32_t best = 0;
  for (int64_t v = 1; v < vocab; ++v) {
    if (logits[v] > logits[best]) best = static_cast<int32_t>(v);
  }
  return best;
}

// Greedy generation with the KV cache; returns the generated ids.
inline std::vector<int32_t> engine_generate(const InferenceEngine& eng,
                                            const std::vector<int32_t>& prompt,
                                            int64_t max_new_tokens,
                                            bool use_fused = true) {
  if (prompt.empty()) throw DomainError("prompt must not be empty");
  KvCache cache;
  const int64_t vocab = eng.model.config.backbone.vocab_size;
  ForwardOutput out = engine_forward(eng, prompt, &cache, use_fused);
  std::vector<int32_t> generated;
  int32_t next = argmax_token(
      &out.logits[(prompt.size() - 1) * vocab], vocab);
  for (int64_t i = 0; i < max_new_tokens; ++i) {
    generated.push_back(next);
    out = engine_forward(eng, {next}, &cache, use_fused);
    next = argmax_token(out.logits.data(), vocab);
  }
  return generated;
}

}  // namespace moekit
