#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "moekit/arch.hpp"
#include "moekit/dispatch.hpp"
#include "moekit/quant.hpp"
#include "moekit/rng.hpp"
#include "moekit/router.hpp"

namespace moekit {

constexpr double kRmsEps = 1e-6;

// SwiGLU expert: gate/up are [width, d_model], down is [d_model, width].
struct ExpertWeights {
  int64_t width = 0;
  int64_t d_model = 0;
  std::vector<double> gate;
  std::vector<double> up;
  std::vector<double> down;

  void init(int64_t w, int64_t d, Rng& rng, double std_dev) {
    width = w;
    d_model = d;
    gate.resize(w * d);
    up.resize(w * d);
    down.resize(d * w);
    for (double& v : gate) v = rng.normal(0.0, std_dev);
    for (double& v : up) v = rng.normal(0.0, std_dev);
    for (double& v : down) v = rng.normal(0.0, std_dev);
  }
};

struct LayerWeights {
  std::vector<double> att_norm;  // [d]
  std::vector<double> moe_norm;  // [d]
  std::vector<double> wq;        // [n_h*d_h, d]
  std::vector<double> wk;        // [n_kv*d_h, d]
  std::vector<double> wv;        // [n_kv*d_h, d]
  std::vector<double> wo;        // [d, n_h*d_h]
  RouterState router;
  std::vector<ExpertWeights> experts;  // routed_count fine experts
  ExpertWeights shared;                // width shared_units * (d_ff/g)
};

struct ModelWeights {
  ModelConfig config;
  std::vector<double> embedding;  // [vocab, d], tied in/out
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm;

  int64_t d_model() const { return config.backbone.d_model; }
  int64_t vocab() const { return config.backbone.vocab_size; }
  int64_t fine_width() const { return config.backbone.d_ff / config.moe.g; }

  void init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    config = cfg;
    const int64_t d = cfg.backbone.d_model;
    const double std_dev = 0.02;
    embedding.resize(cfg.backbone.vocab_size * d);
    for (double& v : embedding) v = rng.normal(0.0, std_dev);
    layers.assign(cfg.backbone.n_l, {});
    for (auto& L : layers) {
      Rng lr = rng.split(&L - layers.data());
      L.att_norm.assign(d, 1.0);
      L.moe_norm.assign(d, 1.0);
      const int64_t qd = cfg.backbone.n_h * cfg.backbone.d_h;
      const int64_t kd = cfg.backbone.n_kv * cfg.backbone.d_h;
      L.wq.resize(qd * d);
      L.wk.resize(kd * d);
      L.wv.resize(kd * d);
      L.wo.resize(d * qd);
      for (double& v : L.wq) v = lr.normal(0.0, std_dev);
      for (double& v : L.wk) v = lr.normal(0.0, std_dev);
      for (double& v : L.wv) v = lr.normal(0.0, std_dev);
      for (double& v : L.wo) v = lr.normal(0.0, std_dev);
      L.router.init(d, cfg.moe.routed_count());
      for (double& v : L.router.gate) v = lr.normal(0.0, std_dev);
      L.experts.resize(cfg.moe.routed_count());
      for (auto& ex : L.experts) ex.init(fine_width(), d, lr, std_dev);
      if (cfg.moe.shared) {
        L.shared.init(cfg.moe.shared_units * fine_width(), d, lr, std_dev);
      }
    }
    final_norm.assign(d, 1.0);
  }

  // Visits every trainable tensor in a fixed order. Balance biases are not
  // gradient parameters and are excluded.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    fn("embedding", embedding);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      LayerWeights& L = layers[l];
      fn(p + "att_norm", L.att_norm);
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "moe_norm", L.moe_norm);
      fn(p + "router.gate", L.router.gate);
      for (size_t e = 0; e < L.experts.size(); ++e) {
        const std::string ep = p + "expert." + std::to_string(e) + ".";
        fn(ep + "gate", L.experts[e].gate);
        fn(ep + "up", L.experts[e].up);
        fn(ep + "down", L.experts[e].down);
      }
      if (config.moe.shared) {
        fn(p + "shared.gate", L.shared.gate);
        fn(p + "shared.up", L.shared.up);
        fn(p + "shared.down", L.shared.down);
      }
    }
    fn("final_norm", final_norm);
  }
};

// Gradients share the registry layout of the weights they mirror.
struct ModelGrads {
  std::vector<std::vector<double>> tensors;
  std::vector<std::vector<double>*> slots;

  void init(ModelWeights& model) {
    tensors.clear();
    std::vector<size_t> sizes;
    model.for_each_param([&](const std::string&, std::vector<double>& w) {
      sizes.push_back(w.size());
    });
    tensors.resize(sizes.size());
    for (size_t i = 0; i < sizes.size(); ++i) tensors[i].assign(sizes[i], 0.0);
  }

  void zero() {
    for (auto& t : tensors) std::fill(t.begin(), t.end(), 0.0);
  }
};

namespace nn {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// y[o] = sum_i W[o, i] * x[i]
inline void matvec(const std::vector<double>& w, const double* x, double* y,
                   int64_t out, int64_t in) {
  for (int64_t o = 0; o < out; ++o) {
    const double* row = &w[o * in];
    double acc = 0.0;
    for (int64_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

inline void rmsnorm(const double* x, const double* gain, double* y, int64_t d,
                    double* inv_rms_out = nullptr) {
  double ss = 0.0;
  for (int64_t i = 0; i < d; ++i) ss += x[i] * x[i];
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
  for (int64_t i = 0; i < d; ++i) y[i] = gain[i] * x[i] * inv;
  if (inv_rms_out) *inv_rms_out = inv;
}

inline void rmsnorm_backward(const double* x, const double* gain,
                             const double* dy, double inv, double* dx,
                             double* dgain, int64_t d) {
  double dot = 0.0;
  for (int64_t i = 0; i < d; ++i) dot += dy[i] * gain[i] * x[i];
  const double coef = dot * inv * inv * inv / static_cast<double>(d);
  for (int64_t i = 0; i < d; ++i) {
    if (dgain) dgain[i] += dy[i] * x[i] * inv;
    dx[i] += dy[i] * gain[i] * inv - x[i] * coef;
  }
}

// Interleaved rotary embedding over pairs (2j, 2j+1) of each head.
inline void rope_apply(double* vec, int64_t n_heads, int64_t d_h, int64_t pos,
                       double theta, bool inverse = false) {
  for (int64_t h = 0; h < n_heads; ++h) {
    double* head = vec + h * d_h;
    for (int64_t j = 0; j < d_h / 2; ++j) {
      const double freq =
          std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(d_h));
      const double angle = static_cast<double>(pos) * freq * (inverse ? -1.0 : 1.0);
      const double c = std::cos(angle), s = std::sin(angle);
      const double a = head[2 * j], b = head[2 * j + 1];
      head[2 * j] = a * c - b * s;
      head[2 * j + 1] = a * s + b * c;
    }
  }
}

}  // namespace nn

// --- MoE layer ---------------------------------------------------------------

// Plan-driven forward: expert slices in ascending id order, each kept slot
// adds weight * SwiGLU_e(x_t), the shared branch is added last with
// coefficient 1. Dropped slots contribute nothing.
inline std::vector<double> moe_layer_forward(const std::vector<double>& x,
                                             int64_t n_tokens,
                                             const LayerWeights& layer,
                                             const MoeSpec& moe,
                                             const DispatchPlan& plan,
                                             const RouterOutput& routing) {
  const int64_t d = layer.router.d_model;
  if (static_cast<int64_t>(x.size()) != n_tokens * d) {
    throw DomainError("moe input shape mismatch");
  }
  std::vector<double> y(n_tokens * d, 0.0);
  const int64_t width = layer.experts.empty() ? 0 : layer.experts[0].width;
  std::vector<double> g(width), u(width), m(width), o(d);

  for (int64_t e = 0; e < plan.n_experts; ++e) {
    const ExpertWeights& ex = layer.experts[e];
    for (int32_t pos = plan.offsets[e]; pos < plan.offsets[e + 1]; ++pos) {
      const int32_t t = plan.slot_token[pos];
      const int32_t rank = plan.slot_rank[pos];
      const double w = routing.weights[t * routing.topk + rank];
      const double* xt = &x[t * d];
      nn::matvec(ex.gate, xt, g.data(), ex.width, d);
      nn::matvec(ex.up, xt, u.data(), ex.width, d);
      for (int64_t i = 0; i < ex.width; ++i) m[i] = nn::silu(g[i]) * u[i];
      nn::matvec(ex.down, m.data(), o.data(), d, ex.width);
      double* yt = &y[t * d];
      for (int64_t i = 0; i < d; ++i) yt[i] += w * o[i];
    }
  }

  if (moe.shared) {
    const ExpertWeights& sh = layer.shared;
    std::vector<double> sg(sh.width), su(sh.width), sm(sh.width);
    for (int64_t t = 0; t < n_tokens; ++t) {
      const double* xt = &x[t * d];
      nn::matvec(sh.gate, xt, sg.data(), sh.width, d);
      nn::matvec(sh.up, xt, su.data(), sh.width, d);
      for (int64_t i = 0; i < sh.width; ++i) sm[i] = nn::silu(sg[i]) * su[i];
      nn::matvec(sh.down, sm.data(), o.data(), d, sh.width);
      double* yt = &y[t * d];
      for (int64_t i = 0; i < d; ++i) yt[i] += o[i];
    }
  }
  return y;
}

// --- KV cache ----------------------------------------------------------------

struct KvCache {
  int64_t n_layers = 0;
  int64_t kv_dim = 0;  // n_kv * d_h
  int64_t length = 0;
  std::vector<std::vector<double>> keys;    // per layer, [length, kv_dim]
  std::vector<std::vector<double>> values;  // per layer

  void init(int64_t layers, int64_t dim) {
    n_layers = layers;
    kv_dim = dim;
    length = 0;
    keys.assign(layers, {});
    values.assign(layers, {});
  }
};

// --- transformer forward -------------------------------------------------------

struct ForwardOutput {
  std::vector<double> logits;  // [n_tokens, vocab]
  double z_loss_sum = 0.0;     // summed over layers
  std::vector<std::vector<int64_t>> layer_loads;  // kept slots per expert
};

namespace modeldetail {

// Causal GQA attention for tokens at absolute positions
// [pos0, pos0 + n_tokens), attending to `history` cached positions plus the
// in-flight block.
inline std::vector<double> attention_forward(const LayerWeights& layer,
                                             const BaseArch& arch,
                                             const std::vector<double>& h,
                                             int64_t n_tokens, int64_t pos0,
                                             std::vector<double>* cache_k,
                                             std::vector<double>* cache_v) {
  const int64_t d = arch.d_model;
  const int64_t d_h = arch.d_h;
  const int64_t n_h = arch.n_h;
  const int64_t n_kv = arch.n_kv;
  const int64_t qd = n_h * d_h;
  const int64_t kd = n_kv * d_h;
  const int64_t group = n_h / n_kv;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_h));

  std::vector<double> q(n_tokens * qd), k(n_tokens * kd), v(n_tokens * kd);
  for (int64_t t = 0; t < n_tokens; ++t) {
    nn::matvec(layer.wq, &h[t * d], &q[t * qd], qd, d);
    nn::matvec(layer.wk, &h[t * d], &k[t * kd], kd, d);
    nn::matvec(layer.wv, &h[t * d], &v[t * kd], kd, d);
    nn::rope_apply(&q[t * qd], n_h, d_h, pos0 + t, arch.rope_theta);
    nn::rope_apply(&k[t * kd], n_kv, d_h, pos0 + t, arch.rope_theta);
  }

  const int64_t history = cache_k ? static_cast<int64_t>(cache_k->size()) / kd : 0;
  if (cache_k) {
    cache_k->insert(cache_k->end(), k.begin(), k.end());
    cache_v->insert(cache_v->end(), v.begin(), v.end());
  }
  const double* all_k = cache_k ? cache_k->data() : k.data();
  const double* all_v = cache_v ? cache_v->data() : v.data();

  std::vector<double> att(n_tokens * qd, 0.0);
  std::vector<double> scores;
  for (int64_t t = 0; t < n_tokens; ++t) {
    const int64_t visible = history + t + 1;
    scores.assign(visible, 0.0);
    for (int64_t hh = 0; hh < n_h; ++hh) {
      const int64_t kvh = hh / group;
      const double* qv = &q[t * qd + hh * d_h];
      double max_s = -1e300;
      for (int64_t u = 0; u < visible; ++u) {
        const double* kv = &all_k[u * kd + kvh * d_h];
        double acc = 0.0;
        for (int64_t i = 0; i < d_h; ++i) acc += qv[i] * kv[i];
        scores[u] = acc * scale;
        max_s = std::max(max_s, scores[u]);
      }
      double denom = 0.0;
      for (int64_t u = 0; u < visible; ++u) {
        scores[u] = std::exp(scores[u] - max_s);
        denom += scores[u];
      }
      double* out = &att[t * qd + hh * d_h];
      for (int64_t u = 0; u < visible; ++u) {
        const double p = scores[u] / denom;
        const double* vv = &all_v[u * kd + kvh * d_h];
        for (int64_t i = 0; i < d_h; ++i) out[i] += p * vv[i];
      }
    }
  }

  std::vector<double> y(n_tokens * d);
  for (int64_t t = 0; t < n_tokens; ++t) {
    nn::matvec(layer.wo, &att[t * qd], &y[t * d], d, qd);
  }
  return y;
}

}  // namespace modeldetail

// Full forward pass. With a cache, tokens are appended after the cached
// positions (incremental decode); without one, the block starts at position
// zero.
inline ForwardOutput transformer_forward(const ModelWeights& model,
                                         const std::vector<int32_t>& tokens,
                                         KvCache* cache = nullptr) {
  const BaseArch& arch = model.config.backbone;
  const MoeSpec& moe = model.config.moe;
  const int64_t d = arch.d_model;
  const int64_t n = static_cast<int64_t>(tokens.size());
  const int64_t pos0 = cache ? cache->length : 0;

  if (cache && cache->keys.empty()) {
    cache->init(arch.n_l, arch.n_kv * arch.d_h);
  }

  std::vector<double> x(n * d);
  for (int64_t t = 0; t < n; ++t) {
    if (tokens[t] < 0 || tokens[t] >= arch.vocab_size) {
      throw DomainError("token id out of range");
    }
    std::copy_n(&model.embedding[tokens[t] * d], d, &x[t * d]);
  }

  ForwardOutput out;
  out.layer_loads.assign(arch.n_l, std::vector<int64_t>(moe.routed_count(), 0));
  std::vector<double> h(n * d);

  for (int64_t l = 0; l < arch.n_l; ++l) {
    const LayerWeights& L = model.layers[l];
    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm(&x[t * d], L.att_norm.data(), &h[t * d], d);
    }
    const std::vector<double> att = modeldetail::attention_forward(
        L, arch, h, n, pos0, cache ? &cache->keys[l] : nullptr,
        cache ? &cache->values[l] : nullptr);
    for (int64_t i = 0; i < n * d; ++i) x[i] += att[i];

    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm(&x[t * d], L.moe_norm.data(), &h[t * d], d);
    }
    const RouterOutput routing = router_forward(h, n, L.router, moe.routed_topk());
    out.z_loss_sum += routing.z_loss;
    const DispatchPlan plan = build_dispatch(
        routing, cache ? DispatchMode::kDropless : moe.dispatch,
        moe.capacity_factor, moe.routed_count());
    for (int64_t e = 0; e < moe.routed_count(); ++e) {
      out.layer_loads[l][e] += plan.load[e];
    }
    const std::vector<double> y = moe_layer_forward(h, n, L, moe, plan, routing);
    for (int64_t i = 0; i < n * d; ++i) x[i] += y[i];
  }

  out.logits.resize(n * arch.vocab_size);
  for (int64_t t = 0; t < n; ++t) {
    nn::rmsnorm(&x[t * d], model.final_norm.data(), &h[t * d], d);
    nn::matvec(model.embedding, &h[t * d], &out.logits[t * arch.vocab_size],
               arch.vocab_size, d);
  }
  if (cache) cache->length += n;
  return out;
}

// --- training ----------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-15;
  bool qat = false;  // INT4 fake-quant linears, router kept float
};

struct AdamState {
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;

  void init(ModelGrads& grads) {
    step = 0;
    m.resize(grads.tensors.size());
    v.resize(grads.tensors.size());
    for (size_t i = 0; i < grads.tensors.size(); ++i) {
      m[i].assign(grads.tensors[i].size(), 0.0);
      v[i].assign(grads.tensors[i].size(), 0.0);
    }
  }
};

struct StepResult {
  double loss = 0.0;      // cross-entropy + z penalty
  double cross_entropy = 0.0;
  double z_loss = 0.0;    // summed over layers, pre-weighting
  double grad_norm = 0.0;  // before clipping
};

namespace modeldetail {

struct LayerTrace {
  std::vector<double> x_in;      // [n, d] residual stream entering the layer
  std::vector<double> h1;        // normed for attention
  std::vector<double> inv1;      // [n]
  std::vector<double> q, k, v;   // post-rope
  std::vector<double> probs;     // [n_h, n, n] causal softmax
  std::vector<double> att_cat;   // [n, n_h*d_h]
  std::vector<double> x_mid;     // after attention residual
  std::vector<double> h2;        // normed for moe
  std::vector<double> inv2;      // [n]
  RouterOutput routing;
  DispatchPlan plan;
  std::vector<double> slot_gate;   // [kept, width] pre-activation
  std::vector<double> slot_up;     // [kept, width]
  std::vector<double> shared_gate;  // [n, s_width]
  std::vector<double> shared_up;
};

struct Trace {
  std::vector<LayerTrace> layers;
  std::vector<double> x_final;  // pre final norm
  std::vector<double> h_final;  // normed
  std::vector<double> inv_final;
  std::vector<double> logits;
  double z_loss_sum = 0.0;
};

// Weight views: either the raw tensors or their fake-quant images (QAT).
struct WeightView {
  const std::vector<double>* w = nullptr;
  std::vector<double> storage;
  std::vector<uint8_t> mask;  // empty means all-pass

  const std::vector<double>& get() const { return storage.empty() ? *w : storage; }
};

struct QatViews {
  bool active = false;
  WeightView embedding;
  // per layer: wq, wk, wv, wo, expert {gate, up, down}, shared {gate, up, down}
  std::vector<std::array<WeightView, 4>> attn;
  std::vector<std::vector<std::array<WeightView, 3>>> experts;
  std::vector<std::array<WeightView, 3>> shared;
};

inline WeightView make_view(const std::vector<double>& w, int64_t rows,
                            int64_t cols, bool quantize) {
  WeightView v;
  v.w = &w;
  if (quantize) {
    FakeQuantResult fq = fake_quant_ste(w, rows, cols);
    v.storage = std::move(fq.values);
    v.mask = std::move(fq.pass_through);
  }
  return v;
}

inline QatViews build_views(const ModelWeights& model, bool qat) {
  QatViews views;
  views.active = qat;
  const BaseArch& arch = model.config.backbone;
  const int64_t d = arch.d_model;
  views.embedding = make_view(model.embedding, arch.vocab_size, d, qat);
  views.attn.resize(model.layers.size());
  views.experts.resize(model.layers.size());
  views.shared.resize(model.layers.size());
  for (size_t l = 0; l < model.layers.size(); ++l) {
    const LayerWeights& L = model.layers[l];
    const int64_t qd = arch.n_h * arch.d_h;
    const int64_t kd = arch.n_kv * arch.d_h;
    views.attn[l][0] = make_view(L.wq, qd, d, qat);
    views.attn[l][1] = make_view(L.wk, kd, d, qat);
    views.attn[l][2] = make_view(L.wv, kd, d, qat);
    views.attn[l][3] = make_view(L.wo, d, qd, qat);
    views.experts[l].resize(L.experts.size());
    for (size_t e = 0; e < L.experts.size(); ++e) {
      const ExpertWeights& ex = L.experts[e];
      views.experts[l][e][0] = make_view(ex.gate, ex.width, d, qat);
      views.experts[l][e][1] = make_view(ex.up, ex.width, d, qat);
      views.experts[l][e][2] = make_view(ex.down, d, ex.width, qat);
    }
    if (model.config.moe.shared) {
      const ExpertWeights& sh = L.shared;
      views.shared[l][0] = make_view(sh.gate, sh.width, d, qat);
      views.shared[l][1] = make_view(sh.up, sh.width, d, qat);
      views.shared[l][2] = make_view(sh.down, d, sh.width, qat);
    }
  }
  return views;
}

inline void masked_add(std::vector<double>& grad, const WeightView& view,
                       const std::vector<double>& delta) {
  if (view.mask.empty()) {
    for (size_t i = 0; i < grad.size(); ++i) grad[i] += delta[i];
  } else {
    // straight-through: clamped codes block their gradient
    for (size_t i = 0; i < grad.size(); ++i) {
      if (view.mask[i]) grad[i] += delta[i];
    }
  }
}

}  // namespace modeldetail

// Forward with full activation capture, then reverse-mode gradients for every
// trainable tensor. Routing selection is treated as locally constant (it is,
// away from score ties). Returns per-sequence CE summed over predicted
// positions plus the weighted z penalty; gradients accumulate into `grads`.
struct SeqLossParts {
  double ce_sum = 0.0;
  int64_t predictions = 0;
  double z_sum = 0.0;                 // sum of per-layer z losses
  double weighted_z = 0.0;            // lambda_z * z, as entering the loss
  std::vector<std::vector<int64_t>> layer_loads;
};

inline SeqLossParts forward_backward(const ModelWeights& model,
                                     const std::vector<int32_t>& tokens,
                                     ModelGrads& grads, bool qat,
                                     double loss_scale) {
  using namespace modeldetail;
  const BaseArch& arch = model.config.backbone;
  const MoeSpec& moe = model.config.moe;
  const int64_t d = arch.d_model;
  const int64_t n = static_cast<int64_t>(tokens.size());
  const int64_t n_h = arch.n_h, n_kv = arch.n_kv, d_h = arch.d_h;
  const int64_t qd = n_h * d_h, kd = n_kv * d_h;
  const int64_t group = n_h / n_kv;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(d_h));
  if (n < 2) throw DomainError("training sequences need at least two tokens");

  const QatViews views = build_views(model, qat);
  const std::vector<double>& emb = views.embedding.get();

  // ---- forward with trace ----
  Trace tr;
  tr.layers.resize(arch.n_l);
  std::vector<double> x(n * d);
  for (int64_t t = 0; t < n; ++t) {
    if (tokens[t] < 0 || tokens[t] >= arch.vocab_size) {
      throw DomainError("token id out of range");
    }
    std::copy_n(&emb[tokens[t] * d], d, &x[t * d]);
  }

  SeqLossParts parts;
  parts.layer_loads.assign(arch.n_l, std::vector<int64_t>(moe.routed_count(), 0));

  for (int64_t l = 0; l < arch.n_l; ++l) {
    const LayerWeights& L = model.layers[l];
    LayerTrace& T = tr.layers[l];
    T.x_in = x;
    T.h1.resize(n * d);
    T.inv1.resize(n);
    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm(&x[t * d], L.att_norm.data(), &T.h1[t * d], d, &T.inv1[t]);
    }

    T.q.resize(n * qd);
    T.k.resize(n * kd);
    T.v.resize(n * kd);
    const auto& wq = views.attn[l][0].get();
    const auto& wk = views.attn[l][1].get();
    const auto& wv = views.attn[l][2].get();
    const auto& wo = views.attn[l][3].get();
    for (int64_t t = 0; t < n; ++t) {
      nn::matvec(wq, &T.h1[t * d], &T.q[t * qd], qd, d);
      nn::matvec(wk, &T.h1[t * d], &T.k[t * kd], kd, d);
      nn::matvec(wv, &T.h1[t * d], &T.v[t * kd], kd, d);
      nn::rope_apply(&T.q[t * qd], n_h, d_h, t, arch.rope_theta);
      nn::rope_apply(&T.k[t * kd], n_kv, d_h, t, arch.rope_theta);
    }

    T.probs.assign(n_h * n * n, 0.0);
    T.att_cat.assign(n * qd, 0.0);
    for (int64_t t = 0; t < n; ++t) {
      for (int64_t hh = 0; hh < n_h; ++hh) {
        const int64_t kvh = hh / group;
        const double* qv = &T.q[t * qd + hh * d_h];
        double* prow = &T.probs[(hh * n + t) * n];
        double max_s = -1e300;
        for (int64_t u = 0; u <= t; ++u) {
          const double* kv = &T.k[u * kd + kvh * d_h];
          double acc = 0.0;
          for (int64_t i = 0; i < d_h; ++i) acc += qv[i] * kv[i];
          prow[u] = acc * att_scale;
          max_s = std::max(max_s, prow[u]);
        }
        double denom = 0.0;
        for (int64_t u = 0; u <= t; ++u) {
          prow[u] = std::exp(prow[u] - max_s);
          denom += prow[u];
        }
        double* out = &T.att_cat[t * qd + hh * d_h];
        for (int64_t u = 0; u <= t; ++u) {
          prow[u] /= denom;
          const double* vv = &T.v[u * kd + kvh * d_h];
          for (int64_t i = 0; i < d_h; ++i) out[i] += prow[u] * vv[i];
        }
      }
    }
    for (int64_t t = 0; t < n; ++t) {
      std::vector<double> yo(d);
      nn::matvec(wo, &T.att_cat[t * qd], yo.data(), d, qd);
      for (int64_t i = 0; i < d; ++i) x[t * d + i] += yo[i];
    }
    T.x_mid = x;

    T.h2.resize(n * d);
    T.inv2.resize(n);
    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm(&x[t * d], L.moe_norm.data(), &T.h2[t * d], d, &T.inv2[t]);
    }
    T.routing = router_forward(T.h2, n, L.router, moe.routed_topk());
    parts.z_sum += T.routing.z_loss;
    parts.weighted_z += L.router.lambda_z * T.routing.z_loss;
    T.plan = build_dispatch(T.routing, moe.dispatch, moe.capacity_factor,
                            moe.routed_count());
    for (int64_t e = 0; e < moe.routed_count(); ++e) {
      parts.layer_loads[l][e] += T.plan.load[e];
    }

    // expert slices with captured pre-activations
    const int64_t width = model.fine_width();
    const int64_t kept = T.plan.kept_slots();
    T.slot_gate.resize(kept * width);
    T.slot_up.resize(kept * width);
    std::vector<double> m(width), o(d);
    for (int64_t e = 0; e < moe.routed_count(); ++e) {
      const auto& vgate = views.experts[l][e][0].get();
      const auto& vup = views.experts[l][e][1].get();
      const auto& vdown = views.experts[l][e][2].get();
      for (int32_t pos = T.plan.offsets[e]; pos < T.plan.offsets[e + 1]; ++pos) {
        const int32_t t = T.plan.slot_token[pos];
        const int32_t rank = T.plan.slot_rank[pos];
        const double w = T.routing.weights[t * T.routing.topk + rank];
        double* sg = &T.slot_gate[pos * width];
        double* su = &T.slot_up[pos * width];
        nn::matvec(vgate, &T.h2[t * d], sg, width, d);
        nn::matvec(vup, &T.h2[t * d], su, width, d);
        for (int64_t i = 0; i < width; ++i) m[i] = nn::silu(sg[i]) * su[i];
        nn::matvec(vdown, m.data(), o.data(), d, width);
        for (int64_t i = 0; i < d; ++i) x[t * d + i] += w * o[i];
      }
    }
    if (moe.shared) {
      const int64_t sw = L.shared.width;
      const auto& vgate = views.shared[l][0].get();
      const auto& vup = views.shared[l][1].get();
      const auto& vdown = views.shared[l][2].get();
      T.shared_gate.resize(n * sw);
      T.shared_up.resize(n * sw);
      std::vector<double> sm(sw);
      for (int64_t t = 0; t < n; ++t) {
        double* sg = &T.shared_gate[t * sw];
        double* su = &T.shared_up[t * sw];
        nn::matvec(vgate, &T.h2[t * d], sg, sw, d);
        nn::matvec(vup, &T.h2[t * d], su, sw, d);
        for (int64_t i = 0; i < sw; ++i) sm[i] = nn::silu(sg[i]) * su[i];
        nn::matvec(vdown, sm.data(), o.data(), d, sw);
        for (int64_t i = 0; i < d; ++i) x[t * d + i] += o[i];
      }
    }
  }

  tr.x_final = x;
  tr.h_final.resize(n * d);
  tr.inv_final.resize(n);
  tr.logits.resize(n * arch.vocab_size);
  for (int64_t t = 0; t < n; ++t) {
    nn::rmsnorm(&x[t * d], model.final_norm.data(), &tr.h_final[t * d], d,
                &tr.inv_final[t]);
    nn::matvec(emb, &tr.h_final[t * d], &tr.logits[t * arch.vocab_size],
               arch.vocab_size, d);
  }

  // ---- loss ----
  const int64_t preds = n - 1;
  std::vector<double> dlogits(n * arch.vocab_size, 0.0);
  for (int64_t t = 0; t < preds; ++t) {
    const double* row = &tr.logits[t * arch.vocab_size];
    double max_l = -1e300;
    for (int64_t vv = 0; vv < arch.vocab_size; ++vv) max_l = std::max(max_l, row[vv]);
    double denom = 0.0;
    for (int64_t vv = 0; vv < arch.vocab_size; ++vv) denom += std::exp(row[vv] - max_l);
    const int32_t target = tokens[t + 1];
    const double logp = row[target] - max_l - std::log(denom);
    parts.ce_sum += -logp;
    double* drow = &dlogits[t * arch.vocab_size];
    const double inv_preds = loss_scale / static_cast<double>(preds);
    for (int64_t vv = 0; vv < arch.vocab_size; ++vv) {
      const double p = std::exp(row[vv] - max_l) / denom;
      drow[vv] = (p - (vv == target ? 1.0 : 0.0)) * inv_preds;
    }
  }
  parts.predictions = preds;

  // ---- backward ----
  // Collect gradients keyed by registry order.
  std::vector<std::vector<double>*> gslot;
  {
    size_t idx = 0;
    gslot.resize(grads.tensors.size());
    for (auto& t : grads.tensors) gslot[idx++] = &t;
  }
  // registry order bookkeeping: embedding, per layer [att_norm, wq, wk, wv,
  // wo, moe_norm, router.gate, experts..., shared...], final_norm
  size_t cursor = 0;
  auto next = [&]() { return gslot[cursor++]; };
  std::vector<double>* g_emb = next();
  struct LayerGrads {
    std::vector<double>*att_norm, *wq, *wk, *wv, *wo, *moe_norm, *router;
    std::vector<std::array<std::vector<double>*, 3>> experts;
    std::array<std::vector<double>*, 3> shared{};
  };
  std::vector<LayerGrads> lg(arch.n_l);
  for (int64_t l = 0; l < arch.n_l; ++l) {
    lg[l].att_norm = next();
    lg[l].wq = next();
    lg[l].wk = next();
    lg[l].wv = next();
    lg[l].wo = next();
    lg[l].moe_norm = next();
    lg[l].router = next();
    lg[l].experts.resize(moe.routed_count());
    for (int64_t e = 0; e < moe.routed_count(); ++e) {
      lg[l].experts[e] = {next(), next(), next()};
    }
    if (moe.shared) lg[l].shared = {next(), next(), next()};
  }
  std::vector<double>* g_final_norm = next();

  // QAT: weight gradients must respect the straight-through mask. We
  // accumulate into scratch buffers per tensor and mask on commit.
  auto commit = [&](std::vector<double>* gdst, const WeightView& view,
                    std::vector<double>& scratch) {
    masked_add(*gdst, view, scratch);
    std::fill(scratch.begin(), scratch.end(), 0.0);
  };

  std::vector<double> dx(n * d, 0.0);  // gradient on the residual stream
  std::vector<double> demb_scratch(emb.size(), 0.0);

  // head: logits = h_final . emb^T
  for (int64_t t = 0; t < n; ++t) {
    const double* drow = &dlogits[t * arch.vocab_size];
    std::vector<double> dh(d, 0.0);
    for (int64_t vv = 0; vv < arch.vocab_size; ++vv) {
      const double dv = drow[vv];
      if (dv == 0.0) continue;
      const double* erow = &emb[vv * d];
      double* srow = &demb_scratch[vv * d];
      const double* hrow = &tr.h_final[t * d];
      for (int64_t i = 0; i < d; ++i) {
        dh[i] += dv * erow[i];
        srow[i] += dv * hrow[i];
      }
    }
    nn::rmsnorm_backward(&tr.x_final[t * d], model.final_norm.data(), dh.data(),
                         tr.inv_final[t], &dx[t * d], g_final_norm->data(), d);
  }

  for (int64_t l = arch.n_l - 1; l >= 0; --l) {
    const LayerWeights& L = model.layers[l];
    const LayerTrace& T = tr.layers[l];
    const int64_t width = model.fine_width();

    // ---- MoE block backward ----
    std::vector<double> dh2(n * d, 0.0);

    // routing combine-weight gradients per (token, rank)
    std::vector<double> dweights(n * T.routing.topk, 0.0);
    std::vector<double> dm(width), dg(width), du(width);
    for (int64_t e = 0; e < moe.routed_count(); ++e) {
      const auto& vgate = views.experts[l][e][0];
      const auto& vup = views.experts[l][e][1];
      const auto& vdown = views.experts[l][e][2];
      const auto& wgate = vgate.get();
      const auto& wup = vup.get();
      const auto& wdown = vdown.get();
      std::vector<double> scratch_gate(width * d, 0.0);
      std::vector<double> scratch_up(width * d, 0.0);
      std::vector<double> scratch_dn(d * width, 0.0);
      bool touched = false;
      for (int32_t pos = T.plan.offsets[e]; pos < T.plan.offsets[e + 1]; ++pos) {
        touched = true;
        const int32_t t = T.plan.slot_token[pos];
        const int32_t rank = T.plan.slot_rank[pos];
        const double w = T.routing.weights[t * T.routing.topk + rank];
        const double* sg = &T.slot_gate[pos * width];
        const double* su = &T.slot_up[pos * width];
        const double* dyt = &dx[t * d];

        // recompute m and o for the weight gradient of `w`
        std::vector<double> m(width), o(d);
        for (int64_t i = 0; i < width; ++i) m[i] = nn::silu(sg[i]) * su[i];
        nn::matvec(wdown, m.data(), o.data(), d, width);
        double dw = 0.0;
        for (int64_t i = 0; i < d; ++i) dw += dyt[i] * o[i];
        dweights[t * T.routing.topk + rank] += dw;

        // do = w * dy; dm = down^T do
        for (int64_t i = 0; i < width; ++i) {
          double acc = 0.0;
          for (int64_t j = 0; j < d; ++j) acc += wdown[j * width + i] * dyt[j];
          dm[i] = acc * w;
        }
        // down grad: ddown[j, i] += (w * dy[j]) * m[i]
        for (int64_t j = 0; j < d; ++j) {
          const double dj = w * dyt[j];
          if (dj == 0.0) continue;
          double* row = &scratch_dn[j * width];
          for (int64_t i = 0; i < width; ++i) row[i] += dj * m[i];
        }
        for (int64_t i = 0; i < width; ++i) {
          dg[i] = dm[i] * su[i] * nn::silu_grad(sg[i]);
          du[i] = dm[i] * nn::silu(sg[i]);
        }
        const double* h2t = &T.h2[t * d];
        double* dh2t = &dh2[t * d];
        for (int64_t i = 0; i < width; ++i) {
          const double dgi = dg[i], dui = du[i];
          const double* growg = &wgate[i * d];
          const double* growu = &wup[i * d];
          double* sgr = &scratch_gate[i * d];
          double* sur = &scratch_up[i * d];
          for (int64_t j = 0; j < d; ++j) {
            sgr[j] += dgi * h2t[j];
            sur[j] += dui * h2t[j];
            dh2t[j] += dgi * growg[j] + dui * growu[j];
          }
        }
      }
      if (touched) {
        commit(lg[l].experts[e][0], vgate, scratch_gate);
        commit(lg[l].experts[e][1], vup, scratch_up);
        commit(lg[l].experts[e][2], vdown, scratch_dn);
      }
    }

    if (moe.shared) {
      const int64_t sw = L.shared.width;
      const auto& vgate = views.shared[l][0];
      const auto& vup = views.shared[l][1];
      const auto& vdown = views.shared[l][2];
      const auto& wgate = vgate.get();
      const auto& wup = vup.get();
      const auto& wdown = vdown.get();
      std::vector<double> scratch_gate(sw * d, 0.0);
      std::vector<double> scratch_up(sw * d, 0.0);
      std::vector<double> scratch_dn(d * sw, 0.0);
      std::vector<double> sdm(sw), sdg(sw), sdu(sw);
      for (int64_t t = 0; t < n; ++t) {
        const double* sg = &T.shared_gate[t * sw];
        const double* su = &T.shared_up[t * sw];
        const double* dyt = &dx[t * d];
        std::vector<double> m(sw);
        for (int64_t i = 0; i < sw; ++i) m[i] = nn::silu(sg[i]) * su[i];
        for (int64_t i = 0; i < sw; ++i) {
          double acc = 0.0;
          for (int64_t j = 0; j < d; ++j) acc += wdown[j * sw + i] * dyt[j];
          sdm[i] = acc;
        }
        for (int64_t j = 0; j < d; ++j) {
          const double dj = dyt[j];
          if (dj == 0.0) continue;
          double* row = &scratch_dn[j * sw];
          for (int64_t i = 0; i < sw; ++i) row[i] += dj * m[i];
        }
        const double* h2t = &T.h2[t * d];
        double* dh2t = &dh2[t * d];
        for (int64_t i = 0; i < sw; ++i) {
          sdg[i] = sdm[i] * su[i] * nn::silu_grad(sg[i]);
          sdu[i] = sdm[i] * nn::silu(sg[i]);
          const double* growg = &wgate[i * d];
          const double* growu = &wup[i * d];
          double* sgr = &scratch_gate[i * d];
          double* sur = &scratch_up[i * d];
          for (int64_t j = 0; j < d; ++j) {
            sgr[j] += sdg[i] * h2t[j];
            sur[j] += sdu[i] * h2t[j];
            dh2t[j] += sdg[i] * growg[j] + sdu[i] * growu[j];
          }
        }
      }
      commit(lg[l].shared[0], vgate, scratch_gate);
      commit(lg[l].shared[1], vup, scratch_up);
      commit(lg[l].shared[2], vdown, scratch_dn);
    }

    // ---- router backward: combine weights + z-loss, both through logits ----
    {
      const int64_t rc = moe.routed_count();
      const int64_t topk = T.routing.topk;
      std::vector<double> dlogits_r(n * rc, 0.0);
      for (int64_t t = 0; t < n; ++t) {
        // weights w_j = s_j / sum(s); selection fixed
        double denom = 0.0;
        double dot = 0.0;
        for (int64_t j = 0; j < topk; ++j) {
          denom += T.routing.raw_scores[t * rc + T.routing.selected[t * topk + j]];
          dot += dweights[t * topk + j] * T.routing.weights[t * topk + j];
        }
        for (int64_t j = 0; j < topk; ++j) {
          const int32_t e = T.routing.selected[t * topk + j];
          const double s = T.routing.raw_scores[t * rc + e];
          const double ds = (dweights[t * topk + j] - dot) / denom;
          dlogits_r[t * rc + e] += ds * s * (1.0 - s);  // sigmoid'
        }
        // z loss: d/dl of mean_t lse_t^2 with weight lambda_z * loss_scale
        const double* lrow = &T.routing.logits[t * rc];
        double max_l = -1e300;
        for (int64_t e = 0; e < rc; ++e) max_l = std::max(max_l, lrow[e]);
        double z = 0.0;
        for (int64_t e = 0; e < rc; ++e) z += std::exp(lrow[e] - max_l);
        const double lse = max_l + std::log(z);
        const double coef = L.router.lambda_z * loss_scale * 2.0 * lse /
                            static_cast<double>(n);
        for (int64_t e = 0; e < rc; ++e) {
          dlogits_r[t * rc + e] += coef * std::exp(lrow[e] - max_l) / z;
        }
      }
      // logits = gate . h2
      for (int64_t t = 0; t < n; ++t) {
        const double* h2t = &T.h2[t * d];
        double* dh2t = &dh2[t * d];
        for (int64_t e = 0; e < rc; ++e) {
          const double dl = dlogits_r[t * rc + e];
          if (dl == 0.0) continue;
          const double* grow = &L.router.gate[e * d];
          double* grad_row = &(*lg[l].router)[e * d];
          for (int64_t i = 0; i < d; ++i) {
            grad_row[i] += dl * h2t[i];
            dh2t[i] += dl * grow[i];
          }
        }
      }
    }

    // moe pre-norm backward; residual passes dx through
    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm_backward(&T.x_mid[t * d], L.moe_norm.data(), &dh2[t * d],
                           T.inv2[t], &dx[t * d], lg[l].moe_norm->data(), d);
    }

    // ---- attention backward ----
    const auto& wq = views.attn[l][0].get();
    const auto& wk = views.attn[l][1].get();
    const auto& wv = views.attn[l][2].get();
    const auto& wo = views.attn[l][3].get();
    std::vector<double> datt(n * qd, 0.0);
    std::vector<double> scratch_wo(d * qd, 0.0);
    for (int64_t t = 0; t < n; ++t) {
      const double* dyt = &dx[t * d];
      // wo grad and datt
      for (int64_t j = 0; j < d; ++j) {
        const double dj = dyt[j];
        if (dj == 0.0) continue;
        const double* arow = &T.att_cat[t * qd];
        double* srow = &scratch_wo[j * qd];
        for (int64_t i = 0; i < qd; ++i) srow[i] += dj * arow[i];
      }
      for (int64_t i = 0; i < qd; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j) acc += wo[j * qd + i] * dyt[j];
        datt[t * qd + i] = acc;
      }
    }
    commit(lg[l].wo, views.attn[l][3], scratch_wo);

    std::vector<double> dq(n * qd, 0.0), dk(n * kd, 0.0), dv(n * kd, 0.0);
    std::vector<double> dprow(n);
    for (int64_t t = 0; t < n; ++t) {
      for (int64_t hh = 0; hh < n_h; ++hh) {
        const int64_t kvh = hh / group;
        const double* prow = &T.probs[(hh * n + t) * n];
        const double* dout = &datt[t * qd + hh * d_h];
        double dot = 0.0;
        for (int64_t u = 0; u <= t; ++u) {
          const double* vv = &T.v[u * kd + kvh * d_h];
          double dp = 0.0;
          for (int64_t i = 0; i < d_h; ++i) dp += dout[i] * vv[i];
          dprow[u] = dp;
          dot += dp * prow[u];
          double* dvu = &dv[u * kd + kvh * d_h];
          for (int64_t i = 0; i < d_h; ++i) dvu[i] += prow[u] * dout[i];
        }
        const double* qv = &T.q[t * qd + hh * d_h];
        double* dqv = &dq[t * qd + hh * d_h];
        for (int64_t u = 0; u <= t; ++u) {
          const double ds = prow[u] * (dprow[u] - dot) * att_scale;
          if (ds == 0.0) continue;
          const double* kv = &T.k[u * kd + kvh * d_h];
          double* dku = &dk[u * kd + kvh * d_h];
          for (int64_t i = 0; i < d_h; ++i) {
            dqv[i] += ds * kv[i];
            dku[i] += ds * qv[i];
          }
        }
      }
    }
    // rope backward = inverse rotation
    for (int64_t t = 0; t < n; ++t) {
      nn::rope_apply(&dq[t * qd], n_h, d_h, t, arch.rope_theta, true);
      nn::rope_apply(&dk[t * kd], n_kv, d_h, t, arch.rope_theta, true);
    }

    std::vector<double> dh1(n * d, 0.0);
    std::vector<double> scratch_q(qd * d, 0.0), scratch_k(kd * d, 0.0),
        scratch_v(kd * d, 0.0);
    for (int64_t t = 0; t < n; ++t) {
      const double* h1t = &T.h1[t * d];
      double* dh1t = &dh1[t * d];
      for (int64_t o = 0; o < qd; ++o) {
        const double g = dq[t * qd + o];
        if (g == 0.0) continue;
        const double* row = &wq[o * d];
        double* srow = &scratch_q[o * d];
        for (int64_t i = 0; i < d; ++i) {
          srow[i] += g * h1t[i];
          dh1t[i] += g * row[i];
        }
      }
      for (int64_t o = 0; o < kd; ++o) {
        const double gk = dk[t * kd + o];
        const double gv = dv[t * kd + o];
        const double* rowk = &wk[o * d];
        const double* rowv = &wv[o * d];
        double* srowk = &scratch_k[o * d];
        double* srowv = &scratch_v[o * d];
        for (int64_t i = 0; i < d; ++i) {
          srowk[i] += gk * h1t[i];
          srowv[i] += gv * h1t[i];
          dh1t[i] += gk * rowk[i] + gv * rowv[i];
        }
      }
    }
    commit(lg[l].wq, views.attn[l][0], scratch_q);
    commit(lg[l].wk, views.attn[l][1], scratch_k);
    commit(lg[l].wv, views.attn[l][2], scratch_v);

    for (int64_t t = 0; t < n; ++t) {
      nn::rmsnorm_backward(&T.x_in[t * d], L.att_norm.data(), &dh1[t * d],
                           T.inv1[t], &dx[t * d], lg[l].att_norm->data(), d);
    }
  }

  // embedding lookup backward
  for (int64_t t = 0; t < n; ++t) {
    double* row = &demb_scratch[tokens[t] * d];
    const double* dxt = &dx[t * d];
    for (int64_t i = 0; i < d; ++i) row[i] += dxt[i];
  }
  modeldetail::masked_add(*g_emb, views.embedding, demb_scratch);

  return parts;
}

// One optimizer step over a batch of sequences: CE + z penalty, global-norm
// clipping, AdamW, then the gradient-free balance-bias update from the
// batch's load counts.
inline StepResult train_step(ModelWeights& model,
                             const std::vector<std::vector<int32_t>>& batch,
                             const TrainConfig& cfg, ModelGrads& grads,
                             AdamState& adam) {
  if (batch.empty()) throw DomainError("empty batch");
  if (model.config.backbone.n_l > 4 || model.config.backbone.d_model > 128) {
    throw DomainError("train_step is toy scale: n_l <= 4 and d_model <= 128");
  }
  grads.zero();

  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  double ce_sum = 0.0;
  int64_t pred_total = 0;
  double z_total = 0.0;
  double weighted_z = 0.0;
  std::vector<std::vector<int64_t>> loads;

  for (const auto& seq : batch) {
    const SeqLossParts parts =
        forward_backward(model, seq, grads, cfg.qat, inv_batch);
    ce_sum += parts.ce_sum / static_cast<double>(parts.predictions);
    pred_total += parts.predictions;
    z_total += parts.z_sum;
    weighted_z += parts.weighted_z;
    if (loads.empty()) {
      loads = parts.layer_loads;
    } else {
      for (size_t l = 0; l < loads.size(); ++l) {
        for (size_t e = 0; e < loads[l].size(); ++e) {
          loads[l][e] += parts.layer_loads[l][e];
        }
      }
    }
  }

  StepResult res;
  res.cross_entropy = ce_sum * inv_batch;
  res.z_loss = z_total * inv_batch;
  res.loss = res.cross_entropy + weighted_z * inv_batch;
  if (!std::isfinite(res.loss)) {
    throw DomainError("non-finite training loss: ce=" +
                      std::to_string(res.cross_entropy) +
                      " z=" + std::to_string(res.z_loss));
  }

  // global-norm clip
  double sq = 0.0;
  for (const auto& t : grads.tensors) {
    for (double g : t) sq += g * g;
  }
  res.grad_norm = std::sqrt(sq);
  const double clip_scale =
      res.grad_norm > cfg.clip_norm ? cfg.clip_norm / res.grad_norm : 1.0;

  if (adam.m.empty()) adam.init(grads);
  adam.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.step));

  size_t idx = 0;
  model.for_each_param([&](const std::string&, std::vector<double>& w) {
    std::vector<double>& g = grads.tensors[idx];
    std::vector<double>& m = adam.m[idx];
    std::vector<double>& v = adam.v[idx];
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip_scale;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= cfg.lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) +
                        cfg.weight_decay * w[i]);
    }
    ++idx;
  });

  // gradient-free balancing from the batch's loads
  for (size_t l = 0; l < model.layers.size(); ++l) {
    update_balance_bias(model.layers[l].router, loads[l]);
  }
  return res;
}

// --- expert utilization --------------------------------------------------------

struct UtilizationRow {
  int64_t layer = 0;
  int64_t expert = 0;
  int64_t count = 0;
  double ratio = 0.0;
  double log10_ratio = -6.0;
};

inline std::vector<UtilizationRow> expert_utilization(
    const ModelWeights& model, const std::vector<std::vector<int32_t>>& prompts) {
  const int64_t n_l = model.config.backbone.n_l;
  const int64_t rc = model.config.moe.routed_count();
  std::vector<std::vector<int64_t>> counts(n_l, std::vector<int64_t>(rc, 0));
  for (const auto& p : prompts) {
    if (p.empty()) continue;
    const ForwardOutput out = transformer_forward(model, p);
    for (int64_t l = 0; l < n_l; ++l) {
      for (int64_t e = 0; e < rc; ++e) counts[l][e] += out.layer_loads[l][e];
    }
  }
  std::vector<UtilizationRow> rows;
  rows.reserve(n_l * rc);
  for (int64_t l = 0; l < n_l; ++l) {
    int64_t total = 0;
    for (int64_t e = 0; e < rc; ++e) total += counts[l][e];
    for (int64_t e = 0; e < rc; ++e) {
      UtilizationRow r;
      r.layer = l;
      r.expert = e;
      r.count = counts[l][e];
      r.ratio = total > 0 ? static_cast<double>(counts[l][e]) /
                                static_cast<double>(total)
                          : 0.0;
      r.log10_ratio = r.ratio > 0.0 ? std::max(-6.0, std::log10(r.ratio)) : -6.0;
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string utilization_to_csv(const std::vector<UtilizationRow>& rows) {
  std::string out = "layer,expert,count,ratio,log10_ratio\n";
  char buf[128];
  for (const UtilizationRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%lld,%.8f,%.4f\n",
                  static_cast<long long>(r.layer),
                  static_cast<long long>(r.expert),
                  static_cast<long long>(r.count), r.ratio, r.log10_ratio);
    out += buf;
  }
  return out;
}

}  // namespace moekit
