// Acceptance suite: one pass/fail line per criterion, each run at its stated
// tolerance and runtime budget. Exits nonzero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "moekit/bench.hpp"
#include "moekit/container.hpp"
#include "moekit/fit.hpp"
#include "moekit/kernel.hpp"
#include "moekit/model.hpp"
#include "moekit/quant.hpp"
#include "moekit/scaling.hpp"

using namespace moekit;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  void fail(const std::string& why) {
    pass = false;
    if (!detail.empty()) detail += "; ";
    detail += why;
  }
  void note(const std::string& info) {
    if (!detail.empty()) detail += "; ";
    detail += info;
  }
};

ScalingCoeffs sweep_coeffs() {
  ScalingCoeffs s;
  s.a = 0.2388;
  s.delta = 0.0906;
  s.alpha = -0.2833;
  s.gamma = 0.0387;
  s.b = 0.6019;
  s.omega = 1.0593;
  s.beta = -0.3210;
  s.zeta = -0.3684;
  s.c = 1.9730;
  return s;
}

BaseArch backbone(int64_t dm, int64_t dff, int64_t nh, int64_t nl) {
  return BaseArch{dm, dff, nh, 4, 64, nl, 128256, 500000.0};
}

ModelConfig toy_config(int64_t d_model, int64_t n_l, int64_t vocab, int64_t e,
                       int64_t g, int64_t k, bool shared, int64_t su) {
  ModelConfig cfg;
  cfg.backbone.d_model = d_model;
  cfg.backbone.d_ff = 4 * d_model;
  cfg.backbone.d_h = 8;
  cfg.backbone.n_h = d_model / 8;
  cfg.backbone.n_kv = cfg.backbone.n_h >= 2 ? 2 : 1;
  cfg.backbone.n_l = n_l;
  cfg.backbone.vocab_size = vocab;
  cfg.moe.e = e;
  cfg.moe.g = g;
  cfg.moe.k = k;
  cfg.moe.shared = shared;
  cfg.moe.shared_units = su;
  return cfg;
}

double rel_dev(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// ---------------------------------------------------------------------------

Outcome criterion1_param_counts() {
  Outcome out;
  const MoeSpec moe = MoeSpec::with_shared(8, 8, 1, 4);
  struct Row {
    BaseArch base;
    double act, total;
  };
  const Row rows[] = {
      {backbone(768, 3072, 12, 20), 272e6, 1.26e9},
      {backbone(1024, 4096, 16, 26), 528e6, 2.82e9},
      {backbone(1280, 5120, 20, 32), 922e6, 5.33e9},
  };
  for (const Row& r : rows) {
    const ParamCounts c = count_params(r.base, moe);
    const double act_err = std::abs(c.n_act - r.act) / r.act;
    const double tot_err = std::abs(c.n_total - r.total) / r.total;
    if (act_err >= 0.01) out.fail("n_act off by " + std::to_string(act_err));
    if (tot_err >= 0.01) out.fail("n_total off by " + std::to_string(tot_err));
  }
  return out;
}

Outcome criterion2_memory_proxy() {
  Outcome out;
  const MoeSpec moe = MoeSpec::with_shared(8, 8, 1, 4);
  const MemoryBudget budget{4, 8, 8192, 5.0};
  struct Row {
    BaseArch base;
    double reported;  // published proxy, includes packing overhead
  };
  const Row rows[] = {
      {backbone(768, 3072, 12, 20), 0.76},
      {backbone(1024, 4096, 16, 26), 1.58},
      {backbone(1280, 5120, 20, 32), 2.88},
  };
  char buf[160];
  for (const Row& r : rows) {
    const ParamCounts c = count_params(r.base, moe);
    const MemoryReport m = memory_proxy(c, r.base, budget);
    // independent recomputation of the formula
    const double expect = 0.5 * c.n_total / 1e9 +
                          1.0 * 2.0 * 8192.0 * r.base.n_l * 4 * 64 / 1e9;
    if (std::abs(m.total_gb - expect) > 1e-9) out.fail("formula mismatch");
    const double gap = std::abs(m.total_gb - r.reported) / r.reported;
    if (gap >= 0.10) out.fail("proxy outside 10% of the published value");
    std::snprintf(buf, sizeof(buf), "%.3f vs %.2f (%.1f%% packing overhead)",
                  m.total_gb, r.reported, 100.0 * (r.reported - m.total_gb) / m.total_gb);
    out.note(buf);
  }
  return out;
}

Outcome criterion3_optimizer() {
  Outcome out;
  const ScalingCoeffs s = sweep_coeffs();
  const ExpertTransform t;
  MemoryBudget budget{4, 8, 8192, 5.0};
  const OptimizeResult r5 = optimize_architecture(s, t, 5e20, budget);
  if (r5.best.e != 8) {
    out.fail("optimal E at 5 GB is " + std::to_string(r5.best.e));
  }
  out.note("E*=" + std::to_string(r5.best.e) + " at 5 GB");
  for (double m : {1.0, 2.0, 5.0}) {
    budget.budget_gb = m;
    const OptimizeResult r = optimize_architecture(s, t, 5e20, budget);
    if (r.best.e != 4 && r.best.e != 8) {
      out.fail("optimal E at " + std::to_string(m) + " GB is " +
               std::to_string(r.best.e));
    }
  }
  return out;
}

Outcome criterion4_ordering() {
  Outcome out;
  const ScalingCoeffs s = sweep_coeffs();
  const ExpertTransform t;
  double prev = 1e300;
  for (double e : {1.0, 2.0, 4.0, 8.0}) {
    const double l = predict_loss(s, 0.3, 100.0, t(e));
    if (l >= prev) out.fail("not strictly decreasing at E=" + std::to_string(e));
    prev = l;
  }
  const double l8 = predict_loss(s, 0.3, 100.0, t(8.0));
  const double l16 = predict_loss(s, 0.3, 100.0, t(16.0));
  if (!(l16 < l8)) out.fail("E=16 not below E=8");
  if (!(l8 - l16 < 0.01)) out.fail("improvement beyond E=8 not diminished");
  char buf[64];
  std::snprintf(buf, sizeof(buf), "step 8->16 = %.4f nats", l8 - l16);
  out.note(buf);
  return out;
}

Outcome criterion5_fit_round_trip() {
  Outcome out;
  const ScalingCoeffs gen = sweep_coeffs();
  const ExpertTransform t;

  auto make_grid = [&](double sigma, uint64_t seed) {
    Rng rng(seed);
    std::vector<Observation> obs;
    for (double n : {0.3, 0.5, 0.9}) {
      for (int di = 0; di < 9; ++di) {
        for (double e : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
          const double d = 100.0 + 50.0 * di;
          Observation o{n, d, e, predict_loss(gen, n, d, t(e))};
          if (sigma > 0.0) o.loss += sigma * rng.normal();
          obs.push_back(o);
        }
      }
    }
    return obs;
  };

  FitOptions opts;
  opts.mode = FitMode::kJoint;
  const FitResult noiseless = fit(make_grid(0.0, 0), opts);
  double sq = 0.0;
  int held = 0;
  for (double n : {0.35, 0.7, 1.2}) {
    for (double d : {125.0, 275.0, 425.0}) {
      for (double e : {3.0, 6.0, 12.0, 24.0}) {
        const double truth = predict_loss(gen, n, d, t(e));
        const double pred = predict_loss(noiseless.coeffs, n, d, t(e));
        sq += (pred - truth) * (pred - truth);
        ++held;
      }
    }
  }
  const double held_rmse = std::sqrt(sq / held);
  if (!(held_rmse < 1e-3)) {
    out.fail("held-out RMSE " + std::to_string(held_rmse));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "noiseless held-out RMSE %.2e", held_rmse);
  out.note(buf);

  double lo = 1e9, hi = 0.0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    const FitResult noisy = fit(make_grid(0.01, seed), opts);
    lo = std::min(lo, noisy.rmse);
    hi = std::max(hi, noisy.rmse);
    if (noisy.rmse < 0.005 || noisy.rmse > 0.02) {
      out.fail("seed " + std::to_string(seed) + " RMSE " +
               std::to_string(noisy.rmse));
    }
  }
  std::snprintf(buf, sizeof(buf), "noisy RMSE range [%.4f, %.4f]", lo, hi);
  out.note(buf);
  return out;
}

Outcome criterion6_moe_equivalence() {
  Outcome out;
  Rng rng(2024);

  // dense recovery, bit level
  {
    const ModelConfig cfg = toy_config(32, 1, 64, 1, 1, 1, false, 0);
    ModelWeights model;
    model.init(cfg, rng);
    const LayerWeights& L = model.layers[0];
    const int64_t d = 32, n = 8;
    std::vector<double> x(n * d);
    for (double& v : x) v = rng.normal();
    const RouterOutput routing = router_forward(x, n, L.router, 1);
    const DispatchPlan plan = build_dispatch(routing, DispatchMode::kDropless, 1.5, 1);
    const auto y = moe_layer_forward(x, n, L, cfg.moe, plan, routing);
    const ExpertWeights& ex = L.experts[0];
    std::vector<double> g(ex.width), u(ex.width), m(ex.width), o(d);
    for (int64_t t = 0; t < n && out.pass; ++t) {
      nn::matvec(ex.gate, &x[t * d], g.data(), ex.width, d);
      nn::matvec(ex.up, &x[t * d], u.data(), ex.width, d);
      for (int64_t i = 0; i < ex.width; ++i) m[i] = nn::silu(g[i]) * u[i];
      nn::matvec(ex.down, m.data(), o.data(), d, ex.width);
      for (int64_t i = 0; i < d; ++i) {
        if (y[t * d + i] != o[i]) out.fail("dense recovery not bit exact");
      }
    }
  }

  // fused (INT4 weights + INT8 activations) vs the naive per-token loop over
  // dequantized operands, 1000 randomized cases
  double worst = 0.0;
  int cases = 0;
  while (cases < 1000) {
    const int64_t e = 1 + rng.uniform_index(16);
    const int64_t n = 1 + rng.uniform_index(256);
    const bool shared = cases % 3 == 0;
    const int64_t k = 1 + rng.uniform_index(e);
    ModelConfig cfg = toy_config(32, 1, 64, e, 1, k, shared, 0);
    if (shared) {
      cfg.moe.g = 2;
      cfg.moe.shared_units = 1;
    }
    if (cfg.moe.routed_topk() < 1 || cfg.moe.routed_count() < 1) continue;
    ModelWeights model;
    model.init(cfg, rng);
    const LayerWeights& L = model.layers[0];

    FusedMoeLayer fused;
    fused.d_model = 32;
    fused.topk = cfg.moe.routed_topk();
    fused.router = &L.router;
    fused.experts.resize(L.experts.size());
    for (size_t i = 0; i < L.experts.size(); ++i) {
      const ExpertWeights& ex = L.experts[i];
      fused.experts[i] = FusedExpert::from_quantized(
          quantize_weights(ex.gate, ex.width, 32),
          quantize_weights(ex.up, ex.width, 32),
          quantize_weights(ex.down, 32, ex.width));
    }
    fused.has_shared = cfg.moe.shared;
    if (cfg.moe.shared) {
      fused.shared = FusedExpert::from_quantized(
          quantize_weights(L.shared.gate, L.shared.width, 32),
          quantize_weights(L.shared.up, L.shared.width, 32),
          quantize_weights(L.shared.down, 32, L.shared.width));
    }

    std::vector<double> x(n * 32);
    for (double& v : x) v = rng.normal();
    RouterOutput routing;
    const auto y = fused_moe_forward(fused, x, n, &routing);

    // naive loop oracle at identical quantization points; weights are
    // dequantized once per expert up front
    const QuantizedActivations qa = quantize_activations_int8(x, n, 32);
    std::vector<double> ref(n * 32, 0.0);
    std::vector<std::vector<double>> deq_gu(fused.experts.size());
    std::vector<std::vector<double>> deq_dn(fused.experts.size());
    for (size_t i = 0; i < fused.experts.size(); ++i) {
      deq_gu[i] = dequantize(fused.experts[i].q_gate_up);
      deq_dn[i] = dequantize(fused.experts[i].q_down);
    }
    const std::vector<double> deq_sh_gu =
        fused.has_shared ? dequantize(fused.shared.q_gate_up) : std::vector<double>{};
    const std::vector<double> deq_sh_dn =
        fused.has_shared ? dequantize(fused.shared.q_down) : std::vector<double>{};
    auto run_expert = [&](const FusedExpert& fe, const std::vector<double>& gu_w,
                          const std::vector<double>& dn_w, int64_t t,
                          double weight) {
      const int64_t w = fe.width;
      std::vector<double> adeq(32);
      for (int64_t j = 0; j < 32; ++j) adeq[j] = qa.codes[t * 32 + j] * qa.scales[t];
      std::vector<double> gu(2 * w), m(w);
      for (int64_t i = 0; i < 2 * w; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < 32; ++j) acc += gu_w[i * 32 + j] * adeq[j];
        gu[i] = acc;
      }
      for (int64_t i = 0; i < w; ++i) m[i] = nn::silu(gu[i]) * gu[w + i];
      double m_max = 0.0;
      for (int64_t i = 0; i < w; ++i) m_max = std::max(m_max, std::abs(m[i]));
      const double ms = m_max == 0.0 ? 0.0 : m_max / 127.0;
      for (int64_t i = 0; i < w; ++i) {
        m[i] = ms == 0.0 ? 0.0 : quantize_row_value(m[i], ms) * ms;
      }
      for (int64_t i = 0; i < 32; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < w; ++j) acc += dn_w[i * w + j] * m[j];
        ref[t * 32 + i] += weight * acc;
      }
    };
    for (int64_t t = 0; t < n; ++t) {
      std::vector<std::pair<int32_t, int64_t>> sel;
      for (int64_t j = 0; j < routing.topk; ++j) {
        sel.push_back({routing.selected[t * routing.topk + j], j});
      }
      std::sort(sel.begin(), sel.end());
      for (auto [ee, j] : sel) {
        run_expert(fused.experts[ee], deq_gu[ee], deq_dn[ee], t,
                   routing.weights[t * routing.topk + j]);
      }
      if (fused.has_shared) run_expert(fused.shared, deq_sh_gu, deq_sh_dn, t, 1.0);
    }
    for (size_t i = 0; i < y.size(); ++i) worst = std::max(worst, rel_dev(y[i], ref[i]));
    ++cases;
  }
  if (!(worst < 1e-4)) out.fail("fused vs naive deviation " + std::to_string(worst));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "worst fused/naive rel dev %.2e", worst);
  out.note(buf);

  // drop-and-pad with capacity above the worst case equals dropless exactly
  {
    const ModelConfig cfg = toy_config(32, 1, 64, 4, 2, 1, true, 1);
    ModelWeights model;
    model.init(cfg, rng);
    const LayerWeights& L = model.layers[0];
    for (int trial = 0; trial < 50; ++trial) {
      const int64_t n = 1 + rng.uniform_index(64);
      std::vector<double> x(n * 32);
      for (double& v : x) v = rng.normal();
      const RouterOutput routing = router_forward(x, n, L.router, cfg.moe.routed_topk());
      const DispatchPlan a = build_dispatch(routing, DispatchMode::kDropless,
                                            1.5, cfg.moe.routed_count());
      const DispatchPlan b = build_dispatch(routing, DispatchMode::kDropAndPad,
                                            1e6, cfg.moe.routed_count());
      const auto ya = moe_layer_forward(x, n, L, cfg.moe, a, routing);
      const auto yb = moe_layer_forward(x, n, L, cfg.moe, b, routing);
      if (ya != yb) out.fail("padded != dropless at slack capacity");
    }
  }
  return out;
}

Outcome criterion7_quantization() {
  Outcome out;
  Rng rng(4242);
  double worst = 0.0;
  for (int trial = 0; trial < 100000; ++trial) {
    std::vector<double> w(32);
    const double scale = std::exp(rng.uniform(-4.0, 4.0));
    for (double& v : w) v = rng.normal() * scale;
    const QuantizedTensor q1 = quantize_weights(w, 1, 32);
    const auto back = dequantize(q1);
    const double s = q1.scale_at(0, 0);
    for (int i = 0; i < 32; ++i) {
      const double err = std::abs(w[i] - back[i]);
      if (err > 0.5 * s * (1.0 + 1e-6)) {
        out.fail("round-trip error above s/2");
        break;
      }
      if (s > 0.0) worst = std::max(worst, err / s);
    }
    const QuantizedTensor q2 = quantize_weights(back, 1, 32);
    if (q1.codes != q2.codes) {
      out.fail("re-quantization changed codes at trial " + std::to_string(trial));
      break;
    }
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "worst |err|/s = %.6f", worst);
  out.note(buf);

  // router tensors stay full precision through model quantization
  {
    const ModelConfig cfg = toy_config(32, 2, 64, 4, 2, 1, true, 1);
    ModelWeights model;
    model.init(cfg, rng);
    save_model(model, "acceptance_tmp_f32.mmoe");
    quantize_container("acceptance_tmp_f32.mmoe", "acceptance_tmp_q4.mmoe");
    bool saw_router = false;
    for (const auto& e : read_container("acceptance_tmp_q4.mmoe")) {
      if (e.name.find("router") != std::string::npos) {
        saw_router = true;
        if (e.dtype != "f32") out.fail("router tensor was quantized");
      }
    }
    if (!saw_router) out.fail("no router tensors found in container");
    std::remove("acceptance_tmp_f32.mmoe");
    std::remove("acceptance_tmp_q4.mmoe");
  }
  return out;
}

Outcome criterion8_gradients() {
  Outcome out;
  Rng rng(1717);
  // top-3 of 7 fine experts: combine weights carry real router gradients
  const ModelConfig cfg = toy_config(16, 1, 32, 4, 2, 2, true, 1);
  ModelWeights model;
  model.init(cfg, rng);
  for (auto& L : model.layers) L.router.lambda_z = 0.0;  // frozen-routing check

  std::vector<int32_t> tokens(8);
  for (auto& t : tokens) t = static_cast<int32_t>(rng.uniform_index(32));

  ModelGrads grads;
  grads.init(model);
  forward_backward(model, tokens, grads, false, 1.0);
  auto loss_of = [&](ModelWeights& m) {
    ModelGrads scratch;
    scratch.init(m);
    const SeqLossParts p = forward_backward(m, tokens, scratch, false, 1.0);
    return p.ce_sum / static_cast<double>(p.predictions);
  };

  Rng pick(33);
  size_t idx = 0;
  int checked = 0;
  double worst = 0.0;
  model.for_each_param([&](const std::string& name, std::vector<double>& w) {
    // the moe block: router gate, routed experts, shared expert
    const bool moe_tensor = name.find("router.gate") != std::string::npos ||
                            name.find("expert") != std::string::npos ||
                            name.find("shared") != std::string::npos;
    if (moe_tensor) {
      const int samples = 8;
      for (int s = 0; s < samples; ++s) {
        const size_t i = pick.uniform_index(w.size());
        const double orig = w[i];
        const double h = 1e-5 * std::max(1.0, std::abs(orig));
        w[i] = orig + h;
        const double up = loss_of(model);
        w[i] = orig - h;
        const double down = loss_of(model);
        w[i] = orig;
        const double fd = (up - down) / (2.0 * h);
        const double an = grads.tensors[idx][i];
        const double mag = std::max(std::abs(fd), std::abs(an));
        ++checked;
        if (mag < 1e-6) {
          // below the central-difference noise floor (~eps*loss/h); hold
          // these to an absolute bound instead of a meaningless ratio
          if (std::abs(fd - an) > 1e-9) out.fail("small-gradient mismatch");
          continue;
        }
        worst = std::max(worst, std::abs(fd - an) / mag);
      }
    }
    ++idx;
  });
  if (checked < 100) out.fail("only " + std::to_string(checked) + " parameters checked");
  if (!(worst < 1e-4)) out.fail("worst relative error " + std::to_string(worst));
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%d params, worst rel err %.2e", checked, worst);
  out.note(buf);
  return out;
}

Outcome criterion9_balancing() {
  Outcome out;
  Rng rng(29);
  ModelConfig cfg = toy_config(32, 1, 256, 8, 1, 2, false, 0);
  ModelWeights model;
  model.init(cfg, rng);
  for (double& v : model.layers[0].router.gate) v *= 8.0;

  const int64_t rc = cfg.moe.routed_count();
  Rng data(101);
  auto measure = [&](int64_t n_seq, int64_t len, Rng& gen) {
    std::vector<int64_t> load(rc, 0);
    for (int64_t s = 0; s < n_seq; ++s) {
      std::vector<int32_t> tokens(len);
      for (auto& t : tokens) t = static_cast<int32_t>(gen.uniform_index(256));
      const ForwardOutput fo = transformer_forward(model, tokens);
      for (int64_t e = 0; e < rc; ++e) load[e] += fo.layer_loads[0][e];
    }
    return load;
  };
  for (int step = 0; step < 1000; ++step) {
    const auto load = measure(8, 64, data);
    update_balance_bias(model.layers[0].router, load);
  }
  Rng eval_rng(555);
  const auto after = measure(128, 64, eval_rng);
  int64_t lo = after[0], hi = after[0];
  for (int64_t v : after) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double ratio = static_cast<double>(hi) / std::max<int64_t>(1, lo);
  if (!(ratio < 1.2)) out.fail("load ratio " + std::to_string(ratio));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "max/min load ratio %.3f", ratio);
  out.note(buf);
  return out;
}

Outcome criterion10_substitutes() {
  Outcome out;
  out.note(
      "full-scale training curves, benchmark accuracy tables, and phone "
      "latency/RSS are not reproducible at desk scale; substituted by the "
      "checks below");

  // toy overfit
  {
    Rng rng(19);
    const ModelConfig cfg = toy_config(64, 2, 128, 2, 2, 1, true, 1);
    ModelWeights model;
    model.init(cfg, rng);
    std::vector<int32_t> seq(64);
    for (auto& t : seq) t = static_cast<int32_t>(rng.uniform_index(128));
    TrainConfig tc;
    tc.lr = 3e-3;
    ModelGrads grads;
    grads.init(model);
    AdamState adam;
    double ce = 1e9;
    for (int step = 0; step < 200; ++step) {
      ce = train_step(model, {seq}, tc, grads, adam).cross_entropy;
    }
    if (!(ce < 0.1)) out.fail("memorization CE " + std::to_string(ce));
    char buf[48];
    std::snprintf(buf, sizeof(buf), "overfit CE %.4f", ce);
    out.note(buf);
  }

  // bench harness: fused == naive on a float container, report format sane
  {
    Rng rng(55);
    const ModelConfig cfg = toy_config(32, 1, 96, 4, 2, 1, true, 1);
    ModelWeights model;
    model.init(cfg, rng);
    save_model(model, "acceptance_bench.mmoe");
    const InferenceEngine eng = load_engine("acceptance_bench.mmoe");

    std::vector<int32_t> tokens(24);
    for (auto& t : tokens) t = static_cast<int32_t>(rng.uniform_index(96));
    const ForwardOutput a = engine_forward(eng, tokens, nullptr, true);
    const ForwardOutput b = engine_forward(eng, tokens, nullptr, false);
    if (a.logits != b.logits) out.fail("fused != naive on float weights");

    std::vector<std::pair<std::string, std::vector<int32_t>>> domains = {
        {"mixed", tokens}, {"dummy", std::vector<int32_t>(24, 5)}};
    BenchOptions opts;
    opts.input_lens = {12};
    opts.output_lens = {4};
    opts.repeats = 3;
    const auto reports = run_bench(eng, domains, opts);
    int64_t real_distinct = -1, dummy_distinct = -1;
    for (const auto& r : reports) {
      if (r.run_wall_times.size() != 3) out.fail("per-run values not retained");
      if (std::abs(r.throughput * r.wall_time - r.tokens) > 1e-6 * r.tokens) {
        out.fail("throughput x wall_time != tokens");
      }
      if (r.phase == "prefill" && r.prompt_domain == "mixed") {
        real_distinct = r.distinct_experts;
      }
      if (r.phase == "prefill" && r.prompt_domain == "dummy") {
        dummy_distinct = r.distinct_experts;
      }
    }
    if (real_distinct < dummy_distinct) {
      out.fail("varied prompts activated fewer experts than a repeated token");
    }
    std::remove("acceptance_bench.mmoe");
  }
  return out;
}

}  // namespace

int main() {
  struct Entry {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Entry> entries = {
      {1, "parameter-count reproduction", 1.0, criterion1_param_counts},
      {2, "memory proxy vs published footprints", 1.0, criterion2_memory_proxy},
      {3, "constrained optimizer reproduction", 10.0, criterion3_optimizer},
      {4, "scaling-law ordering in expert count", 1.0, criterion4_ordering},
      {5, "fit round trip, noiseless and noisy", 120.0, criterion5_fit_round_trip},
      {6, "moe equivalence suite", 60.0, criterion6_moe_equivalence},
      {7, "quantization round trip and router exclusion", 30.0, criterion7_quantization},
      {8, "moe-layer gradient check", 60.0, criterion8_gradients},
      {9, "aux-loss-free balancing", 120.0, criterion9_balancing},
      {10, "desk-scale substitutes: overfit and bench checks", 120.0,
       criterion10_substitutes},
  };

  int failures = 0;
  for (const Entry& e : entries) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = e.run();
    } catch (const std::exception& ex) {
      out.fail(std::string("exception: ") + ex.what());
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (seconds > e.budget_s) {
      out.fail("runtime " + std::to_string(seconds) + "s over budget");
    }
    std::printf("[%s] criterion %2d (%6.2fs): %s%s%s\n",
                out.pass ? "PASS" : "FAIL", e.id, seconds, e.name,
                out.detail.empty() ? "" : " -- ", out.detail.c_str());
    if (!out.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
