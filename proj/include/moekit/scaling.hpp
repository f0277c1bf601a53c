#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "moekit/arch.hpp"

namespace moekit {

// Nine coefficients of the generalized loss surface
//   L(n, d, E^) = a * E^^delta * n^(alpha + gamma ln E^)
//              + b * E^^omega * d^(beta + zeta ln E^) + c
// n and d are in billions (parameters / tokens) by fixture convention.
struct ScalingCoeffs {
  double a = 0.0;
  double delta = 0.0;
  double alpha = 0.0;
  double gamma = 0.0;
  double b = 0.0;
  double omega = 0.0;
  double beta = 0.0;
  double zeta = 0.0;
  double c = 0.0;

  void validate() const {
    if (!(c > 0.0)) throw DomainError("irreducible loss c must be positive");
    for (double v : {a, delta, alpha, gamma, b, omega, beta, zeta, c}) {
      if (!std::isfinite(v)) throw DomainError("coefficients must be finite");
    }
  }
};

// Saturating remap of the expert count: dense (e_start) anchors E^(1) = 1,
// e_max bounds it above.
struct ExpertTransform {
  double e_start = 1.0;
  double e_max = 32.0;

  void validate() const {
    if (!(e_start >= 1.0 && e_start < e_max)) {
      throw DomainError("require 1 <= e_start < e_max");
    }
  }

  double operator()(double e) const {
    if (e < 1.0) throw DomainError("expert count must be >= 1");
    const double anchor = 1.0 / (1.0 / e_start - 1.0 / e_max);
    return 1.0 / (1.0 / (e - 1.0 + anchor) + 1.0 / e_max);
  }
};

inline double predict_loss(const ScalingCoeffs& s, double n_act_b, double d_b,
                           double e_hat) {
  if (!(n_act_b > 0.0) || !(d_b > 0.0)) {
    throw DomainError("n_act and d must be positive");
  }
  if (!(e_hat >= 1.0)) throw DomainError("transformed expert count must be >= 1");
  const double le = std::log(e_hat);
  return s.a * std::pow(e_hat, s.delta) * std::pow(n_act_b, s.alpha + s.gamma * le) +
         s.b * std::pow(e_hat, s.omega) * std::pow(d_b, s.beta + s.zeta * le) +
         s.c;
}

// Chinchilla reduction at fixed E^: absorbs the expert terms into composite
// constants. Composites are encoded in the same 9-field struct with the
// absorbed exponents zeroed, so predict_loss evaluates them unchanged.
inline ScalingCoeffs reduce_chinchilla(const ScalingCoeffs& s, double e_hat) {
  if (!(e_hat >= 1.0)) throw DomainError("transformed expert count must be >= 1");
  const double le = std::log(e_hat);
  ScalingCoeffs r;
  r.a = s.a * std::pow(e_hat, s.delta);
  r.alpha = s.alpha + s.gamma * le;
  r.b = s.b * std::pow(e_hat, s.omega);
  r.beta = s.beta + s.zeta * le;
  r.c = s.c;
  return r;
}

// --- compute-optimal frontier ----------------------------------------------

struct FrontierPoint {
  std::string setting;
  double flops = 0.0;
  double n_act_b = 0.0;
  double d_b = 0.0;
  double loss = 0.0;
};

namespace detail {

// Minimizes f over t in [lo, hi] by golden-section search. The frontier
// objective is a sum of two exponentials in t = ln(n), hence unimodal.
template <typename F>
inline double golden_min(F&& f, double lo, double hi, int iters = 200) {
  const double gr = 0.6180339887498948482;
  double a = lo, b = hi;
  double c1 = b - gr * (b - a), c2 = a + gr * (b - a);
  double f1 = f(c1), f2 = f(c2);
  for (int i = 0; i < iters; ++i) {
    if (f1 < f2) {
      b = c2; c2 = c1; f2 = f1;
      c1 = b - gr * (b - a); f1 = f(c1);
    } else {
      a = c1; c1 = c2; f1 = f2;
      c2 = a + gr * (b - a); f2 = f(c2);
    }
  }
  return 0.5 * (a + b);
}

}  // namespace detail

// Compute-optimal (n_act, d) split at fixed training FLOPs F: minimizes the
// predicted loss subject to 6 * n_act * d = F. Unconstrained by memory.
inline FrontierPoint compute_optimal_split(const ScalingCoeffs& s, double e_hat,
                                           double flops,
                                           const std::string& setting = "") {
  if (!(flops > 0.0)) throw DomainError("flops budget must be positive");
  const double nd_product_b = flops / 6.0 / 1e18;  // n_b * d_b
  auto objective = [&](double t) {
    const double n = std::exp(t);
    return predict_loss(s, n, nd_product_b / n, e_hat);
  };
  const double t = detail::golden_min(objective, std::log(1e-4), std::log(1e4));
  FrontierPoint p;
  p.setting = setting;
  p.flops = flops;
  p.n_act_b = std::exp(t);
  p.d_b = nd_product_b / p.n_act_b;
  p.loss = objective(t);
  return p;
}

inline std::vector<FrontierPoint> frontier_sweep(
    const ScalingCoeffs& s, double e_hat, const std::vector<double>& flops_list,
    const std::string& setting = "") {
  std::vector<FrontierPoint> rows;
  rows.reserve(flops_list.size());
  for (double f : flops_list) {
    rows.push_back(compute_optimal_split(s, e_hat, f, setting));
  }
  return rows;
}

// --- constrained architecture optimizer -------------------------------------

struct Candidate {
  BaseArch backbone;
  int64_t e = 1;
  ParamCounts counts;
  double d_b = 0.0;
  double memory_gb = 0.0;
  double loss = 0.0;
  bool feasible = false;
};

struct OptimizeResult {
  Candidate best;
  std::vector<Candidate> frontier;  // all grid points, feasible or not
};

struct BackboneGrid {
  double n_act_min_b = 0.05;
  double n_act_max_b = 2.0;
  int points = 64;
  // backbone conventions: FFN expansion 4, aspect ratio ~40, d_h 64, 4 KV heads
  int64_t d_model_step = 64;
  int64_t d_h = 64;
  int64_t n_kv = 4;
  double aspect_ratio = 40.0;
  int64_t vocab_size = 128256;
  std::vector<int64_t> expert_counts = {1, 2, 4, 8, 16, 32};
};

namespace detail {

inline BaseArch synth_backbone(int64_t d_model, const BackboneGrid& grid) {
  BaseArch b;
  b.d_model = d_model;
  b.d_ff = 4 * d_model;
  b.d_h = grid.d_h;
  b.n_h = d_model / grid.d_h;
  b.n_kv = grid.n_kv;
  b.n_l = std::max<int64_t>(
      1, std::llround(static_cast<double>(d_model) / grid.aspect_ratio));
  b.vocab_size = grid.vocab_size;
  return b;
}

// The sweep accounting convention: k = 1, g = 1, no shared expert, so n_act
// is independent of E and n_total grows linearly in it.
inline MoeSpec sweep_moe(int64_t e) {
  MoeSpec m;
  m.e = e;
  return m;
}

}  // namespace detail

// Backbones whose n_act (at the sweep accounting convention) is nearest to
// each of `points` log-uniform targets in [n_act_min_b, n_act_max_b].
inline std::vector<BaseArch> synthesize_backbones(const BackboneGrid& grid) {
  if (grid.points < 1) throw DomainError("grid must have at least one point");
  std::set<int64_t> chosen;
  const double lo = std::log(grid.n_act_min_b);
  const double hi = std::log(grid.n_act_max_b);
  for (int i = 0; i < grid.points; ++i) {
    const double frac = grid.points == 1 ? 0.0 : static_cast<double>(i) / (grid.points - 1);
    const double target = std::exp(lo + frac * (hi - lo)) * 1e9;
    int64_t best_dm = 0;
    double best_gap = 0.0;
    for (int64_t dm = grid.d_model_step; dm <= 64 * grid.d_model_step;
         dm += grid.d_model_step) {
      const BaseArch b = detail::synth_backbone(dm, grid);
      const auto counts = count_params(b, detail::sweep_moe(1));
      const double gap = std::abs(static_cast<double>(counts.n_act) - target);
      if (best_dm == 0 || gap < best_gap) {
        best_dm = dm;
        best_gap = gap;
      }
    }
    chosen.insert(best_dm);
  }
  std::vector<BaseArch> out;
  out.reserve(chosen.size());
  for (int64_t dm : chosen) out.push_back(detail::synth_backbone(dm, grid));
  return out;
}

// Enumerates (backbone, E) pairs, splits the FLOPs budget as d = F / (6 n_act),
// filters by the memory proxy, and returns the feasible loss minimizer.
// Ties break toward smaller E, then smaller n_total.
inline OptimizeResult optimize_architecture(const ScalingCoeffs& coeffs,
                                            const ExpertTransform& transform,
                                            double train_flops,
                                            const MemoryBudget& budget,
                                            const BackboneGrid& grid = {}) {
  if (!(train_flops > 0.0)) throw DomainError("train_flops must be positive");
  transform.validate();
  budget.validate();
  const auto backbones = synthesize_backbones(grid);
  if (backbones.empty()) throw DomainError("empty candidate grid");

  OptimizeResult result;
  bool have_best = false;
  for (const auto& base : backbones) {
    for (int64_t e : grid.expert_counts) {
      Candidate cand;
      cand.backbone = base;
      cand.e = e;
      cand.counts = count_params(base, detail::sweep_moe(e));
      // d in billions of tokens: F / (6 * n_act) / 1e9
      cand.d_b = train_flops /
                 (6.0 * static_cast<double>(cand.counts.n_act)) / 1e9;
      const MemoryReport mem = memory_proxy(cand.counts, base, budget);
      cand.memory_gb = mem.total_gb;
      cand.feasible = mem.feasible;
      cand.loss = predict_loss(coeffs, cand.counts.n_act_b(), cand.d_b,
                               transform(static_cast<double>(e)));
      result.frontier.push_back(cand);
      if (!cand.feasible) continue;
      if (!have_best || cand.loss < result.best.loss ||
          (cand.loss == result.best.loss &&
           (cand.e < result.best.e ||
            (cand.e == result.best.e &&
             cand.counts.n_total < result.best.counts.n_total)))) {
        result.best = cand;
        have_best = true;
      }
    }
  }
  if (!have_best) {
    throw DomainError("no feasible candidate under the memory budget");
  }
  return result;
}

// --- coefficients JSON schema ------------------------------------------------
// Nine named fields + metadata {transform: {e_start, e_max}, units}.

struct CoeffsFile {
  ScalingCoeffs coeffs;
  ExpertTransform transform;
  std::string units = "billions";
  std::string setting;          // e.g. "e_sweep_joint", "g8", "shared"
  std::optional<double> rmse;   // fit residual, when known
};

inline nlohmann::json to_json(const CoeffsFile& f) {
  nlohmann::json meta = {
      {"transform", {{"e_start", f.transform.e_start}, {"e_max", f.transform.e_max}}},
      {"units", f.units}};
  if (!f.setting.empty()) meta["setting"] = f.setting;
  if (f.rmse) meta["rmse"] = *f.rmse;
  return {{"a", f.coeffs.a},         {"delta", f.coeffs.delta},
          {"alpha", f.coeffs.alpha}, {"gamma", f.coeffs.gamma},
          {"b", f.coeffs.b},         {"omega", f.coeffs.omega},
          {"beta", f.coeffs.beta},   {"zeta", f.coeffs.zeta},
          {"c", f.coeffs.c},         {"metadata", meta}};
}

inline CoeffsFile coeffs_file_from_json(const nlohmann::json& j) {
  CoeffsFile f;
  f.coeffs.a = j.at("a").get<double>();
  f.coeffs.delta = j.value("delta", 0.0);
  f.coeffs.alpha = j.at("alpha").get<double>();
  f.coeffs.gamma = j.value("gamma", 0.0);
  f.coeffs.b = j.at("b").get<double>();
  f.coeffs.omega = j.value("omega", 0.0);
  f.coeffs.beta = j.at("beta").get<double>();
  f.coeffs.zeta = j.value("zeta", 0.0);
  f.coeffs.c = j.at("c").get<double>();
  if (j.contains("metadata")) {
    const auto& meta = j.at("metadata");
    if (meta.contains("transform")) {
      f.transform.e_start = meta.at("transform").value("e_start", 1.0);
      f.transform.e_max = meta.at("transform").value("e_max", 32.0);
    }
    f.units = meta.value("units", std::string("billions"));
    f.setting = meta.value("setting", std::string());
    if (meta.contains("rmse")) f.rmse = meta.at("rmse").get<double>();
  }
  f.coeffs.validate();
  f.transform.validate();
  return f;
}

}  // namespace moekit
