#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "moekit/scaling.hpp"

namespace moekit {

// One sweep datapoint: validation loss at (n_act, d, e).
struct Observation {
  double n_act_b = 0.0;  // active parameters, billions
  double d_b = 0.0;      // training tokens, billions
  double e = 1.0;        // coarse expert count
  double loss = 0.0;     // nats

  void validate() const {
    if (!(n_act_b > 0.0 && d_b > 0.0 && e >= 1.0 && loss > 0.0)) {
      throw DomainError("observation fields must be positive");
    }
  }
};

enum class FitMode {
  kJoint,       // all nine coefficients, requires an e sweep
  kPerSetting,  // five composite coefficients at fixed e_hat
};

enum class FitStage { kWarmStart, kRefined };

struct FitOptions {
  FitMode mode = FitMode::kJoint;
  ExpertTransform transform;
  // Per-setting mode only: quadratic pull of c toward this anchor with
  // weight 1 / 0.13^2 (the joint-sweep standard error).
  std::optional<double> c_anchor;
  int max_iterations = 10000;
  double tolerance = 1e-10;
};

struct FitResult {
  ScalingCoeffs coeffs;
  double rmse = 0.0;
  int iterations = 0;
  FitStage stage = FitStage::kRefined;
  bool converged = false;
};

namespace fitdetail {

constexpr double kCAnchorWeight = 1.0 / (0.13 * 0.13);
constexpr double kCLow = 1e-6;
constexpr double kCHigh = 10.0;
constexpr double kBound = 5.0;

struct Point {
  double ln_n, ln_d, ln_e_hat, loss;
};

// Parameter vector layout:
//   joint:       [a, delta, alpha, gamma, b, omega, beta, zeta, c]
//   per-setting: [a, alpha, b, beta, c]
struct Problem {
  std::vector<Point> pts;
  bool joint = true;
  std::optional<double> c_anchor;

  int dim() const { return joint ? 9 : 5; }

  void lower(std::vector<double>& lo) const {
    lo.assign(dim(), -kBound);
    lo.back() = kCLow;
  }
  void upper(std::vector<double>& hi) const {
    hi.assign(dim(), kBound);
    hi.back() = kCHigh;
  }

  ScalingCoeffs to_coeffs(const std::vector<double>& x) const {
    ScalingCoeffs s;
    if (joint) {
      s.a = x[0]; s.delta = x[1]; s.alpha = x[2]; s.gamma = x[3];
      s.b = x[4]; s.omega = x[5]; s.beta = x[6]; s.zeta = x[7]; s.c = x[8];
    } else {
      s.a = x[0]; s.alpha = x[1]; s.b = x[2]; s.beta = x[3]; s.c = x[4];
    }
    return s;
  }

  double predict(const std::vector<double>& x, const Point& p) const {
    if (joint) {
      const double t1 = x[0] * std::exp(x[1] * p.ln_e_hat +
                                        (x[2] + x[3] * p.ln_e_hat) * p.ln_n);
      const double t2 = x[4] * std::exp(x[5] * p.ln_e_hat +
                                        (x[6] + x[7] * p.ln_e_hat) * p.ln_d);
      return t1 + t2 + x[8];
    }
    return x[0] * std::exp(x[1] * p.ln_n) + x[2] * std::exp(x[3] * p.ln_d) +
           x[4];
  }

  // Mean squared error plus the optional c-anchor penalty.
  double objective(const std::vector<double>& x) const {
    double sum = 0.0;
    for (const Point& p : pts) {
      const double r = predict(x, p) - p.loss;
      sum += r * r;
    }
    double f = sum / static_cast<double>(pts.size());
    if (c_anchor) {
      const double dc = x.back() - *c_anchor;
      f += kCAnchorWeight * dc * dc;
    }
    return f;
  }

  double objective_grad(const std::vector<double>& x,
                        std::vector<double>& g) const {
    g.assign(dim(), 0.0);
    double sum = 0.0;
    const double inv_n = 1.0 / static_cast<double>(pts.size());
    for (const Point& p : pts) {
      double t1, t2;
      if (joint) {
        const double pe = std::exp(x[1] * p.ln_e_hat +
                                   (x[2] + x[3] * p.ln_e_hat) * p.ln_n);
        const double qe = std::exp(x[5] * p.ln_e_hat +
                                   (x[6] + x[7] * p.ln_e_hat) * p.ln_d);
        t1 = x[0] * pe;
        t2 = x[4] * qe;
        const double r = t1 + t2 + x[8] - p.loss;
        sum += r * r;
        const double w = 2.0 * r * inv_n;
        g[0] += w * pe;
        g[1] += w * t1 * p.ln_e_hat;
        g[2] += w * t1 * p.ln_n;
        g[3] += w * t1 * p.ln_e_hat * p.ln_n;
        g[4] += w * qe;
        g[5] += w * t2 * p.ln_e_hat;
        g[6] += w * t2 * p.ln_d;
        g[7] += w * t2 * p.ln_e_hat * p.ln_d;
        g[8] += w;
      } else {
        const double pe = std::exp(x[1] * p.ln_n);
        const double qe = std::exp(x[3] * p.ln_d);
        t1 = x[0] * pe;
        t2 = x[2] * qe;
        const double r = t1 + t2 + x[4] - p.loss;
        sum += r * r;
        const double w = 2.0 * r * inv_n;
        g[0] += w * pe;
        g[1] += w * t1 * p.ln_n;
        g[2] += w * qe;
        g[3] += w * t2 * p.ln_d;
        g[4] += w;
      }
    }
    double f = sum * inv_n;
    if (c_anchor) {
      const double dc = x.back() - *c_anchor;
      f += kCAnchorWeight * dc * dc;
      g.back() += 2.0 * kCAnchorWeight * dc;
    }
    return f;
  }

  double rmse(const std::vector<double>& x) const {
    double sum = 0.0;
    for (const Point& p : pts) {
      const double r = predict(x, p) - p.loss;
      sum += r * r;
    }
    return std::sqrt(sum / static_cast<double>(pts.size()));
  }
};

inline void project(std::vector<double>& x, const std::vector<double>& lo,
                    const std::vector<double>& hi) {
  for (size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
}

// Given fixed exponents, the surface is linear in (a, b, c); solve the 3x3
// normal equations directly (variable projection).
inline void solve_linear_coeffs(const Problem& prob,
                                const std::vector<double>& exps,
                                std::vector<double>& x) {
  // exps: joint -> [delta, alpha, gamma, omega, beta, zeta]
  //       per-setting -> [alpha, beta]
  std::array<double, 9> ata{};  // symmetric 3x3
  std::array<double, 3> aty{};
  for (const Point& p : prob.pts) {
    double u, v;
    if (prob.joint) {
      u = std::exp(exps[0] * p.ln_e_hat + (exps[1] + exps[2] * p.ln_e_hat) * p.ln_n);
      v = std::exp(exps[3] * p.ln_e_hat + (exps[4] + exps[5] * p.ln_e_hat) * p.ln_d);
    } else {
      u = std::exp(exps[0] * p.ln_n);
      v = std::exp(exps[1] * p.ln_d);
    }
    const double row[3] = {u, v, 1.0};
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) ata[i * 3 + j] += row[i] * row[j];
      aty[i] += row[i] * p.loss;
    }
  }
  // Tikhonov damping keeps the solve stable when u or v are near-collinear.
  for (int i = 0; i < 3; ++i) ata[i * 3 + i] += 1e-12 * (ata[i * 3 + i] + 1.0);

  // Gaussian elimination with partial pivoting.
  std::array<double, 12> m{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m[i * 4 + j] = ata[i * 3 + j];
    m[i * 4 + 3] = aty[i];
  }
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::abs(m[r * 4 + col]) > std::abs(m[piv * 4 + col])) piv = r;
    }
    for (int j = 0; j < 4; ++j) std::swap(m[col * 4 + j], m[piv * 4 + j]);
    const double d = m[col * 4 + col];
    if (std::abs(d) < 1e-300) continue;
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double f = m[r * 4 + col] / d;
      for (int j = 0; j < 4; ++j) m[r * 4 + j] -= f * m[col * 4 + j];
    }
  }
  double a = m[3], b = m[7], c = m[11];
  if (std::abs(m[0]) > 1e-300) a /= m[0]; else a = 0.0;
  if (std::abs(m[5]) > 1e-300) b /= m[5]; else b = 0.0;
  if (std::abs(m[10]) > 1e-300) c /= m[10]; else c = 1.0;

  a = std::clamp(a, -kBound, kBound);
  b = std::clamp(b, -kBound, kBound);
  c = std::clamp(c, kCLow, kCHigh);
  if (prob.joint) {
    x = {a, exps[0], exps[1], exps[2], b, exps[3], exps[4], exps[5], c};
  } else {
    x = {a, exps[0], b, exps[1], c};
  }
}

// Nelder-Mead over the exponent block with (a, b, c) solved linearly at each
// evaluation. Deterministic; used only for the warm start.
inline std::vector<double> nelder_mead_exponents(
    const Problem& prob, const std::vector<double>& start, int max_evals) {
  const int n = static_cast<int>(start.size());
  auto eval = [&](const std::vector<double>& e) {
    std::vector<double> clipped = e;
    for (double& v : clipped) v = std::clamp(v, -kBound, kBound);
    std::vector<double> x;
    solve_linear_coeffs(prob, clipped, x);
    return prob.objective(x);
  };

  std::vector<std::vector<double>> simplex(n + 1, start);
  std::vector<double> fvals(n + 1);
  for (int i = 0; i < n; ++i) {
    simplex[i + 1][i] += (simplex[i + 1][i] == 0.0 ? 0.1 : 0.15);
  }
  for (int i = 0; i <= n; ++i) fvals[i] = eval(simplex[i]);

  int evals = n + 1;
  while (evals < max_evals) {
    std::vector<int> order(n + 1);
    for (int i = 0; i <= n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return fvals[a] < fvals[b]; });
    {
      std::vector<std::vector<double>> s2;
      std::vector<double> f2;
      for (int i : order) {
        s2.push_back(simplex[i]);
        f2.push_back(fvals[i]);
      }
      simplex.swap(s2);
      fvals.swap(f2);
    }
    if (fvals[n] - fvals[0] < 1e-15 * (1.0 + std::abs(fvals[0]))) break;

    std::vector<double> centroid(n, 0.0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) centroid[j] += simplex[i][j];
    }
    for (double& v : centroid) v /= n;

    auto blend = [&](double t) {
      std::vector<double> p(n);
      for (int j = 0; j < n; ++j) {
        p[j] = centroid[j] + t * (centroid[j] - simplex[n][j]);
      }
      return p;
    };

    auto reflect = blend(1.0);
    const double fr = eval(reflect);
    ++evals;
    if (fr < fvals[0]) {
      auto expand = blend(2.0);
      const double fe = eval(expand);
      ++evals;
      if (fe < fr) {
        simplex[n] = expand; fvals[n] = fe;
      } else {
        simplex[n] = reflect; fvals[n] = fr;
      }
    } else if (fr < fvals[n - 1]) {
      simplex[n] = reflect; fvals[n] = fr;
    } else {
      auto contract = blend(fr < fvals[n] ? 0.5 : -0.5);
      const double fc = eval(contract);
      ++evals;
      if (fc < std::min(fr, fvals[n])) {
        simplex[n] = contract; fvals[n] = fc;
      } else {
        for (int i = 1; i <= n; ++i) {
          for (int j = 0; j < n; ++j) {
            simplex[i][j] = simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]);
          }
          fvals[i] = eval(simplex[i]);
          ++evals;
        }
      }
    }
  }

  int best = 0;
  for (int i = 1; i <= n; ++i) {
    if (fvals[i] < fvals[best]) best = i;
  }
  std::vector<double> clipped = simplex[best];
  for (double& v : clipped) v = std::clamp(v, -kBound, kBound);
  return clipped;
}

// Projected L-BFGS with backtracking line search; gradient components that
// push against an active bound are zeroed.
struct LbfgsOutcome {
  double f = 0.0;
  int iterations = 0;
  bool converged = false;
};

inline LbfgsOutcome lbfgs_minimize(const Problem& prob, std::vector<double>& x,
                                   int max_iter, double tol) {
  const int n = prob.dim();
  std::vector<double> lo, hi;
  prob.lower(lo);
  prob.upper(hi);
  project(x, lo, hi);

  auto projected_grad = [&](const std::vector<double>& xx,
                            std::vector<double>& g) {
    for (int i = 0; i < n; ++i) {
      if ((xx[i] <= lo[i] && g[i] > 0.0) || (xx[i] >= hi[i] && g[i] < 0.0)) {
        g[i] = 0.0;
      }
    }
    (void)xx;
  };

  std::vector<double> g(n), x_new(n), g_new(n);
  double f = prob.objective_grad(x, g);
  projected_grad(x, g);

  const int memory = 8;
  std::deque<std::vector<double>> s_hist, y_hist;
  std::deque<double> rho_hist;

  LbfgsOutcome out;
  out.f = f;
  for (int iter = 0; iter < max_iter; ++iter) {
    out.iterations = iter + 1;

    // two-loop recursion
    std::vector<double> q = g;
    std::vector<double> alpha_hist(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      double a = 0.0;
      for (int j = 0; j < n; ++j) a += s_hist[i][j] * q[j];
      a *= rho_hist[i];
      alpha_hist[i] = a;
      for (int j = 0; j < n; ++j) q[j] -= a * y_hist[i][j];
    }
    double scale = 1.0;
    if (!s_hist.empty()) {
      double sy = 0.0, yy = 0.0;
      for (int j = 0; j < n; ++j) {
        sy += s_hist.back()[j] * y_hist.back()[j];
        yy += y_hist.back()[j] * y_hist.back()[j];
      }
      if (yy > 0.0) scale = sy / yy;
    }
    for (double& v : q) v *= scale;
    for (size_t i = 0; i < s_hist.size(); ++i) {
      double b = 0.0;
      for (int j = 0; j < n; ++j) b += y_hist[i][j] * q[j];
      b *= rho_hist[i];
      for (int j = 0; j < n; ++j) q[j] += s_hist[i][j] * (alpha_hist[i] - b);
    }
    // q is now the ascent-combination; step along -q
    double gq = 0.0;
    for (int j = 0; j < n; ++j) gq += g[j] * q[j];
    if (gq <= 0.0) {
      // not a descent direction, fall back to steepest descent
      q = g;
      gq = 0.0;
      for (int j = 0; j < n; ++j) gq += g[j] * g[j];
      s_hist.clear(); y_hist.clear(); rho_hist.clear();
    }

    double gnorm = 0.0;
    for (int j = 0; j < n; ++j) gnorm = std::max(gnorm, std::abs(g[j]));
    if (gnorm < 1e-13) {
      out.converged = true;
      break;
    }

    double step = 1.0;
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      for (int j = 0; j < n; ++j) x_new[j] = x[j] - step * q[j];
      project(x_new, lo, hi);
      f_new = prob.objective(x_new);
      if (f_new <= f - 1e-4 * step * gq || f_new < f - 1e-18) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      out.converged = true;  // no further progress possible
      break;
    }

    const double f_prev = f;
    f = prob.objective_grad(x_new, g_new);
    projected_grad(x_new, g_new);

    std::vector<double> s(n), y(n);
    double sy = 0.0;
    for (int j = 0; j < n; ++j) {
      s[j] = x_new[j] - x[j];
      y[j] = g_new[j] - g[j];
      sy += s[j] * y[j];
    }
    if (sy > 1e-14) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    x = x_new;
    g = g_new;
    out.f = f;
    if (std::abs(f_prev - f) <= tol * std::max(1.0, std::abs(f))) {
      out.converged = true;
      break;
    }
  }
  out.f = f;
  return out;
}

}  // namespace fitdetail

// Two-stage fit: (1) warm start from log-log slopes plus a variable-projection
// simplex search over the exponents, (2) bounded quasi-Newton on the full
// coefficient vector with c > 0.
inline FitResult fit(const std::vector<Observation>& observations,
                     const FitOptions& options = {}) {
  using namespace fitdetail;
  options.transform.validate();
  const bool joint = options.mode == FitMode::kJoint;

  const size_t min_obs = joint ? 40 : 12;
  if (observations.size() < min_obs) {
    std::ostringstream msg;
    msg << "need at least " << min_obs << " observations, got "
        << observations.size();
    throw DomainError(msg.str());
  }
  std::set<double> ns, ds, es;
  for (const Observation& o : observations) {
    o.validate();
    ns.insert(o.n_act_b);
    ds.insert(o.d_b);
    es.insert(o.e);
  }
  if (ns.size() < 2) throw DomainError("observations must span >= 2 n_act values");
  if (ds.size() < 2) throw DomainError("observations must span >= 2 d values");
  if (joint && es.size() < 2) {
    throw DomainError("joint fit requires >= 2 expert-count values");
  }

  Problem prob;
  prob.joint = joint;
  prob.c_anchor = joint ? std::nullopt : options.c_anchor;
  prob.pts.reserve(observations.size());
  double loss_min = observations.front().loss, loss_max = loss_min;
  for (const Observation& o : observations) {
    Point p;
    p.ln_n = std::log(o.n_act_b);
    p.ln_d = std::log(o.d_b);
    p.ln_e_hat = std::log(options.transform(o.e));
    p.loss = o.loss;
    prob.pts.push_back(p);
    loss_min = std::min(loss_min, o.loss);
    loss_max = std::max(loss_max, o.loss);
  }

  // Flat loss surface: nothing to fit beyond the constant.
  if (loss_max - loss_min < 1e-12) {
    FitResult res;
    std::vector<double> x(prob.dim(), 0.0);
    x.back() = std::clamp(loss_min, kCLow, kCHigh);
    res.coeffs = prob.to_coeffs(x);
    res.rmse = prob.rmse(x);
    res.stage = FitStage::kWarmStart;
    res.converged = true;
    return res;
  }

  // Log-log linear regression of ln(loss - c0) on [ln n, ln d] for the
  // starting exponents.
  const double c0 = std::max(1e-3, loss_min - 0.05 * (loss_max - loss_min));
  double alpha0 = -0.3, beta0 = -0.3;
  {
    // OLS on design [1, ln n, ln d]
    double m[9] = {0}, v[3] = {0};
    int used = 0;
    for (const Point& p : prob.pts) {
      const double excess = p.loss - c0;
      if (excess <= 1e-12) continue;
      const double y = std::log(excess);
      const double row[3] = {1.0, p.ln_n, p.ln_d};
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) m[i * 3 + j] += row[i] * row[j];
        v[i] += row[i] * y;
      }
      ++used;
    }
    if (used >= 3) {
      for (int i = 0; i < 3; ++i) m[i * 3 + i] += 1e-9;
      // solve 3x3
      double mm[12];
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) mm[i * 4 + j] = m[i * 3 + j];
        mm[i * 4 + 3] = v[i];
      }
      for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int r = col + 1; r < 3; ++r) {
          if (std::abs(mm[r * 4 + col]) > std::abs(mm[piv * 4 + col])) piv = r;
        }
        for (int j = 0; j < 4; ++j) std::swap(mm[col * 4 + j], mm[piv * 4 + j]);
        if (std::abs(mm[col * 4 + col]) < 1e-300) continue;
        for (int r = 0; r < 3; ++r) {
          if (r == col) continue;
          const double f = mm[r * 4 + col] / mm[col * 4 + col];
          for (int j = 0; j < 4; ++j) mm[r * 4 + j] -= f * mm[col * 4 + j];
        }
      }
      if (std::abs(mm[5]) > 1e-300) alpha0 = std::clamp(mm[7] / mm[5], -2.0, 2.0);
      if (std::abs(mm[10]) > 1e-300) beta0 = std::clamp(mm[11] / mm[10], -2.0, 2.0);
    }
  }

  // Stage 1: variable-projection simplex over the exponents from a small
  // deterministic set of starts.
  std::vector<std::vector<double>> starts;
  if (joint) {
    starts = {
        {0.0, alpha0, 0.0, 0.0, beta0, 0.0},
        {0.1, alpha0, 0.05, 1.0, beta0, -0.3},
        {0.25, alpha0, -0.05, 0.5, beta0, 0.1},
        {0.0, -0.3, 0.0, 0.0, -0.3, 0.0},
    };
  } else {
    starts = {{alpha0, beta0}, {-0.3, -0.3}, {-0.8, -0.8}};
  }

  std::vector<double> best_x;
  double best_f = 0.0;
  for (const auto& s : starts) {
    const auto exps = nelder_mead_exponents(prob, s, joint ? 4000 : 1500);
    std::vector<double> x;
    solve_linear_coeffs(prob, exps, x);
    const double f = prob.objective(x);
    if (best_x.empty() || f < best_f) {
      best_x = x;
      best_f = f;
    }
  }

  // Stage 2: bounded quasi-Newton refinement of the full vector.
  std::vector<double> refined = best_x;
  const auto outcome = lbfgs_minimize(prob, refined, options.max_iterations,
                                      options.tolerance);

  FitResult res;
  res.iterations = outcome.iterations;
  if (outcome.f <= best_f) {
    res.coeffs = prob.to_coeffs(refined);
    res.rmse = prob.rmse(refined);
    res.stage = FitStage::kRefined;
  } else {
    res.coeffs = prob.to_coeffs(best_x);
    res.rmse = prob.rmse(best_x);
    res.stage = FitStage::kWarmStart;
  }
  res.converged = outcome.converged;
  return res;
}

// --- observations CSV: header `n_act_b,d_b,e,loss` ---------------------------

inline std::string observations_to_csv(const std::vector<Observation>& obs) {
  std::ostringstream out;
  out << "n_act_b,d_b,e,loss\n";
  out.precision(12);
  for (const Observation& o : obs) {
    out << o.n_act_b << ',' << o.d_b << ',' << o.e << ',' << o.loss << '\n';
  }
  return out.str();
}

inline std::vector<Observation> observations_from_csv(std::istream& in) {
  std::vector<Observation> obs;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("n_act_b", 0) == 0) continue;  // header
    }
    std::istringstream ls(line);
    Observation o;
    char comma = 0;
    if (!(ls >> o.n_act_b >> comma >> o.d_b >> comma >> o.e >> comma >> o.loss)) {
      throw DomainError("malformed observations CSV line: " + line);
    }
    obs.push_back(o);
  }
  return obs;
}

}  // namespace moekit
