#pragma once

// Deterministic probability-flow-ODE solvers over the descending step grid,
// with exact NFE accounting and a high-resolution RK4 reference oracle.
//
// The ODE is dx/dt = f(t) x - (1/2) g^2(t) score(x, t). Solvers walk the
// grid from a higher step index (later time) down to a lower one. Four
// methods: euler (1 eval/step), heun (2), expo2 (2; trapezoid in the
// exactly-integrated drift frame), pseudo-multistep (1 eval/step;
// Adams-Bashforth combination of stored RHS evaluations, AB1-AB3 warmup,
// AB4 steady state).

#include "redi/common.hpp"
#include "redi/model.hpp"
#include "redi/schedule.hpp"

#include <array>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

namespace redi {

// ---------------------------------------------------------------- method

enum class Method : int { euler = 0, heun = 1, pseudo_multistep = 2, expo2 = 3 };

inline int per_step_cost(Method m) {
  switch (m) {
    case Method::euler:
    case Method::pseudo_multistep:
      return 1;
    case Method::heun:
    case Method::expo2:
      return 2;
  }
  throw ValidationError("unknown solver method");
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::euler: return "euler";
    case Method::heun: return "heun";
    case Method::pseudo_multistep: return "pseudo_multistep";
    case Method::expo2: return "expo2";
  }
  throw ValidationError("unknown solver method");
}

inline Method method_from_name(const std::string& name) {
  for (Method m : {Method::euler, Method::heun, Method::pseudo_multistep,
                   Method::expo2})
    if (method_name(m) == name) return m;
  throw ValidationError("unknown solver method '" + name + "'");
}

// ---------------------------------------------------------------- scores

// Score sources are callables Vec(const Vec& x, double t).

struct ZeroScore {
  Vec operator()(const Vec& x, double) const { return Vec::Zero(x.size()); }
};

// Conditional (optionally guided) mixture score with the condition
// resolved once up front.
class MixtureScore {
 public:
  MixtureScore(const World& w, const Schedule& s, const Condition& y,
               double w_g)
      : sched_(s), cond_(resolve(w, y)), w_g_(w_g) {
    if (w_g < 0.0) throw ValidationError("guidance scale w_g must be >= 0");
    if (w_g != 1.0) uncond_ = uncond_spec(w);
  }

  Vec operator()(const Vec& x, double t) const {
    if (w_g_ == 1.0) return score(sched_, cond_, x, t);
    Vec su = score(sched_, uncond_, x, t);
    if (w_g_ == 0.0) return su;
    Vec sc = score(sched_, cond_, x, t);
    return su + w_g_ * (sc - su);
  }

 private:
  Schedule sched_;
  MixtureSpec cond_;
  MixtureSpec uncond_;
  double w_g_;
};

// ---------------------------------------------------------------- rhs

// RHS functor owning nothing; bumps *nfe (when given) on every evaluation.
template <class ScoreFn>
struct OdeRhs {
  const Schedule* sched;
  const ScoreFn* score_fn;
  long long* nfe;

  Vec operator()(const Vec& x, double t) const {
    if (nfe) ++*nfe;
    return f_drift(*sched, t) * x -
           0.5 * g_squared(*sched, t) * (*score_fn)(x, t);
  }
};

// Convenience single evaluation matching the module-level signature.
inline Vec ode_rhs(const World& w, const Schedule& s, const Vec& x, double t,
                   const Condition& y, double w_g,
                   long long* nfe = nullptr) {
  MixtureScore sc(w, s, y, w_g);
  OdeRhs<MixtureScore> rhs{&s, &sc, nfe};
  return rhs(x, t);
}

// ---------------------------------------------------------------- steps

inline constexpr double kDivergenceNorm = 1e8;

template <class Rhs>
Vec step_euler(const Rhs& rhs, const Vec& x, double t_hi, double t_lo) {
  return x + (t_lo - t_hi) * rhs(x, t_hi);
}

template <class Rhs>
Vec step_heun(const Rhs& rhs, const Vec& x, double t_hi, double t_lo) {
  double h = t_lo - t_hi;
  Vec k1 = rhs(x, t_hi);
  Vec k2 = rhs(x + h * k1, t_lo);
  return x + 0.5 * h * (k1 + k2);
}

// Exponential trapezoid: substitute x = alpha(t) phi so the linear drift
// integrates exactly and only the score term is discretised:
//   phi' = N(x, t) / alpha(t),  N = -1/2 g^2 score  (RHS = f x + N).
template <class ScoreFn>
Vec step_expo2(const Schedule& sched, const ScoreFn& score_fn, const Vec& x,
               double t_hi, double t_lo, long long* nfe) {
  double h = t_lo - t_hi;
  double ratio = alpha(sched, t_lo) / alpha(sched, t_hi);
  *nfe += 2;
  Vec n_hi = -0.5 * g_squared(sched, t_hi) * score_fn(x, t_hi);
  Vec x_pred = ratio * (x + h * n_hi);
  Vec n_lo = -0.5 * g_squared(sched, t_lo) * score_fn(x_pred, t_lo);
  return ratio * x + 0.5 * h * (ratio * n_hi + n_lo);
}

// Adams-Bashforth coefficients, order 1..4 (newest history entry first).
// Frozen from the standard polynomial-interpolation derivation.
inline const std::array<std::vector<double>, 4>& ab_weights() {
  static const std::array<std::vector<double>, 4> w = {
      std::vector<double>{1.0},
      std::vector<double>{1.5, -0.5},
      std::vector<double>{23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0},
      std::vector<double>{55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0,
                          -9.0 / 24.0}};
  return w;
}

// Pure combination step: `history` holds RHS evaluations at the current
// and previous grid nodes, newest first (each consumed one score/noise
// evaluation when it was produced). Uses order min(4, |history|).
inline Vec step_pseudo_multistep(const std::deque<Vec>& history, const Vec& x,
                                 double t_hi, double t_lo) {
  if (history.empty())
    throw ValidationError("pseudo-multistep requires >= 1 history entry");
  std::size_t order = std::min<std::size_t>(4, history.size());
  const auto& w = ab_weights()[order - 1];
  Vec comb = w[0] * history[0];
  for (std::size_t j = 1; j < order; ++j) comb += w[j] * history[j];
  return x + (t_lo - t_hi) * comb;
}

// ---------------------------------------------------------------- solve

struct Trajectory {
  std::vector<Vec> states;   // ordered from from_step down to to_step
  std::vector<double> times; // matching, strictly decreasing
  long long nfe = 0;
  Condition condition;
  Method method = Method::euler;

  const Vec& final() const { return states.back(); }
  // State at grid step j (from_step >= j >= to_step).
  const Vec& at_step(int from_step, int j) const {
    return states[static_cast<std::size_t>(from_step - j)];
  }
};

namespace detail {
inline void check_divergence(const Vec& x, int step) {
  if (!x.allFinite() || x.norm() > kDivergenceNorm)
    throw DivergenceError(
        "solver diverged at grid step " + std::to_string(step), step);
}
}  // namespace detail

template <class ScoreFn>
Trajectory solve(const Schedule& sched, const StepGrid& grid,
                 const ScoreFn& score_fn, const Vec& x_start, int from_step,
                 int to_step, Method method, const Condition& y = {}) {
  if (from_step <= to_step)
    throw ValidationError("solve requires from_step > to_step");
  if (to_step < 0 || from_step > grid.n_steps)
    throw ValidationError("solve steps outside the grid");
  if (!x_start.allFinite())
    throw ValidationError("solve requires finite x_start");

  Trajectory traj;
  traj.condition = y;
  traj.method = method;
  traj.states.reserve(static_cast<std::size_t>(from_step - to_step) + 1);
  traj.times.reserve(traj.states.capacity());

  OdeRhs<ScoreFn> rhs{&sched, &score_fn, &traj.nfe};
  Vec x = x_start;
  traj.states.push_back(x);
  traj.times.push_back(grid.t_of_step(from_step));

  std::deque<Vec> history;  // pseudo-multistep RHS memory, newest first
  for (int j = from_step; j > to_step; --j) {
    double t_hi = grid.t_of_step(j);
    double t_lo = grid.t_of_step(j - 1);
    switch (method) {
      case Method::euler:
        x = step_euler(rhs, x, t_hi, t_lo);
        break;
      case Method::heun:
        x = step_heun(rhs, x, t_hi, t_lo);
        break;
      case Method::expo2:
        x = step_expo2(sched, score_fn, x, t_hi, t_lo, &traj.nfe);
        break;
      case Method::pseudo_multistep: {
        history.push_front(rhs(x, t_hi));
        if (history.size() > 4) history.pop_back();
        x = step_pseudo_multistep(history, x, t_hi, t_lo);
        break;
      }
    }
    detail::check_divergence(x, j - 1);
    traj.states.push_back(x);
    traj.times.push_back(t_lo);
  }
  return traj;
}

// Conditional solve with a (possibly guided) mixture score.
inline Trajectory solve_cond(const World& w, const Schedule& sched,
                             const StepGrid& grid, const Vec& x_start,
                             int from_step, int to_step, const Condition& y,
                             double w_g, Method method) {
  MixtureScore sc(w, sched, y, w_g);
  return solve(sched, grid, sc, x_start, from_step, to_step, method, y);
}

// ---------------------------------------------------------------- rk4

// Generic classical RK4 reference over [t_hi, t_lo] with n uniform steps.
template <class ScoreFn>
Vec reference_rk4(const Schedule& sched, const ScoreFn& score_fn, Vec x,
                  double t_hi, double t_lo, int n_steps) {
  if (n_steps < 1) throw ValidationError("reference_rk4 needs n_steps >= 1");
  auto rhs = [&](const Vec& v, double t) {
    Vec s = score_fn(v, t);
    return Vec(f_drift(sched, t) * v - 0.5 * g_squared(sched, t) * s);
  };
  double h = (t_lo - t_hi) / n_steps;
  for (int i = 0; i < n_steps; ++i) {
    double t = t_hi + i * h;
    Vec k1 = rhs(x, t);
    Vec k2 = rhs(x + 0.5 * h * k1, t + 0.5 * h);
    Vec k3 = rhs(x + 0.5 * h * k2, t + 0.5 * h);
    Vec k4 = rhs(x + h * k3, t + h);
    x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return x;
}

// Allocation-free RK4 integrator for hot paths: all schedule coefficients
// and per-component marginal parameters are tabulated at the 2n+1 RK4 node
// times up front, so each RHS evaluation is a flat loop over components.
// Supports plain (unguided) mixture scores and dim <= 8.
class TabulatedRk4 {
 public:
  TabulatedRk4(const Schedule& sched, const MixtureSpec& spec, double t_hi,
               double t_lo, int n_steps)
      : dim_(spec.dim),
        n_comp_(spec.components.size()),
        n_steps_(n_steps),
        h_((t_lo - t_hi) / n_steps) {
    if (dim_ > 8) throw ValidationError("TabulatedRk4 supports dim <= 8");
    const std::size_t n_nodes = 2 * static_cast<std::size_t>(n_steps) + 1;
    f_.resize(n_nodes);
    g2h_.resize(n_nodes);
    inv_c_.resize(n_nodes * n_comp_);
    logw_.resize(n_nodes * n_comp_);
    alpha_mu_.resize(n_nodes * n_comp_ * static_cast<std::size_t>(dim_));
    const double d = static_cast<double>(dim_);
    for (std::size_t node = 0; node < n_nodes; ++node) {
      double t = t_hi + 0.5 * h_ * static_cast<double>(node);
      double a = alpha(sched, t), s2 = sigma_sq(sched, t);
      f_[node] = f_drift(sched, t);
      g2h_[node] = -0.5 * g_squared(sched, t);
      for (std::size_t i = 0; i < n_comp_; ++i) {
        const auto& comp = spec.components[i];
        double c = a * a * comp.cov_scale + s2;
        std::size_t ci = node * n_comp_ + i;
        inv_c_[ci] = 1.0 / c;
        logw_[ci] = std::log(comp.weight) - 0.5 * d * std::log(2.0 * M_PI * c);
        for (int k = 0; k < dim_; ++k)
          alpha_mu_[ci * static_cast<std::size_t>(dim_) +
                    static_cast<std::size_t>(k)] = a * comp.mean[k];
      }
    }
  }

  // Integrates x from t_hi to t_lo across all tabulated steps.
  Vec solve(const Vec& x0) const {
    std::array<double, 8> x{}, k1{}, k2{}, k3{}, k4{}, tmp{};
    for (int k = 0; k < dim_; ++k) x[static_cast<std::size_t>(k)] = x0[k];
    for (int i = 0; i < n_steps_; ++i) {
      std::size_t base = 2 * static_cast<std::size_t>(i);
      rhs_at(base, x.data(), k1.data());
      axpy(x, 0.5 * h_, k1, tmp);
      rhs_at(base + 1, tmp.data(), k2.data());
      axpy(x, 0.5 * h_, k2, tmp);
      rhs_at(base + 1, tmp.data(), k3.data());
      axpy(x, h_, k3, tmp);
      rhs_at(base + 2, tmp.data(), k4.data());
      for (int k = 0; k < dim_; ++k) {
        std::size_t kk = static_cast<std::size_t>(k);
        x[kk] += (h_ / 6.0) * (k1[kk] + 2.0 * k2[kk] + 2.0 * k3[kk] + k4[kk]);
      }
    }
    Vec out(dim_);
    for (int k = 0; k < dim_; ++k) out[k] = x[static_cast<std::size_t>(k)];
    return out;
  }

  // Single RHS evaluation at a node (exposed for cross-checking against
  // the generic path).
  void rhs_at(std::size_t node, const double* x, double* out) const {
    std::array<double, kMaxComponents> logit;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n_comp_; ++i) {
      std::size_t ci = node * n_comp_ + i;
      const double* am = &alpha_mu_[ci * static_cast<std::size_t>(dim_)];
      double q = 0.0;
      for (int k = 0; k < dim_; ++k) {
        double dxk = x[k] - am[k];
        q += dxk * dxk;
      }
      logit[i] = logw_[ci] - 0.5 * q * inv_c_[ci];
      max_logit = std::max(max_logit, logit[i]);
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n_comp_; ++i) {
      logit[i] = std::exp(logit[i] - max_logit);
      total += logit[i];
    }
    for (int k = 0; k < dim_; ++k) out[k] = 0.0;
    for (std::size_t i = 0; i < n_comp_; ++i) {
      std::size_t ci = node * n_comp_ + i;
      const double* am = &alpha_mu_[ci * static_cast<std::size_t>(dim_)];
      double r = (logit[i] / total) * inv_c_[ci];
      for (int k = 0; k < dim_; ++k) out[k] -= r * (x[k] - am[k]);
    }
    for (int k = 0; k < dim_; ++k)
      out[k] = f_[node] * x[k] + g2h_[node] * out[k];
  }

 private:
  static void axpy(const std::array<double, 8>& x, double a,
                   const std::array<double, 8>& y, std::array<double, 8>& out) {
    for (std::size_t k = 0; k < 8; ++k) out[k] = x[k] + a * y[k];
  }

  int dim_;
  std::size_t n_comp_;
  int n_steps_;
  double h_;
  std::vector<double> f_, g2h_, inv_c_, logw_, alpha_mu_;
};

}  // namespace redi
