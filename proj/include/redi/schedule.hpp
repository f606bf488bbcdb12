#pragma once

// Variance-preserving diffusion schedule with linear beta(t) and the
// uniform descending step grid. All coefficients are closed-form:
//
//   beta(t)  = beta0 + t (beta1 - beta0)
//   alpha(t) = exp(-t^2 (beta1 - beta0)/4 - t beta0 / 2)
//   sigma(t) = sqrt(1 - alpha(t)^2)
//   f(t)     = d log alpha / dt = -beta(t)/2
//   g^2(t)   = d sigma^2/dt - 2 f(t) sigma^2(t) = beta(t)
//
// Grid indices count down: step n_steps sits at t_max, step 0 at t_floor.

#include "redi/common.hpp"

#include <cmath>
#include <vector>

namespace redi {

struct Schedule {
  double beta0 = 0.1;
  double beta1 = 20.0;
  double t_max = 1.0;

  void validate() const {
    if (!(beta0 > 0.0) || !(beta1 > beta0))
      throw ValidationError("schedule requires 0 < beta0 < beta1");
    if (!(t_max > 0.0)) throw ValidationError("schedule requires t_max > 0");
  }

  void check_time(double t) const {
    if (!(t >= 0.0) || !(t <= t_max))
      throw DomainError("time " + std::to_string(t) + " outside [0, " +
                        std::to_string(t_max) + "]");
  }
};

inline double beta_of(const Schedule& s, double t) {
  return s.beta0 + t * (s.beta1 - s.beta0);
}

inline double alpha(const Schedule& s, double t) {
  s.check_time(t);
  return std::exp(-0.25 * t * t * (s.beta1 - s.beta0) - 0.5 * t * s.beta0);
}

inline double sigma_sq(const Schedule& s, double t) {
  double a = alpha(s, t);
  return 1.0 - a * a;
}

inline double sigma(const Schedule& s, double t) {
  return std::sqrt(sigma_sq(s, t));
}

inline double f_drift(const Schedule& s, double t) {
  s.check_time(t);
  return -0.5 * beta_of(s, t);
}

inline double g_squared(const Schedule& s, double t) {
  s.check_time(t);
  return beta_of(s, t);
}

// Uniform descending time grid: times[0] = t_max, times[n_steps] = t_floor.
// Step index j (countdown convention) lives at times[n_steps - j].
struct StepGrid {
  int n_steps = 0;
  double t_floor = 0.0;
  double t_max = 0.0;
  std::vector<double> times;

  double t_of_step(int step) const {
    if (step < 0 || step > n_steps)
      throw DomainError("step " + std::to_string(step) + " outside [0, " +
                        std::to_string(n_steps) + "]");
    return times[static_cast<std::size_t>(n_steps - step)];
  }
};

inline StepGrid make_grid(const Schedule& s, double t_floor, int n_steps) {
  if (!(t_floor > 0.0) || !(t_floor < s.t_max))
    throw ValidationError("t_floor must satisfy 0 < t_floor < t_max");
  if (n_steps < 1) throw ValidationError("n_steps must be >= 1");
  StepGrid g;
  g.n_steps = n_steps;
  g.t_floor = t_floor;
  g.t_max = s.t_max;
  g.times.resize(static_cast<std::size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i) {
    // Step index counts down from n_steps (at t_max) to 0 (at t_floor).
    int step = n_steps - i;
    g.times[static_cast<std::size_t>(i)] =
        t_floor + static_cast<double>(step) * (s.t_max - t_floor) /
                      static_cast<double>(n_steps);
  }
  g.times.front() = s.t_max;
  g.times.back() = t_floor;
  return g;
}

}  // namespace redi
