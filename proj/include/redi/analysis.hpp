#pragma once

// Verification and evaluation tools: empirical Lipschitz estimation of the
// ODE right-hand side, exponential (Gronwall) sensitivity-bound checking
// against high-resolution references, the one-big-step vanilla baseline,
// distribution metrics (squared Frechet / squared MMD), the fidelity-ratio
// report, trajectory-vs-embedding key comparison, and the ablation runner.

#include "redi/inference.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace redi {

// ---------------------------------------------------------------- jacobian

// x-Jacobian of the time-t marginal score of `spec` (a data-space mixture):
//   J = sum_i r_i (u_i u_i^T - I/c_i) - s s^T,
// with u_i = (alpha mu_i - x)/c_i, responsibilities r_i, score s. Symmetric
// by construction (it is the Hessian of the log marginal density).
inline Mat score_jacobian(const Schedule& s, const MixtureSpec& spec,
                          const Vec& x, double t) {
  spec.validate();
  const Eigen::Index d = spec.dim;
  std::array<double, kMaxComponents> resp{}, inv_c{};
  detail::mixture_stats(s, spec, x, t, resp.data(), inv_c.data());
  const double a = alpha(s, t);
  Mat j = Mat::Zero(d, d);
  Vec sc = Vec::Zero(d);
  for (std::size_t i = 0; i < spec.components.size(); ++i) {
    Vec u = inv_c[i] * (a * spec.components[i].mean - x);
    j.noalias() += resp[i] * (u * u.transpose());
    j.diagonal().array() -= resp[i] * inv_c[i];
    sc += resp[i] * u;
  }
  j.noalias() -= sc * sc.transpose();
  return j;
}

// Jacobian of the guided score: s_g = (1 - w) s_uncond + w s_cond.
inline Mat guided_score_jacobian(const World& world, const Schedule& s,
                                 const Vec& x, double t, const Condition& y,
                                 double w_g) {
  Mat jc = score_jacobian(s, resolve(world, y), x, t);
  if (w_g == 1.0) return jc;
  Mat ju = score_jacobian(s, uncond_spec(world), x, t);
  return (1.0 - w_g) * ju + w_g * jc;
}

// Spectral norm of the (symmetric) RHS Jacobian f(t) I - 1/2 g^2(t) J_score.
inline double rhs_jacobian_norm(const World& world, const Schedule& s,
                                const Vec& x, double t, const Condition& y,
                                double w_g) {
  Mat j = -0.5 * g_squared(s, t) * guided_score_jacobian(world, s, x, t, y, w_g);
  j.diagonal().array() += f_drift(s, t);
  Eigen::SelfAdjointEigenSolver<Mat> eig(j);
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------- lipschitz

// Empirical Lipschitz constant of the RHS in x over grid times inside
// [t_lo, t_hi]: the sup of the analytic Jacobian spectral norm over probes
// drawn from the time-t marginal and from a +-3 sigma box around the
// component means, cross-checked by finite-difference ratios. Returns the
// raw sup (no safety margin); bound_check applies its own.
inline double lipschitz_estimate(const World& world, const Schedule& sched,
                                 const StepGrid& grid, const Condition& y,
                                 double w_g, double t_lo, double t_hi,
                                 int n_probes, std::uint64_t seed) {
  if (n_probes < 1) throw ValidationError("n_probes must be >= 1");
  if (t_lo > t_hi) throw ValidationError("t range is inverted");
  if (t_lo < grid.t_floor || t_hi > grid.t_max)
    throw ValidationError("t range must lie within [t_floor, t_max]");
  world.check(y);

  // One probe stream per grid time (keyed by the time's grid position) so
  // the sup over a sub-range is computed from the same probes the full
  // range would use there — a subset's estimate never exceeds the
  // superset's.
  std::vector<std::pair<double, std::size_t>> times;
  for (std::size_t j = 0; j < grid.times.size(); ++j)
    if (grid.times[j] >= t_lo && grid.times[j] <= t_hi)
      times.push_back({grid.times[j], j});
  if (times.empty()) throw ValidationError("t range contains no grid times");

  MixtureSpec cond = resolve(world, y);
  MixtureSpec unc = uncond_spec(world);
  double sup = 0.0;
  for (auto [t, j] : times) {
    Rng rng(seed + 7919 * (j + 1));
    MixtureSpec marg = marginal(sched, cond, t);
    // +-3 sigma box around the union of marginal means (guided runs also
    // see the unconditional mixture).
    double c_max = 0.0;
    Vec lo = marg.components.front().mean, hi = lo;
    auto widen = [&](const MixtureSpec& m) {
      for (const auto& comp : m.components) {
        double c = alpha(sched, t) * alpha(sched, t) * comp.cov_scale +
                   sigma_sq(sched, t);
        c_max = std::max(c_max, c);
      }
      MixtureSpec mm = marginal(sched, m, t);
      for (const auto& comp : mm.components) {
        lo = lo.cwiseMin(comp.mean);
        hi = hi.cwiseMax(comp.mean);
      }
    };
    widen(cond);
    if (w_g != 1.0) widen(unc);
    const double r = 3.0 * std::sqrt(c_max);

    for (int p = 0; p < n_probes; ++p) {
      Vec x;
      if (p % 2 == 0) {
        x = sample_from(marg, rng);
      } else {
        x = lo;
        for (Eigen::Index i = 0; i < x.size(); ++i)
          x[i] = (lo[i] - r) + rng.uniform() * ((hi[i] + r) - (lo[i] - r));
      }
      sup = std::max(sup, rhs_jacobian_norm(world, sched, x, t, y, w_g));
      if (p % 8 == 0) {
        // Finite-difference cross-check of the analytic Jacobian.
        Vec delta = 1e-5 * rng.normal_vec(x.size());
        Vec r0 = ode_rhs(world, sched, x, t, y, w_g);
        Vec r1 = ode_rhs(world, sched, x + delta, t, y, w_g);
        sup = std::max(sup, (r1 - r0).norm() / delta.norm());
      }
    }
  }
  return sup;
}

// ---------------------------------------------------------------- bound

struct BoundPair {
  double gamma = 0.0;     // perturbation size at t_k
  double observed = 0.0;  // deviation at t_v
  double bound = 0.0;     // gamma * e^{l_hat * (t_k - t_v)}
};

struct BoundReport {
  double l_hat = 0.0;   // safety-inflated constant used in the bounds
  double raw_sup = 0.0; // the measured sup it came from
  double delta_t = 0.0; // t_k - t_v
  std::vector<BoundPair> pairs;  // grouped by epsilon, then pair index
  int violation_count = 0;
  // Transparency section: the same perturbations propagated by the grid
  // solver instead of the high-resolution reference. Solver truncation
  // error lives in these numbers, so they are reported, not gated.
  std::vector<BoundPair> solver_pairs;
  int solver_violation_count = 0;
};

// Perturb reference trajectories at step k by each epsilon and verify the
// exponential sensitivity bound at step v. Base and perturbed states are
// integrated with a high-resolution RK4 reference (ref_steps) so solver
// truncation error does not contaminate the sensitivity measurement; the
// bases are shared across epsilons. l_hat is the probe sup over
// [t_v, t_k] times a 1.1 safety factor (the sup is regional, the theorem's
// constant is global). A violation at tolerance (1 + 1e-6) indicates
// under-estimation — rerun with more probes.
inline BoundReport bound_check(const World& world, const Schedule& sched,
                               const StepGrid& grid, const Condition& y,
                               int k_step, int v_step,
                               const std::vector<double>& epsilons,
                               int n_pairs, std::uint64_t seed,
                               int ref_steps = 100000, int n_probes = 256) {
  if (k_step <= v_step || v_step < 0 || k_step > grid.n_steps)
    throw ValidationError("require n_steps >= k_step > v_step >= 0");
  if (n_pairs < 1) throw ValidationError("n_pairs must be >= 1");
  for (double eps : epsilons)
    if (eps < 0.0) throw ValidationError("epsilons must be >= 0");

  const double t_k = grid.t_of_step(k_step);
  const double t_v = grid.t_of_step(v_step);

  BoundReport report;
  report.delta_t = t_k - t_v;
  report.raw_sup = lipschitz_estimate(world, sched, grid, y, 1.0, t_v, t_k,
                                      n_probes, seed + kLipschitzSeedOffset);
  report.l_hat = 1.1 * report.raw_sup;
  const double growth = std::exp(report.l_hat * report.delta_t);

  MixtureSpec spec = resolve(world, y);
  TabulatedRk4 ref(sched, spec, t_k, t_v, ref_steps);
  auto grid_solve = [&](const Vec& x_k) {
    return solve_cond(world, sched, grid, x_k, k_step, v_step, y, 1.0,
                      Method::euler)
        .final();
  };

  Rng rng(seed + kBoundSeedOffset);
  const Eigen::Index d = world.dim;
  std::vector<Vec> base_k(static_cast<std::size_t>(n_pairs));
  std::vector<Vec> base_v(static_cast<std::size_t>(n_pairs));
  std::vector<Vec> base_v_solver(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    Vec x0 = sample_from(spec, rng);
    base_k[static_cast<std::size_t>(i)] =
        forward_noise_with(sched, x0, t_k, rng.normal_vec(d));
    base_v[static_cast<std::size_t>(i)] =
        ref.solve(base_k[static_cast<std::size_t>(i)]);
    base_v_solver[static_cast<std::size_t>(i)] =
        grid_solve(base_k[static_cast<std::size_t>(i)]);
  }

  report.pairs.reserve(epsilons.size() * static_cast<std::size_t>(n_pairs));
  report.solver_pairs.reserve(report.pairs.capacity());
  for (double eps : epsilons) {
    for (int i = 0; i < n_pairs; ++i) {
      Vec dir = rng.normal_vec(d);
      dir /= dir.norm();
      Vec x_pert = base_k[static_cast<std::size_t>(i)] + eps * dir;
      BoundPair pair;
      pair.gamma = eps;
      pair.observed = (ref.solve(x_pert) - base_v[static_cast<std::size_t>(i)]).norm();
      pair.bound = eps * growth;
      if (pair.observed > pair.bound * (1.0 + 1e-6)) ++report.violation_count;
      report.pairs.push_back(pair);

      BoundPair solver_pair;
      solver_pair.gamma = eps;
      solver_pair.observed =
          (grid_solve(x_pert) - base_v_solver[static_cast<std::size_t>(i)]).norm();
      solver_pair.bound = pair.bound;
      if (solver_pair.observed > solver_pair.bound * (1.0 + 1e-6))
        ++report.solver_violation_count;
      report.solver_pairs.push_back(solver_pair);
    }
  }
  return report;
}

// ---------------------------------------------------------------- vanilla

// One-big-step baseline: approximate x_v from x_k with a single solver
// step of size t_k - t_v (pseudo-multistep has no history here, so its
// single step is the Euler step). Costs the method's per-step evaluations.
inline Vec vanilla_skip(const World& world, const Schedule& sched,
                        const StepGrid& grid, const Vec& x_k, int k_step,
                        int v_step, const Condition& y, double w_g,
                        Method method, long long* nfe = nullptr) {
  if (k_step <= v_step || v_step < 0 || k_step > grid.n_steps)
    throw ValidationError("require n_steps >= k_step > v_step >= 0");
  const double t_hi = grid.t_of_step(k_step);
  const double t_lo = grid.t_of_step(v_step);
  MixtureScore score(world, sched, y, w_g);
  long long local = 0;
  OdeRhs<MixtureScore> rhs{&sched, &score, &local};
  Vec out;
  switch (method) {
    case Method::heun:
      out = step_heun(rhs, x_k, t_hi, t_lo);
      break;
    case Method::expo2:
      out = step_expo2(sched, score, x_k, t_hi, t_lo, &local);
      break;
    case Method::euler:
    case Method::pseudo_multistep:
      out = step_euler(rhs, x_k, t_hi, t_lo);
      break;
  }
  if (nfe) *nfe += local;
  return out;
}

// ---------------------------------------------------------------- metrics

namespace detail {

// Symmetric PSD square root via eigendecomposition; eigenvalues below
// -1e-10 are an error, small negatives are clamped to zero.
inline Mat psd_sqrt(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(m);
  Vec lam = eig.eigenvalues();
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    if (lam[i] < -1e-10)
      throw DomainError("matrix square root of an indefinite matrix");
    lam[i] = lam[i] < 0.0 ? 0.0 : std::sqrt(lam[i]);
  }
  return eig.eigenvectors() * lam.asDiagonal() *
         eig.eigenvectors().transpose();
}

inline void sample_moments(const Mat& samples, Vec* mean, Mat* cov) {
  const Eigen::Index n = samples.cols();
  *mean = samples.rowwise().mean();
  Mat centered = samples.colwise() - *mean;
  *cov = centered * centered.transpose() / static_cast<double>(n - 1);
}

}  // namespace detail

// Squared Gaussian Frechet distance between two sample sets (columns are
// samples): |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
inline double frechet_sq(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows())
    throw ValidationError("sample sets have different dimensions");
  const Eigen::Index d = a.rows();
  if (a.cols() < d + 1 || b.cols() < d + 1)
    throw ValidationError("need at least d + 1 samples per side");
  Vec mu_a, mu_b;
  Mat s_a, s_b;
  detail::sample_moments(a, &mu_a, &s_a);
  detail::sample_moments(b, &mu_b, &s_b);

  Mat root_a = detail::psd_sqrt(s_a);
  Mat inner = root_a * s_b * root_a;
  inner = 0.5 * (inner + inner.transpose());  // symmetrize rounding noise
  Eigen::SelfAdjointEigenSolver<Mat> eig(inner);
  double tr_sqrt = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    double lam = eig.eigenvalues()[i];
    if (lam < -1e-10)
      throw DomainError("covariance product has a negative eigenvalue");
    tr_sqrt += std::sqrt(lam < 0.0 ? 0.0 : lam);
  }
  return (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() -
         2.0 * tr_sqrt;
}

// Squared maximum mean discrepancy (V-statistic) with an RBF kernel whose
// bandwidth is the median pairwise distance over the pooled samples. The
// V-statistic (full double sums, diagonal included) is exactly zero on
// identical sets and never meaningfully negative.
inline double mmd_sq(const Mat& a, const Mat& b) {
  if (a.cols() < 1 || b.cols() < 1)
    throw ValidationError("mmd_sq needs non-empty sample sets");
  if (a.rows() != b.rows())
    throw ValidationError("sample sets have different dimensions");
  const Eigen::Index na = a.cols(), nb = b.cols();

  Mat pooled(a.rows(), na + nb);
  pooled << a, b;
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>((na + nb) * (na + nb - 1) / 2));
  for (Eigen::Index i = 0; i < na + nb; ++i)
    for (Eigen::Index j = i + 1; j < na + nb; ++j)
      dists.push_back((pooled.col(i) - pooled.col(j)).norm());
  double bw = 1.0;
  if (!dists.empty()) {
    std::size_t mid = dists.size() / 2;
    std::nth_element(dists.begin(),
                     dists.begin() + static_cast<std::ptrdiff_t>(mid),
                     dists.end());
    if (dists[mid] > 0.0) bw = dists[mid];
  }
  const double inv_two_bw2 = 1.0 / (2.0 * bw * bw);

  auto kernel_mean = [&](const Mat& u, const Mat& v) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < u.cols(); ++i)
      for (Eigen::Index j = 0; j < v.cols(); ++j)
        acc += std::exp(-(u.col(i) - v.col(j)).squaredNorm() * inv_two_bw2);
    return acc / (static_cast<double>(u.cols()) * static_cast<double>(v.cols()));
  };
  return kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b);
}

// ---------------------------------------------------------------- fidelity

struct FidelityReport {
  double redi_vs_original = 0.0;      // frechet_sq(ReDi, full-solve)
  double original_vs_ground_truth = 0.0;  // frechet_sq(full-solve, q0 draws)
  double ratio = 0.0;                 // first / second
};

// Paired comparison over n_eval seeds: ReDi finals vs full-solver finals
// from identical start states, referenced against direct data draws.
inline FidelityReport fidelity_ratio(const World& world, const Schedule& sched,
                                     const StepGrid& grid,
                                     const KnowledgeBase& kb,
                                     const RediConfig& cfg, int n_eval,
                                     std::uint64_t seed) {
  if (n_eval < 50) throw ValidationError("n_eval must be >= 50");
  const Eigen::Index d = world.dim;
  Mat redi(d, n_eval), original(d, n_eval), truth(d, n_eval);
  for (int i = 0; i < n_eval; ++i) {
    Condition y{i % world.n_contents(), std::nullopt};
    std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    Vec x_t = draw_start_state(world, sched, y, s);
    redi.col(i) = infer_from(world, sched, grid, kb, y, cfg, x_t, s).final;
    original.col(i) = solve_cond(world, sched, grid, x_t, grid.n_steps, 0, y,
                                 cfg.w_g, cfg.method)
                          .final();
    truth.col(i) = sample_data(
        world, y, 1, seed + kGroundTruthSeedOffset + static_cast<std::uint64_t>(i))[0];
  }
  FidelityReport report;
  report.redi_vs_original = frechet_sq(redi, original);
  report.original_vs_ground_truth = frechet_sq(original, truth);
  report.ratio = report.redi_vs_original / report.original_vs_ground_truth;
  return report;
}

// ---------------------------------------------------------------- keys

struct KeyKindRow {
  std::string kind;            // "trajectory" or "embedding"
  double mean_l2 = 0.0;        // mean |x̂_v - x_v(true)| over queries
  double frechet_finals = 0.0; // frechet_sq(finals, ground-truth draws)
};

// Compare trajectory keys against condition-embedding keys on identical
// queries. Only the retrieval key differs between the rows; the combiner
// is held fixed (uniform average over the retrieved values) so the
// comparison isolates what the key can distinguish. The embedding variant
// keys every entry by embedding(condition) and queries with
// embedding(y_query): all condition-matching entries tie at distance zero,
// so retrieval cannot react to where x_k actually is and the first H
// matching entries win. With a single matching entry both kinds retrieve
// it and produce the same value.
inline std::vector<KeyKindRow> key_comparison(const World& world,
                                              const Schedule& sched,
                                              const StepGrid& grid,
                                              const KnowledgeBase& kb,
                                              int n_queries,
                                              const RediConfig& cfg,
                                              std::uint64_t seed) {
  if (n_queries < 1) throw ValidationError("n_queries must be >= 1");
  cfg.validate(grid.n_steps);
  check_compat(kb, sched, grid, cfg);
  const Eigen::Index d = world.dim;
  Mat finals_traj(d, n_queries), finals_emb(d, n_queries), truth(d, n_queries);
  double l2_traj = 0.0, l2_emb = 0.0;

  auto resume = [&](const Vec& x_v, const Condition& y) {
    return cfg.v_step > 0
               ? solve_cond(world, sched, grid, x_v, cfg.v_step, 0, y, cfg.w_g,
                            cfg.method)
                     .final()
               : x_v;
  };

  for (int i = 0; i < n_queries; ++i) {
    Condition y{i % world.n_contents(), std::nullopt};
    std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    Vec x_t = draw_start_state(world, sched, y, s);
    Trajectory full = solve_cond(world, sched, grid, x_t, grid.n_steps, 0, y,
                                 cfg.w_g, cfg.method);
    Vec x_v_true = full.at_step(grid.n_steps, cfg.v_step);

    std::vector<std::size_t> cands =
        detail::matching_entries(kb, y, /*content_only=*/false);
    if (cands.empty())
      throw CompatibilityError(
          "no knowledge-base entries match the query condition");
    const int h = std::min<int>(cfg.h, static_cast<int>(cands.size()));
    Vec uniform = Vec::Constant(h, 1.0 / h);

    // Trajectory keys: nearest entries to x_k (the prefix endpoint).
    Vec q = full.at_step(grid.n_steps, cfg.k_step);
    std::vector<Neighbor> top = detail::query_filtered(kb, cands, q, h);
    std::vector<std::size_t> ids_traj;
    for (const Neighbor& nb : top) ids_traj.push_back(nb.index);
    Vec x_v_traj = combine_value(kb, ids_traj, uniform, cfg.v_step);
    l2_traj += (x_v_traj - x_v_true).norm() / n_queries;
    finals_traj.col(i) = resume(x_v_traj, y);

    // Embedding keys: every matching candidate ties, first H win.
    std::vector<std::size_t> ids_emb(cands.begin(), cands.begin() + h);
    Vec x_v_emb = combine_value(kb, ids_emb, uniform, cfg.v_step);
    l2_emb += (x_v_emb - x_v_true).norm() / n_queries;
    finals_emb.col(i) = resume(x_v_emb, y);

    truth.col(i) = sample_data(
        world, y, 1, seed + kGroundTruthSeedOffset + static_cast<std::uint64_t>(i))[0];
  }

  return {{"trajectory", l2_traj, frechet_sq(finals_traj, truth)},
          {"embedding", l2_emb, frechet_sq(finals_emb, truth)}};
}

// ---------------------------------------------------------------- ablation

enum class AblationKind { kb_size, kv_gap, k_position, n_neighbors };

inline std::string ablation_kind_name(AblationKind kind) {
  switch (kind) {
    case AblationKind::kb_size: return "kb_size";
    case AblationKind::kv_gap: return "kv_gap";
    case AblationKind::k_position: return "k_position";
    case AblationKind::n_neighbors: return "n_neighbors";
  }
  throw ValidationError("unknown ablation kind");
}

inline AblationKind ablation_kind_from_name(const std::string& name) {
  for (AblationKind k : {AblationKind::kb_size, AblationKind::kv_gap,
                         AblationKind::k_position, AblationKind::n_neighbors})
    if (ablation_kind_name(k) == name) return k;
  throw ValidationError("unknown ablation kind: " + name);
}

struct AblationRow {
  std::string setting;   // e.g. "kb_size=4000"
  double mean_l2 = 0.0;  // mean |x̂_v - x_v(true)| over paired queries
  double frechet = 0.0;  // frechet_sq(finals, ground-truth draws)
  double mmd = 0.0;      // mmd_sq(finals, ground-truth draws)
  long long nfe = 0;     // per-query evaluation count
};

// Sweep one knob of the pipeline, holding query seeds fixed across rows so
// the comparison is paired. The dataset supplies KB construction inputs;
// kb_size slices prefixes of one build, k_position rebuilds per key step.
inline std::vector<AblationRow> ablate(const World& world,
                                       const Schedule& sched,
                                       const StepGrid& grid,
                                       const std::vector<std::pair<Vec, Condition>>& dataset,
                                       AblationKind kind,
                                       const std::vector<int>& values,
                                       const RediConfig& base_cfg,
                                       int n_queries, std::uint64_t seed) {
  if (values.empty()) throw ValidationError("ablation needs grid values");
  if (n_queries < 1) throw ValidationError("n_queries must be >= 1");
  base_cfg.validate(grid.n_steps);
  const Eigen::Index d = world.dim;

  // Shared paired queries and ground-truth draws.
  std::vector<Condition> ys(static_cast<std::size_t>(n_queries));
  std::vector<Vec> starts(static_cast<std::size_t>(n_queries));
  Mat truth(d, n_queries);
  for (int i = 0; i < n_queries; ++i) {
    auto s = static_cast<std::size_t>(i);
    ys[s] = {i % world.n_contents(), std::nullopt};
    starts[s] = draw_start_state(world, sched, ys[s],
                                 seed + kQuerySeedOffset + static_cast<std::uint64_t>(i));
    truth.col(i) = sample_data(world, ys[s], 1,
                               seed + kGroundTruthSeedOffset +
                                   static_cast<std::uint64_t>(i))[0];
  }

  auto build = [&](int k_step, std::size_t n_items) {
    if (n_items > dataset.size())
      throw ValidationError("dataset smaller than the requested KB size");
    std::vector<std::pair<Vec, Condition>> slice(dataset.begin(),
                                                 dataset.begin() + static_cast<std::ptrdiff_t>(n_items));
    return build_kb(world, sched, grid, slice, k_step, base_cfg.method,
                    base_cfg.w_g, seed + kKbSeedOffset);
  };

  auto eval_row = [&](const KnowledgeBase& kb, const RediConfig& cfg,
                      const std::string& setting) {
    AblationRow row;
    row.setting = setting;
    row.nfe = nfe_of(grid.n_steps, cfg);
    Mat finals(d, n_queries);
    for (int i = 0; i < n_queries; ++i) {
      auto s = static_cast<std::size_t>(i);
      Trajectory full = solve_cond(world, sched, grid, starts[s],
                                   grid.n_steps, 0, ys[s], cfg.w_g,
                                   cfg.method);
      RediOutcome out = infer_from(world, sched, grid, kb, ys[s], cfg,
                                   starts[s],
                                   seed + kQuerySeedOffset +
                                       static_cast<std::uint64_t>(i));
      row.mean_l2 += (out.retrieval.combined_value -
                      full.at_step(grid.n_steps, cfg.v_step))
                         .norm() /
                     n_queries;
      finals.col(i) = out.final;
    }
    row.frechet = frechet_sq(finals, truth);
    row.mmd = mmd_sq(finals, truth);
    return row;
  };

  std::vector<AblationRow> rows;
  switch (kind) {
    case AblationKind::kb_size: {
      int max_size = *std::max_element(values.begin(), values.end());
      KnowledgeBase full = build(base_cfg.k_step,
                                 static_cast<std::size_t>(max_size));
      for (int m : values) {
        if (m < 1) throw ValidationError("kb_size values must be >= 1");
        KnowledgeBase slice;
        slice.meta = full.meta;
        slice.entries.assign(full.entries.begin(),
                             full.entries.begin() + m);
        slice.refresh_nn_stats();
        rows.push_back(eval_row(slice, base_cfg,
                                "kb_size=" + std::to_string(m)));
      }
      break;
    }
    case AblationKind::kv_gap: {
      KnowledgeBase kb = build(base_cfg.k_step, dataset.size());
      for (int v : values) {
        RediConfig cfg = base_cfg;
        cfg.v_step = v;
        cfg.validate(grid.n_steps);
        rows.push_back(eval_row(kb, cfg, "v_step=" + std::to_string(v)));
      }
      break;
    }
    case AblationKind::k_position: {
      const int gap = base_cfg.k_step - base_cfg.v_step;
      for (int k : values) {
        RediConfig cfg = base_cfg;
        cfg.k_step = k;
        cfg.v_step = k - gap;
        cfg.validate(grid.n_steps);
        KnowledgeBase kb = build(k, dataset.size());
        rows.push_back(eval_row(kb, cfg, "k_step=" + std::to_string(k)));
      }
      break;
    }
    case AblationKind::n_neighbors: {
      KnowledgeBase kb = build(base_cfg.k_step, dataset.size());
      for (int h : values) {
        RediConfig cfg = base_cfg;
        cfg.h = h;
        cfg.validate(grid.n_steps);
        rows.push_back(eval_row(kb, cfg, "H=" + std::to_string(h)));
      }
      break;
    }
  }
  return rows;
}

}  // namespace redi
