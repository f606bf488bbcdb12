#pragma once

// Retrieval-accelerated inference: solve the prefix N -> k, query the
// knowledge base with x_k, least-squares combine the stored step-v values,
// and resume solving v -> 0. Includes the zero-shot style-adaptation
// variant (retrieve with the content-only condition, resume with the full
// one).

#include "redi/kb.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace redi {

// ---------------------------------------------------------------- config

struct RediConfig {
  int k_step = 40;
  int v_step = 20;
  int h = 2;               // neighbours requested
  double w_g = 1.0;        // guidance scale
  Method method = Method::euler;
  // Combination-weight guard: if the least-squares weights exceed this L1
  // norm, the farthest neighbour is dropped and the system re-solved, down
  // to H = 1. Near-collinear keys otherwise produce huge cancelling
  // weights whose combined value is far off-trajectory.
  double max_weight_l1 = 10.0;
  // Retrieval distances beyond trust_factor x (KB median NN distance)
  // raise a warning flag on the outcome (never an error).
  double trust_factor = 10.0;
  // When set, a KB built under a different guidance scale may be queried;
  // every other metadata field remains strictly checked.
  bool allow_guidance_mismatch = false;

  void validate(int n_steps) const {
    if (v_step < 0 || k_step <= v_step)
      throw ValidationError("require k_step > v_step >= 0");
    if (k_step >= n_steps)
      throw ValidationError("k_step must be < n_steps");
    if (h < 1) throw ValidationError("H must be >= 1");
    if (w_g < 0.0) throw ValidationError("w_g must be >= 0");
    if (max_weight_l1 <= 0.0)
      throw ValidationError("max_weight_l1 must be > 0");
    if (trust_factor <= 0.0) throw ValidationError("trust_factor must be > 0");
  }
};

struct RediOutcome {
  Vec final;                 // x̂_0
  RetrievalResult retrieval; // indices/distances/weights/residual/value
  long long nfe = 0;         // measured score evaluations
  Vec query;                 // x_k
  bool trust_warning = false;
  int h_used = 0;            // neighbours kept after the weight guard
  std::uint64_t seed = 0;
  Condition condition{0, std::nullopt};
};

// Expected evaluation count: (N - k) + v steps at the method's per-step
// cost.
inline long long nfe_of(int n_steps, const RediConfig& cfg) {
  return static_cast<long long>((n_steps - cfg.k_step) + cfg.v_step) *
         per_step_cost(cfg.method);
}

// ---------------------------------------------------------------- compat

// Strict metadata gate: a KB may only be queried under the configuration
// it was built with (mixed provenance would put retrieved values on the
// trajectories of a different ODE). The one sanctioned exception is w_g
// via cfg.allow_guidance_mismatch.
inline void check_compat(const KnowledgeBase& kb, const Schedule& sched,
                         const StepGrid& grid, const RediConfig& cfg) {
  auto fail = [](const std::string& field, const std::string& detail) {
    throw CompatibilityError("knowledge base mismatch on " + field + ": " +
                             detail);
  };
  if (kb.meta.beta0 != sched.beta0 || kb.meta.beta1 != sched.beta1)
    fail("schedule (beta0/beta1)", "KB was built under different betas");
  if (kb.meta.t_floor != grid.t_floor)
    fail("t_floor", "KB grid floor differs");
  if (kb.meta.n_steps != static_cast<std::uint32_t>(grid.n_steps))
    fail("n_steps", "KB was built on a " + std::to_string(kb.meta.n_steps) +
                        "-step grid, queried with " +
                        std::to_string(grid.n_steps));
  if (kb.meta.method != cfg.method)
    fail("solver", "KB stores " + method_name(kb.meta.method) +
                       " trajectories, config requests " +
                       method_name(cfg.method));
  if (kb.meta.k_step != static_cast<std::uint32_t>(cfg.k_step))
    fail("k_step", "KB key step is " + std::to_string(kb.meta.k_step) +
                       ", config requests " + std::to_string(cfg.k_step));
  if (!cfg.allow_guidance_mismatch && kb.meta.w_g != cfg.w_g)
    fail("w_g", "KB was built at guidance " + std::to_string(kb.meta.w_g) +
                    ", config requests " + std::to_string(cfg.w_g) +
                    " (set allow_guidance_mismatch to override)");
}

// ---------------------------------------------------------------- core

namespace detail {

// Candidate ids whose stored condition matches. `content_only` ignores the
// stored style (used by adaptation, where the KB is style-free).
inline std::vector<std::size_t> matching_entries(const KnowledgeBase& kb,
                                                 const Condition& y,
                                                 bool content_only) {
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < kb.size(); ++i) {
    const Condition& c = kb.entries[i].condition;
    if (content_only ? c.content_id == y.content_id : c == y)
      ids.push_back(i);
  }
  return ids;
}

// Exact top-h among the candidate subset, same (distance, id) ordering as
// query_top_h.
inline std::vector<Neighbor> query_filtered(const KnowledgeBase& kb,
                                            const std::vector<std::size_t>& ids,
                                            const Vec& q, int h) {
  std::vector<std::pair<double, std::size_t>> d2(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    d2[i] = {(kb.key(ids[i]) - q).squaredNorm(), ids[i]};
  std::partial_sort(d2.begin(), d2.begin() + h, d2.end());
  std::vector<Neighbor> out(static_cast<std::size_t>(h));
  for (int i = 0; i < h; ++i)
    out[static_cast<std::size_t>(i)] = {
        d2[static_cast<std::size_t>(i)].second,
        std::sqrt(d2[static_cast<std::size_t>(i)].first)};
  return out;
}

// Retrieval + guarded least-squares combination at v_step.
inline void retrieve_and_combine(const KnowledgeBase& kb, const Vec& q,
                                 const std::vector<std::size_t>& candidates,
                                 const RediConfig& cfg, RediOutcome* out) {
  if (candidates.empty())
    throw CompatibilityError(
        "no knowledge-base entries match the query condition");
  int h = std::min<int>(cfg.h, static_cast<int>(candidates.size()));
  std::vector<Neighbor> top = query_filtered(kb, candidates, q, h);

  Vec weights;
  Mat k_mat;
  // Weight guard: shrink the neighbour set until the combination weights
  // are tame (H = 1 always is: |w| <= ‖q‖ / ‖key‖).
  for (; h >= 1; --h) {
    std::vector<Vec> keys;
    k_mat.resize(q.size(), h);
    for (int i = 0; i < h; ++i) {
      keys.push_back(kb.key(top[static_cast<std::size_t>(i)].index));
      k_mat.col(i) = keys.back();
    }
    weights = ls_weights(q, keys);
    if (weights.lpNorm<1>() <= cfg.max_weight_l1 || h == 1) break;
  }

  out->h_used = h;
  out->retrieval.indices.resize(static_cast<std::size_t>(h));
  out->retrieval.distances.resize(static_cast<std::size_t>(h));
  for (int i = 0; i < h; ++i) {
    out->retrieval.indices[static_cast<std::size_t>(i)] =
        top[static_cast<std::size_t>(i)].index;
    out->retrieval.distances[static_cast<std::size_t>(i)] =
        top[static_cast<std::size_t>(i)].distance;
  }
  out->retrieval.weights = weights;
  out->retrieval.residual = (q - k_mat * weights).norm();
  out->retrieval.combined_value =
      combine_value(kb, out->retrieval.indices, weights, cfg.v_step);
  out->trust_warning =
      kb.median_nn_distance > 0.0 &&
      top[0].distance > cfg.trust_factor * kb.median_nn_distance;
}

// Shared pipeline: prefix under y_prefix, retrieval among `candidates`,
// resume under y_resume.
inline RediOutcome run_pipeline(const World& world, const Schedule& sched,
                                const StepGrid& grid, const KnowledgeBase& kb,
                                const Condition& y_prefix,
                                const Condition& y_resume, bool content_only,
                                const RediConfig& cfg, const Vec& x_start,
                                std::uint64_t seed) {
  cfg.validate(grid.n_steps);
  check_compat(kb, sched, grid, cfg);
  if (kb.empty())
    throw ValidationError("cannot infer against an empty knowledge base");
  if (world.dim != static_cast<int>(kb.meta.dim))
    throw DimMismatchError("world dim differs from the knowledge base");
  world.check(y_prefix);
  world.check(y_resume);

  RediOutcome out;
  out.seed = seed;
  out.condition = y_resume;

  Trajectory prefix = solve_cond(world, sched, grid, x_start, grid.n_steps,
                                 cfg.k_step, y_prefix, cfg.w_g, cfg.method);
  out.query = prefix.final();
  out.nfe = prefix.nfe;

  retrieve_and_combine(kb, out.query,
                       matching_entries(kb, y_prefix, content_only), cfg,
                       &out);

  if (cfg.v_step > 0) {
    Trajectory resume =
        solve_cond(world, sched, grid, out.retrieval.combined_value,
                   cfg.v_step, 0, y_resume, cfg.w_g, cfg.method);
    out.final = resume.final();
    out.nfe += resume.nfe;
  } else {
    out.final = out.retrieval.combined_value;
  }
  return out;
}

}  // namespace detail

// Draw the start state x_T for `seed`: data draw from stream(seed),
// terminal noise from stream(seed + kNoiseStreamOffset) — the same
// convention build_kb uses, so reusing a KB entry's seed replays its
// stored trajectory bit for bit.
inline Vec draw_start_state(const World& world, const Schedule& sched,
                            const Condition& y, std::uint64_t seed) {
  Rng data_rng(seed);
  Vec x0 = sample_from(resolve(world, y), data_rng);
  Rng noise_rng(seed + kNoiseStreamOffset);
  return forward_noise_with(sched, x0, sched.t_max,
                            noise_rng.normal_vec(world.dim));
}

// Inference from a caller-supplied start state (paired comparisons).
inline RediOutcome infer_from(const World& world, const Schedule& sched,
                              const StepGrid& grid, const KnowledgeBase& kb,
                              const Condition& y, const RediConfig& cfg,
                              const Vec& x_start, std::uint64_t seed = 0) {
  return detail::run_pipeline(world, sched, grid, kb, y, y,
                              /*content_only=*/false, cfg, x_start, seed);
}

inline RediOutcome infer(const World& world, const Schedule& sched,
                         const StepGrid& grid, const KnowledgeBase& kb,
                         const Condition& y, const RediConfig& cfg,
                         std::uint64_t seed) {
  return infer_from(world, sched, grid, kb, y, cfg,
                    draw_start_state(world, sched, y, seed), seed);
}

// Zero-shot adaptation: prefix and retrieval run under the content-only
// condition (matching entries by content, ignoring stored style), then the
// resumed solve applies the full condition.
inline RediOutcome infer_adapted_from(const World& world,
                                      const Schedule& sched,
                                      const StepGrid& grid,
                                      const KnowledgeBase& kb,
                                      const Condition& y_content,
                                      const Condition& y_full,
                                      const RediConfig& cfg, const Vec& x_start,
                                      std::uint64_t seed = 0) {
  if (y_content.style_id)
    throw ValidationError("y_content must be style-free");
  if (y_full.content_id != y_content.content_id)
    throw ValidationError("y_full must share y_content's content id");
  return detail::run_pipeline(world, sched, grid, kb, y_content, y_full,
                              /*content_only=*/true, cfg, x_start, seed);
}

inline RediOutcome infer_adapted(const World& world, const Schedule& sched,
                                 const StepGrid& grid,
                                 const KnowledgeBase& kb,
                                 const Condition& y_content,
                                 const Condition& y_full,
                                 const RediConfig& cfg, std::uint64_t seed) {
  return infer_adapted_from(world, sched, grid, kb, y_content, y_full, cfg,
                            draw_start_state(world, sched, y_content, seed),
                            seed);
}

}  // namespace redi
