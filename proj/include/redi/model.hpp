#pragma once

// Conditional Gaussian-mixture data model with closed-form time-t marginal,
// log-density, score, noise predictor and guidance. Every component is
// isotropic (covariance = cov_scale * I), so the forward marginal of a
// mixture stays a mixture with means alpha(t)*mu and scalar covariances
// alpha(t)^2 * cov_scale + sigma(t)^2.

#include "redi/common.hpp"
#include "redi/schedule.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace redi {

// ---------------------------------------------------------------- types

struct Condition {
  int content_id = 0;
  std::optional<int> style_id;  // absent = style-free

  bool operator==(const Condition& o) const {
    return content_id == o.content_id && style_id == o.style_id;
  }
};

struct MixtureComponent {
  double weight = 1.0;
  Vec mean;
  double cov_scale = 1.0;  // covariance = cov_scale * I; 0 = point mass
};

// Mixture evaluation uses fixed-size stack buffers of this capacity.
inline constexpr std::size_t kMaxComponents = 64;

struct MixtureSpec {
  std::vector<MixtureComponent> components;
  int dim = 0;

  void validate() const {
    if (components.empty())
      throw ValidationError("mixture must have >= 1 component");
    if (components.size() > kMaxComponents)
      throw ValidationError("mixture supports at most 64 components");
    double total = 0.0;
    for (const auto& c : components) {
      if (!(c.cov_scale >= 0.0))
        throw ValidationError("component cov_scale must be >= 0");
      if (c.mean.size() != dim)
        throw ValidationError("component mean dimension mismatch");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw ValidationError("mixture weights must sum to 1");
  }
};

struct StyleTransform {
  Mat rotation;  // d x d orthogonal
  Vec shift;
  double scale = 1.0;

  void validate() const {
    if (!(scale > 0.0)) throw ValidationError("style scale must be > 0");
    Mat err = rotation.transpose() * rotation -
              Mat::Identity(rotation.rows(), rotation.cols());
    if (err.cwiseAbs().maxCoeff() > 1e-10)
      throw ValidationError("style rotation must be orthogonal");
    if (shift.size() != rotation.rows())
      throw ValidationError("style shift dimension mismatch");
  }
};

struct World {
  int dim = 0;
  // contents[c] holds the base (style-free) components of content cluster c.
  std::vector<std::vector<MixtureComponent>> contents;
  std::vector<StyleTransform> styles;

  int n_contents() const { return static_cast<int>(contents.size()); }
  int n_styles() const { return static_cast<int>(styles.size()); }

  void validate() const {
    if (contents.empty()) throw ValidationError("world needs >= 1 content");
    for (const auto& comps : contents) {
      MixtureSpec spec{comps, dim};
      spec.validate();
    }
    for (const auto& st : styles) st.validate();
  }

  void check(const Condition& y) const {
    if (y.content_id < 0 || y.content_id >= n_contents())
      throw ValidationError("unknown content_id " +
                            std::to_string(y.content_id));
    if (y.style_id && (*y.style_id < 0 || *y.style_id >= n_styles()))
      throw ValidationError("unknown style_id " + std::to_string(*y.style_id));
  }
};

// Default world: 4 content clusters with means on the radius-4 circle at
// evenly spaced angles, each split into two sub-components offset by 0.5
// along the circle tangent, all with cov_scale 0.09; styles: identity,
// rotation by pi/2, and shift (2,2) with scale 1.2.
inline World default_world() {
  World w;
  w.dim = 2;
  for (int c = 0; c < 4; ++c) {
    double th = M_PI * 0.5 * c;
    Vec center(2), tangent(2);
    center << 4.0 * std::cos(th), 4.0 * std::sin(th);
    tangent << -std::sin(th), std::cos(th);
    std::vector<MixtureComponent> comps(2);
    comps[0] = {0.5, center + 0.5 * tangent, 0.09};
    comps[1] = {0.5, center - 0.5 * tangent, 0.09};
    w.contents.push_back(std::move(comps));
  }
  StyleTransform identity{Mat::Identity(2, 2), Vec::Zero(2), 1.0};
  Mat rot(2, 2);
  rot << 0.0, -1.0, 1.0, 0.0;
  StyleTransform quarter_turn{rot, Vec::Zero(2), 1.0};
  Vec shift(2);
  shift << 2.0, 2.0;
  StyleTransform shifted{Mat::Identity(2, 2), shift, 1.2};
  w.styles = {identity, quarter_turn, shifted};
  return w;
}

// ---------------------------------------------------------------- resolve

inline MixtureSpec resolve(const World& w, const Condition& y) {
  w.check(y);
  MixtureSpec spec;
  spec.dim = w.dim;
  spec.components = w.contents[static_cast<std::size_t>(y.content_id)];
  if (y.style_id) {
    const StyleTransform& st = w.styles[static_cast<std::size_t>(*y.style_id)];
    for (auto& c : spec.components) {
      c.mean = st.scale * (st.rotation * c.mean) + st.shift;
      c.cov_scale *= st.scale * st.scale;
    }
  }
  spec.validate();
  return spec;
}

// Unconditional mixture: equal-weight pool of every content's base
// (style-free) components — the classifier-free-guidance null condition.
inline MixtureSpec uncond_spec(const World& w) {
  MixtureSpec spec;
  spec.dim = w.dim;
  double content_w = 1.0 / w.n_contents();
  for (const auto& comps : w.contents)
    for (const auto& c : comps)
      spec.components.push_back({content_w * c.weight, c.mean, c.cov_scale});
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------- marginal

inline MixtureSpec marginal(const Schedule& s, const MixtureSpec& spec,
                            double t) {
  double a = alpha(s, t), s2 = sigma_sq(s, t);
  MixtureSpec out;
  out.dim = spec.dim;
  out.components.reserve(spec.components.size());
  for (const auto& c : spec.components)
    out.components.push_back({c.weight, a * c.mean, a * a * c.cov_scale + s2});
  return out;
}

// ---------------------------------------------------------------- density

namespace detail {

// Log-weights, responsibilities and per-component scores of the time-t
// marginal of `spec`, written into caller buffers (no allocation). Returns
// the log-density.
inline double mixture_stats(const Schedule& s, const MixtureSpec& spec,
                            const Vec& x, double t, double* resp,
                            double* inv_c) {
  const std::size_t n = spec.components.size();
  std::array<double, kMaxComponents> logit;
  double a = alpha(s, t), s2 = sigma_sq(s, t);
  const double d = static_cast<double>(spec.dim);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& comp = spec.components[i];
    double c = a * a * comp.cov_scale + s2;
    if (!(c > 0.0))
      throw DomainError("zero-variance component in density evaluation");
    inv_c[i] = 1.0 / c;
    double q = (x - a * comp.mean).squaredNorm();
    logit[i] = std::log(comp.weight) - 0.5 * q * inv_c[i] -
               0.5 * d * std::log(2.0 * M_PI * c);
    max_logit = std::max(max_logit, logit[i]);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    resp[i] = std::exp(logit[i] - max_logit);
    total += resp[i];
  }
  for (std::size_t i = 0; i < n; ++i) resp[i] /= total;
  return max_logit + std::log(total);
}

}  // namespace detail

inline double log_density(const Schedule& s, const MixtureSpec& spec,
                          const Vec& x, double t) {
  if (!x.allFinite()) throw DomainError("non-finite x in log_density");
  std::array<double, kMaxComponents> resp, inv_c;
  return detail::mixture_stats(s, spec, x, t, resp.data(), inv_c.data());
}

inline Vec score(const Schedule& s, const MixtureSpec& spec, const Vec& x,
                 double t) {
  if (!x.allFinite()) throw DomainError("non-finite x in score");
  std::array<double, kMaxComponents> resp, inv_c;
  detail::mixture_stats(s, spec, x, t, resp.data(), inv_c.data());
  double a = alpha(s, t);
  Vec out = Vec::Zero(spec.dim);
  for (std::size_t i = 0; i < spec.components.size(); ++i)
    out -= resp[i] * inv_c[i] * (x - a * spec.components[i].mean);
  return out;
}

inline double log_density(const World& w, const Schedule& s, const Vec& x,
                          double t, const Condition& y) {
  return log_density(s, resolve(w, y), x, t);
}

inline Vec score(const World& w, const Schedule& s, const Vec& x, double t,
                 const Condition& y) {
  return score(s, resolve(w, y), x, t);
}

// Noise prediction epsilon = -sigma(t) * score. Requires sigma(t) > 0,
// i.e. t at or above the grid floor.
inline Vec epsilon(const World& w, const Schedule& s, const Vec& x, double t,
                   const Condition& y, double t_floor = 1e-3) {
  if (t < t_floor)
    throw DomainError("epsilon undefined below t_floor (sigma -> 0)");
  return -sigma(s, t) * score(w, s, x, t, y);
}

// Classifier-free-guidance analog: s_uncond + w_g (s_cond - s_uncond).
// w_g = 1 short-circuits to the conditional score so the two are bitwise
// equal; w_g = 0 is the unconditional score.
inline Vec guided_score(const World& w, const Schedule& s, const Vec& x,
                        double t, const Condition& y, double w_g) {
  if (w_g < 0.0) throw ValidationError("guidance scale w_g must be >= 0");
  if (w_g == 1.0) return score(w, s, x, t, y);
  Vec su = score(s, uncond_spec(w), x, t);
  if (w_g == 0.0) return su;
  Vec sc = score(w, s, x, t, y);
  return su + w_g * (sc - su);
}

// ---------------------------------------------------------------- sampling

inline Vec sample_from(const MixtureSpec& spec, Rng& rng) {
  std::vector<double> weights;
  weights.reserve(spec.components.size());
  for (const auto& c : spec.components) weights.push_back(c.weight);
  const auto& comp = spec.components[static_cast<std::size_t>(rng.pick(weights))];
  return comp.mean + std::sqrt(comp.cov_scale) * rng.normal_vec(spec.dim);
}

inline std::vector<Vec> sample_data(const World& w, const Condition& y,
                                    int count, std::uint64_t seed) {
  if (count < 0) throw ValidationError("sample count must be >= 0");
  MixtureSpec spec = resolve(w, y);
  Rng rng(seed);
  std::vector<Vec> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(sample_from(spec, rng));
  return out;
}

// Forward noising with an explicit noise draw (eps = 0 gives the
// zero-noise mode alpha(t) * x0).
inline Vec forward_noise_with(const Schedule& s, const Vec& x0, double t,
                              const Vec& eps) {
  return alpha(s, t) * x0 + sigma(s, t) * eps;
}

inline Vec forward_noise(const Schedule& s, const Vec& x0, double t,
                         std::uint64_t seed) {
  Rng rng(seed);
  return forward_noise_with(s, x0, t, rng.normal_vec(x0.size()));
}

// ---------------------------------------------------------------- embedding

// Deterministic condition key: fixed-seed Gaussian projection of the
// one-hot (content, style-slot) encoding down to the state dimension.
// Style slot 0 encodes "style-free". The projection seed is a constant so
// condition keys never drift with the run's root seed.
inline constexpr std::uint64_t kEmbeddingSeed = 9001;

inline Vec embedding(const World& w, const Condition& y) {
  w.check(y);
  const int n_slots = w.n_contents() + w.n_styles() + 1;
  Rng rng(kEmbeddingSeed);
  Mat proj(w.dim, n_slots);
  for (int r = 0; r < w.dim; ++r)
    for (int c = 0; c < n_slots; ++c) proj(r, c) = rng.normal();
  int style_slot = w.n_contents() + (y.style_id ? *y.style_id + 1 : 0);
  return proj.col(y.content_id) + proj.col(style_slot);
}

}  // namespace redi
