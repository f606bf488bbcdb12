#include "redi/model.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace redi;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {
const Schedule kSched{};
const World kWorld = default_world();

// Frozen with 40-digit arithmetic: -log(2*pi).
constexpr double kNegLog2Pi = -1.8378770664093454836;

Vec vec2(double a, double b) {
  Vec v(2);
  v << a, b;
  return v;
}

// A world whose only content is a single isotropic component.
World single_component_world(const Vec& mu, double cov_scale) {
  World w;
  w.dim = 2;
  w.contents = {{MixtureComponent{1.0, mu, cov_scale}}};
  return w;
}
}  // namespace

TEST_CASE("resolve base, identity style, rotation style", "[model]") {
  MixtureSpec base = resolve(kWorld, {0, std::nullopt});
  REQUIRE(base.components.size() == 2);
  CHECK(base.components[0].mean == kWorld.contents[0][0].mean);

  MixtureSpec ident = resolve(kWorld, {0, 0});
  for (std::size_t i = 0; i < base.components.size(); ++i) {
    CHECK(ident.components[i].mean == base.components[i].mean);
    CHECK(ident.components[i].cov_scale == base.components[i].cov_scale);
    CHECK(ident.components[i].weight == base.components[i].weight);
  }

  MixtureSpec rot = resolve(kWorld, {0, 1});
  for (std::size_t i = 0; i < base.components.size(); ++i) {
    const Vec& m = base.components[i].mean;
    CHECK_THAT(rot.components[i].mean[0], WithinAbs(-m[1], 1e-14));
    CHECK_THAT(rot.components[i].mean[1], WithinAbs(m[0], 1e-14));
    CHECK(rot.components[i].weight == base.components[i].weight);
  }

  CHECK_THROWS_AS(resolve(kWorld, {7, std::nullopt}), ValidationError);
  CHECK_THROWS_AS(resolve(kWorld, {0, 9}), ValidationError);
}

TEST_CASE("marginal endpoints and point mass", "[model]") {
  MixtureSpec spec = resolve(kWorld, {1, std::nullopt});

  MixtureSpec at0 = marginal(kSched, spec, 0.0);
  for (std::size_t i = 0; i < spec.components.size(); ++i) {
    CHECK(at0.components[i].mean == spec.components[i].mean);
    CHECK(at0.components[i].cov_scale == spec.components[i].cov_scale);
  }

  double a1 = alpha(kSched, 1.0);
  MixtureSpec at1 = marginal(kSched, spec, 1.0);
  for (std::size_t i = 0; i < spec.components.size(); ++i) {
    CHECK_THAT((at1.components[i].mean - a1 * spec.components[i].mean).norm(),
               WithinAbs(0.0, 1e-15));
    CHECK_THAT(at1.components[i].cov_scale, WithinAbs(1.0, 1e-3));
  }

  // Point mass: cov collapses to sigma^2(t).
  MixtureSpec pm{{{1.0, vec2(2.0, -1.0), 0.0}}, 2};
  MixtureSpec pm_half = marginal(kSched, pm, 0.5);
  CHECK_THAT((pm_half.components[0].mean - alpha(kSched, 0.5) * pm.components[0].mean).norm(),
             WithinAbs(0.0, 1e-15));
  CHECK_THAT(pm_half.components[0].cov_scale,
             WithinAbs(sigma_sq(kSched, 0.5), 1e-15));
}

TEST_CASE("log_density standard normal value", "[model]") {
  // Single component with cov_scale 1 at t=0 is the standard normal.
  MixtureSpec std_normal{{{1.0, Vec::Zero(2), 1.0}}, 2};
  CHECK_THAT(log_density(kSched, std_normal, Vec::Zero(2), 0.0),
             WithinAbs(kNegLog2Pi, 1e-12));
}

TEST_CASE("log_density symmetry of a symmetric mixture", "[model]") {
  MixtureSpec sym{{{0.5, vec2(1.5, 0.5), 0.2}, {0.5, vec2(-1.5, -0.5), 0.2}},
                  2};
  for (double t : {0.0, 0.3, 0.9}) {
    Vec x = vec2(0.7, -0.2);
    CHECK_THAT(log_density(kSched, sym, x, t),
               WithinAbs(log_density(kSched, sym, -x, t), 1e-13));
  }
}

TEST_CASE("density integrates to 1 by importance sampling", "[model]") {
  MixtureSpec spec = marginal(kSched, resolve(kWorld, {0, std::nullopt}), 0.5);
  // Proposal: broad isotropic Gaussian centred on the mixture.
  Vec center = vec2(alpha(kSched, 0.5) * 4.0, 0.0);
  double pvar = 4.0;
  Rng rng(314159);
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    Vec x = center + std::sqrt(pvar) * rng.normal_vec(2);
    double log_q = -0.5 * (x - center).squaredNorm() / pvar -
                   std::log(2.0 * M_PI * pvar);
    acc += std::exp(log_density(kSched, spec, x, 0.5) - log_q);
  }
  CHECK_THAT(acc / n, WithinAbs(1.0, 0.01));
}

TEST_CASE("score closed form for a single component", "[model]") {
  Vec mu = vec2(1.0, -2.0);
  double s2 = 0.3, t = 0.6;
  MixtureSpec spec{{{1.0, mu, s2}}, 2};
  Vec x = vec2(0.4, 0.9);
  double a = alpha(kSched, t);
  double c = a * a * s2 + sigma_sq(kSched, t);
  Vec expected = -(x - a * mu) / c;
  CHECK_THAT((score(kSched, spec, x, t) - expected).norm(),
             WithinAbs(0.0, 1e-14));
}

TEST_CASE("score symmetry on the axis", "[model]") {
  MixtureSpec sym{{{0.5, vec2(2.0, 0.0), 0.1}, {0.5, vec2(-2.0, 0.0), 0.1}}, 2};
  for (double y : {-1.0, 0.0, 2.5}) {
    Vec s = score(kSched, sym, vec2(0.0, y), 0.4);
    CHECK(s[0] == 0.0);  // exactly: responsibilities pair up
  }
}

TEST_CASE("score matches finite differences of log_density", "[model]") {
  MixtureSpec spec = resolve(kWorld, {2, 2});
  Rng rng(99);
  const double h = 1e-6;
  for (int i = 0; i < 100; ++i) {
    double t = 1e-3 + 0.999 * rng.uniform();
    Vec x = 3.0 * rng.normal_vec(2);
    Vec fd(2);
    for (int k = 0; k < 2; ++k) {
      Vec xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      fd[k] = (log_density(kSched, spec, xp, t) -
               log_density(kSched, spec, xm, t)) /
              (2 * h);
    }
    Vec s = score(kSched, spec, x, t);
    CHECK((s - fd).norm() <= 1e-5 * std::max(1.0, s.norm()));
  }
}

TEST_CASE("score/finite-difference property across 1000 probes", "[model]") {
  MixtureSpec spec = resolve(kWorld, {1, std::nullopt});
  Rng rng(1234);
  const double h = 1e-6;
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    double t = 1e-3 + (1.0 - 1e-3) * rng.uniform();
    Vec x = 2.5 * rng.normal_vec(2);
    Vec fd(2);
    for (int k = 0; k < 2; ++k) {
      Vec xp = x, xm = x;
      xp[k] += h;
      xm[k] -= h;
      fd[k] = (log_density(kSched, spec, xp, t) -
               log_density(kSched, spec, xm, t)) /
              (2 * h);
    }
    Vec s = score(kSched, spec, x, t);
    if (s.norm() < 1e-3) continue;  // relative error undefined near zeros
    CHECK((s - fd).norm() / s.norm() < 1e-4);
    ++checked;
  }
  CHECK(checked > 900);
}

TEST_CASE("epsilon point-mass identity and zero at the mean", "[model]") {
  Vec x0 = vec2(1.0, 2.0);
  World pm = single_component_world(x0, 0.0);
  double t = 0.7;
  Vec e = vec2(0.3, -1.1);
  Vec x = forward_noise_with(kSched, x0, t, e);
  Vec eps = epsilon(pm, kSched, x, t, {0, std::nullopt});
  CHECK_THAT((eps - e).norm(), WithinAbs(0.0, 1e-12));

  World blob = single_component_world(vec2(-1.0, 0.5), 0.2);
  Vec at_mean = alpha(kSched, t) * vec2(-1.0, 0.5);
  CHECK_THAT(epsilon(blob, kSched, at_mean, t, {0, std::nullopt}).norm(),
             WithinAbs(0.0, 1e-14));

  CHECK_THROWS_AS(epsilon(kWorld, kSched, x, 1e-4, {0, std::nullopt}),
                  DomainError);
}

TEST_CASE("epsilon stays finite far in the tails", "[model]") {
  Vec far = vec2(1e6, -1e6);
  Vec eps = epsilon(kWorld, kSched, far, 0.5, {0, std::nullopt});
  CHECK(eps.allFinite());
}

TEST_CASE("epsilon/score relation holds exactly", "[model]") {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    double t = 1e-3 + (1.0 - 1e-3) * rng.uniform();
    Vec x = 4.0 * rng.normal_vec(2);
    Condition y{static_cast<int>(i) % 4, std::nullopt};
    Vec e = epsilon(kWorld, kSched, x, t, y);
    Vec s = score(kWorld, kSched, x, t, y);
    CHECK((e + sigma(kSched, t) * s).norm() == 0.0);
  }
}

TEST_CASE("guided_score endpoints and linear combination", "[model]") {
  Vec x = vec2(0.8, -0.6);
  double t = 0.45;
  Condition y{3, std::nullopt};

  Vec sc = score(kWorld, kSched, x, t, y);
  Vec g1 = guided_score(kWorld, kSched, x, t, y, 1.0);
  CHECK(g1[0] == sc[0]);
  CHECK(g1[1] == sc[1]);

  Vec su = score(kSched, uncond_spec(kWorld), x, t);
  Vec g0 = guided_score(kWorld, kSched, x, t, y, 0.0);
  CHECK_THAT((g0 - su).norm(), WithinAbs(0.0, 1e-15));

  Vec g2 = guided_score(kWorld, kSched, x, t, y, 2.0);
  CHECK_THAT((g2 - (2.0 * sc - su)).norm(), WithinAbs(0.0, 1e-13));

  CHECK_THROWS_AS(guided_score(kWorld, kSched, x, t, y, -0.5),
                  ValidationError);
}

TEST_CASE("sample_data determinism, CLT bound, empty count", "[model]") {
  CHECK(sample_data(kWorld, {0, std::nullopt}, 0, 1).empty());

  auto a = sample_data(kWorld, {2, 1}, 25, 777);
  auto b = sample_data(kWorld, {2, 1}, 25, 777);
  REQUIRE(a.size() == 25);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  Vec mu = vec2(0.7, -0.3);
  World single = single_component_world(mu, 0.25);
  auto draws = sample_data(single, {0, std::nullopt}, 10000, 4242);
  Vec mean = Vec::Zero(2);
  for (const auto& d : draws) mean += d;
  mean /= 10000.0;
  for (int k = 0; k < 2; ++k)
    CHECK_THAT(mean[k], WithinAbs(mu[k], 3.0 * 0.5 / 100.0));
}

TEST_CASE("forward_noise endpoints and moments", "[model]") {
  Vec x0 = vec2(1.4, -0.2);
  Vec same = forward_noise(kSched, x0, 0.0, 9);
  CHECK(same == x0);

  CHECK(forward_noise_with(kSched, x0, 0.6, Vec::Zero(2)) ==
        alpha(kSched, 0.6) * x0);

  const int n = 10000;
  double t = 0.5;
  Vec mean = Vec::Zero(2);
  Mat cov = Mat::Zero(2, 2);
  std::vector<Vec> xs;
  xs.reserve(n);
  for (int i = 0; i < n; ++i)
    xs.push_back(forward_noise(kSched, x0, t, 1000 + static_cast<std::uint64_t>(i)));
  for (const auto& x : xs) mean += x;
  mean /= n;
  for (const auto& x : xs) cov += (x - mean) * (x - mean).transpose();
  cov /= n - 1;
  CHECK_THAT((mean - alpha(kSched, t) * x0).norm(), WithinAbs(0.0, 0.05));
  CHECK_THAT(cov(0, 0), WithinAbs(sigma_sq(kSched, t), 0.06));
  CHECK_THAT(cov(1, 1), WithinAbs(sigma_sq(kSched, t), 0.06));
  CHECK_THAT(cov(0, 1), WithinAbs(0.0, 0.05));
}

TEST_CASE("embedding determinism, shape, distinctness", "[model]") {
  Vec e1 = embedding(kWorld, {1, 2});
  Vec e2 = embedding(kWorld, {1, 2});
  CHECK(e1 == e2);
  CHECK(e1.size() == 2);

  // Distinct (content, style) pairs up to C*S = 1024.
  World big;
  big.dim = 2;
  for (int c = 0; c < 32; ++c)
    big.contents.push_back({MixtureComponent{1.0, Vec::Zero(2), 1.0}});
  for (int s = 0; s < 32; ++s)
    big.styles.push_back({Mat::Identity(2, 2), Vec::Zero(2), 1.0});
  std::vector<Vec> keys;
  for (int c = 0; c < 32; ++c) {
    keys.push_back(embedding(big, {c, std::nullopt}));
    for (int s = 0; s < 32; ++s) keys.push_back(embedding(big, {c, s}));
  }
  for (std::size_t i = 0; i < keys.size(); ++i)
    for (std::size_t j = i + 1; j < keys.size(); ++j)
      CHECK((keys[i] - keys[j]).norm() > 1e-9);
}

TEST_CASE("mixture validation", "[model]") {
  MixtureSpec bad_weights{{{0.6, Vec::Zero(2), 1.0}, {0.6, Vec::Zero(2), 1.0}},
                          2};
  CHECK_THROWS_AS(bad_weights.validate(), ValidationError);
  MixtureSpec bad_cov{{{1.0, Vec::Zero(2), -0.1}}, 2};
  CHECK_THROWS_AS(bad_cov.validate(), ValidationError);
  MixtureSpec empty{{}, 2};
  CHECK_THROWS_AS(empty.validate(), ValidationError);

  StyleTransform skew{Mat::Identity(2, 2), Vec::Zero(2), 1.0};
  skew.rotation(0, 1) = 0.5;
  CHECK_THROWS_AS(skew.validate(), ValidationError);
}
