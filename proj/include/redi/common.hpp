#pragma once

// Shared aliases, error types, and the seeded RNG wrapper used across the
// library. All randomness flows through Rng so that every consumer draws
// from an explicitly seeded stream (no hidden global state).

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace redi {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------- errors

// A value (typically a time) fell outside its documented domain.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A configuration or precondition violation; the message names the field.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A solver state exceeded the divergence guard; `step` is the grid index
// at which the blow-up was detected.
struct DivergenceError : std::runtime_error {
  int step;
  DivergenceError(const std::string& msg, int step_)
      : std::runtime_error(msg), step(step_) {}
};

// Mismatch between a knowledge base's provenance metadata and the
// requested run configuration.
struct CompatibilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization failure (unreadable path, corrupt payload).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// The four distinct knowledge-base load failures. Magic/truncation are
// file-level corruption (I/O); version/dim are format-level incompatibility.
struct BadMagicError : IoError {
  using IoError::IoError;
};
struct TruncatedFileError : IoError {
  using IoError::IoError;
};
struct VersionMismatchError : CompatibilityError {
  using CompatibilityError::CompatibilityError;
};
struct DimMismatchError : CompatibilityError {
  using CompatibilityError::CompatibilityError;
};

// ---------------------------------------------------------------- seeds

// Derived-stream offsets from the root seed. Documented here and in the
// README; every command derives its streams as root + offset (+ item id).
inline constexpr std::uint64_t kKbSeedOffset = 20'000'000;
inline constexpr std::uint64_t kQuerySeedOffset = 30'000'000;
inline constexpr std::uint64_t kBoundSeedOffset = 40'000'000;
inline constexpr std::uint64_t kLipschitzSeedOffset = 50'000'000;
inline constexpr std::uint64_t kGroundTruthSeedOffset = 60'000'000;

// Forward-noising draws its Gaussian from stream (seed + this offset) so a
// data draw at `seed` and its noising never share a stream. Inference and
// KB construction both follow the convention, which is what makes seed
// replays reproduce stored trajectories exactly.
inline constexpr std::uint64_t kNoiseStreamOffset = 1'000'003;

// ---------------------------------------------------------------- rng

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double normal() { return std::normal_distribution<double>{}(eng_); }

  double uniform() {
    return std::uniform_real_distribution<double>{0.0, 1.0}(eng_);
  }

  Vec normal_vec(Eigen::Index d) {
    Vec v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = normal();
    return v;
  }

  // Index into `weights` (need not be normalised), drawn by inverse CDF.
  int pick(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace redi
