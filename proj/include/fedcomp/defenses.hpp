#pragma once

// Client-side perturbations of the local update, applied before the server
// observes it.

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "fedcomp/error.hpp"
#include "fedcomp/nn.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp {

enum class DefenseKind { none, dropout, dp };

struct DefenseConfig {
  DefenseKind kind = DefenseKind::none;
  double rate = 0.0;        // dropout
  double sigma = 0.0;       // dp noise multiplier
  double clip_norm = 1.0;   // dp L2 clipping bound C

  static DefenseConfig none() { return {}; }
  static DefenseConfig dropout(double rate) { return {DefenseKind::dropout, rate, 0.0, 1.0}; }
  static DefenseConfig dp(double sigma, double clip_norm) { return {DefenseKind::dp, 0.0, sigma, clip_norm}; }

  void validate() const {
    if (kind == DefenseKind::dropout && !(rate >= 0.0 && rate < 1.0))
      throw ConfigError("defense.rate: must lie in [0,1)");
    if (kind == DefenseKind::dp) {
      if (!(sigma >= 0.0)) throw ConfigError("defense.sigma: must be >= 0");
      if (!(clip_norm > 0.0)) throw ConfigError("defense.clip: must be > 0");
    }
  }
};

inline std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::none: return "none";
    case DefenseKind::dropout: return "dropout";
    case DefenseKind::dp: return "dp";
  }
  return "?";
}

// Scales `delta` down to L2 norm `clip_norm` if it is longer.
inline Vector clip_l2(const Vector& delta, double clip_norm) {
  const double norm = delta.norm();
  if (norm <= clip_norm || norm == 0.0) return delta;
  return delta * (clip_norm / norm);
}

// Gaussian mechanism on a whole-model update: clip to global L2 norm C, then
// add N(0, (sigma*C)^2) independently to every entry.
inline Vector apply_dp(const Vector& delta, double sigma, double clip_norm, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("apply_dp: sigma must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("apply_dp: clip norm must be > 0");
  Vector out = clip_l2(delta, clip_norm);
  if (sigma == 0.0) return out;
  Engine rng{seed};
  std::normal_distribution<double> gauss(0.0, sigma * clip_norm);
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) += gauss(rng);
  return out;
}

// Model variant whose hidden activations are dropped during local training.
inline Model dropout_model(const Model& model, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must lie in [0,1)");
  Model m = model;
  m.train_dropout = rate;
  return m;
}

}  // namespace fedcomp
