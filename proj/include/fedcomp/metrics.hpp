#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fedcomp/error.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp {

// Per-class proportions: nonnegative, sums to 1, null class = exactly 0.
using Composition = std::vector<double>;

enum class Norm { l1, l2, linf };

struct DistanceTriple {
  double l1 = 0.0;
  double l2 = 0.0;
  double linf = 0.0;
};

inline double lp_distance(const Composition& x, const Composition& y, Norm p) {
  if (x.size() != y.size())
    throw ConfigError("lp_distance: length mismatch (" + std::to_string(x.size()) + " vs " +
                      std::to_string(y.size()) + ")");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(x[i] - y[i]);
    switch (p) {
      case Norm::l1: acc += d; break;
      case Norm::l2: acc += d * d; break;
      case Norm::linf: acc = std::max(acc, d); break;
    }
  }
  return p == Norm::l2 ? std::sqrt(acc) : acc;
}

inline DistanceTriple distances(const Composition& x, const Composition& y) {
  return {lp_distance(x, y, Norm::l1), lp_distance(x, y, Norm::l2), lp_distance(x, y, Norm::linf)};
}

// Uniform draw from the probability simplex (Dirichlet with all-ones
// concentration) over `support`.
inline Composition sample_simplex(std::size_t n, const std::vector<int>& support, Engine& rng) {
  std::exponential_distribution<double> expo(1.0);
  Composition out(n, 0.0);
  double sum = 0.0;
  for (int c : support) {
    out[static_cast<std::size_t>(c)] = expo(rng);
    sum += out[static_cast<std::size_t>(c)];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Mean distance between `truth` and random compositions. By default the
// guesser draws from the full N-simplex; with `reveal_nulls` the classes in
// `null_classes` are pinned to 0.
inline DistanceTriple random_guess_baseline(const Composition& truth, const std::vector<int>& null_classes,
                                            std::size_t trials, std::uint64_t seed,
                                            bool reveal_nulls = false) {
  if (trials == 0) throw ConfigError("random_guess_baseline: trials must be >= 1");
  if (truth.empty()) throw ConfigError("random_guess_baseline: empty truth");
  std::vector<int> support;
  for (std::size_t c = 0; c < truth.size(); ++c) {
    const bool is_null = std::find(null_classes.begin(), null_classes.end(), static_cast<int>(c)) != null_classes.end();
    if (!(reveal_nulls && is_null)) support.push_back(static_cast<int>(c));
  }
  if (support.empty()) throw ConfigError("random_guess_baseline: every class is revealed null");
  Engine rng = make_engine(seed, "guess");
  DistanceTriple mean;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto d = distances(sample_simplex(truth.size(), support, rng), truth);
    mean.l1 += d.l1;
    mean.l2 += d.l2;
    mean.linf += d.linf;
  }
  const auto k = static_cast<double>(trials);
  return {mean.l1 / k, mean.l2 / k, mean.linf / k};
}

}  // namespace fedcomp
