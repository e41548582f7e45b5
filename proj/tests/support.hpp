#pragma once

#include <random>

#include "fedcomp/dataset.hpp"
#include "fedcomp/nn.hpp"
#include "fedcomp/rng.hpp"

namespace fedcomp::testing {

inline Batch random_batch(std::size_t n, std::size_t dim, std::size_t classes, Engine& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
  Batch b;
  b.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < b.inputs.rows(); ++i)
    for (Eigen::Index j = 0; j < b.inputs.cols(); ++j) b.inputs(i, j) = g(rng);
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(label(rng));
  return b;
}

inline Batch single_class_batch(std::size_t n, std::size_t dim, int cls, Engine& rng) {
  Batch b = random_batch(n, dim, 1, rng);
  b.labels.assign(n, cls);
  return b;
}

inline Dataset small_pool(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  SyntheticParams p;
  p.classes = classes;
  p.dim = 6;
  p.per_class = per_class;
  return generate_synthetic(p, seed);
}

}  // namespace fedcomp::testing
