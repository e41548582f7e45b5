#pragma once

// Data-distribution decomposition of a victim's local update.
//
// Pipeline for one (user, round):
//   1. gradient change of the target layer, (theta_i^t - theta_global^{t-1}) / alpha;
//   2. null classes: class i is absent iff none of its m entries is positive;
//   3. gradient bases: one simulated full-batch SGD step from theta_global^{t-1}
//      on the auxiliary samples of each remaining class (g_c) and of their
//      union (calibrator g_u);
//   4. nonnegative scalar factors eta fitting sum_c eta_c g_c + eta_u g_u to
//      the victim's change, mapped to proportions (eta_c + eta_u) / sum.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fedcomp/dataset.hpp"
#include "fedcomp/error.hpp"
#include "fedcomp/fl.hpp"
#include "fedcomp/metrics.hpp"
#include "fedcomp/nn.hpp"

namespace fedcomp {

struct GradientChange {
  Vector values;  // N*m, row-major by class
  std::size_t class_count = 0;
  std::size_t round = 0;
  std::size_t user = 0;

  std::size_t width() const { return static_cast<std::size_t>(values.size()) / class_count; }
};

struct NullClassReport {
  std::vector<int> missing;
  double threshold = 0.0;
};

struct GradientBasisSet {
  std::size_t class_count = 0;
  std::vector<int> classes;          // remaining (non-null) classes, ascending
  std::vector<Vector> class_bases;   // g_c, aligned with `classes`
  Vector unified;                    // g_u
};

struct DecompositionResult {
  Composition composition;   // length N, zeros at the null classes
  std::vector<int> classes;  // classes carrying a factor
  std::vector<double> eta;   // eta_c aligned with `classes`
  double eta_u = 0.0;        // 0 when the calibrator is disabled
  double loss = 0.0;         // mean squared residual at the solution
  std::size_t backoffs = 0;
  std::size_t monotone_violations = 0;
};

struct DecomposeOptions {
  double beta = 0.05;
  std::size_t epochs = 1000;
  std::size_t max_backoffs = 10;
  bool use_calibrator = true;
};

struct AttackOptions {
  double threshold = 0.0;
  DecomposeOptions decompose;
  bool null_removal = true;
};

// ---------------------------------------------------------------------------

inline GradientChange extract_gradient_change(const Model& local, const Model& global_prev, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("extract_gradient_change: alpha must be > 0");
  require_congruent(local, global_prev, "extract_gradient_change");
  GradientChange g;
  g.values = (target_layer_flat(local) - target_layer_flat(global_prev)) / alpha;
  g.class_count = local.class_count;
  return g;
}

inline NullClassReport remove_null_classes(const GradientChange& g, double threshold = 0.0) {
  const std::size_t n = g.class_count;
  if (n == 0 || g.values.size() == 0 || static_cast<std::size_t>(g.values.size()) % n != 0)
    throw ConfigError("remove_null_classes: length is not divisible by the class count");
  if (!(threshold >= 0.0)) throw ConfigError("remove_null_classes: threshold must be >= 0");
  const std::size_t m = g.width();
  NullClassReport report;
  report.threshold = threshold;
  for (std::size_t i = 0; i < n; ++i) {
    bool present = false;
    for (std::size_t j = 0; j < m && !present; ++j)
      present = g.values(static_cast<Eigen::Index>(i * m + j)) > threshold;
    if (!present) report.missing.push_back(static_cast<int>(i));
  }
  if (report.missing.size() == n)
    throw DegenerateError("null-class removal flagged every class (zero or fully suppressed update)");
  return report;
}

inline std::vector<int> remaining_classes(std::size_t class_count, const std::vector<int>& missing) {
  std::vector<int> out;
  for (std::size_t c = 0; c < class_count; ++c)
    if (std::find(missing.begin(), missing.end(), static_cast<int>(c)) == missing.end())
      out.push_back(static_cast<int>(c));
  return out;
}

// One full-batch SGD step from `global_prev` on `batch`, read back as a
// gradient change of the target layer.
inline Vector simulated_change(const Model& global_prev, const Batch& batch, double alpha) {
  Model clean = global_prev;
  clean.train_dropout = 0.0;
  const auto lg = loss_and_gradients(clean, batch);
  return extract_gradient_change(sgd_step(clean, lg.grads, alpha), clean, alpha).values;
}

// g_u is the union step's change scaled by the number K of remaining
// classes. The auxiliary set is class balanced, so the union's mean-loss
// step is the average of the per-class bases and K times it is their sum;
// with that scaling h = sum_c (eta_c + eta_u) g_c and the factor sums read
// off as proportions directly.
inline GradientBasisSet construct_gradient_bases(const Model& global_prev, const AuxiliarySet& aux,
                                                 const std::vector<int>& missing, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("construct_gradient_bases: alpha must be > 0");
  if (aux.class_count() != global_prev.class_count)
    throw ConfigError("construct_gradient_bases: auxiliary class count does not match model");
  GradientBasisSet set;
  set.class_count = global_prev.class_count;
  set.classes = remaining_classes(set.class_count, missing);
  if (set.classes.empty()) throw ConfigError("construct_gradient_bases: no remaining classes");
  for (int c : set.classes) set.class_bases.push_back(simulated_change(global_prev, aux.batch_for({c}), alpha));
  set.unified = static_cast<double>(set.classes.size()) *
                simulated_change(global_prev, aux.batch_for(set.classes), alpha);
  return set;
}

// Projected gradient descent on the mean squared residual with eta >= 0.
//
// Target and bases share one rescaling that sets the objective's largest
// curvature to kDecomposeCurvature, so the default beta is exactly the 1/L
// step (monotone by the descent lemma) whatever the update's magnitude. The
// solution in eta is unchanged by the rescaling.
inline constexpr double kDecomposeCurvature = 20.0;

inline DecompositionResult decompose(const GradientChange& target, const GradientBasisSet& bases,
                                     const DecomposeOptions& opt = {}) {
  if (opt.epochs < 1) throw ConfigError("decompose: epochs must be >= 1");
  if (!(opt.beta > 0.0)) throw ConfigError("decompose: beta must be > 0");
  if (bases.classes.empty() || bases.classes.size() != bases.class_bases.size())
    throw ConfigError("decompose: empty or inconsistent basis set");
  const Eigen::Index n = target.values.size();
  for (const auto& g : bases.class_bases)
    if (g.size() != n) throw ConfigError("decompose: basis length does not match target");
  if (opt.use_calibrator && bases.unified.size() != n)
    throw ConfigError("decompose: calibrator length does not match target");

  const std::size_t k = bases.classes.size();
  const std::size_t p = k + (opt.use_calibrator ? 1 : 0);
  Matrix basis(n, static_cast<Eigen::Index>(p));
  for (std::size_t c = 0; c < k; ++c) basis.col(static_cast<Eigen::Index>(c)) = bases.class_bases[c];
  if (opt.use_calibrator) basis.col(static_cast<Eigen::Index>(k)) = bases.unified;

  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix gram = basis.transpose() * basis * inv_n;
  Vector rhs = basis.transpose() * target.values * inv_n;
  double tt = target.values.squaredNorm() * inv_n;
  const double lambda_max = Eigen::SelfAdjointEigenSolver<Matrix>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  if (!(lambda_max > 0.0) || !std::isfinite(lambda_max))
    throw DegenerateError("decompose: gradient bases are all zero");
  const double scale = kDecomposeCurvature / (2.0 * lambda_max);
  gram *= scale;
  rhs *= scale;
  tt *= scale;

  auto objective = [&](const Vector& eta) { return eta.dot(gram * eta) - 2.0 * rhs.dot(eta) + tt; };

  // The expanded quadratic loses ~eps * tt to cancellation near a zero
  // residual; increases below that are rounding, not divergence.
  const double slack = 64.0 * std::numeric_limits<double>::epsilon() * std::max(tt, 1.0);

  DecompositionResult res;
  Vector eta = Vector::Constant(static_cast<Eigen::Index>(p), 1.0 / static_cast<double>(k + 1));
  double loss = objective(eta);
  double beta = opt.beta;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    const Vector grad = 2.0 * (gram * eta - rhs);
    Vector next = (eta - beta * grad).cwiseMax(0.0);
    double next_loss = objective(next);
    while (next_loss > loss + slack) {
      if (res.backoffs == opt.max_backoffs) {
        ++res.monotone_violations;
        break;
      }
      ++res.backoffs;
      beta *= 0.5;
      next = (eta - beta * grad).cwiseMax(0.0);
      next_loss = objective(next);
    }
    eta = std::move(next);
    loss = next_loss;
  }

  res.classes = bases.classes;
  res.eta_u = opt.use_calibrator ? eta(static_cast<Eigen::Index>(k)) : 0.0;
  double denom = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    res.eta.push_back(eta(static_cast<Eigen::Index>(c)));
    denom += res.eta.back() + res.eta_u;
  }
  if (!(denom > 0.0)) throw DegenerateError("decompose: every scalar factor is zero, cannot normalize");
  res.composition.assign(bases.class_count, 0.0);
  for (std::size_t c = 0; c < k; ++c)
    res.composition[static_cast<std::size_t>(bases.classes[c])] = (res.eta[c] + res.eta_u) / denom;
  res.loss = (basis * eta - target.values).squaredNorm() * inv_n;
  return res;
}

// ---------------------------------------------------------------------------

struct AttackEntry {
  std::size_t user = 0;
  std::size_t round = 0;
  std::optional<std::string> anomaly;
  NullClassReport nulls;
  DecompositionResult decomposition;
  std::optional<Composition> truth;
  std::optional<DistanceTriple> distance;
  std::optional<bool> null_classes_correct;

  bool ok() const { return !anomaly.has_value(); }
};

inline std::vector<int> null_classes_of(const Composition& truth) {
  std::vector<int> out;
  for (std::size_t c = 0; c < truth.size(); ++c)
    if (truth[c] == 0.0) out.push_back(static_cast<int>(c));
  return out;
}

// extract -> remove nulls -> construct bases -> decompose. Degenerate
// inputs are recorded on the entry; configuration errors propagate.
inline AttackEntry attack_single_round(const RoundRecord& record, std::size_t user, const AuxiliarySet& aux,
                                       double alpha, const AttackOptions& opt = {},
                                       const std::optional<Composition>& truth = std::nullopt) {
  if (user >= record.locals.size())
    throw ConfigError("attack: user " + std::to_string(user) + " not present in round " + std::to_string(record.round));
  AttackEntry e;
  e.user = user;
  e.round = record.round;
  e.truth = truth;
  try {
    GradientChange g = extract_gradient_change(record.locals[user], record.global_prev, alpha);
    g.round = record.round;
    g.user = user;
    if (opt.null_removal) {
      e.nulls = remove_null_classes(g, opt.threshold);
    } else {
      e.nulls.threshold = opt.threshold;
      if (g.values.cwiseAbs().maxCoeff() == 0.0) throw DegenerateError("attack: zero update");
    }
    if (truth) e.null_classes_correct = e.nulls.missing == null_classes_of(*truth);
    const auto bases = construct_gradient_bases(record.global_prev, aux, e.nulls.missing, alpha);
    e.decomposition = decompose(g, bases, opt.decompose);
    if (truth) e.distance = distances(e.decomposition.composition, *truth);
  } catch (const DegenerateError& err) {
    e.anomaly = err.what();
  }
  return e;
}

// Entrywise mean of k single-round compositions, renormalized to 1.
inline Composition attack_multi_round(const std::vector<Composition>& rounds) {
  if (rounds.empty()) throw ConfigError("attack_multi_round: no single-round results");
  const std::size_t n = rounds.front().size();
  Composition mean(n, 0.0);
  for (const auto& r : rounds) {
    if (r.size() != n) throw ConfigError("attack_multi_round: inconsistent class counts");
    for (std::size_t c = 0; c < n; ++c) mean[c] += r[c];
  }
  double sum = 0.0;
  for (double v : mean) sum += v;
  if (!(sum > 0.0)) throw DegenerateError("attack_multi_round: all-zero compositions");
  for (double& v : mean) v /= sum;
  return mean;
}

}  // namespace fedcomp
