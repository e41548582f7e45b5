#include <gtest/gtest.h>

#include <functional>
#include <limits>
#include <numeric>

#include "fedcomp/attack.hpp"
#include "support.hpp"

using namespace fedcomp;
using fedcomp::testing::single_class_batch;

namespace {

Vector gaussian(Eigen::Index n, Engine& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

struct Instance {
  GradientBasisSet bases;
  GradientChange target;
  Composition truth;
};

// target = sum_c a_c g_c with independent random g_c, g_u = sum_c g_c.
Instance exact_instance(std::size_t n_classes, const std::vector<int>& present, Eigen::Index dim, std::uint64_t seed) {
  Engine rng{seed};
  std::uniform_real_distribution<double> weight(0.05, 1.0);
  Instance in;
  in.bases.class_count = n_classes;
  in.bases.classes = present;
  in.bases.unified = Vector::Zero(dim);
  in.target.values = Vector::Zero(dim);
  in.target.class_count = n_classes;
  in.truth.assign(n_classes, 0.0);
  double total = 0.0;
  for (int c : present) {
    const Vector g = gaussian(dim, rng);
    const double a = weight(rng);
    in.bases.class_bases.push_back(g);
    in.bases.unified += g;
    in.target.values += a * g;
    in.truth[static_cast<std::size_t>(c)] = a;
    total += a;
  }
  for (double& v : in.truth) v /= total;
  return in;
}

// Brute force: every grid point r on the simplex with its best
// nonnegative scale, keep the smallest residual.
Composition grid_oracle(const Instance& in, double step) {
  const std::size_t k = in.bases.classes.size();
  Composition best_r;
  double best = std::numeric_limits<double>::infinity();
  const int ticks = static_cast<int>(std::lround(1.0 / step));
  std::vector<int> idx(k, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t pos, int left) {
    if (pos + 1 == k) {
      idx[pos] = left;
      Vector h = Vector::Zero(in.target.values.size());
      for (std::size_t c = 0; c < k; ++c) h += (idx[c] * step) * in.bases.class_bases[c];
      const double s = std::max(0.0, h.dot(in.target.values) / h.squaredNorm());
      const double res = (s * h - in.target.values).squaredNorm();
      if (res < best) {
        best = res;
        best_r.assign(in.bases.class_count, 0.0);
        for (std::size_t c = 0; c < k; ++c) best_r[static_cast<std::size_t>(in.bases.classes[c])] = idx[c] * step;
      }
      return;
    }
    for (int v = 0; v <= left; ++v) {
      idx[pos] = v;
      rec(pos + 1, left - v);
    }
  };
  rec(0, ticks);
  return best_r;
}

Model relu_net(std::size_t dim, std::size_t hidden, std::size_t classes, std::uint64_t seed) {
  return make_model(mlp_specs(dim, {hidden}, classes), classes, seed);
}

}  // namespace

TEST(Attack, ExtractGradientChangeReadsTargetLayerOverAlpha) {
  const Model g = relu_net(4, 5, 3, 1);
  Model l = g;
  l.layers.back().weight(2, 4) += 0.3;
  l.layers.front().weight(0, 0) += 9.0;
  const auto change = extract_gradient_change(l, g, 0.1);
  EXPECT_EQ(change.width(), 5u);
  for (Eigen::Index i = 0; i < change.values.size(); ++i)
    EXPECT_NEAR(change.values(i), i == 2 * 5 + 4 ? 3.0 : 0.0, 1e-12);
  EXPECT_THROW(extract_gradient_change(l, g, 0.0), ConfigError);
}

TEST(Attack, NullRemovalThresholdSemantics) {
  GradientChange g;
  g.class_count = 3;
  g.values.resize(6);
  g.values << -1, 0, 0.5, -2, 0, 0;
  EXPECT_EQ(remove_null_classes(g).missing, (std::vector<int>{0, 2}));
  EXPECT_EQ(remove_null_classes(g, 0.4).missing, (std::vector<int>{0, 2}));
  g.values(2) = 0.3;
  EXPECT_THROW(remove_null_classes(g, 0.4), DegenerateError);
  g.values.setZero();
  EXPECT_THROW(remove_null_classes(g), DegenerateError);
  g.values.resize(5);
  EXPECT_THROW(remove_null_classes(g), ConfigError);
}

// Classes a user never holds receive only nonpositive updates, however many
// local steps are taken, so they are always flagged.
TEST(Attack, AbsentClassesAreAlwaysFlagged) {
  const auto pool = fedcomp::testing::small_pool(5, 40, 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto users = partition(pool, {CompositionSpec::from_counts({10, 0, 25, 0, 3})}, seed);
    const Model g = relu_net(pool.dim(), 12, 5, seed);
    const Model l = local_train(g, users[0], 0.2, 2, 8, seed);
    const auto report = remove_null_classes(extract_gradient_change(l, g, 0.2));
    for (int c : {1, 3}) EXPECT_NE(std::find(report.missing.begin(), report.missing.end(), c), report.missing.end());
  }
}

TEST(Attack, SingleClassChangeHasSignStructure) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Engine rng{seed};
    const Model g = relu_net(6, 10, 4, seed);
    const int cls = static_cast<int>(seed % 4);
    const Vector v = simulated_change(g, single_class_batch(5, 6, cls, rng), 0.05);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (i / 10 == cls)
        EXPECT_GE(v(i), 0.0);
      else
        EXPECT_LE(v(i), 0.0);
    }
  }
}

TEST(Attack, CalibratorIsSumOfClassBasesOnBalancedAux) {
  const auto pool = fedcomp::testing::small_pool(4, 20, 2);
  const auto [aux, rest] = reserve_auxiliary(pool, 5, 2);
  const Model g = relu_net(pool.dim(), 8, 4, 2);
  const auto set = construct_gradient_bases(g, aux, {2}, 0.05);
  EXPECT_EQ(set.classes, (std::vector<int>{0, 1, 3}));
  Vector sum = Vector::Zero(set.unified.size());
  for (const auto& b : set.class_bases) sum += b;
  EXPECT_TRUE(set.unified.isApprox(sum, 1e-10));
}

TEST(Attack, SimulatedChangeIgnoresTrainingDropout) {
  Engine rng{1};
  Model g = relu_net(4, 6, 3, 1);
  const Batch b = single_class_batch(4, 4, 1, rng);
  const Vector clean = simulated_change(g, b, 0.1);
  g.train_dropout = 0.5;
  EXPECT_EQ(simulated_change(g, b, 0.1), clean);
}

TEST(Attack, DecomposeRecoversExactCombinations) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto in = exact_instance(6, {0, 2, 3, 5}, 120, seed);
    const auto res = decompose(in.target, in.bases);
    EXPECT_LE(lp_distance(res.composition, in.truth, Norm::linf), 1e-3) << "seed " << seed;
    EXPECT_EQ(res.composition[1], 0.0);
    EXPECT_NEAR(std::accumulate(res.composition.begin(), res.composition.end(), 0.0), 1.0, 1e-12);
    EXPECT_EQ(res.monotone_violations, 0u);
  }
}

TEST(Attack, DecomposeMatchesGridOracleOnNoisyTargets) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto in = exact_instance(3, {0, 1, 2}, 60, 50 + seed);
    Engine rng{seed};
    in.target.values += 0.1 * gaussian(60, rng);
    const double step = 0.01;
    const auto oracle = grid_oracle(in, step);
    const auto res = decompose(in.target, in.bases, {0.05, 5000, 10, true});
    EXPECT_LE(lp_distance(res.composition, oracle, Norm::linf), step) << "seed " << seed;
  }
}

TEST(Attack, DecomposeIsScaleInvariant) {
  auto in = exact_instance(4, {0, 1, 3}, 80, 9);
  Engine rng{9};
  in.target.values += 0.05 * gaussian(80, rng);
  const auto base = decompose(in.target, in.bases);
  auto scaled = in;
  scaled.target.values *= 1e-4;
  for (auto& g : scaled.bases.class_bases) g *= 1e-4;
  scaled.bases.unified *= 1e-4;
  EXPECT_LE(lp_distance(decompose(scaled.target, scaled.bases).composition, base.composition, Norm::linf), 1e-9);
  // Scaling only the target scales eta but leaves the ratio.
  auto louder = in;
  louder.target.values *= 7.0;
  const auto r7 = decompose(louder.target, louder.bases);
  EXPECT_LE(lp_distance(r7.composition, base.composition, Norm::linf), 1e-6);
}

TEST(Attack, DecomposeDegenerateInputs) {
  auto in = exact_instance(3, {0, 1}, 10, 1);
  for (auto& g : in.bases.class_bases) g.setZero();
  in.bases.unified.setZero();
  EXPECT_THROW(decompose(in.target, in.bases), DegenerateError);
  auto neg = exact_instance(3, {0, 1}, 10, 2);
  neg.target.values = -neg.bases.unified;  // best nonnegative fit is eta = 0
  EXPECT_THROW(decompose(neg.target, neg.bases), DegenerateError);
}

TEST(Attack, SingleRoundOnRecordedRound) {
  const auto pool = fedcomp::testing::small_pool(4, 120, 4);
  auto [aux, rest] = reserve_auxiliary(pool, 10, 4);
  const std::vector<CompositionSpec> specs = {CompositionSpec::from_counts({25, 25, 25, 25}),
                                              CompositionSpec::from_counts({60, 0, 20, 0})};
  const auto users = partition(rest, specs, 4);
  FLConfig cfg;
  cfg.rounds = 2;
  cfg.learning_rate = 0.02;
  const auto h = run_federation(cfg, relu_net(pool.dim(), 32, 4, 4), users);
  for (std::size_t u = 0; u < 2; ++u) {
    const auto e = attack_single_round(h.rounds[1], u, aux, cfg.learning_rate, {}, specs[u].proportions());
    ASSERT_TRUE(e.ok()) << *e.anomaly;
    EXPECT_TRUE(*e.null_classes_correct);
    EXPECT_LT(e.distance->linf, 0.1);
    EXPECT_EQ(e.round, 2u);
  }
  EXPECT_THROW(attack_single_round(h.rounds[1], 5, aux, cfg.learning_rate), ConfigError);
}

TEST(Attack, ZeroUpdateIsAnAnomalyNotACrash) {
  const auto pool = fedcomp::testing::small_pool(3, 10, 5);
  const auto [aux, rest] = reserve_auxiliary(pool, 3, 5);
  RoundRecord r;
  r.round = 1;
  r.global_prev = relu_net(pool.dim(), 4, 3, 5);
  r.locals = {r.global_prev};
  r.sizes = {1};
  EXPECT_FALSE(attack_single_round(r, 0, aux, 0.1).ok());
  AttackOptions no_removal;
  no_removal.null_removal = false;
  EXPECT_FALSE(attack_single_round(r, 0, aux, 0.1, no_removal).ok());
}

TEST(Attack, MultiRoundIsRenormalizedMean) {
  const auto m = attack_multi_round({{0.5, 0.5, 0.0}, {0.3, 0.6, 0.1}});
  EXPECT_NEAR(m[0], 0.4, 1e-15);
  EXPECT_NEAR(m[1], 0.55, 1e-15);
  EXPECT_NEAR(m[2], 0.05, 1e-15);
  EXPECT_THROW(attack_multi_round({}), ConfigError);
  EXPECT_THROW(attack_multi_round({{0.5, 0.5}, {1.0}}), ConfigError);
}

TEST(Attack, OrthonormalExamples) {
  GradientBasisSet b;
  b.class_count = 2;
  b.classes = {0, 1};
  b.class_bases = {Vector::Unit(2, 0), Vector::Unit(2, 1)};
  b.unified = Vector::Ones(2);
  GradientChange t;
  t.class_count = 2;
  t.values = Vector(2);
  t.values << 0.3, 0.7;
  auto r = decompose(t, b).composition;
  EXPECT_NEAR(r[0], 0.3, 1e-3);
  EXPECT_NEAR(r[1], 0.7, 1e-3);
  t.values = b.unified;
  r = decompose(t, b).composition;
  EXPECT_NEAR(r[0], 0.5, 1e-3);
  t.values = b.class_bases[1];
  r = decompose(t, b).composition;
  EXPECT_NEAR(r[1], 1.0, 1e-3);
}

// With g_u = sum g_c, moving delta from every eta_c onto eta_u leaves h and
// therefore the objective and r unchanged.
TEST(Attack, RatioInvarianceUnderCalibratorMassShift) {
  const auto in = exact_instance(5, {0, 1, 4}, 40, 77);
  const std::vector<double> eta = {0.5, 0.3, 0.9};
  const double eta_u = 0.1, delta = 0.2;
  Vector h1 = eta_u * in.bases.unified, h2 = (eta_u + delta) * in.bases.unified;
  double d1 = 0.0, d2 = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    h1 += eta[c] * in.bases.class_bases[c];
    h2 += (eta[c] - delta) * in.bases.class_bases[c];
    d1 += eta[c] + eta_u;
    d2 += eta[c] - delta + eta_u + delta;
  }
  EXPECT_TRUE(h1.isApprox(h2, 1e-12));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR((eta[c] + eta_u) / d1, (eta[c] - delta + eta_u + delta) / d2, 1e-15);
}

TEST(Attack, BasisCountAndDegenerateUnion) {
  const auto pool = fedcomp::testing::small_pool(4, 20, 8);
  const auto [aux, rest] = reserve_auxiliary(pool, 5, 8);
  const Model g = relu_net(pool.dim(), 8, 4, 8);
  const auto one = construct_gradient_bases(g, aux, {0, 1, 3}, 0.05);
  ASSERT_EQ(one.class_bases.size(), 1u);
  EXPECT_TRUE(one.unified.isApprox(one.class_bases[0], 1e-12));
  EXPECT_EQ(construct_gradient_bases(g, aux, {}, 0.05).class_bases.size() + 1, 5u);
  EXPECT_THROW(construct_gradient_bases(g, aux, {0, 1, 2, 3}, 0.05), ConfigError);
}

TEST(Attack, CompositionIsAProbabilityVectorWithZerosOnNulls) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto in = exact_instance(8, {1, 2, 6}, 30, seed);
    Engine rng{seed};
    GradientChange noisy = in.target;
    noisy.values += 0.5 * gaussian(30, rng);
    const auto r = decompose(noisy, in.bases).composition;
    double sum = 0.0;
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_GE(r[c], 0.0);
      if (c != 1 && c != 2 && c != 6) {
        EXPECT_EQ(r[c], 0.0);
      }
      sum += r[c];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}
