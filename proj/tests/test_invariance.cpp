// Copyright 2026 The ctgshift Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>

#include <gtest/gtest.h>

#include "ctgshift/invariance.hpp"
#include "oracles.hpp"

namespace ctgshift {
namespace {

ReprMatrix random_set(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  ReprMatrix m(n, d);
  for (double& v : m.data) v = rng.uniform(-scale, scale);
  return m;
}

TEST(Vrex, PopulationVariance) {
  const std::vector<double> equal{0.7, 0.7, 0.7};
  EXPECT_EQ(vrex_penalty(equal), 0.0);
  const std::vector<double> two{0.5, 0.7};
  EXPECT_NEAR(vrex_penalty(two), 0.01, 1e-15);
  // sum of risks + beta * Var
  EXPECT_NEAR(0.5 + 0.7 + 10.0 * vrex_penalty(two), 1.3, 1e-14);
  const std::vector<double> one{0.5};
  EXPECT_THROW(vrex_penalty(one), ConfigError);
}

TEST(Mmd, IdenticalSetsExactlyZero) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const ReprMatrix A = random_set(rng, 1 + rng.below(20), 1 + rng.below(6));
    EXPECT_EQ(mmd2(A, A, rng.uniform(0.1, 3.0)), 0.0);
  }
}

// Single pair: k(a,a) + k(b,b) - 2 k(a,b) = 2 - 2 exp(-0.5 * 2).
TEST(Mmd, SingletonHandValue) {
  const ReprMatrix A(1, 2, {1.0, 0.0});
  const ReprMatrix B(1, 2, {0.0, 1.0});
  EXPECT_NEAR(mmd2(A, B, 0.5), 2.0 - 2.0 * std::exp(-1.0), 1e-12);
  EXPECT_NEAR(mmd2(A, B, 0.5), 1.26424111765711, 1e-12);
}

TEST(Mmd, NonNegativeAndSymmetric) {
  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 1 + rng.below(5);
    const ReprMatrix A = random_set(rng, 1 + rng.below(10), d);
    const ReprMatrix B = random_set(rng, 1 + rng.below(10), d);
    const double g = rng.uniform(0.05, 5.0);
    const double ab = mmd2(A, B, g);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, mmd2(B, A, g), 1e-12);
  }
}

TEST(Mmd, SingletonsIncreaseWithDistance) {
  const ReprMatrix A(1, 1, {0.0});
  double prev = -1;
  for (double x = 0.1; x < 3.0; x += 0.1) {
    const double v = mmd2(A, ReprMatrix(1, 1, {x}), 1.0);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(Mmd, EmptySetIsDegenerate) {
  EXPECT_THROW(mmd2(ReprMatrix(0, 2), ReprMatrix(1, 2, {0, 0}), 1.0), DegenerateSampleError);
}

// Centered rows: A -> (+-1, +-1), B -> (+-1, -+1), so
// C_A = [[2, 2], [2, 2]], C_B = [[2, -2], [-2, 2]], diff = [[0, 4], [4, 0]],
// and (1/4) * 32 = 8.
TEST(Coral, HandWorkedExample) {
  const ReprMatrix A(2, 2, {0, 0, 2, 2});
  const ReprMatrix B(2, 2, {0, 0, 2, -2});
  EXPECT_NEAR(coral(A, B), 8.0, 1e-12);
  EXPECT_EQ(covariance(A), (std::vector<double>{2, 2, 2, 2}));
}

TEST(Coral, IdenticalZeroSymmetricTranslationInvariant) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 1 + rng.below(5);
    const ReprMatrix A = random_set(rng, 2 + rng.below(10), d);
    const ReprMatrix B = random_set(rng, 2 + rng.below(10), d);
    EXPECT_EQ(coral(A, A), 0.0);
    EXPECT_NEAR(coral(A, B), coral(B, A), 1e-14);
    ReprMatrix shifted = A;
    std::vector<double> offset(d);
    for (double& o : offset) o = rng.uniform(-5, 5);
    for (std::size_t i = 0; i < shifted.rows; ++i)
      for (std::size_t k = 0; k < d; ++k) shifted.row(i)[k] += offset[k];
    EXPECT_NEAR(coral(shifted, B), coral(A, B), 1e-9);
  }
}

TEST(Coral, TooFewPointsIsDegenerate) {
  EXPECT_THROW(coral(ReprMatrix(1, 2, {0, 0}), ReprMatrix(2, 2, {0, 0, 1, 1})),
               DegenerateSampleError);
}

// Penalty gradients w.r.t. representation rows against finite differences.
template <typename Penalty>
void check_set_gradient(Penalty penalty, std::size_t min_rows) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d = 1 + rng.below(4);
    ReprMatrix A = random_set(rng, min_rows + rng.below(6), d);
    ReprMatrix B = random_set(rng, min_rows + rng.below(6), d);
    ReprMatrix ga(A.rows, d), gb(B.rows, d);
    penalty(A, B, &ga, &gb);
    const double h = 1e-6;
    for (auto [X, G] : {std::pair{&A, &ga}, std::pair{&B, &gb}}) {
      for (std::size_t i = 0; i < X->data.size(); ++i) {
        const double saved = X->data[i];
        X->data[i] = saved + h;
        const double up = penalty(A, B, nullptr, nullptr);
        X->data[i] = saved - h;
        const double down = penalty(A, B, nullptr, nullptr);
        X->data[i] = saved;
        EXPECT_NEAR(G->data[i], (up - down) / (2 * h), 1e-7);
      }
    }
  }
}

TEST(Mmd, GradientMatchesFiniteDifferences) {
  check_set_gradient([](const ReprMatrix& a, const ReprMatrix& b, ReprMatrix* ga,
                        ReprMatrix* gb) { return mmd2(a, b, 0.8, ga, gb); },
                     1);
}

TEST(Coral, GradientMatchesFiniteDifferences) {
  check_set_gradient([](const ReprMatrix& a, const ReprMatrix& b, ReprMatrix* ga,
                        ReprMatrix* gb) { return coral(a, b, ga, gb); },
                     2);
}

TEST(Penalties, GradientVanishesOnCoincidentSets) {
  Rng rng(5);
  const ReprMatrix A = random_set(rng, 7, 3);
  ReprMatrix ga(7, 3), gb(7, 3);
  mmd2(A, A, 1.3, &ga, &gb);
  for (double v : ga.data) EXPECT_NEAR(v, 0.0, 1e-15);
  ReprMatrix ca(7, 3), cb(7, 3);
  coral(A, A, &ca, &cb);
  for (double v : ca.data) EXPECT_EQ(v, 0.0);
}

TEST(MedianHeuristic, TwoPoints) {
  const ReprMatrix A(1, 2, {0.0, 0.0});
  const ReprMatrix B(1, 2, {2.0, 0.0});
  EXPECT_DOUBLE_EQ(median_heuristic_gamma({&A, &B}), 1.0 / 8.0);
  EXPECT_DOUBLE_EQ(median_heuristic_gamma({&A, &A}), 1.0);  // zero median falls back to 1
}

// ---- combined objective ----

DgpConfig small_dgp() {
  DgpConfig c;
  c.vocab_size = 12;
  c.n_class_words = 3;
  c.seq_len_min = 2;
  c.seq_len_max = 6;
  c.metadata_buckets = 3;
  return c;
}

FeatConfig small_feat() {
  FeatConfig f;
  f.dim = 32;
  f.include_metadata = true;
  f.metadata_slots = 4;
  return f;
}

Model random_model(const FeatConfig& f, std::size_t d, Rng& rng) {
  Model m(f.total_dim(), d);
  for (double& p : m.params()) p = rng.uniform(-0.5, 0.5);
  return m;
}

TEST(TotalObjective, BetaZeroEqualsErm) {
  Rng rng(6);
  const FeatConfig f = small_feat();
  const std::vector<Environment> envs{sample_environment(small_dgp(), 0.9, 12, 0, 1),
                                      sample_environment(small_dgp(), 0.5, 9, 1, 2)};
  const Model m = random_model(f, 4, rng);
  const auto erm = total_objective(m, envs, f, {ObjectiveKind::kErm, 0.0, {}});
  EXPECT_NEAR(erm.value, env_risk(m, envs[0], f) + env_risk(m, envs[1], f), 1e-14);
  for (ObjectiveKind k : {ObjectiveKind::kVrex, ObjectiveKind::kMmd, ObjectiveKind::kCoral}) {
    const auto o = total_objective(m, envs, f, {k, 0.0, {}});
    EXPECT_EQ(o.value, erm.value);
    EXPECT_EQ(o.gradient, erm.gradient);
  }
}

TEST(TotalObjective, IdenticalEnvironmentsHaveZeroPenalty) {
  Rng rng(7);
  const FeatConfig f = small_feat();
  Environment e = sample_environment(small_dgp(), 0.9, 10, 0, 1);
  const std::vector<Environment> envs{e, e};
  const Model m = random_model(f, 3, rng);
  for (ObjectiveKind k : {ObjectiveKind::kVrex, ObjectiveKind::kMmd, ObjectiveKind::kCoral}) {
    const auto o = total_objective(m, envs, f, {k, 5.0, {}});
    EXPECT_EQ(o.penalty, 0.0) << to_string(k);
  }
}

TEST(TotalObjective, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  const FeatConfig f = small_feat();
  for (ObjectiveKind k :
       {ObjectiveKind::kErm, ObjectiveKind::kVrex, ObjectiveKind::kMmd, ObjectiveKind::kCoral}) {
    for (int t = 0; t < 5; ++t) {
      std::vector<Environment> envs;
      for (int e = 0; e < 3; ++e)
        envs.push_back(sample_environment(small_dgp(), rng.uniform(), 2 + rng.below(8), e, rng.next()));
      const Model m = random_model(f, 1 + rng.below(6), rng);
      RegularizerConfig rc{k, k == ObjectiveKind::kErm ? 0.0 : 3.0, 0.7};
      const auto o = total_objective(m, envs, f, rc);
      const auto fd = oracle::central_differences(
          m, [&](const Model& p) { return total_objective(p, envs, f, rc).value; });
      EXPECT_LT(oracle::max_rel_error(o.gradient.params(), fd), 1e-4) << to_string(k);
    }
  }
}

TEST(TotalObjective, MedianHeuristicResolvedWhenUnset) {
  Rng rng(9);
  const FeatConfig f = small_feat();
  const std::vector<Environment> envs{sample_environment(small_dgp(), 0.9, 8, 0, 1),
                                      sample_environment(small_dgp(), 0.2, 8, 1, 2)};
  const auto o = total_objective(random_model(f, 3, rng), envs, f, {ObjectiveKind::kMmd, 1.0, {}});
  ASSERT_TRUE(o.gamma.has_value());
  EXPECT_GT(*o.gamma, 0.0);
  EXPECT_TRUE(std::isfinite(o.value));
}

TEST(TotalObjective, Errors) {
  const FeatConfig f = small_feat();
  const Model m(f.total_dim(), 2);
  const std::vector<Environment> one{sample_environment(small_dgp(), 0.9, 8, 0, 1)};
  EXPECT_THROW(total_objective(m, one, f, {ObjectiveKind::kVrex, 1.0, {}}), ConfigError);
  EXPECT_NO_THROW(total_objective(m, one, f, {ObjectiveKind::kErm, 0.0, {}}));
  EXPECT_THROW(total_objective(m, one, f, {ObjectiveKind::kErm, -1.0, {}}), ConfigError);
  EXPECT_THROW(total_objective(m, {}, f, {ObjectiveKind::kErm, 0.0, {}}), ConfigError);
  EXPECT_THROW(objective_kind_from_string("IRM"), ConfigError);
}

}  // namespace
}  // namespace ctgshift
