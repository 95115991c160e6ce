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

#include "ctgshift/model.hpp"
#include "oracles.hpp"

namespace ctgshift {
namespace {

DgpConfig small_dgp() {
  DgpConfig c;
  c.vocab_size = 12;
  c.n_class_words = 3;
  c.seq_len_min = 2;
  c.seq_len_max = 6;
  c.metadata_buckets = 3;
  return c;
}

FeatConfig small_feat(std::size_t dim) {
  FeatConfig f;
  f.dim = dim;
  f.include_metadata = true;
  f.metadata_slots = 4;
  return f;
}

Model random_model(std::size_t D, std::size_t d, Rng& rng, double scale = 0.5) {
  Model m(D, d);
  for (double& p : m.params()) p = rng.uniform(-scale, scale);
  return m;
}

TEST(Model, ZeroParametersGiveOneHalf) {
  const FeatConfig f = small_feat(64);
  const Model m(f.total_dim(), 4);
  for (const auto& ex : sample_environment(small_dgp(), 0.9, 20, 0, 1).examples)
    EXPECT_EQ(forward(m, featurize(ex, f)).prob, 0.5);
}

TEST(Model, ZeroInputGivesSigmoidOfOutputBias) {
  Model m = Model::initialized(32, 5, 3);
  m.b2() = 0.7;
  FeatureVector zero;
  zero.dim = 32;
  const auto r = forward(m, zero);
  for (double v : r.repr) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(r.prob, 1.0 / (1.0 + std::exp(-0.7)));
}

TEST(Model, InitializationRanges) {
  const Model m = Model::initialized(64, 8, 9);
  for (double w : m.W1()) EXPECT_LT(std::abs(w), 0.1);
  for (double w : m.w2()) EXPECT_LT(std::abs(w), 0.1);
  for (double b : m.b1()) EXPECT_EQ(b, 0.0);
  EXPECT_EQ(m.b2(), 0.0);
  EXPECT_EQ(m, Model::initialized(64, 8, 9));
}

TEST(Model, MatchesDenseOracle) {
  Rng rng(11);
  const FeatConfig f = small_feat(64);
  const Environment env = sample_environment(small_dgp(), 0.7, 30, 0, 2);
  for (int t = 0; t < 10; ++t) {
    const Model m = random_model(f.total_dim(), 1 + rng.below(8), rng, 1.0);
    const auto ckpt = model_to_json(m);
    for (const auto& ex : env.examples) {
      const FeatureVector x = featurize(ex, f);
      const auto fast = forward(m, x);
      const auto slow = oracle::dense_forward(ckpt, x);
      EXPECT_NEAR(fast.prob, slow.prob, 1e-12);
      for (std::size_t r = 0; r < fast.repr.size(); ++r) {
        EXPECT_NEAR(fast.repr[r], slow.repr[r], 1e-12);
        EXPECT_LT(std::abs(fast.repr[r]), 1.0);
      }
    }
  }
}

TEST(Model, StableSigmoid) {
  EXPECT_EQ(sigmoid(-709.0) >= 0.0, true);
  EXPECT_TRUE(std::isfinite(sigmoid(-709.0)));
  EXPECT_TRUE(std::isfinite(sigmoid(709.0)));
  EXPECT_GT(sigmoid(-700.0), 0.0);
  EXPECT_EQ(sigmoid(0.0), 0.5);
}

TEST(Model, DimensionMismatchIsContractViolation) {
  const Model m(32, 2);
  FeatureVector x;
  x.dim = 64;
  EXPECT_THROW(forward(m, x), ContractViolation);
}

TEST(EnvRisk, ConstantHalfIsLn2) {
  const FeatConfig f = small_feat(64);
  const Model m(f.total_dim(), 3);
  EXPECT_NEAR(env_risk(m, sample_environment(small_dgp(), 0.8, 40, 0, 3), f), std::log(2.0), 1e-15);
}

TEST(EnvRisk, PerfectPredictorNearZero) {
  const FeatConfig f = small_feat(64);
  Environment env = sample_environment(small_dgp(), 0.8, 10, 0, 3);
  for (auto& ex : env.examples) ex.y_obs = 1;
  Model m(f.total_dim(), 2);
  m.b2() = 100.0;
  EXPECT_LT(env_risk(m, env, f), 1e-11);
}

// Hand arithmetic: W1 = 0 makes repr = 0, so prob = sigmoid(ln 3) = 3/4 for
// every example. Labels (+1, +1, -1):
//   risk = (2 ln(4/3) + ln 4) / 3 = (0.5753641449 + 1.3862943611) / 3.
TEST(EnvRisk, ThreeExampleToy) {
  const FeatConfig f = small_feat(64);
  Environment env = sample_environment(small_dgp(), 0.8, 3, 0, 3);
  env.examples[0].y_obs = 1;
  env.examples[1].y_obs = 1;
  env.examples[2].y_obs = -1;
  Model m(f.total_dim(), 2);
  for (double& w : m.w2()) w = 0.37;
  m.b2() = std::log(3.0);
  EXPECT_NEAR(env_risk(m, env, f), 0.6538861687, 1e-9);
}

TEST(GradEnvRisk, ZeroAtSaturatedCorrectPrediction) {
  const FeatConfig f = small_feat(64);
  Environment env = sample_environment(small_dgp(), 0.8, 2, 0, 5);
  env.examples.resize(1);
  env.examples[0].y_obs = 1;
  Rng rng(1);
  Model m = random_model(f.total_dim(), 3, rng);
  m.b2() = 800.0;
  const Gradient g = grad_env_risk(m, env, f);
  for (double v : g.params()) EXPECT_EQ(v, 0.0);
}

TEST(GradEnvRisk, MatchesFiniteDifferences) {
  Rng rng(21);
  for (int t = 0; t < 20; ++t) {
    FeatConfig f = small_feat(std::size_t{16} << rng.below(3));
    f.normalize = rng.bernoulli(0.5);
    const Environment env =
        sample_environment(small_dgp(), rng.uniform(), 2 + rng.below(15), 0, rng.next());
    const Model m = random_model(f.total_dim(), 1 + rng.below(8), rng);
    const Gradient g = grad_env_risk(m, env, f);
    const auto fd = oracle::central_differences(m, [&](const Model& p) { return env_risk(p, env, f); });
    EXPECT_LT(oracle::max_rel_error(g.params(), fd), 1e-4) << "instance " << t;
  }
}

TEST(GradEnvRisk, MeanOfPerExampleGradients) {
  Rng rng(4);
  const FeatConfig f = small_feat(32);
  const Environment env = sample_environment(small_dgp(), 0.6, 8, 0, 6);
  const Model m = random_model(f.total_dim(), 4, rng);
  const Gradient full = grad_env_risk(m, env, f);
  Gradient acc = m.zeros_like();
  for (const auto& ex : env.examples) {
    Environment one{0, 0.6, {ex}};
    acc.axpy(1.0 / env.size(), grad_env_risk(m, one, f));
  }
  for (std::size_t i = 0; i < acc.params().size(); ++i)
    EXPECT_NEAR(acc.params()[i], full.params()[i], 1e-14);
}

TEST(Model, CheckpointRoundTrip) {
  Rng rng(8);
  const Model m = random_model(40, 3, rng);
  const std::string text = model_to_json(m).dump();
  EXPECT_EQ(model_from_json(nlohmann::json::parse(text)), m);
  auto bad = model_to_json(m);
  bad["b1"] = std::vector<double>{1.0};
  EXPECT_THROW(model_from_json(bad), ConfigError);
}

}  // namespace
}  // namespace ctgshift
