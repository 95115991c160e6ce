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

#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "ctgshift/selection.hpp"
#include "oracles.hpp"
#include "scenarios.hpp"

namespace ctgshift {
namespace {

using scenario::InversionScenario;
using scenario::inversion_scenario;
using scenario::selection_train;
using scenario::constant_model;
using scenario::token_model;
using scenario::labeled;


// Middle-tercile loss computed from checkpoint JSON with the dense oracle.
double oracle_middle_loss(const Model& m, const InversionScenario& s, const FeatConfig& f) {
  const auto ckpt = model_to_json(m);
  std::vector<std::size_t> order(s.data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.splitter[a] < s.splitter[b]; });
  const std::size_t n = s.data.size();
  double loss = 0;
  std::size_t count = 0;
  for (std::size_t r = n / 3; r < 2 * n / 3; ++r) {
    const Example& ex = s.data[order[r]];
    const double p = oracle::dense_forward(ckpt, featurize(ex, f)).prob;
    const double y = ex.y_obs > 0 ? 1.0 : 0.0;
    loss -= y * std::log(std::max(p, 1e-12)) + (1 - y) * std::log(std::max(1 - p, 1e-12));
    ++count;
  }
  return loss / static_cast<double>(count);
}

TEST(LooSelect, PicksInvariantBetaOnInvertedMiddle) {
  const InversionScenario s = inversion_scenario(1, 900);
  const TrainConfig t = selection_train(3);
  const RegularizerConfig base{ObjectiveKind::kVrex, 0.0, {}};
  const SelectionReport rep = loo_select(s.data, s.splitter, {0.0, 10.0}, t, base);
  EXPECT_EQ(rep.chosen_beta, 10.0);
  ASSERT_EQ(rep.candidates.size(), 2u);

  // Brute-force rescoring of the same trainings.
  const TercileSplit split = tercile_split(s.data, s.splitter);
  for (const auto& [beta, score] : rep.candidates) {
    RegularizerConfig r = base;
    r.beta = beta;
    const Model m = train({split.low, split.high}, t, r);
    EXPECT_NEAR(oracle_middle_loss(m, s, t.feat), score, 1e-9) << "beta " << beta;
  }
  EXPECT_LT(rep.candidates[1].second, rep.candidates[0].second);
}

TEST(LooSelect, DeterministicAndReturnsGridMember) {
  const InversionScenario s = inversion_scenario(2, 120);
  TrainConfig t = selection_train(4);
  t.epochs = 5;
  const std::vector<double> betas{5.0, 1.0, 10.0};
  const RegularizerConfig base{ObjectiveKind::kVrex, 0.0, {}};
  const SelectionReport a = loo_select(s.data, s.splitter, betas, t, base);
  const SelectionReport b = loo_select(s.data, s.splitter, betas, t, base);
  EXPECT_EQ(a.candidates, b.candidates);
  EXPECT_EQ(a.chosen_beta, b.chosen_beta);
  EXPECT_NE(std::find(betas.begin(), betas.end(), a.chosen_beta), betas.end());
  EXPECT_EQ(a.candidates.size(), betas.size());
}

TEST(LooSelect, SingleCandidateAndErrors) {
  const InversionScenario s = inversion_scenario(3, 30);
  TrainConfig t = selection_train(1);
  t.epochs = 1;
  EXPECT_EQ(loo_select(s.data, s.splitter, {5.0}, t, {ObjectiveKind::kVrex, 0, {}}).chosen_beta, 5.0);
  EXPECT_THROW(loo_select(s.data, s.splitter, {}, t, {}), ConfigError);
  const std::vector<double> flat(s.data.size(), 1.0);
  EXPECT_THROW(loo_select(s.data, flat, {1.0}, t, {}), DegenerateSampleError);
}

TEST(Terciles, RankBasedStableSplit) {
  std::vector<Example> data(9);
  for (std::size_t i = 0; i < data.size(); ++i) data[i].tokens = {static_cast<TokenId>(3 + i)};
  const std::vector<double> f{5, 1, 1, 9, 3, 3, 3, 7, 0};
  const TercileSplit s = tercile_split(data, f);
  auto ids = [](const Environment& e) {
    std::vector<TokenId> out;
    for (const auto& ex : e.examples) out.push_back(ex.tokens[0]);
    return out;
  };
  EXPECT_EQ(ids(s.low), (std::vector<TokenId>{11, 4, 5}));
  EXPECT_EQ(ids(s.middle), (std::vector<TokenId>{7, 8, 9}));
  EXPECT_EQ(ids(s.high), (std::vector<TokenId>{3, 10, 6}));
}

TEST(OracleSelect, ArgmaxWithSmallerBetaOnTies) {
  FeatConfig f;
  f.dim = 64;
  f.normalize = false;
  // Four positives (token 3) and six negatives (token 4).
  const Environment val = labeled({{3, 1}, {3, 1}, {3, 1}, {3, 1}, {4, -1},
                                   {4, -1}, {4, -1}, {4, -1}, {4, -1}, {4, -1}});
  const Model all_pos = constant_model(f, 5.0);   // F1 = 2*4/(8+6) = 4/7
  const Model exact = token_model(f, 3);          // F1 = 1
  const SelectionReport best =
      oracle_select({{1.0, all_pos}, {5.0, exact}, {10.0, all_pos}}, val, f);
  EXPECT_EQ(best.chosen_beta, 5.0);
  EXPECT_NEAR(best.candidates[0].second, 4.0 / 7.0, 1e-15);
  EXPECT_EQ(best.candidates[1].second, 1.0);

  const SelectionReport tie = oracle_select({{5.0, exact}, {1.0, exact}}, val, f);
  EXPECT_EQ(tie.chosen_beta, 1.0);
  EXPECT_EQ(oracle_select({{10.0, all_pos}}, val, f).chosen_beta, 10.0);
}

TEST(OracleSelect, LossTiesAlsoPreferSmallerBeta) {
  EXPECT_EQ(detail::pick_beta({{5.0, 0.3}, {1.0, 0.3}, {10.0, 0.4}}, false), 1.0);
  EXPECT_EQ(detail::pick_beta({{5.0, 0.6}, {1.0, 0.4}}, true), 5.0);
}

TEST(OracleSelect, SingleClassValidationIsUndefined) {
  FeatConfig f;
  f.dim = 64;
  const Environment val = labeled({{3, 1}, {3, 1}});
  EXPECT_THROW(oracle_select({{1.0, constant_model(f, 0.0)}}, val, f), MetricUndefinedError);
  EXPECT_THROW(oracle_select({}, val, f), ConfigError);
}

TEST(ValidationSplit, HalvesAndIsSeeded) {
  const Environment env = sample_environment(DgpConfig{}, 0.3, 101, 4, 1);
  const auto [val, test] = split_validation_test(env, 7);
  EXPECT_EQ(val.size(), 50u);
  EXPECT_EQ(test.size(), 51u);
  const auto again = split_validation_test(env, 7);
  EXPECT_EQ(again.first, val);
  EXPECT_NE(split_validation_test(env, 8).first, val);
}

TEST(SelectionReport, Json) {
  SelectionReport r;
  r.candidates = {{1.0, 0.5}, {5.0, 0.25}};
  r.chosen_beta = 5.0;
  const auto j = selection_report_json(r);
  EXPECT_EQ(j["protocol"], "LOO");
  EXPECT_EQ(j["metric"], "LOSS");
  EXPECT_EQ(j["candidates"].size(), 2u);
  EXPECT_EQ(j["chosen_beta"], 5.0);
}

}  // namespace
}  // namespace ctgshift
