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

#pragma once

// Choosing the penalty weight beta: leave-one-environment-out on terciles of
// a splitter feature (score: held-out loss), or oracle validation on a
// deployment sample (score: F1).

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctgshift/corpus.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/invariance.hpp"
#include "ctgshift/metrics.hpp"
#include "ctgshift/model.hpp"
#include "ctgshift/random.hpp"
#include "ctgshift/trainer.hpp"

namespace ctgshift {

enum class SelectionProtocol { kLeaveOneOut, kOracle };
enum class SelectionMetric { kLoss, kF1 };

struct SelectionReport {
  std::vector<std::pair<double, double>> candidates;  // (beta, score)
  double chosen_beta = 0;
  SelectionProtocol protocol = SelectionProtocol::kLeaveOneOut;
  SelectionMetric metric = SelectionMetric::kLoss;
};

namespace detail {

// Best candidate: min (loss) or max (F1) score, ties toward smaller beta.
inline double pick_beta(const std::vector<std::pair<double, double>>& cands, bool maximize) {
  const auto better = [&](const std::pair<double, double>& a, const std::pair<double, double>& b) {
    if (a.second != b.second) return maximize ? a.second > b.second : a.second < b.second;
    return a.first < b.first;
  };
  return std::min_element(cands.begin(), cands.end(), better)->first;
}

}  // namespace detail

struct TercileSplit {
  Environment low, middle, high;
};

// Rank-based terciles of `feature` (stable on ties).
inline TercileSplit tercile_split(const std::vector<Example>& data, std::span<const double> feature) {
  if (feature.size() != data.size()) throw ContractViolation("tercile_split: feature length mismatch");
  if (data.size() < 6) throw ConfigError("tercile_split: need at least 6 examples");
  if (std::all_of(feature.begin(), feature.end(), [&](double v) { return v == feature.front(); }))
    throw DegenerateSampleError("tercile_split: splitter feature is constant");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return feature[a] < feature[b]; });
  const std::size_t n = data.size();
  const std::size_t cut1 = n / 3, cut2 = 2 * n / 3;
  TercileSplit out{{0, 0.5, {}}, {2, 0.5, {}}, {1, 0.5, {}}};
  for (std::size_t r = 0; r < n; ++r) {
    Environment& env = r < cut1 ? out.low : (r < cut2 ? out.middle : out.high);
    Example ex = data[order[r]];
    ex.env_id = env.id;
    env.examples.push_back(std::move(ex));
  }
  return out;
}

// Trains on the outer terciles as two environments for each beta and scores
// cross-entropy on the held-out middle tercile.
inline SelectionReport loo_select(const std::vector<Example>& data,
                                  std::span<const double> splitter_feature,
                                  const std::vector<double>& betas, const TrainConfig& tcfg,
                                  const RegularizerConfig& base) {
  if (betas.empty()) throw ConfigError("loo_select: need at least one beta");
  const TercileSplit split = tercile_split(data, splitter_feature);
  const std::vector<Environment> train_envs{split.low, split.high};
  SelectionReport rep;
  rep.protocol = SelectionProtocol::kLeaveOneOut;
  rep.metric = SelectionMetric::kLoss;
  for (double beta : betas) {
    RegularizerConfig rcfg = base;
    rcfg.beta = beta;
    const Model m = train(train_envs, tcfg, rcfg);
    rep.candidates.emplace_back(beta, env_risk(m, split.middle, tcfg.feat));
  }
  rep.chosen_beta = detail::pick_beta(rep.candidates, false);
  return rep;
}

inline SelectionReport oracle_select(const std::vector<std::pair<double, Model>>& trained,
                                     const Environment& deploy_val, const FeatConfig& fcfg) {
  if (trained.empty()) throw ConfigError("oracle_select: no candidates");
  const bool has_pos = std::any_of(deploy_val.examples.begin(), deploy_val.examples.end(),
                                   [](const Example& e) { return e.y_obs > 0; });
  const bool has_neg = std::any_of(deploy_val.examples.begin(), deploy_val.examples.end(),
                                   [](const Example& e) { return e.y_obs < 0; });
  if (!has_pos || !has_neg)
    throw MetricUndefinedError("oracle_select: validation set must contain both classes");
  SelectionReport rep;
  rep.protocol = SelectionProtocol::kOracle;
  rep.metric = SelectionMetric::kF1;
  for (const auto& [beta, model] : trained)
    rep.candidates.emplace_back(beta, evaluate(model, deploy_val, fcfg).f1);
  rep.chosen_beta = detail::pick_beta(rep.candidates, true);
  return rep;
}

// Random 50/50 split of a deployment sample into (validation, test).
inline std::pair<Environment, Environment> split_validation_test(const Environment& env,
                                                                 std::uint64_t seed) {
  std::vector<std::size_t> order(env.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  Environment val{env.id, env.pi, {}}, test{env.id, env.pi, {}};
  const std::size_t half = env.size() / 2;
  for (std::size_t r = 0; r < order.size(); ++r)
    (r < half ? val : test).examples.push_back(env.examples[order[r]]);
  return {std::move(val), std::move(test)};
}

inline nlohmann::json selection_report_json(const SelectionReport& r) {
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& [beta, score] : r.candidates) cands.push_back({{"beta", beta}, {"score", score}});
  return {{"protocol", r.protocol == SelectionProtocol::kOracle ? "ORACLE" : "LOO"},
          {"metric", r.metric == SelectionMetric::kF1 ? "F1" : "LOSS"},
          {"chosen_beta", r.chosen_beta},
          {"candidates", cands}};
}

}  // namespace ctgshift
