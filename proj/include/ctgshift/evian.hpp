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

// Environments via negativa: corrupt each text so only spurious signal
// remains, fit a predictor on the corrupted data, and split the original
// examples into K environments by quantiles of its predictions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctgshift/corpus.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/features.hpp"
#include "ctgshift/model.hpp"
#include "ctgshift/random.hpp"

namespace ctgshift {

enum class Corruption { kScramble, kMetadataOnly };

inline std::string_view to_string(Corruption c) noexcept {
  return c == Corruption::kScramble ? "SCRAMBLE" : "METADATA_ONLY";
}

inline Corruption corruption_from_string(std::string_view s) {
  if (s == "SCRAMBLE") return Corruption::kScramble;
  if (s == "METADATA_ONLY") return Corruption::kMetadataOnly;
  throw ConfigError("unknown corruption '" + std::string(s) + "'");
}

struct EvianConfig {
  Corruption corruption = Corruption::kScramble;
  int k = 2;
  double l2 = 1e-3;
  FeatConfig feat;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 2) throw ConfigError("evian: k must be >= 2");
    if (!(l2 >= 0.0)) throw ConfigError("evian: l2 must be >= 0");
    feat.validate();
  }
};

// L2-regularized logistic regression on sparse features.
struct LinearPredictor {
  std::vector<double> weights;
  double bias = 0;

  double logit(const FeatureVector& x) const {
    double s = bias;
    for (std::size_t k = 0; k < x.indices.size(); ++k) s += weights[x.indices[k]] * x.values[k];
    return s;
  }
  double prob(const FeatureVector& x) const { return sigmoid(logit(x)); }
};

struct LogisticFit {
  LinearPredictor predictor;
  int steps = 0;
  double grad_norm = 0;
};

// Full-batch gradient descent on (1/n) sum bce + (l2/2) |w|^2 (bias
// unpenalized) with step 1/L, stopping at |grad| < tol or max_steps.
inline LogisticFit fit_logistic(const std::vector<FeatureVector>& x, const std::vector<double>& y,
                                double l2, double tol = 1e-6, int max_steps = 5000) {
  if (x.empty() || x.size() != y.size()) throw ContractViolation("fit_logistic: bad inputs");
  const std::size_t dim = x.front().dim;
  double max_sq = 0;
  for (const auto& v : x) max_sq = std::max(max_sq, v.squared_norm());
  const double lipschitz = 0.25 * (max_sq + 1.0) + l2;
  const double step = 1.0 / lipschitz;
  const double inv_n = 1.0 / static_cast<double>(x.size());

  LogisticFit fit;
  fit.predictor.weights.assign(dim, 0.0);
  std::vector<double> gw(dim);
  for (fit.steps = 0; fit.steps < max_steps; ++fit.steps) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double r = (fit.predictor.prob(x[i]) - y[i]) * inv_n;
      gb += r;
      for (std::size_t k = 0; k < x[i].indices.size(); ++k) gw[x[i].indices[k]] += r * x[i].values[k];
    }
    double norm2 = gb * gb;
    for (std::size_t j = 0; j < dim; ++j) {
      gw[j] += l2 * fit.predictor.weights[j];
      norm2 += gw[j] * gw[j];
    }
    fit.grad_norm = std::sqrt(norm2);
    if (fit.grad_norm < tol) break;
    for (std::size_t j = 0; j < dim; ++j) fit.predictor.weights[j] -= step * gw[j];
    fit.predictor.bias -= step * gb;
  }
  return fit;
}

// K-quantile bucket per prediction (0-based). Thresholds are the type-7
// empirical quantiles at levels k/K; a value equal to a threshold goes to the
// lower bucket. If a bucket would be empty, falls back to K contiguous rank
// blocks of the stable order by (prediction, tie_key).
inline std::vector<int> assign_quantile_buckets(std::span<const double> preds, int k,
                                                std::span<const std::size_t> tie_key = {},
                                                std::vector<double>* thresholds_out = nullptr) {
  if (k < 2) throw ConfigError("quantile buckets: k must be >= 2");
  const std::size_t n = preds.size();
  if (n < static_cast<std::size_t>(2 * k))
    throw PartitionError("quantile buckets: need at least 2K = " + std::to_string(2 * k) +
                         " examples, got " + std::to_string(n));
  std::vector<double> sorted(preds.begin(), preds.end());
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back())
    throw PartitionError("quantile buckets: all predictions equal (" +
                         std::to_string(sorted.front()) + "); cannot form non-empty buckets");

  std::vector<double> thresholds;
  for (int q = 1; q < k; ++q) {
    const double h = (static_cast<double>(n) - 1.0) * q / k;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, n - 1);
    thresholds.push_back(sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]));
  }
  std::vector<int> bucket(n);
  std::vector<std::size_t> count(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < n; ++i) {
    int b = 0;
    while (b < k - 1 && preds[i] > thresholds[static_cast<std::size_t>(b)]) ++b;
    bucket[i] = b;
    ++count[static_cast<std::size_t>(b)];
  }
  if (thresholds_out) *thresholds_out = thresholds;
  if (std::find(count.begin(), count.end(), std::size_t{0}) == count.end()) return bucket;

  // Rank fallback.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (preds[a] != preds[b]) return preds[a] < preds[b];
    return tie_key.empty() ? a < b : tie_key[a] < tie_key[b];
  });
  const std::size_t base = n / static_cast<std::size_t>(k);
  const std::size_t extra = n % static_cast<std::size_t>(k);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < static_cast<std::size_t>(k); ++b) {
    const std::size_t len = base + (b < extra ? 1 : 0);
    for (std::size_t r = 0; r < len; ++r) bucket[order[pos++]] = static_cast<int>(b);
  }
  if (thresholds_out) {
    thresholds_out->clear();
    std::size_t acc = 0;
    for (std::size_t b = 0; b + 1 < static_cast<std::size_t>(k); ++b) {
      acc += base + (b < extra ? 1 : 0);
      thresholds_out->push_back(preds[order[acc - 1]]);
    }
  }
  return bucket;
}

struct EvianResult {
  std::vector<Environment> environments;
  std::vector<double> predictions;  // corrupted-predictor output, input order
  std::vector<int> assignment;      // environment id per input example
  std::vector<double> thresholds;
  double corrupted_accuracy = 0;
  int fit_steps = 0;
};

namespace detail {

// Input-order independent ranking of examples. Under metadata-only
// corruption the leading key is what survives the corruption, so the fit
// (including its summation order) does not depend on tokens.
inline std::vector<std::size_t> canonical_order(const std::vector<Example>& data,
                                                Corruption corruption) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const bool meta = corruption == Corruption::kMetadataOnly;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Example& x = data[a];
    const Example& y = data[b];
    if (meta && std::tie(x.metadata, x.y_obs) != std::tie(y.metadata, y.y_obs))
      return std::tie(x.metadata, x.y_obs) < std::tie(y.metadata, y.y_obs);
    return std::tie(x.tokens, x.metadata, x.y_obs, x.y_clean, x.z, x.p_star, x.env_id) <
           std::tie(y.tokens, y.metadata, y.y_obs, y.y_clean, y.z, y.p_star, y.env_id);
  });
  return order;
}

}  // namespace detail

inline Example corrupt(const Example& ex, Corruption c, std::uint64_t seed) {
  return c == Corruption::kScramble ? scramble(ex, seed) : metadata_only(ex);
}

inline EvianResult evian_partition(const std::vector<Example>& data, const EvianConfig& cfg) {
  cfg.validate();
  const std::size_t n = data.size();
  if (n < static_cast<std::size_t>(2 * cfg.k))
    throw PartitionError("evian: need at least 2K = " + std::to_string(2 * cfg.k) +
                         " examples, got " + std::to_string(n));

  const auto order = detail::canonical_order(data, cfg.corruption);
  std::vector<std::size_t> rank(n);
  std::vector<FeatureVector> x;
  std::vector<double> y;
  x.reserve(n);
  y.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const Example& ex = data[order[r]];
    rank[order[r]] = r;
    x.push_back(featurize(corrupt(ex, cfg.corruption, derive_seed(cfg.seed, r)), cfg.feat));
    y.push_back(to_binary(ex.y_obs));
  }
  const LogisticFit fit = fit_logistic(x, y, cfg.l2);

  EvianResult res;
  res.fit_steps = fit.steps;
  res.predictions.resize(n);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double p = fit.predictor.prob(x[r]);
    res.predictions[order[r]] = p;
    correct += ((p >= 0.5) == (y[r] > 0.5)) ? 1 : 0;
  }
  res.corrupted_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  res.assignment = assign_quantile_buckets(res.predictions, cfg.k, rank, &res.thresholds);

  res.environments.resize(static_cast<std::size_t>(cfg.k));
  for (int e = 0; e < cfg.k; ++e) res.environments[static_cast<std::size_t>(e)].id = e;
  for (std::size_t i = 0; i < n; ++i) {
    Example ex = data[i];
    ex.env_id = res.assignment[i];
    res.environments[static_cast<std::size_t>(ex.env_id)].examples.push_back(std::move(ex));
  }
  // pi is not a generating parameter here; record the empirical P(s = +1).
  for (auto& env : res.environments) {
    double aligned = 0;
    for (const auto& ex : env.examples) aligned += (ex.z == ex.y_clean) ? 1.0 : 0.0;
    env.pi = aligned / static_cast<double>(env.size());
  }
  return res;
}

inline nlohmann::json evian_report_json(const EvianResult& res) {
  nlohmann::json buckets = nlohmann::json::array();
  for (const auto& env : res.environments) {
    double mean_pred = 0;
    for (std::size_t i = 0; i < res.assignment.size(); ++i)
      if (res.assignment[i] == env.id) mean_pred += res.predictions[i];
    mean_pred /= static_cast<double>(env.size());
    nlohmann::json b{{"env_id", env.id}, {"size", env.size()}, {"mean_prediction", mean_pred}};
    try {
      b["corr_yz"] = corr_yz(env);
    } catch (const DegenerateSampleError&) {
      b["corr_yz"] = nullptr;
    }
    buckets.push_back(std::move(b));
  }
  return {{"buckets", buckets},
          {"thresholds", res.thresholds},
          {"corrupted_accuracy", res.corrupted_accuracy},
          {"fit_steps", res.fit_steps}};
}

}  // namespace ctgshift
