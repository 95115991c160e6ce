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

#include <cmath>
#include <span>
#include <vector>

#include "ctgshift/corpus.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/features.hpp"
#include "ctgshift/model.hpp"

namespace ctgshift {

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::size_t n() const noexcept { return tp + fp + fn + tn; }
};

struct F1Score {
  double value = 0;
  // No predicted and no actual positives; value is reported as 0.
  bool degenerate = false;
};

inline F1Score f1_score(const Confusion& c) noexcept {
  if (c.tp + c.fp == 0 && c.tp + c.fn == 0) return {0.0, true};
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  return {2.0 * c.tp / denom, false};
}

// Equal-width bins [i/B, (i+1)/B), last bin closed; empty bins skipped.
// Evaluated as (1/n) sum_b |sum_{i in b} p_i - sum_{i in b} y_i| with
// compensated sums, equal to sum_b (n_b/n) |mean_conf_b - frac_pos_b|.
inline double ece(std::span<const double> probs, std::span<const double> labels, int bins = 10) {
  if (probs.size() != labels.size()) throw ContractViolation("ece: length mismatch");
  if (bins < 1) throw ContractViolation("ece: need at least one bin");
  if (probs.empty()) return 0.0;
  struct Sum {
    double s = 0, c = 0;
    void add(double v) noexcept {  // Neumaier
      const double t = s + v;
      c += std::abs(s) >= std::abs(v) ? (s - t) + v : (v - t) + s;
      s = t;
    }
    double value() const noexcept { return s + c; }
  };
  std::vector<Sum> conf(static_cast<std::size_t>(bins)), pos(static_cast<std::size_t>(bins));
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ContractViolation("ece: probabilities must lie in [0, 1]");
    auto b = static_cast<std::size_t>(p * bins);
    if (b >= static_cast<std::size_t>(bins)) b = static_cast<std::size_t>(bins) - 1;
    conf[b].add(p);
    pos[b].add(labels[i]);
  }
  double total = 0;
  for (std::size_t b = 0; b < conf.size(); ++b) total += std::abs(conf[b].value() - pos[b].value());
  return total / static_cast<double>(probs.size());
}

// Cohen's kappa for two binary raters.
inline double cohen_kappa(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size() || a.empty())
    throw ContractViolation("cohen_kappa: need equal, non-empty rating lists");
  const double n = static_cast<double>(a.size());
  double agree = 0, a1 = 0, b1 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    agree += (a[i] == b[i]) ? 1.0 : 0.0;
    a1 += a[i] != 0 ? 1.0 : 0.0;
    b1 += b[i] != 0 ? 1.0 : 0.0;
  }
  const double p_o = agree / n;
  const double p_e = (a1 / n) * (b1 / n) + (1.0 - a1 / n) * (1.0 - b1 / n);
  if (p_e >= 1.0) {
    if (p_o >= 1.0) return 1.0;
    throw MetricUndefinedError("cohen_kappa: chance agreement is 1");
  }
  return (p_o - p_e) / (1.0 - p_e);
}

struct EvalReport {
  double loss = 0;
  double accuracy = 0;
  double f1 = 0;
  bool f1_degenerate = false;
  double ece = 0;
  std::size_t n = 0;
};

// Metrics from predicted probabilities and {0,1} labels; positive iff
// prob >= threshold.
inline EvalReport evaluate_probs(std::span<const double> probs, std::span<const double> labels,
                                 double threshold = 0.5) {
  if (probs.size() != labels.size()) throw ContractViolation("evaluate: length mismatch");
  if (probs.empty()) throw ContractViolation("evaluate: empty input");
  EvalReport r;
  r.n = probs.size();
  Confusion c;
  double loss = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    loss += bce(probs[i], labels[i]);
    const bool pred = probs[i] >= threshold;
    const bool actual = labels[i] > 0.5;
    if (pred && actual) ++c.tp;
    else if (pred) ++c.fp;
    else if (actual) ++c.fn;
    else ++c.tn;
  }
  r.loss = loss / static_cast<double>(r.n);
  r.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(r.n);
  const F1Score f = f1_score(c);
  r.f1 = f.value;
  r.f1_degenerate = f.degenerate;
  r.ece = ece(probs, labels);
  return r;
}

inline EvalReport evaluate(const Model& m, const Environment& env, const FeatConfig& fcfg,
                           double threshold = 0.5) {
  if (env.examples.empty()) throw ContractViolation("evaluate: empty environment");
  const auto probs = predict_proba(m, env.examples, fcfg);
  std::vector<double> labels;
  labels.reserve(env.size());
  for (const auto& ex : env.examples) labels.push_back(to_binary(ex.y_obs));
  return evaluate_probs(probs, labels, threshold);
}

}  // namespace ctgshift
