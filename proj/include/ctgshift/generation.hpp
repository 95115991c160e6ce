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

// Filtering-based controlled generation. Samples from a deployment
// distribution p_h(x) are kept iff the attribute predictor says
// p(toxic | x) < threshold, i.e. rejection sampling from
// p_h(x | y = 0) ~ p_h(x) p(y = 0 | x).
//
// Control is the ground-truth toxic mass (mean p*) among accepted samples;
// diversity is the share of distinct content tokens that survive filtering.

#include <cstdint>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ctgshift/corpus.hpp"
#include "ctgshift/csv.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/features.hpp"
#include "ctgshift/metrics.hpp"
#include "ctgshift/model.hpp"

namespace ctgshift {

struct DeploymentSpec {
  int h = 0;
  double pi_h = 0.5;
  std::size_t n_samples = 1000;
  // Replaces class_word_odds of the base corpus when set.
  std::optional<double> content_shift;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(pi_h >= 0.0 && pi_h <= 1.0)) throw ConfigError("deployment: pi_h must lie in [0, 1]");
    if (n_samples < 1) throw ConfigError("deployment: n_samples must be >= 1");
  }
};

struct FilterResult {
  std::vector<Example> accepted;
  std::size_t n_drawn = 0;
  double acceptance_rate = 0;
  // Mean p* among accepted; absent when nothing was accepted.
  std::optional<double> toxic_fraction_true;
  double diversity_unique_token_ratio = 0;
  // Mean p* over everything drawn (the unfiltered control level).
  double base_toxic_fraction = 0;
};

// Draws the deployment sample p_h for `spec` from the base corpus config.
inline Environment draw_deployment(const DeploymentSpec& spec, const DgpConfig& base) {
  spec.validate();
  DgpConfig cfg = base;
  if (spec.content_shift) cfg.class_word_odds = *spec.content_shift;
  cfg.validate();
  if (spec.n_samples >= 2) return sample_environment(cfg, spec.pi_h, spec.n_samples, spec.h, spec.seed);
  Rng rng(spec.seed);
  return Environment{spec.h, spec.pi_h, {detail::draw_example(cfg, spec.pi_h, spec.h, rng)}};
}

// Model adapter for the Predictor interface: Example -> p(toxic).
struct ModelPredictor {
  const Model* model;
  FeatConfig feat;

  double operator()(const Example& ex) const { return forward(*model, featurize(ex, feat)).prob; }
};

namespace detail {

inline void add_content_tokens(const Example& ex, std::set<TokenId>& out) {
  for (std::size_t i = first_content_index(ex.tokens); i < ex.tokens.size(); ++i)
    out.insert(ex.tokens[i]);
}

}  // namespace detail

// Filters already-drawn samples given predicted toxicity probabilities.
inline FilterResult filter_with_probs(const std::vector<Example>& drawn,
                                      const std::vector<double>& probs, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("filter: threshold must lie in (0, 1)");
  if (drawn.size() != probs.size()) throw ContractViolation("filter: length mismatch");
  FilterResult r;
  r.n_drawn = drawn.size();
  std::set<TokenId> all_tokens, kept_tokens;
  double kept_mass = 0, total_mass = 0;
  for (std::size_t i = 0; i < drawn.size(); ++i) {
    const Example& ex = drawn[i];
    detail::add_content_tokens(ex, all_tokens);
    total_mass += ex.p_star;
    if (probs[i] < threshold) {
      detail::add_content_tokens(ex, kept_tokens);
      kept_mass += ex.p_star;
      r.accepted.push_back(ex);
    }
  }
  if (r.n_drawn) {
    r.acceptance_rate = static_cast<double>(r.accepted.size()) / static_cast<double>(r.n_drawn);
    r.base_toxic_fraction = total_mass / static_cast<double>(r.n_drawn);
  }
  if (!r.accepted.empty()) {
    r.toxic_fraction_true = kept_mass / static_cast<double>(r.accepted.size());
    r.diversity_unique_token_ratio =
        all_tokens.empty() ? 0.0
                           : static_cast<double>(kept_tokens.size()) / static_cast<double>(all_tokens.size());
  }
  return r;
}

// Predictor: any callable Example -> probability of toxicity.
template <typename Predictor>
FilterResult sample_and_filter(const DeploymentSpec& spec, const DgpConfig& base,
                               Predictor&& predictor, double threshold = 0.5) {
  const Environment drawn = draw_deployment(spec, base);
  std::vector<double> probs;
  probs.reserve(drawn.size());
  for (const auto& ex : drawn.examples) probs.push_back(predictor(ex));
  return filter_with_probs(drawn.examples, probs, threshold);
}

inline FilterResult sample_and_filter(const DeploymentSpec& spec, const DgpConfig& base,
                                      const Model& m, const FeatConfig& fcfg,
                                      double threshold = 0.5) {
  return sample_and_filter(spec, base, ModelPredictor{&m, fcfg}, threshold);
}

struct ControlRow {
  int h = 0;
  std::string model;
  double pi_h = 0;
  double corr_target = 0;
  double acceptance_rate = 0;
  std::optional<double> toxic_fraction_true;
  double diversity_ratio = 0;
  double loss = 0;
  double f1 = 0;
  double ece = 0;
  std::uint64_t seed = 0;
};

// One row per (spec, model). Each spec's sample is drawn once and shared by
// all models.
inline std::vector<ControlRow> control_sweep(const std::vector<DeploymentSpec>& specs,
                                             const std::vector<std::pair<std::string, Model>>& models,
                                             const DgpConfig& base, const FeatConfig& fcfg,
                                             double threshold = 0.5) {
  if (specs.empty() || models.empty()) throw ConfigError("control_sweep: need specs and models");
  std::vector<ControlRow> rows;
  for (const auto& spec : specs) {
    const Environment drawn = draw_deployment(spec, base);
    std::vector<double> labels;
    for (const auto& ex : drawn.examples) labels.push_back(to_binary(ex.y_obs));
    for (const auto& [name, model] : models) {
      const auto probs = predict_proba(model, drawn.examples, fcfg);
      const FilterResult fr = filter_with_probs(drawn.examples, probs, threshold);
      const EvalReport ev = evaluate_probs(probs, labels);
      rows.push_back({spec.h, name, spec.pi_h, 2.0 * spec.pi_h - 1.0, fr.acceptance_rate,
                      fr.toxic_fraction_true, fr.diversity_unique_token_ratio, ev.loss, ev.f1,
                      ev.ece, spec.seed});
    }
  }
  return rows;
}

inline void write_control_csv(std::ostream& out, const std::vector<ControlRow>& rows) {
  write_csv_row(out, {"h", "model", "pi_h", "corr_target", "acceptance_rate", "toxic_fraction_true",
                      "diversity_ratio", "loss", "f1", "ece", "seed"});
  for (const auto& r : rows)
    write_csv_row(out, {std::to_string(r.h), r.model, format_number(r.pi_h),
                        format_number(r.corr_target), format_number(r.acceptance_rate),
                        format_number(r.toxic_fraction_true), format_number(r.diversity_ratio),
                        format_number(r.loss), format_number(r.f1), format_number(r.ece),
                        std::to_string(r.seed)});
}

}  // namespace ctgshift
