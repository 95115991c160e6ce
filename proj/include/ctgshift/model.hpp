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

// Two-layer attribute predictor:
//   repr = tanh(W1 x + b1),  p(y = 1 | x) = sigmoid(w2 . repr + b2)
// Parameters live in one flat buffer so gradients share the same shape and
// optimizers / finite differences can treat them as a plain vector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctgshift/corpus.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/features.hpp"
#include "ctgshift/random.hpp"

namespace ctgshift {

inline constexpr double kProbClip = 1e-12;

inline double sigmoid(double logit) noexcept {
  if (logit >= 0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

class Model {
 public:
  Model() = default;
  Model(std::size_t input_dim, std::size_t repr_dim)
      : input_dim_(input_dim),
        repr_dim_(repr_dim),
        params_(repr_dim * input_dim + 2 * repr_dim + 1, 0.0) {
    if (repr_dim == 0) throw ConfigError("model: repr_dim must be >= 1");
  }

  // W1, w2 ~ U(-0.1, 0.1); biases zero.
  static Model initialized(std::size_t input_dim, std::size_t repr_dim, std::uint64_t seed) {
    Model m(input_dim, repr_dim);
    Rng rng(seed);
    for (double& w : m.W1()) w = rng.uniform(-0.1, 0.1);
    for (double& w : m.w2()) w = rng.uniform(-0.1, 0.1);
    return m;
  }

  // Same shape, all zero.
  Model zeros_like() const { return Model(input_dim_, repr_dim_); }

  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t repr_dim() const noexcept { return repr_dim_; }

  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }

  // Row-major repr_dim x input_dim.
  std::span<double> W1() noexcept { return params().first(repr_dim_ * input_dim_); }
  std::span<const double> W1() const noexcept { return params().first(repr_dim_ * input_dim_); }
  std::span<double> b1() noexcept { return params().subspan(repr_dim_ * input_dim_, repr_dim_); }
  std::span<const double> b1() const noexcept {
    return params().subspan(repr_dim_ * input_dim_, repr_dim_);
  }
  std::span<double> w2() noexcept {
    return params().subspan(repr_dim_ * input_dim_ + repr_dim_, repr_dim_);
  }
  std::span<const double> w2() const noexcept {
    return params().subspan(repr_dim_ * input_dim_ + repr_dim_, repr_dim_);
  }
  double& b2() noexcept { return params_.back(); }
  double b2() const noexcept { return params_.back(); }

  double& W1(std::size_t row, std::size_t col) noexcept { return params_[row * input_dim_ + col]; }
  double W1(std::size_t row, std::size_t col) const noexcept {
    return params_[row * input_dim_ + col];
  }

  // this += alpha * other
  void axpy(double alpha, const Model& other) {
    if (other.params_.size() != params_.size()) throw ContractViolation("model: shape mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i] += alpha * other.params_[i];
  }

  void scale(double alpha) noexcept {
    for (double& p : params_) p *= alpha;
  }

  bool all_finite() const noexcept {
    return std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Model&, const Model&) = default;

 private:
  std::size_t input_dim_ = 0;
  std::size_t repr_dim_ = 0;
  std::vector<double> params_;
};

using Gradient = Model;

struct ForwardResult {
  std::vector<double> repr;
  double logit = 0;
  double prob = 0.5;
};

inline void forward_into(const Model& m, const FeatureVector& x, ForwardResult& out) {
  if (x.dim != m.input_dim()) throw ContractViolation("forward: feature dim does not match model");
  const std::size_t d = m.repr_dim();
  const auto b1 = m.b1();
  const auto w2 = m.w2();
  out.repr.resize(d);
  out.logit = m.b2();
  for (std::size_t r = 0; r < d; ++r) {
    double h = b1[r];
    for (std::size_t k = 0; k < x.indices.size(); ++k) h += m.W1(r, x.indices[k]) * x.values[k];
    out.repr[r] = std::tanh(h);
    out.logit += w2[r] * out.repr[r];
  }
  out.prob = sigmoid(out.logit);
}

inline ForwardResult forward(const Model& m, const FeatureVector& x) {
  ForwardResult r;
  forward_into(m, x, r);
  return r;
}

// Binary cross-entropy on a clipped probability; label in {0, 1}.
inline double bce(double prob, double label) noexcept {
  const double p = std::clamp(prob, kProbClip, 1.0 - kProbClip);
  return -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
}

// d bce / d logit. Zero where the clip is active, matching the clipped loss.
inline double bce_dlogit(double prob, double label) noexcept {
  if (prob < kProbClip || prob > 1.0 - kProbClip) return 0.0;
  return prob - label;
}

// Backpropagates one example into `grad`, scaled by `weight`:
//   dL/dlogit = dlogit, plus an extra dL/drepr term (may be empty).
inline void accumulate_backward(const Model& m, const FeatureVector& x,
                                std::span<const double> repr, double dlogit,
                                std::span<const double> drepr_extra, double weight,
                                Gradient& grad) {
  const std::size_t d = m.repr_dim();
  const auto w2 = m.w2();
  auto gb1 = grad.b1();
  auto gw2 = grad.w2();
  grad.b2() += weight * dlogit;
  for (std::size_t r = 0; r < d; ++r) {
    gw2[r] += weight * dlogit * repr[r];
    double drepr = dlogit * w2[r];
    if (!drepr_extra.empty()) drepr += drepr_extra[r];
    const double dh = weight * drepr * (1.0 - repr[r] * repr[r]);
    if (dh == 0.0) continue;
    gb1[r] += dh;
    for (std::size_t k = 0; k < x.indices.size(); ++k) grad.W1(r, x.indices[k]) += dh * x.values[k];
  }
}

// A view of pre-featurized examples with {0,1} labels.
struct Batch {
  std::vector<const FeatureVector*> x;
  std::vector<double> y;

  std::size_t size() const noexcept { return x.size(); }
};

struct Featurized {
  std::vector<FeatureVector> x;
  std::vector<double> y;

  std::size_t size() const noexcept { return x.size(); }

  Batch all() const {
    Batch b;
    b.x.reserve(x.size());
    for (const auto& v : x) b.x.push_back(&v);
    b.y = y;
    return b;
  }
};

inline Featurized featurize_env(const Environment& env, const FeatConfig& cfg) {
  Featurized f;
  f.x = featurize_all(env.examples, cfg);
  f.y.reserve(env.size());
  for (const auto& ex : env.examples) f.y.push_back(to_binary(ex.y_obs));
  return f;
}

// Forward pass over a batch: representations (row-major n x d),
// probabilities, and the mean cross-entropy.
struct BatchPass {
  std::vector<double> repr;
  std::vector<double> prob;
  double risk = 0;

  std::span<const double> repr_row(std::size_t i, std::size_t d) const {
    return std::span<const double>(repr).subspan(i * d, d);
  }
};

inline BatchPass forward_batch(const Model& m, const Batch& batch) {
  const std::size_t n = batch.size();
  const std::size_t d = m.repr_dim();
  BatchPass out;
  out.repr.resize(n * d);
  out.prob.resize(n);
  ForwardResult fr;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    forward_into(m, *batch.x[i], fr);
    std::copy(fr.repr.begin(), fr.repr.end(), out.repr.begin() + static_cast<std::ptrdiff_t>(i * d));
    out.prob[i] = fr.prob;
    total += bce(fr.prob, batch.y[i]);
  }
  out.risk = n ? total / static_cast<double>(n) : 0.0;
  return out;
}

// Adds `weight` * grad of the batch's mean risk.
inline void accumulate_risk_gradient(const Model& m, const Batch& batch, const BatchPass& pass,
                                     double weight, Gradient& grad) {
  const std::size_t n = batch.size();
  const std::size_t d = m.repr_dim();
  const double w = weight / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    accumulate_backward(m, *batch.x[i], pass.repr_row(i, d), bce_dlogit(pass.prob[i], batch.y[i]),
                        {}, w, grad);
}

inline double env_risk(const Model& m, const Environment& env, const FeatConfig& cfg) {
  if (env.examples.empty()) throw ContractViolation("env_risk: empty environment");
  return forward_batch(m, featurize_env(env, cfg).all()).risk;
}

inline Gradient grad_env_risk(const Model& m, const Environment& env, const FeatConfig& cfg) {
  if (env.examples.empty()) throw ContractViolation("grad_env_risk: empty environment");
  const Featurized f = featurize_env(env, cfg);
  const Batch b = f.all();
  Gradient g = m.zeros_like();
  accumulate_risk_gradient(m, b, forward_batch(m, b), 1.0, g);
  return g;
}

inline std::vector<double> predict_proba(const Model& m, const std::vector<Example>& examples,
                                         const FeatConfig& cfg) {
  std::vector<double> out;
  out.reserve(examples.size());
  ForwardResult fr;
  for (const auto& ex : examples) {
    forward_into(m, featurize(ex, cfg), fr);
    out.push_back(fr.prob);
  }
  return out;
}

// ---- checkpoint JSON ----

inline nlohmann::json model_to_json(const Model& m) {
  const auto w1 = m.W1();
  const auto b1 = m.b1();
  const auto w2 = m.w2();
  return {{"input_dim", m.input_dim()},
          {"repr_dim", m.repr_dim()},
          {"W1", std::vector<double>(w1.begin(), w1.end())},
          {"b1", std::vector<double>(b1.begin(), b1.end())},
          {"w2", std::vector<double>(w2.begin(), w2.end())},
          {"b2", m.b2()}};
}

inline Model model_from_json(const nlohmann::json& j) {
  Model m(j.at("input_dim").get<std::size_t>(), j.at("repr_dim").get<std::size_t>());
  auto load = [](const nlohmann::json& arr, std::span<double> dst, const char* name) {
    const auto v = arr.get<std::vector<double>>();
    if (v.size() != dst.size())
      throw ConfigError(std::string("model checkpoint: wrong length for ") + name);
    std::copy(v.begin(), v.end(), dst.begin());
  };
  load(j.at("W1"), m.W1(), "W1");
  load(j.at("b1"), m.b1(), "b1");
  load(j.at("w2"), m.w2(), "w2");
  m.b2() = j.at("b2").get<double>();
  return m;
}

}  // namespace ctgshift
