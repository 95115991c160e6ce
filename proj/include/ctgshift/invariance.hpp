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

// Invariance penalties over environments and the combined objective
//
//   sum_e R_e + beta * P,
//
// with P one of: 0 (ERM), population variance of the risks (V-REx), or the
// sum over unordered environment pairs of squared MMD (biased V-statistic,
// RBF kernel) or CORAL distance between hidden representations.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctgshift/error.hpp"
#include "ctgshift/model.hpp"

namespace ctgshift {

enum class ObjectiveKind { kErm, kVrex, kMmd, kCoral };

inline std::string_view to_string(ObjectiveKind k) noexcept {
  switch (k) {
    case ObjectiveKind::kErm: return "ERM";
    case ObjectiveKind::kVrex: return "VREX";
    case ObjectiveKind::kMmd: return "MMD";
    case ObjectiveKind::kCoral: return "CORAL";
  }
  return "?";
}

inline ObjectiveKind objective_kind_from_string(std::string_view s) {
  if (s == "ERM") return ObjectiveKind::kErm;
  if (s == "VREX") return ObjectiveKind::kVrex;
  if (s == "MMD") return ObjectiveKind::kMmd;
  if (s == "CORAL") return ObjectiveKind::kCoral;
  throw ConfigError("unknown objective kind '" + std::string(s) + "'");
}

struct RegularizerConfig {
  ObjectiveKind kind = ObjectiveKind::kErm;
  double beta = 0.0;
  // RBF bandwidth for MMD; median heuristic over the batch when unset.
  std::optional<double> gamma;

  void validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("regularizer: beta must be >= 0");
    if (gamma && !(*gamma > 0.0)) throw ConfigError("regularizer: gamma must be > 0");
  }
};

// Row-major set of representation vectors.
struct ReprMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  ReprMatrix() = default;
  ReprMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  ReprMatrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ContractViolation("ReprMatrix: size mismatch");
  }

  static ReprMatrix from_rows(const std::vector<std::vector<double>>& rs) {
    ReprMatrix m(rs.size(), rs.empty() ? 0 : rs.front().size());
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (rs[i].size() != m.cols) throw ContractViolation("ReprMatrix: ragged rows");
      std::copy(rs[i].begin(), rs[i].end(), m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
    }
    return m;
  }

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(data).subspan(i * cols, cols);
  }
  std::span<double> row(std::size_t i) { return std::span<double>(data).subspan(i * cols, cols); }
};

// Population variance (1/m) sum (R_e - mean)^2, evaluated as
// (1/(2 m^2)) sum_{e,f} (R_e - R_f)^2 so equal risks give exactly 0.
inline double vrex_penalty(std::span<const double> risks) {
  if (risks.size() < 2) throw ConfigError("vrex_penalty: need at least 2 environments");
  double s = 0;
  for (double a : risks)
    for (double b : risks) s += (a - b) * (a - b);
  const double m = static_cast<double>(risks.size());
  return s / (2.0 * m * m);
}

namespace detail {

inline double sq_dist(std::span<const double> u, std::span<const double> v) noexcept {
  double s = 0;
  for (std::size_t k = 0; k < u.size(); ++k) s += (u[k] - v[k]) * (u[k] - v[k]);
  return s;
}

inline void check_same_width(const ReprMatrix& a, const ReprMatrix& b) {
  if (a.cols != b.cols) throw ContractViolation("representation widths differ");
}

// Adds coef * k(u,v) * (u - v) * (-2 gamma) to gu, i.e. coef * d k(u,v) / du.
inline void add_rbf_grad(std::span<const double> u, std::span<const double> v, double kval,
                         double gamma, double coef, std::span<double> gu) noexcept {
  const double c = coef * kval * (-2.0 * gamma);
  for (std::size_t k = 0; k < u.size(); ++k) gu[k] += c * (u[k] - v[k]);
}

}  // namespace detail

namespace detail {

// sum_i sum_j k(x_i, y_j) in row-major order; when grad_x is given, adds
// coef * d/dx_i of each term.
inline double rbf_sum(const ReprMatrix& X, const ReprMatrix& Y, double gamma, double coef,
                      ReprMatrix* grad_x) {
  double s = 0;
  for (std::size_t i = 0; i < X.rows; ++i) {
    for (std::size_t j = 0; j < Y.rows; ++j) {
      const double k = std::exp(-gamma * sq_dist(X.row(i), Y.row(j)));
      s += k;
      if (grad_x) add_rbf_grad(X.row(i), Y.row(j), k, gamma, coef, grad_x->row(i));
    }
  }
  return s;
}

}  // namespace detail

// Biased squared MMD (V-statistic), k(u,v) = exp(-gamma |u - v|^2):
//   (1/|A|^2) sum k(a,a') + (1/|B|^2) sum k(b,b') - (2/(|A||B|)) sum k(a,b).
// All three sums run in the same order, so mmd2(A, A) is exactly 0.
// Gradients w.r.t. the rows of A and B are accumulated into grad_a / grad_b.
inline double mmd2(const ReprMatrix& A, const ReprMatrix& B, double gamma,
                   ReprMatrix* grad_a = nullptr, ReprMatrix* grad_b = nullptr) {
  if (A.rows == 0 || B.rows == 0) throw DegenerateSampleError("mmd2: empty representation set");
  detail::check_same_width(A, B);
  const double na = static_cast<double>(A.rows);
  const double nb = static_cast<double>(B.rows);
  const double waa = 1.0 / (na * na), wbb = 1.0 / (nb * nb), wab = 2.0 / (na * nb);
  // By symmetry of k, d/da_i of sum_{i,j} k(a_i, a_j) is twice the first-slot term.
  const double saa = detail::rbf_sum(A, A, gamma, 2.0 * waa, grad_a);
  const double sbb = detail::rbf_sum(B, B, gamma, 2.0 * wbb, grad_b);
  const double sab = detail::rbf_sum(A, B, gamma, -wab, grad_a);
  if (grad_b) detail::rbf_sum(B, A, gamma, -wab, grad_b);
  return waa * saa + wbb * sbb - wab * sab;
}

// Unbiased sample covariance (1/(n-1)) (X^T X - (1/n) s^T s), s = 1^T X.
inline std::vector<double> covariance(const ReprMatrix& X) {
  if (X.rows < 2) throw DegenerateSampleError("covariance: need at least 2 points");
  const std::size_t d = X.cols;
  const double n = static_cast<double>(X.rows);
  std::vector<double> col_sum(d, 0.0);
  std::vector<double> gram(d * d, 0.0);
  for (std::size_t i = 0; i < X.rows; ++i) {
    const auto r = X.row(i);
    for (std::size_t p = 0; p < d; ++p) {
      col_sum[p] += r[p];
      for (std::size_t q = 0; q < d; ++q) gram[p * d + q] += r[p] * r[q];
    }
  }
  std::vector<double> cov(d * d);
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t q = 0; q < d; ++q)
      cov[p * d + q] = (gram[p * d + q] - col_sum[p] * col_sum[q] / n) / (n - 1.0);
  return cov;
}

namespace detail {

// grad_i += coef * G (x_i - mean) for symmetric G; this is d<G, C>/dx_i
// up to the 2/(n-1) factor folded into coef.
inline void add_cov_grad(const ReprMatrix& X, const std::vector<double>& G, double coef,
                         ReprMatrix& grad) {
  const std::size_t d = X.cols;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < X.rows; ++i)
    for (std::size_t p = 0; p < d; ++p) mean[p] += X.row(i)[p];
  for (double& v : mean) v /= static_cast<double>(X.rows);
  for (std::size_t i = 0; i < X.rows; ++i) {
    const auto r = X.row(i);
    auto g = grad.row(i);
    for (std::size_t p = 0; p < d; ++p) {
      double acc = 0;
      for (std::size_t q = 0; q < d; ++q) acc += G[p * d + q] * (r[q] - mean[q]);
      g[p] += coef * acc;
    }
  }
}

}  // namespace detail

// (1/d^2) |C_A - C_B|_F^2.
inline double coral(const ReprMatrix& A, const ReprMatrix& B, ReprMatrix* grad_a = nullptr,
                    ReprMatrix* grad_b = nullptr) {
  if (A.rows < 2 || B.rows < 2) throw DegenerateSampleError("coral: need at least 2 points per set");
  detail::check_same_width(A, B);
  const std::size_t d = A.cols;
  const auto ca = covariance(A);
  const auto cb = covariance(B);
  std::vector<double> diff(d * d);
  double frob = 0;
  for (std::size_t k = 0; k < d * d; ++k) {
    diff[k] = ca[k] - cb[k];
    frob += diff[k] * diff[k];
  }
  const double inv_d2 = 1.0 / static_cast<double>(d * d);
  // dvalue/dC_A = 2 diff / d^2; dC/dx_i contributes 2 (x_i - mean) / (n - 1).
  if (grad_a)
    detail::add_cov_grad(A, diff, 4.0 * inv_d2 / (static_cast<double>(A.rows) - 1.0), *grad_a);
  if (grad_b)
    detail::add_cov_grad(B, diff, -4.0 * inv_d2 / (static_cast<double>(B.rows) - 1.0), *grad_b);
  return inv_d2 * frob;
}

// gamma = 1 / (2 median^2) over pairwise distances of the pooled sets.
inline double median_heuristic_gamma(const std::vector<const ReprMatrix*>& sets) {
  std::vector<std::span<const double>> rows;
  for (const auto* s : sets)
    for (std::size_t i = 0; i < s->rows; ++i) rows.push_back(s->row(i));
  std::vector<double> dists;
  dists.reserve(rows.size() * (rows.size() - (rows.empty() ? 0 : 1)) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      dists.push_back(std::sqrt(detail::sq_dist(rows[i], rows[j])));
  if (dists.empty()) return 1.0;
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double med = dists[mid];
  if (dists.size() % 2 == 0) {
    const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  if (!(med > 0.0)) return 1.0;
  return 1.0 / (2.0 * med * med);
}

struct ObjectiveValue {
  double value = 0;
  double penalty = 0;
  std::vector<double> risks;
  std::optional<double> gamma;  // resolved MMD bandwidth
  Gradient gradient;
};

// Objective over pre-featurized batches, one per environment. `beta` is the
// effective penalty weight (the trainer ramps it); rcfg supplies kind/gamma.
inline ObjectiveValue objective_on_batches(const Model& m, const std::vector<Batch>& batches,
                                           const RegularizerConfig& rcfg, double beta,
                                           bool want_gradient = true) {
  if (batches.empty()) throw ConfigError("objective: need at least one environment");
  for (const auto& b : batches)
    if (b.size() == 0) throw ConfigError("objective: empty environment batch");
  const bool penalized = rcfg.kind != ObjectiveKind::kErm && beta != 0.0;
  if (rcfg.kind != ObjectiveKind::kErm && batches.size() < 2)
    throw ConfigError("objective: " + std::string(to_string(rcfg.kind)) +
                      " needs at least 2 environments");

  const std::size_t m_env = batches.size();
  const std::size_t d = m.repr_dim();
  std::vector<BatchPass> passes;
  passes.reserve(m_env);
  ObjectiveValue out;
  for (const auto& b : batches) {
    passes.push_back(forward_batch(m, b));
    out.risks.push_back(passes.back().risk);
    out.value += passes.back().risk;
  }
  if (want_gradient) out.gradient = m.zeros_like();

  if (!penalized) {
    if (want_gradient)
      for (std::size_t e = 0; e < m_env; ++e)
        accumulate_risk_gradient(m, batches[e], passes[e], 1.0, out.gradient);
    return out;
  }

  if (rcfg.kind == ObjectiveKind::kVrex) {
    out.penalty = vrex_penalty(out.risks);
    out.value += beta * out.penalty;
    if (want_gradient) {
      double mean = 0;
      for (double r : out.risks) mean += r;
      mean /= static_cast<double>(m_env);
      for (std::size_t e = 0; e < m_env; ++e) {
        const double w = 1.0 + beta * 2.0 / static_cast<double>(m_env) * (out.risks[e] - mean);
        accumulate_risk_gradient(m, batches[e], passes[e], w, out.gradient);
      }
    }
    return out;
  }

  // MMD / CORAL on hidden representations, all unordered pairs.
  std::vector<ReprMatrix> reprs;
  reprs.reserve(m_env);
  for (std::size_t e = 0; e < m_env; ++e) reprs.emplace_back(batches[e].size(), d, passes[e].repr);
  std::vector<ReprMatrix> grads;
  if (want_gradient)
    for (std::size_t e = 0; e < m_env; ++e) grads.emplace_back(batches[e].size(), d);

  double gamma = 0;
  if (rcfg.kind == ObjectiveKind::kMmd) {
    if (rcfg.gamma) {
      gamma = *rcfg.gamma;
    } else {
      std::vector<const ReprMatrix*> ptrs;
      for (const auto& r : reprs) ptrs.push_back(&r);
      gamma = median_heuristic_gamma(ptrs);
    }
    out.gamma = gamma;
  }
  for (std::size_t e = 0; e < m_env; ++e) {
    for (std::size_t f = e + 1; f < m_env; ++f) {
      ReprMatrix* ga = want_gradient ? &grads[e] : nullptr;
      ReprMatrix* gb = want_gradient ? &grads[f] : nullptr;
      out.penalty += rcfg.kind == ObjectiveKind::kMmd ? mmd2(reprs[e], reprs[f], gamma, ga, gb)
                                                      : coral(reprs[e], reprs[f], ga, gb);
    }
  }
  out.value += beta * out.penalty;

  if (want_gradient) {
    std::vector<double> extra(d);
    for (std::size_t e = 0; e < m_env; ++e) {
      const auto& b = batches[e];
      const double w = 1.0 / static_cast<double>(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) {
        // Risk term carries 1/n; rescale the penalty gradient to cancel it.
        const auto g = grads[e].row(i);
        for (std::size_t k = 0; k < d; ++k) extra[k] = beta * g[k] / w;
        accumulate_backward(m, *b.x[i], passes[e].repr_row(i, d),
                            bce_dlogit(passes[e].prob[i], b.y[i]), extra, w, out.gradient);
      }
    }
  }
  return out;
}

// Full-environment objective and its analytic gradient.
inline ObjectiveValue total_objective(const Model& m, const std::vector<Environment>& envs,
                                      const FeatConfig& fcfg, const RegularizerConfig& rcfg) {
  rcfg.validate();
  std::vector<Featurized> feats;
  feats.reserve(envs.size());
  for (const auto& env : envs) feats.push_back(featurize_env(env, fcfg));
  std::vector<Batch> batches;
  for (const auto& f : feats) batches.push_back(f.all());
  return objective_on_batches(m, batches, rcfg, rcfg.beta);
}

}  // namespace ctgshift
