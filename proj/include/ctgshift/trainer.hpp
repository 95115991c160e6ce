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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <vector>

#include "ctgshift/corpus.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/features.hpp"
#include "ctgshift/invariance.hpp"
#include "ctgshift/model.hpp"
#include "ctgshift/random.hpp"

namespace ctgshift {

struct TrainConfig {
  double lr = 0.5;
  int epochs = 30;
  std::size_t batch_size = 100;
  // Linear lr warmup over this fraction of steps, then linear decay to 0.
  // V-REx ramps beta from 0 over the same window.
  double warmup_frac = 0.1;
  std::uint64_t seed = 0;
  std::size_t repr_dim = 16;
  FeatConfig feat;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0))
      throw ConfigError("train: warmup_frac must lie in [0, 1]");
    if (repr_dim < 1) throw ConfigError("train: repr_dim must be >= 1");
    feat.validate();
  }
};

struct EpochStats {
  int epoch = 0;
  double objective = 0;           // mean over the epoch's steps
  std::vector<double> risks;      // mean per-environment batch risk
};

inline void write_progress(std::ostream& out, const EpochStats& s) {
  out << "epoch " << s.epoch << " objective " << s.objective << " risks";
  for (double r : s.risks) out << ' ' << r;
  out << '\n';
}

struct Schedule {
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;

  double lr_at(double base, std::size_t t) const noexcept {
    if (t < warmup_steps) return base * static_cast<double>(t + 1) / static_cast<double>(warmup_steps);
    return base * static_cast<double>(total_steps - t) /
           static_cast<double>(total_steps - warmup_steps);
  }

  double ramp_at(std::size_t t) const noexcept {
    if (warmup_steps == 0 || t >= warmup_steps) return 1.0;
    return static_cast<double>(t + 1) / static_cast<double>(warmup_steps);
  }
};

namespace detail {

// Per-environment cursor over a seeded permutation, reshuffled on exhaustion.
class EnvSampler {
 public:
  EnvSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(std::span<std::size_t>(order_));
  }

  void next(std::size_t count, std::vector<std::size_t>& out) {
    if (cursor_ + count > order_.size()) {
      rng_.shuffle(std::span<std::size_t>(order_));
      cursor_ = 0;
    }
    out.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
               order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + count));
    cursor_ += count;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

inline void check_train_inputs(const std::vector<Environment>& envs, const TrainConfig& tcfg,
                               const RegularizerConfig& rcfg) {
  tcfg.validate();
  rcfg.validate();
  if (envs.empty()) throw ConfigError("train: no environments");
  for (const auto& e : envs)
    if (e.examples.size() < 2)
      throw ConfigError("train: environment " + std::to_string(e.id) + " has fewer than 2 examples");
  if (rcfg.kind != ObjectiveKind::kErm && envs.size() < 2)
    throw ConfigError("train: invariance objectives need at least 2 environments");
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochStats&)>;

// Mini-batch gradient descent on sum_e R_e + beta * P. Each step draws one
// equal-size batch per environment. Deterministic given all inputs.
inline Model train(const std::vector<Environment>& envs, const TrainConfig& tcfg,
                   const RegularizerConfig& rcfg, const EpochCallback& on_epoch = {}) {
  detail::check_train_inputs(envs, tcfg, rcfg);
  FeatConfig fcfg = tcfg.feat;

  std::vector<Featurized> data;
  data.reserve(envs.size());
  std::size_t n_min = SIZE_MAX;
  for (const auto& env : envs) {
    data.push_back(featurize_env(env, fcfg));
    n_min = std::min(n_min, env.size());
  }
  const std::size_t batch = std::min(tcfg.batch_size, n_min);
  const std::size_t steps_per_epoch = (n_min + batch - 1) / batch;
  Schedule sched;
  sched.total_steps = steps_per_epoch * static_cast<std::size_t>(tcfg.epochs);
  sched.warmup_steps = static_cast<std::size_t>(tcfg.warmup_frac * static_cast<double>(sched.total_steps));
  if (sched.warmup_steps >= sched.total_steps) sched.warmup_steps = sched.total_steps - 1;

  Model model = Model::initialized(fcfg.total_dim(), tcfg.repr_dim, derive_seed(tcfg.seed, 1));
  std::vector<detail::EnvSampler> samplers;
  for (std::size_t e = 0; e < envs.size(); ++e)
    samplers.emplace_back(envs[e].size(), derive_seed(tcfg.seed, 2, e));

  std::vector<Batch> batches(envs.size());
  std::vector<std::size_t> idx;
  std::size_t step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    stats.risks.assign(envs.size(), 0.0);
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      for (std::size_t e = 0; e < envs.size(); ++e) {
        samplers[e].next(batch, idx);
        batches[e].x.clear();
        batches[e].y.clear();
        for (std::size_t i : idx) {
          batches[e].x.push_back(&data[e].x[i]);
          batches[e].y.push_back(data[e].y[i]);
        }
      }
      const double beta =
          rcfg.kind == ObjectiveKind::kVrex ? rcfg.beta * sched.ramp_at(step) : rcfg.beta;
      ObjectiveValue obj = objective_on_batches(model, batches, rcfg, beta);
      if (!std::isfinite(obj.value)) throw TrainingDivergedError(step, "non-finite objective");
      model.axpy(-sched.lr_at(tcfg.lr, step), obj.gradient);
      if (!model.all_finite()) throw TrainingDivergedError(step, "non-finite parameters");
      stats.objective += obj.value;
      for (std::size_t e = 0; e < envs.size(); ++e) stats.risks[e] += obj.risks[e];
    }
    stats.objective /= static_cast<double>(steps_per_epoch);
    for (double& r : stats.risks) r /= static_cast<double>(steps_per_epoch);
    if (on_epoch) on_epoch(stats);
  }
  return model;
}

// Max elementwise relative error between the analytic gradient of
// total_objective and central differences (h = 1e-5), with relative error
// |a - b| / max(|a|, |b|, 1e-8). The MMD bandwidth is resolved once at m.
inline double finite_diff_audit(const Model& m, const std::vector<Environment>& envs,
                                const TrainConfig& tcfg, const RegularizerConfig& rcfg) {
  std::size_t total_n = 0;
  for (const auto& e : envs) total_n += e.size();
  if (tcfg.feat.dim > 64 || total_n > 32)
    throw ContractViolation("finite_diff_audit: instance too large (need D <= 64, n <= 32)");

  std::vector<Featurized> feats;
  for (const auto& env : envs) feats.push_back(featurize_env(env, tcfg.feat));
  std::vector<Batch> batches;
  for (const auto& f : feats) batches.push_back(f.all());

  const ObjectiveValue analytic = objective_on_batches(m, batches, rcfg, rcfg.beta);
  RegularizerConfig fixed = rcfg;
  if (analytic.gamma) fixed.gamma = analytic.gamma;

  constexpr double h = 1e-5;
  Model probe = m;
  double worst = 0;
  const auto grad = analytic.gradient.params();
  for (std::size_t i = 0; i < probe.params().size(); ++i) {
    const double saved = probe.params()[i];
    probe.params()[i] = saved + h;
    const double up = objective_on_batches(probe, batches, fixed, fixed.beta, false).value;
    probe.params()[i] = saved - h;
    const double down = objective_on_batches(probe, batches, fixed, fixed.beta, false).value;
    probe.params()[i] = saved;
    const double fd = (up - down) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
    worst = std::max(worst, std::abs(fd - grad[i]) / denom);
  }
  return worst;
}

struct GradcheckResult {
  ObjectiveKind kind;
  int instances = 0;
  double max_rel_error = 0;
};

// Random small instances per objective kind: D in {16, 32, 64}, d <= 8,
// two or three environments, at most 32 examples in total.
inline std::vector<GradcheckResult> run_gradcheck_suite(int instances = 20,
                                                        std::uint64_t seed = 20240601) {
  std::vector<GradcheckResult> out;
  constexpr std::array<ObjectiveKind, 4> kinds{ObjectiveKind::kErm, ObjectiveKind::kVrex,
                                               ObjectiveKind::kMmd, ObjectiveKind::kCoral};
  for (ObjectiveKind kind : kinds) {
    GradcheckResult res{kind, instances, 0.0};
    for (int t = 0; t < instances; ++t) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kind), static_cast<std::uint64_t>(t)));
      DgpConfig dgp;
      dgp.vocab_size = 12;
      dgp.n_class_words = 3;
      dgp.seq_len_min = 2;
      dgp.seq_len_max = 6;
      dgp.metadata_buckets = 4;
      TrainConfig tcfg;
      tcfg.feat.dim = std::size_t{16} << rng.below(3);
      tcfg.feat.include_metadata = rng.bernoulli(0.5);
      tcfg.feat.metadata_slots = static_cast<std::size_t>(dgp.metadata_dim());
      tcfg.feat.normalize = rng.bernoulli(0.5);
      tcfg.repr_dim = 1 + rng.below(8);
      const std::size_t n_envs = kind == ObjectiveKind::kErm ? 1 + rng.below(3) : 2 + rng.below(2);
      std::vector<Environment> envs;
      for (std::size_t e = 0; e < n_envs; ++e) {
        const std::size_t n = 2 + rng.below(32 / n_envs - 1);
        envs.push_back(sample_environment(dgp, rng.uniform(), n, static_cast<int>(e), rng.next()));
      }
      Model m(tcfg.feat.total_dim(), tcfg.repr_dim);
      for (double& p : m.params()) p = rng.uniform(-0.5, 0.5);
      RegularizerConfig rcfg;
      rcfg.kind = kind;
      rcfg.beta = kind == ObjectiveKind::kErm ? 0.0 : rng.uniform(0.5, 10.0);
      res.max_rel_error = std::max(res.max_rel_error, finite_diff_audit(m, envs, tcfg, rcfg));
    }
    out.push_back(res);
  }
  return out;
}

}  // namespace ctgshift
