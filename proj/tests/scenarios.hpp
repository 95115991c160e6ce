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

// Seeded data scenarios shared by the unit tests and the acceptance run.

#include <cstdint>
#include <span>
#include <vector>

#include "ctgshift/corpus.hpp"
#include "ctgshift/features.hpp"
#include "ctgshift/model.hpp"
#include "ctgshift/random.hpp"
#include "ctgshift/trainer.hpp"

namespace ctgshift::scenario {

// Enumerable corpus: 8 tokens, fixed length 3.
inline DgpConfig tiny_dgp() {
  DgpConfig c;
  c.vocab_size = 8;
  c.n_class_words = 2;
  c.seq_len_min = 3;
  c.seq_len_max = 3;
  c.metadata_buckets = 2;
  return c;
}

// Outer terciles carry the spurious token with corr 1 and 0; the middle
// tercile inverts it. The splitter feature encodes the tercile plus jitter.
struct InversionScenario {
  std::vector<Example> data;
  std::vector<double> splitter;
};

inline InversionScenario inversion_scenario(std::uint64_t seed, std::size_t per_tercile) {
  const DgpConfig dgp;
  const std::vector<double> pis{1.0, 0.0, 0.5};
  InversionScenario s;
  Rng rng(seed);
  for (std::size_t t = 0; t < 3; ++t) {
    const Environment env = sample_environment(dgp, pis[t], per_tercile, 0, derive_seed(seed, t));
    for (const auto& ex : env.examples) {
      s.data.push_back(ex);
      s.splitter.push_back(static_cast<double>(t) + rng.uniform());
    }
  }
  // Interleave so tercile membership is not positional.
  std::vector<std::size_t> perm(s.data.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(std::span<std::size_t>(perm));
  InversionScenario out;
  for (std::size_t i : perm) {
    out.data.push_back(s.data[i]);
    out.splitter.push_back(s.splitter[i]);
  }
  return out;
}

inline TrainConfig selection_train(std::uint64_t seed) {
  TrainConfig t;
  t.seed = seed;
  t.feat.dim = 1024;
  t.repr_dim = 8;
  return t;
}

inline Model constant_model(const FeatConfig& f, double b2) {
  Model m(f.total_dim(), 1);
  m.b2() = b2;
  return m;
}

// Predicts positive iff the example starts with the given token.
inline Model token_model(const FeatConfig& f, TokenId token) {
  Model m(f.total_dim(), 1);
  Example probe;
  probe.tokens = {token};
  const FeatureVector x = featurize(probe, f);
  for (std::size_t k = 0; k < x.indices.size(); ++k) m.W1(0, x.indices[k]) = 20.0;
  m.w2()[0] = 20.0;
  m.b2() = -5.0;
  return m;
}

inline Environment labeled(const std::vector<std::pair<TokenId, int>>& rows) {
  Environment env{0, 0.5, {}};
  for (const auto& [tok, y] : rows) {
    Example ex;
    ex.tokens = {tok};
    ex.y_obs = ex.y_clean = ex.z = y;
    env.examples.push_back(ex);
  }
  return env;
}

}  // namespace ctgshift::scenario
