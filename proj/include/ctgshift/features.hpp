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

// Hashed unigram/bigram features and the text corruptions used to build
// environments.
//
// Layout of a feature vector: slots [0, dim) hold hashed n-gram counts
// (FNV-1a 64 of the little-endian token bytes, modulo dim); when metadata is
// included it occupies the trailing slots [dim, dim + metadata_slots).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctgshift/corpus.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/random.hpp"

namespace ctgshift {

struct FeatConfig {
  std::size_t dim = 4096;
  bool use_unigrams = true;
  bool use_bigrams = true;
  bool include_metadata = false;
  std::size_t metadata_slots = 0;
  bool normalize = true;

  std::size_t total_dim() const noexcept {
    return dim + (include_metadata ? metadata_slots : 0);
  }

  void validate() const {
    if (dim < 16 || (dim & (dim - 1)) != 0)
      throw ConfigError("features: dim must be a power of two >= 16");
    if (!use_unigrams && !use_bigrams)
      throw ConfigError("features: enable unigrams or bigrams");
  }
};

struct FeatureVector {
  std::vector<std::uint32_t> indices;
  std::vector<double> values;
  std::size_t dim = 0;

  std::size_t nnz() const noexcept { return indices.size(); }

  double squared_norm() const noexcept {
    double s = 0;
    for (double v : values) s += v * v;
    return s;
  }

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

inline constexpr std::uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) noexcept {
  std::uint64_t h = kFnvOffsetBasis;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= kFnvPrime;
  }
  return h;
}

namespace detail {

inline void put_le64(std::uint8_t* out, std::uint64_t v) noexcept {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace detail

inline std::uint64_t unigram_hash(TokenId t) noexcept {
  std::array<std::uint8_t, 8> buf{};
  detail::put_le64(buf.data(), t);
  return fnv1a64(buf);
}

inline std::uint64_t bigram_hash(TokenId a, TokenId b) noexcept {
  std::array<std::uint8_t, 16> buf{};
  detail::put_le64(buf.data(), a);
  detail::put_le64(buf.data() + 8, b);
  return fnv1a64(buf);
}

inline FeatureVector featurize(const Example& ex, const FeatConfig& cfg) {
  std::map<std::uint32_t, double> counts;
  const auto mask = static_cast<std::uint64_t>(cfg.dim - 1);  // dim is a power of two
  const auto& t = ex.tokens;
  if (cfg.use_unigrams)
    for (TokenId tok : t) counts[static_cast<std::uint32_t>(unigram_hash(tok) & mask)] += 1.0;
  if (cfg.use_bigrams)
    for (std::size_t i = 1; i < t.size(); ++i)
      counts[static_cast<std::uint32_t>(bigram_hash(t[i - 1], t[i]) & mask)] += 1.0;
  if (cfg.include_metadata) {
    if (ex.metadata.size() > cfg.metadata_slots)
      throw ContractViolation("featurize: metadata longer than reserved slots");
    for (std::size_t j = 0; j < ex.metadata.size(); ++j) {
      const double v = ex.metadata[j];
      if (v < 0.0 || !std::isfinite(v))
        throw ContractViolation("featurize: metadata must be finite and non-negative");
      if (v > 0.0) counts[static_cast<std::uint32_t>(cfg.dim + j)] = v;
    }
  }

  FeatureVector fv;
  fv.dim = cfg.total_dim();
  fv.indices.reserve(counts.size());
  fv.values.reserve(counts.size());
  for (const auto& [idx, v] : counts) {
    fv.indices.push_back(idx);
    fv.values.push_back(v);
  }
  if (cfg.normalize) {
    const double norm = std::sqrt(fv.squared_norm());
    if (norm > 0.0)
      for (double& v : fv.values) v /= norm;
  }
  return fv;
}

inline std::vector<FeatureVector> featurize_all(const std::vector<Example>& examples,
                                                const FeatConfig& cfg) {
  std::vector<FeatureVector> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(featurize(ex, cfg));
  return out;
}

// Permutes content tokens; a leading spurious token, metadata and labels are
// left untouched.
inline Example scramble(const Example& ex, std::uint64_t seed) {
  Example out = ex;
  const std::size_t first = first_content_index(out.tokens);
  if (out.tokens.size() > first + 1) {
    Rng rng(seed);
    rng.shuffle(std::span<TokenId>(out.tokens).subspan(first));
  }
  return out;
}

inline Example metadata_only(const Example& ex) {
  Example out = ex;
  out.tokens.assign(1, kPlaceholderToken);
  return out;
}

inline nlohmann::json feature_matrix_json(const std::vector<FeatureVector>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"dim", r.dim}, {"indices", r.indices}, {"values", r.values}});
  return out;
}

}  // namespace ctgshift
