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

// Semi-synthetic toxicity corpora with a planted spurious token.
//
// Content is a bag of words drawn from a class-conditional categorical:
// class words of the example's own (clean) label carry weight
// `class_word_odds`, every other word weight 1. The ground-truth
// conditional p*(y_obs = +1 | content) is therefore available in closed form.
// A special token encoding z = y_clean * s, s ~ Rad(pi), is prepended at
// position 0.

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctgshift/error.hpp"
#include "ctgshift/random.hpp"

namespace ctgshift {

using TokenId = std::uint32_t;

// Reserved vocabulary. Content word j lives at kFirstContentToken + j.
inline constexpr TokenId kPlaceholderToken = 0;
inline constexpr TokenId kSpuriousNegToken = 1;
inline constexpr TokenId kSpuriousPosToken = 2;
inline constexpr TokenId kFirstContentToken = 3;

constexpr bool is_spurious_token(TokenId t) noexcept {
  return t == kSpuriousNegToken || t == kSpuriousPosToken;
}

struct DgpConfig {
  int vocab_size = 40;
  int n_class_words = 4;
  double class_word_odds = 3.0;
  int seq_len_min = 4;
  int seq_len_max = 12;
  double flip_rate = 0.25;
  bool balance_classes = true;
  int metadata_buckets = 8;
  double metadata_skew = 0.5;
  // P(y_clean = +1) before class balancing.
  double toxic_prior = 0.5;
  // When false no special token is prepended (z is still drawn).
  bool spurious_token = true;

  // Bucket one-hot plus relative content length.
  int metadata_dim() const noexcept { return metadata_buckets + 1; }

  void validate() const {
    if (vocab_size < 1 || n_class_words < 1 || vocab_size < 2 * n_class_words)
      throw ConfigError("dgp: vocab_size must be >= 2 * n_class_words >= 2");
    if (!(class_word_odds > 1.0) || !std::isfinite(class_word_odds))
      throw ConfigError("dgp: class_word_odds must be finite and > 1");
    if (seq_len_min < 1 || seq_len_max < seq_len_min)
      throw ConfigError("dgp: need 1 <= seq_len_min <= seq_len_max");
    if (!(flip_rate >= 0.0 && flip_rate < 0.5))
      throw ConfigError("dgp: flip_rate must lie in [0, 0.5)");
    if (metadata_buckets < 1) throw ConfigError("dgp: metadata_buckets must be >= 1");
    if (!(metadata_skew >= 0.5 && metadata_skew <= 1.0))
      throw ConfigError("dgp: metadata_skew must lie in [0.5, 1]");
    if (!(toxic_prior > 0.0 && toxic_prior < 1.0))
      throw ConfigError("dgp: toxic_prior must lie in (0, 1)");
  }
};

struct Example {
  std::vector<TokenId> tokens;
  std::vector<double> metadata;
  int y_obs = 1;
  int y_clean = 1;
  int z = 1;
  double p_star = 0.5;
  int env_id = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Environment {
  int id = 0;
  double pi = 0.5;
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }

  friend bool operator==(const Environment&, const Environment&) = default;
};

// +1 (toxic) -> 1, -1 -> 0.
constexpr double to_binary(int label) noexcept { return label > 0 ? 1.0 : 0.0; }

// Which class a content word indicates: +1, -1, or 0 for neutral words.
inline int word_class(const DgpConfig& cfg, TokenId token) noexcept {
  if (token < kFirstContentToken) return 0;
  const auto j = static_cast<int>(token - kFirstContentToken);
  if (j < cfg.n_class_words) return 1;
  if (j < 2 * cfg.n_class_words) return -1;
  return 0;
}

inline std::size_t first_content_index(const std::vector<TokenId>& tokens) noexcept {
  return (!tokens.empty() && is_spurious_token(tokens.front())) ? 1 : 0;
}

namespace detail {

inline double log_add(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

// p*(y_obs = +1 | content) given the net class-word count
// (#toxic words - #non-toxic words). Accounts for label flipping and, when
// enabled, for rebalancing on observed labels.
inline double p_star_from_net_count(const DgpConfig& cfg, int net_count) {
  const double log_ratio = net_count * std::log(cfg.class_word_odds);
  const double rho = cfg.flip_rate;
  const double prior = cfg.toxic_prior;
  // log p(content, y_obs) up to the shared p(content | y_clean = -1) factor.
  const double pos_clean = std::log(prior) + log_ratio;
  const double neg_clean = std::log1p(-prior);
  auto term = [](double log_w, double p) {
    return p > 0.0 ? log_w + std::log(p) : -INFINITY;
  };
  double log_pos = detail::log_add(term(pos_clean, 1.0 - rho), term(neg_clean, rho));
  double log_neg = detail::log_add(term(pos_clean, rho), term(neg_clean, 1.0 - rho));
  if (cfg.balance_classes) {
    const double p_obs_pos = prior * (1.0 - rho) + (1.0 - prior) * rho;
    log_pos -= std::log(p_obs_pos);
    log_neg -= std::log1p(-p_obs_pos);
  }
  // logistic(log_pos - log_neg)
  const double d = log_pos - log_neg;
  return d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
}

// Closed-form p* from content tokens; ignores the spurious token and metadata.
inline double compute_p_star(const DgpConfig& cfg, const std::vector<TokenId>& tokens) {
  int net = 0;
  for (std::size_t i = first_content_index(tokens); i < tokens.size(); ++i)
    net += word_class(cfg, tokens[i]);
  return p_star_from_net_count(cfg, net);
}

namespace detail {

inline TokenId draw_content_word(const DgpConfig& cfg, int y_clean, Rng& rng) {
  // Total weight is identical for both labels.
  const double total = cfg.n_class_words * cfg.class_word_odds +
                       (cfg.vocab_size - cfg.n_class_words);
  const int own_start = y_clean > 0 ? 0 : cfg.n_class_words;
  const double u = rng.uniform() * total;
  const double class_mass = cfg.n_class_words * cfg.class_word_odds;
  int j;
  if (u < class_mass) {
    j = own_start + std::min(cfg.n_class_words - 1,
                             static_cast<int>(u / cfg.class_word_odds));
  } else {
    // Remaining words in id order, skipping the own-class block.
    int k = std::min(cfg.vocab_size - cfg.n_class_words - 1,
                     static_cast<int>(u - class_mass));
    j = (k < own_start) ? k : k + cfg.n_class_words;
  }
  return kFirstContentToken + static_cast<TokenId>(j);
}

// Bucket b's majority label is +1 for even b, -1 for odd b.
inline int draw_bucket(const DgpConfig& cfg, int y_clean, Rng& rng) {
  const int buckets = cfg.metadata_buckets;
  if (buckets == 1) return 0;
  const bool match = rng.bernoulli(cfg.metadata_skew);
  const int want_parity = ((y_clean > 0) == match) ? 0 : 1;
  const int count = (buckets - want_parity + 1) / 2;
  if (count == 0) return 0;
  return 2 * static_cast<int>(rng.below(static_cast<std::uint64_t>(count))) + want_parity;
}

inline Example draw_example(const DgpConfig& cfg, double pi, int env_id, Rng& rng) {
  Example ex;
  ex.env_id = env_id;
  ex.y_clean = rng.bernoulli(cfg.toxic_prior) ? 1 : -1;
  const int len = cfg.seq_len_min +
                  static_cast<int>(rng.below(
                      static_cast<std::uint64_t>(cfg.seq_len_max - cfg.seq_len_min + 1)));
  const int s = rng.bernoulli(pi) ? 1 : -1;
  ex.z = ex.y_clean * s;
  ex.tokens.reserve(static_cast<std::size_t>(len) + 1);
  if (cfg.spurious_token) ex.tokens.push_back(ex.z > 0 ? kSpuriousPosToken : kSpuriousNegToken);
  for (int i = 0; i < len; ++i) ex.tokens.push_back(draw_content_word(cfg, ex.y_clean, rng));
  ex.metadata.assign(static_cast<std::size_t>(cfg.metadata_dim()), 0.0);
  ex.metadata[static_cast<std::size_t>(draw_bucket(cfg, ex.y_clean, rng))] = 1.0;
  ex.metadata.back() = static_cast<double>(len) / cfg.seq_len_max;
  ex.y_obs = rng.bernoulli(cfg.flip_rate) ? -ex.y_clean : ex.y_clean;
  ex.p_star = compute_p_star(cfg, ex.tokens);
  return ex;
}

}  // namespace detail

inline Environment sample_environment(const DgpConfig& cfg, double pi, std::size_t n,
                                      int env_id, std::uint64_t seed) {
  cfg.validate();
  if (!(pi >= 0.0 && pi <= 1.0)) throw ConfigError("sample_environment: pi must lie in [0, 1]");
  if (n < 2) throw ConfigError("sample_environment: need n >= 2");

  Environment env{env_id, pi, {}};
  env.examples.reserve(n);
  Rng rng(seed);
  // Quotas for observed labels; rejection keeps each class i.i.d.
  const std::size_t quota_pos = n - n / 2;
  const std::size_t quota_neg = n / 2;
  std::size_t n_pos = 0, n_neg = 0;
  while (env.examples.size() < n) {
    Example ex = detail::draw_example(cfg, pi, env_id, rng);
    if (cfg.balance_classes) {
      std::size_t& count = ex.y_obs > 0 ? n_pos : n_neg;
      if (count >= (ex.y_obs > 0 ? quota_pos : quota_neg)) continue;
      ++count;
    }
    env.examples.push_back(std::move(ex));
  }
  return env;
}

namespace detail {

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0)
    throw DegenerateSampleError("correlation undefined: zero variance");
  return sab / std::sqrt(saa * sbb);
}

template <typename LabelFn>
double corr_with_z(const std::vector<Example>& examples, LabelFn label) {
  if (examples.size() < 2) throw DegenerateSampleError("correlation needs >= 2 examples");
  std::vector<double> y, z;
  y.reserve(examples.size());
  z.reserve(examples.size());
  for (const auto& ex : examples) {
    y.push_back(label(ex));
    z.push_back(ex.z);
  }
  return pearson(y, z);
}

}  // namespace detail

// Pearson correlation of (y_obs, z).
inline double corr_yz(const std::vector<Example>& examples) {
  return detail::corr_with_z(examples, [](const Example& e) { return double(e.y_obs); });
}
inline double corr_yz(const Environment& env) { return corr_yz(env.examples); }

// Pre-flip diagnostic: Pearson correlation of (y_clean, z).
inline double corr_clean_yz(const std::vector<Example>& examples) {
  return detail::corr_with_z(examples, [](const Example& e) { return double(e.y_clean); });
}
inline double corr_clean_yz(const Environment& env) { return corr_clean_yz(env.examples); }

// One environment per target pre-flip correlation c, with pi = (c + 1) / 2.
inline std::vector<Environment> make_deployment_sweep(const DgpConfig& cfg,
                                                      const std::vector<double>& corr_grid,
                                                      std::size_t n, std::uint64_t seed) {
  std::vector<Environment> envs;
  envs.reserve(corr_grid.size());
  for (std::size_t i = 0; i < corr_grid.size(); ++i) {
    const double c = corr_grid[i];
    if (!(std::abs(c) <= 1.0)) throw ConfigError("deployment sweep: |corr| must be <= 1");
    envs.push_back(sample_environment(cfg, (c + 1.0) / 2.0, n, static_cast<int>(i),
                                      derive_seed(seed, 0x5eedULL, i)));
  }
  return envs;
}

// ---- JSON ----

inline void to_json(nlohmann::json& j, const Example& ex) {
  j = nlohmann::json{{"tokens", ex.tokens}, {"metadata", ex.metadata}, {"y_obs", ex.y_obs},
                     {"y_clean", ex.y_clean}, {"z", ex.z},           {"p_star", ex.p_star},
                     {"env_id", ex.env_id}};
}

inline void from_json(const nlohmann::json& j, Example& ex) {
  j.at("tokens").get_to(ex.tokens);
  j.at("metadata").get_to(ex.metadata);
  j.at("y_obs").get_to(ex.y_obs);
  j.at("y_clean").get_to(ex.y_clean);
  j.at("z").get_to(ex.z);
  j.at("p_star").get_to(ex.p_star);
  j.at("env_id").get_to(ex.env_id);
}

inline void write_jsonl(std::ostream& out, const std::vector<Example>& examples) {
  for (const auto& ex : examples) out << nlohmann::json(ex).dump() << '\n';
}

inline void write_jsonl(std::ostream& out, const Environment& env) {
  write_jsonl(out, env.examples);
}

inline std::vector<Example> read_jsonl(std::istream& in) {
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line).get<Example>());
  }
  return out;
}

}  // namespace ctgshift
