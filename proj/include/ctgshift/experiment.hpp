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

// Experiment configuration (JSON) and the seeded sweep runner behind the
// `ctgshift run` command. Outputs, all byte-deterministic for a fixed
// config:
//
//   results.csv     one row per (split, kind, beta, seed, x)
//   summary.json    mean and sample sd over seeds per cell, diagnostics
//   plot_data.csv   long format: series, split, x, metric, mean, sd
//   control.csv     CONTROL_SWEEP only
//   train.log       per-epoch progress of every training run
//   MANIFEST.json   resolved config, seeds, file list, completion flag

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctgshift/corpus.hpp"
#include "ctgshift/csv.hpp"
#include "ctgshift/error.hpp"
#include "ctgshift/evian.hpp"
#include "ctgshift/features.hpp"
#include "ctgshift/generation.hpp"
#include "ctgshift/invariance.hpp"
#include "ctgshift/metrics.hpp"
#include "ctgshift/selection.hpp"
#include "ctgshift/trainer.hpp"

namespace ctgshift {

inline constexpr std::string_view kVersion = "0.1.0";

enum class ExperimentKind { kTokenSweep, kEvianPipeline, kControlSweep, kSelectionRun };
enum class SplitKind { kRandom, kMetadata, kEvianScramble, kEvianMetadata };

inline std::string_view to_string(ExperimentKind k) noexcept {
  switch (k) {
    case ExperimentKind::kTokenSweep: return "TOKEN_SWEEP";
    case ExperimentKind::kEvianPipeline: return "EVIAN_PIPELINE";
    case ExperimentKind::kControlSweep: return "CONTROL_SWEEP";
    case ExperimentKind::kSelectionRun: return "SELECTION_RUN";
  }
  return "?";
}

inline std::string_view to_string(SplitKind k) noexcept {
  switch (k) {
    case SplitKind::kRandom: return "RANDOM";
    case SplitKind::kMetadata: return "METADATA";
    case SplitKind::kEvianScramble: return "EVIAN_SCRAMBLE";
    case SplitKind::kEvianMetadata: return "EVIAN_METADATA";
  }
  return "?";
}

inline std::string_view to_string(SelectionProtocol p) noexcept {
  return p == SelectionProtocol::kOracle ? "ORACLE" : "LOO";
}

struct GridEntry {
  ObjectiveKind kind = ObjectiveKind::kErm;
  std::vector<double> betas{0.0};
  std::optional<double> gamma;
};

struct TrainEnvSpec {
  std::vector<double> pis{0.9, 0.99};
  std::size_t n = 5000;
};

struct TestSpec {
  std::vector<double> corr_grid{-0.9, -0.6, -0.3, 0.0, 0.3, 0.6, 0.9};
  std::size_t n = 5000;
  // Overrides the corpus flip rate for test environments when set.
  std::optional<double> flip_rate;
};

struct CorpusSpec {
  double pi = 0.95;
  std::size_t n = 20000;
};

struct SelectionSpec {
  std::vector<SelectionProtocol> protocols{SelectionProtocol::kOracle};
  ObjectiveKind kind = ObjectiveKind::kVrex;
  std::vector<double> betas{1.0, 5.0, 10.0};
  // Tercile feature for leave-one-out: "EVIAN" (corrupted prediction) or
  // "METADATA" (bucket index).
  std::string splitter = "EVIAN";
  double deploy_pi = 0.1;
  std::size_t deploy_n = 4000;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kTokenSweep;
  std::string name = "experiment";
  std::string output_dir = "out";
  std::vector<std::uint64_t> seeds{0};
  DgpConfig dgp;
  TrainConfig train;  // train.feat is the classifier featurization
  std::vector<GridEntry> grid{GridEntry{}};
  TrainEnvSpec train_envs;
  TestSpec test;
  CorpusSpec corpus;
  std::vector<SplitKind> splits{SplitKind::kRandom, SplitKind::kEvianScramble};
  EvianConfig evian;
  std::vector<DeploymentSpec> deployments;
  double threshold = 0.5;
  SelectionSpec selection;

  void validate() const {
    if (seeds.empty()) throw ConfigError("config: 'seeds' must list at least one seed");
    dgp.validate();
    train.validate();
    if (grid.empty()) throw ConfigError("config: 'grid' must not be empty");
    for (const auto& g : grid) {
      if (g.betas.empty()) throw ConfigError("config: every grid entry needs 'betas'");
      for (double b : g.betas) RegularizerConfig{g.kind, b, g.gamma}.validate();
    }
    if (train_envs.pis.empty()) throw ConfigError("config: 'train_envs.pis' must not be empty");
    for (double p : train_envs.pis)
      if (!(p >= 0 && p <= 1)) throw ConfigError("config: 'train_envs.pis' values must lie in [0, 1]");
    for (double c : test.corr_grid)
      if (!(c >= -1 && c <= 1)) throw ConfigError("config: 'test.corr_grid' values must lie in [-1, 1]");
    if (!(corpus.pi >= 0 && corpus.pi <= 1)) throw ConfigError("config: 'corpus.pi' must lie in [0, 1]");
    evian.validate();
    for (const auto& d : deployments) d.validate();
    if (kind == ExperimentKind::kControlSweep && deployments.empty())
      throw ConfigError("config: CONTROL_SWEEP needs 'deployments'");
    if (kind == ExperimentKind::kEvianPipeline && splits.empty())
      throw ConfigError("config: EVIAN_PIPELINE needs 'splits'");
    if (!(threshold > 0 && threshold < 1)) throw ConfigError("config: 'threshold' must lie in (0, 1)");
    if (selection.betas.empty()) throw ConfigError("config: 'selection.betas' must not be empty");
    if (selection.protocols.empty()) throw ConfigError("config: 'selection.protocols' must not be empty");
    if (selection.splitter != "EVIAN" && selection.splitter != "METADATA")
      throw ConfigError("config: 'selection.splitter' must be EVIAN or METADATA");
  }
};

// ---- parsing ----

namespace detail {

// Typed access to one JSON object; remembers consumed keys so unknown keys
// can be reported with their full path.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("config: '" + display() + "' must be an object");
  }

  bool has(const std::string& key) const { return j_->contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!has(key)) return;
    seen_.insert(key);
    out = convert<T>(j_->at(key), where(key));
  }

  template <typename T>
  void read(const std::string& key, std::optional<T>& out) {
    if (!has(key)) return;
    seen_.insert(key);
    if (j_->at(key).is_null()) {
      out.reset();
      return;
    }
    out = convert<T>(j_->at(key), where(key));
  }

  const nlohmann::json* take(const std::string& key) {
    if (!has(key)) return nullptr;
    seen_.insert(key);
    return &j_->at(key);
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_->items())
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + where(key) + "'");
  }

  template <typename T>
  static T convert(const nlohmann::json& v, const std::string& where) {
    auto fail = [&](const char* what) {
      return ConfigError("config: key '" + where + "': expected " + what);
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw fail("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw fail("a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw fail("a number");
      return v.get<double>();
    } else if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) throw fail("an integer");
      return v.get<int>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw fail("a non-negative integer");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) throw fail("an array of numbers");
      std::vector<double> out;
      for (const auto& e : v) {
        if (!e.is_number()) throw fail("an array of numbers");
        out.push_back(e.get<double>());
      }
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
      if (!v.is_array()) throw fail("an array of non-negative integers");
      std::vector<std::uint64_t> out;
      for (const auto& e : v) out.push_back(convert<std::uint64_t>(e, where));
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const nlohmann::json* j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Enum, typename Parse>
Enum parse_enum(const nlohmann::json& v, const std::string& where, Parse parse) {
  if (!v.is_string()) throw ConfigError("config: key '" + where + "': expected a string");
  try {
    return parse(v.get<std::string>());
  } catch (const ConfigError& e) {
    throw ConfigError("config: key '" + where + "': " + e.what());
  }
}

inline ExperimentKind experiment_kind_from_string(std::string_view s) {
  for (auto k : {ExperimentKind::kTokenSweep, ExperimentKind::kEvianPipeline,
                 ExperimentKind::kControlSweep, ExperimentKind::kSelectionRun})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown experiment kind '" + std::string(s) + "'");
}

inline SplitKind split_kind_from_string(std::string_view s) {
  for (auto k : {SplitKind::kRandom, SplitKind::kMetadata, SplitKind::kEvianScramble,
                 SplitKind::kEvianMetadata})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

inline SelectionProtocol protocol_from_string(std::string_view s) {
  if (s == "LOO") return SelectionProtocol::kLeaveOneOut;
  if (s == "ORACLE") return SelectionProtocol::kOracle;
  throw ConfigError("unknown selection protocol '" + std::string(s) + "'");
}

inline void read_dgp(const nlohmann::json& j, const std::string& path, DgpConfig& c) {
  ConfigReader r(j, path);
  r.read("vocab_size", c.vocab_size);
  r.read("n_class_words", c.n_class_words);
  r.read("class_word_odds", c.class_word_odds);
  r.read("seq_len_min", c.seq_len_min);
  r.read("seq_len_max", c.seq_len_max);
  r.read("flip_rate", c.flip_rate);
  r.read("balance_classes", c.balance_classes);
  r.read("metadata_buckets", c.metadata_buckets);
  r.read("metadata_skew", c.metadata_skew);
  r.read("toxic_prior", c.toxic_prior);
  r.read("spurious_token", c.spurious_token);
  r.finish();
}

// metadata_slots defaults to the corpus metadata width.
inline void read_feat(const nlohmann::json& j, const std::string& path, const DgpConfig& dgp,
                      FeatConfig& c) {
  ConfigReader r(j, path);
  r.read("dim", c.dim);
  r.read("use_unigrams", c.use_unigrams);
  r.read("use_bigrams", c.use_bigrams);
  r.read("include_metadata", c.include_metadata);
  c.metadata_slots = static_cast<std::size_t>(dgp.metadata_dim());
  r.read("metadata_slots", c.metadata_slots);
  r.read("normalize", c.normalize);
  r.finish();
}

inline void default_feat(const DgpConfig& dgp, FeatConfig& c) {
  c.metadata_slots = static_cast<std::size_t>(dgp.metadata_dim());
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  using detail::ConfigReader;
  ExperimentConfig c;
  ConfigReader r(j, "");
  if (const auto* v = r.take("experiment"))
    c.kind = detail::parse_enum<ExperimentKind>(*v, "experiment", detail::experiment_kind_from_string);
  else
    throw ConfigError("config: missing key 'experiment'");
  r.read("name", c.name);
  r.read("output_dir", c.output_dir);
  r.read("seeds", c.seeds);
  r.read("threshold", c.threshold);
  if (const auto* v = r.take("dgp")) detail::read_dgp(*v, "dgp", c.dgp);

  detail::default_feat(c.dgp, c.train.feat);
  if (const auto* v = r.take("feat")) detail::read_feat(*v, "feat", c.dgp, c.train.feat);
  if (const auto* v = r.take("train")) {
    ConfigReader t(*v, "train");
    t.read("lr", c.train.lr);
    t.read("epochs", c.train.epochs);
    t.read("batch_size", c.train.batch_size);
    t.read("warmup_frac", c.train.warmup_frac);
    t.read("repr_dim", c.train.repr_dim);
    t.finish();
  }
  if (const auto* v = r.take("grid")) {
    if (!v->is_array()) throw ConfigError("config: key 'grid': expected an array");
    c.grid.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      const std::string path = "grid[" + std::to_string(i) + "]";
      ConfigReader g((*v)[i], path);
      GridEntry e;
      if (const auto* k = g.take("kind"))
        e.kind = detail::parse_enum<ObjectiveKind>(*k, g.where("kind"), objective_kind_from_string);
      else
        throw ConfigError("config: missing key '" + g.where("kind") + "'");
      if (e.kind != ObjectiveKind::kErm) e.betas = {};
      g.read("betas", e.betas);
      g.read("gamma", e.gamma);
      g.finish();
      c.grid.push_back(std::move(e));
    }
  }
  if (const auto* v = r.take("train_envs")) {
    ConfigReader t(*v, "train_envs");
    t.read("pis", c.train_envs.pis);
    t.read("n", c.train_envs.n);
    t.finish();
  }
  if (const auto* v = r.take("test")) {
    ConfigReader t(*v, "test");
    t.read("corr_grid", c.test.corr_grid);
    t.read("n", c.test.n);
    t.read("flip_rate", c.test.flip_rate);
    t.finish();
  }
  if (const auto* v = r.take("corpus")) {
    ConfigReader t(*v, "corpus");
    t.read("pi", c.corpus.pi);
    t.read("n", c.corpus.n);
    t.finish();
  }
  if (const auto* v = r.take("splits")) {
    if (!v->is_array()) throw ConfigError("config: key 'splits': expected an array");
    c.splits.clear();
    for (std::size_t i = 0; i < v->size(); ++i)
      c.splits.push_back(detail::parse_enum<SplitKind>((*v)[i], "splits[" + std::to_string(i) + "]",
                                                       detail::split_kind_from_string));
  }
  detail::default_feat(c.dgp, c.evian.feat);
  if (const auto* v = r.take("evian")) {
    ConfigReader t(*v, "evian");
    if (const auto* k = t.take("corruption"))
      c.evian.corruption = detail::parse_enum<Corruption>(*k, "evian.corruption", corruption_from_string);
    t.read("k", c.evian.k);
    t.read("l2", c.evian.l2);
    if (const auto* f = t.take("feat")) detail::read_feat(*f, "evian.feat", c.dgp, c.evian.feat);
    t.finish();
  }
  if (const auto* v = r.take("deployments")) {
    if (!v->is_array()) throw ConfigError("config: key 'deployments': expected an array");
    for (std::size_t i = 0; i < v->size(); ++i) {
      ConfigReader t((*v)[i], "deployments[" + std::to_string(i) + "]");
      DeploymentSpec d;
      d.h = static_cast<int>(i);
      t.read("h", d.h);
      t.read("pi_h", d.pi_h);
      t.read("n_samples", d.n_samples);
      t.read("content_shift", d.content_shift);
      t.read("seed", d.seed);
      t.finish();
      c.deployments.push_back(d);
    }
  }
  if (const auto* v = r.take("selection")) {
    ConfigReader t(*v, "selection");
    if (const auto* p = t.take("protocols")) {
      if (!p->is_array()) throw ConfigError("config: key 'selection.protocols': expected an array");
      c.selection.protocols.clear();
      for (std::size_t i = 0; i < p->size(); ++i)
        c.selection.protocols.push_back(detail::parse_enum<SelectionProtocol>(
            (*p)[i], "selection.protocols[" + std::to_string(i) + "]", detail::protocol_from_string));
    }
    if (const auto* k = t.take("kind"))
      c.selection.kind = detail::parse_enum<ObjectiveKind>(*k, "selection.kind", objective_kind_from_string);
    t.read("betas", c.selection.betas);
    t.read("splitter", c.selection.splitter);
    t.read("deploy_pi", c.selection.deploy_pi);
    t.read("deploy_n", c.selection.deploy_n);
    t.finish();
  }
  r.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

// ---- resolved config ----

inline nlohmann::json to_json(const DgpConfig& c) {
  return {{"vocab_size", c.vocab_size},           {"n_class_words", c.n_class_words},
          {"class_word_odds", c.class_word_odds}, {"seq_len_min", c.seq_len_min},
          {"seq_len_max", c.seq_len_max},         {"flip_rate", c.flip_rate},
          {"balance_classes", c.balance_classes}, {"metadata_buckets", c.metadata_buckets},
          {"metadata_skew", c.metadata_skew},     {"toxic_prior", c.toxic_prior},
          {"spurious_token", c.spurious_token}};
}

inline nlohmann::json to_json(const FeatConfig& c) {
  return {{"dim", c.dim},
          {"use_unigrams", c.use_unigrams},
          {"use_bigrams", c.use_bigrams},
          {"include_metadata", c.include_metadata},
          {"metadata_slots", c.metadata_slots},
          {"normalize", c.normalize}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& g : c.grid) {
    nlohmann::json e{{"kind", to_string(g.kind)}, {"betas", g.betas}};
    e["gamma"] = g.gamma ? nlohmann::json(*g.gamma) : nlohmann::json(nullptr);
    grid.push_back(e);
  }
  nlohmann::json splits = nlohmann::json::array();
  for (auto s : c.splits) splits.push_back(to_string(s));
  nlohmann::json deps = nlohmann::json::array();
  for (const auto& d : c.deployments) {
    nlohmann::json e{{"h", d.h}, {"pi_h", d.pi_h}, {"n_samples", d.n_samples}, {"seed", d.seed}};
    e["content_shift"] = d.content_shift ? nlohmann::json(*d.content_shift) : nlohmann::json(nullptr);
    deps.push_back(e);
  }
  nlohmann::json protocols = nlohmann::json::array();
  for (auto p : c.selection.protocols) protocols.push_back(to_string(p));
  nlohmann::json test{{"corr_grid", c.test.corr_grid}, {"n", c.test.n}};
  test["flip_rate"] = c.test.flip_rate ? nlohmann::json(*c.test.flip_rate) : nlohmann::json(nullptr);
  return {
      {"experiment", to_string(c.kind)},
      {"name", c.name},
      {"output_dir", c.output_dir},
      {"seeds", c.seeds},
      {"threshold", c.threshold},
      {"dgp", to_json(c.dgp)},
      {"feat", to_json(c.train.feat)},
      {"train",
       {{"lr", c.train.lr},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"warmup_frac", c.train.warmup_frac},
        {"repr_dim", c.train.repr_dim}}},
      {"grid", grid},
      {"train_envs", {{"pis", c.train_envs.pis}, {"n", c.train_envs.n}}},
      {"test", test},
      {"corpus", {{"pi", c.corpus.pi}, {"n", c.corpus.n}}},
      {"splits", splits},
      {"evian",
       {{"corruption", to_string(c.evian.corruption)},
        {"k", c.evian.k},
        {"l2", c.evian.l2},
        {"feat", to_json(c.evian.feat)}}},
      {"deployments", deps},
      {"selection",
       {{"protocols", protocols},
        {"kind", to_string(c.selection.kind)},
        {"betas", c.selection.betas},
        {"splitter", c.selection.splitter},
        {"deploy_pi", c.selection.deploy_pi},
        {"deploy_n", c.selection.deploy_n}}},
  };
}

// ---- data ----

// Training environments: one per train_envs.pis entry, env id = index.
inline std::vector<Environment> experiment_training_envs(const ExperimentConfig& cfg, std::uint64_t seed) {
  std::vector<Environment> envs;
  for (std::size_t e = 0; e < cfg.train_envs.pis.size(); ++e)
    envs.push_back(sample_environment(cfg.dgp, cfg.train_envs.pis[e], cfg.train_envs.n,
                                      static_cast<int>(e), derive_seed(seed, 100, e)));
  return envs;
}

inline std::vector<Environment> experiment_test_envs(const ExperimentConfig& cfg, std::uint64_t seed) {
  DgpConfig td = cfg.dgp;
  if (cfg.test.flip_rate) td.flip_rate = *cfg.test.flip_rate;
  return make_deployment_sweep(td, cfg.test.corr_grid, cfg.test.n, derive_seed(seed, 200));
}

// Unlabelled-environment corpus that EviaN partitions.
inline Environment experiment_corpus(const ExperimentConfig& cfg, std::uint64_t seed) {
  return sample_environment(cfg.dgp, cfg.corpus.pi, cfg.corpus.n, 0, derive_seed(seed, 300));
}

// Metadata-only inference always sees the metadata slots.
inline EvianConfig experiment_evian_config(const ExperimentConfig& cfg, std::uint64_t seed,
                                           Corruption corruption) {
  EvianConfig ec = cfg.evian;
  ec.seed = derive_seed(seed, 320);
  ec.corruption = corruption;
  if (corruption == Corruption::kMetadataOnly) {
    ec.feat.include_metadata = true;
    ec.feat.metadata_slots = static_cast<std::size_t>(cfg.dgp.metadata_dim());
  }
  return ec;
}

// ---- results ----

struct ResultRow {
  std::string split;
  ObjectiveKind kind = ObjectiveKind::kErm;
  double beta = 0;
  std::uint64_t seed = 0;
  double x = 0;  // test corr(y, z), or deployment id h for control sweeps
  std::optional<double> loss, accuracy, f1, ece;
  std::optional<double> acceptance_rate, toxic_fraction_true, diversity_ratio;
};

inline const std::vector<std::string>& result_columns() {
  static const std::vector<std::string> cols{
      "experiment", "split", "kind", "beta", "seed", "x", "loss", "accuracy", "f1", "ece",
      "acceptance_rate", "toxic_fraction_true", "diversity_ratio"};
  return cols;
}

namespace detail {

inline auto row_key(const ResultRow& r) {
  return std::make_tuple(r.split, static_cast<int>(r.kind), r.beta, r.seed, r.x);
}

inline const std::vector<std::pair<std::string, std::optional<double> ResultRow::*>>& metric_fields() {
  static const std::vector<std::pair<std::string, std::optional<double> ResultRow::*>> f{
      {"loss", &ResultRow::loss},
      {"accuracy", &ResultRow::accuracy},
      {"f1", &ResultRow::f1},
      {"ece", &ResultRow::ece},
      {"acceptance_rate", &ResultRow::acceptance_rate},
      {"toxic_fraction_true", &ResultRow::toxic_fraction_true},
      {"diversity_ratio", &ResultRow::diversity_ratio}};
  return f;
}

inline std::string series_name(ObjectiveKind k, double beta) {
  return std::string(to_string(k)) + "_beta=" + format_number(beta);
}

}  // namespace detail

inline void sort_rows(std::vector<ResultRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return detail::row_key(a) < detail::row_key(b);
  });
}

inline void write_results_csv(std::ostream& out, const std::string& experiment,
                              const std::vector<ResultRow>& rows) {
  write_csv_row(out, result_columns());
  for (const auto& r : rows)
    write_csv_row(out, {experiment, r.split, std::string(to_string(r.kind)), format_number(r.beta),
                        std::to_string(r.seed), format_number(r.x), format_number(r.loss),
                        format_number(r.accuracy), format_number(r.f1), format_number(r.ece),
                        format_number(r.acceptance_rate), format_number(r.toxic_fraction_true),
                        format_number(r.diversity_ratio)});
}

struct CellStats {
  std::string split;
  ObjectiveKind kind;
  double beta;
  double x;
  std::size_t n_seeds = 0;
  // metric -> (mean, sd); sd absent with fewer than two values.
  std::map<std::string, std::pair<double, std::optional<double>>> metrics;
};

// Mean and sample standard deviation over seeds for every
// (split, kind, beta, x) cell. Missing metrics are skipped.
inline std::vector<CellStats> summarize(const std::vector<ResultRow>& rows) {
  using Key = std::tuple<std::string, int, double, double>;
  std::map<Key, std::vector<const ResultRow*>> cells;
  for (const auto& r : rows) cells[{r.split, static_cast<int>(r.kind), r.beta, r.x}].push_back(&r);
  std::vector<CellStats> out;
  for (const auto& [key, members] : cells) {
    CellStats s{std::get<0>(key), static_cast<ObjectiveKind>(std::get<1>(key)), std::get<2>(key),
                std::get<3>(key), members.size(), {}};
    for (const auto& [name, field] : detail::metric_fields()) {
      std::vector<double> v;
      for (const auto* r : members)
        if (r->*field) v.push_back(*(r->*field));
      if (v.empty()) continue;
      double mean = 0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      std::optional<double> sd;
      if (v.size() >= 2) {
        double ss = 0;
        for (double x : v) ss += (x - mean) * (x - mean);
        sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
      }
      s.metrics[name] = {mean, sd};
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline nlohmann::json summary_json(const std::vector<CellStats>& cells) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [name, stat] : c.metrics)
      m[name] = {{"mean", stat.first},
                 {"sd", stat.second ? nlohmann::json(*stat.second) : nlohmann::json(nullptr)}};
    arr.push_back({{"split", c.split},
                   {"kind", to_string(c.kind)},
                   {"beta", c.beta},
                   {"x", c.x},
                   {"n_seeds", c.n_seeds},
                   {"metrics", m}});
  }
  return arr;
}

inline void write_plot_csv(std::ostream& out, const std::vector<CellStats>& cells) {
  write_csv_row(out, {"series", "split", "x", "metric", "mean", "sd"});
  for (const auto& c : cells)
    for (const auto& [name, stat] : c.metrics)
      write_csv_row(out, {detail::series_name(c.kind, c.beta), c.split, format_number(c.x), name,
                          format_number(stat.first), format_number(stat.second)});
}

// ---- runner ----

namespace detail {

inline void fill_eval(ResultRow& row, const EvalReport& e) {
  row.loss = e.loss;
  row.accuracy = e.accuracy;
  row.f1 = e.f1;
  row.ece = e.ece;
}

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, std::ostream* log) : cfg_(cfg), log_(log) {}

  std::vector<ResultRow> rows;
  std::vector<ControlRow> control_rows;
  nlohmann::json diagnostics = nlohmann::json::array();
  nlohmann::json selections = nlohmann::json::array();

  void run() {
    for (std::uint64_t seed : cfg_.seeds) {
      switch (cfg_.kind) {
        case ExperimentKind::kTokenSweep: token_sweep(seed); break;
        case ExperimentKind::kEvianPipeline: evian_pipeline(seed); break;
        case ExperimentKind::kControlSweep: control(seed); break;
        case ExperimentKind::kSelectionRun: selection(seed); break;
      }
    }
  }

 private:
  std::vector<Environment> training_envs(std::uint64_t seed) const {
    return experiment_training_envs(cfg_, seed);
  }

  std::vector<Environment> test_envs(std::uint64_t seed) const {
    return experiment_test_envs(cfg_, seed);
  }

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig t = cfg_.train;
    t.seed = derive_seed(seed, 500);
    return t;
  }

  Model fit(const std::vector<Environment>& envs, std::uint64_t seed, const std::string& split,
            ObjectiveKind kind, double beta, std::optional<double> gamma) {
    if (log_)
      *log_ << "# train split=" << split << " kind=" << to_string(kind)
            << " beta=" << format_number(beta) << " seed=" << seed << '\n';
    EpochCallback cb;
    if (log_) cb = [this](const EpochStats& s) { write_progress(*log_, s); };
    return train(envs, train_config(seed), {kind, beta, gamma}, cb);
  }

  void evaluate_grid(const Model& m, const std::vector<Environment>& tests, const std::string& split,
                     ObjectiveKind kind, double beta, std::uint64_t seed) {
    for (std::size_t g = 0; g < tests.size(); ++g) {
      ResultRow row{split, kind, beta, seed, cfg_.test.corr_grid[g], {}, {}, {}, {}, {}, {}, {}};
      fill_eval(row, evaluate(m, tests[g], cfg_.train.feat));
      rows.push_back(row);
    }
  }

  void sweep_grid(const std::vector<Environment>& envs, const std::vector<Environment>& tests,
                  const std::string& split, std::uint64_t seed) {
    for (const auto& g : cfg_.grid)
      for (double beta : g.betas)
        evaluate_grid(fit(envs, seed, split, g.kind, beta, g.gamma), tests, split, g.kind, beta, seed);
  }

  // Observed (post-flip) and clean (pre-flip) corr(y, z) per environment.
  void record(std::uint64_t seed, const std::string& split, const std::vector<Environment>& envs) {
    auto corr = [](auto f, const Environment& env) -> nlohmann::json {
      try {
        return f(env);
      } catch (const DegenerateSampleError&) {
        return nullptr;
      }
    };
    nlohmann::json es = nlohmann::json::array();
    for (const auto& env : envs)
      es.push_back({{"env_id", env.id},
                    {"size", env.size()},
                    {"pi", env.pi},
                    {"corr_yz", corr([](const Environment& e) { return corr_yz(e); }, env)},
                    {"corr_clean_yz", corr([](const Environment& e) { return corr_clean_yz(e); }, env)}});
    diagnostics.push_back({{"seed", seed}, {"split", split}, {"environments", es}});
  }

  void token_sweep(std::uint64_t seed) {
    const auto envs = training_envs(seed);
    record(seed, "TRAIN", envs);
    sweep_grid(envs, test_envs(seed), "TOKEN", seed);
  }

  std::vector<Environment> make_split(const Environment& corpus, SplitKind kind, std::uint64_t seed) {
    std::vector<Environment> envs(2);
    envs[0].id = 0;
    envs[1].id = 1;
    auto place = [&](Example ex, int env) {
      ex.env_id = env;
      envs[static_cast<std::size_t>(env)].examples.push_back(std::move(ex));
    };
    switch (kind) {
      case SplitKind::kRandom: {
        std::vector<std::size_t> order(corpus.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(seed, 310));
        rng.shuffle(std::span<std::size_t>(order));
        for (std::size_t r = 0; r < order.size(); ++r)
          place(corpus.examples[order[r]], r < order.size() / 2 ? 0 : 1);
        break;
      }
      case SplitKind::kMetadata: {
        // Even buckets lean toxic, odd buckets lean non-toxic.
        for (const auto& ex : corpus.examples) {
          const auto it = std::max_element(ex.metadata.begin(), ex.metadata.end() - 1);
          place(ex, static_cast<int>(it - ex.metadata.begin()) % 2);
        }
        break;
      }
      case SplitKind::kEvianScramble:
      case SplitKind::kEvianMetadata: {
        EvianResult res = evian_partition(
            corpus.examples,
            experiment_evian_config(cfg_, seed,
                                    kind == SplitKind::kEvianScramble ? Corruption::kScramble
                                                                      : Corruption::kMetadataOnly));
        return std::move(res.environments);
      }
    }
    for (const auto& e : envs)
      if (e.examples.size() < 2)
        throw PartitionError(std::string(to_string(kind)) + " split left an environment with < 2 examples");
    for (auto& env : envs) {
      double aligned = 0;
      for (const auto& ex : env.examples) aligned += ex.z == ex.y_clean ? 1.0 : 0.0;
      env.pi = aligned / static_cast<double>(env.size());
    }
    return envs;
  }

  void evian_pipeline(std::uint64_t seed) {
    const Environment corpus = experiment_corpus(cfg_, seed);
    const auto tests = test_envs(seed);
    for (SplitKind split : cfg_.splits) {
      const auto envs = make_split(corpus, split, seed);
      record(seed, std::string(to_string(split)), envs);
      sweep_grid(envs, tests, std::string(to_string(split)), seed);
    }
  }

  void control(std::uint64_t seed) {
    const auto envs = training_envs(seed);
    record(seed, "TRAIN", envs);
    std::vector<std::pair<std::string, Model>> models;
    std::vector<std::pair<ObjectiveKind, double>> ids;
    for (const auto& g : cfg_.grid)
      for (double beta : g.betas) {
        models.emplace_back(series_name(g.kind, beta), fit(envs, seed, "TOKEN", g.kind, beta, g.gamma));
        ids.emplace_back(g.kind, beta);
      }
    std::vector<DeploymentSpec> specs = cfg_.deployments;
    for (auto& s : specs) s.seed = derive_seed(seed, 400, s.seed, static_cast<std::uint64_t>(s.h));
    const auto table = control_sweep(specs, models, cfg_.dgp, cfg_.train.feat, cfg_.threshold);
    for (std::size_t i = 0; i < table.size(); ++i) {
      const ControlRow& c = table[i];
      const auto& [kind, beta] = ids[i % ids.size()];
      ResultRow row{"CONTROL", kind, beta, seed, static_cast<double>(c.h), c.loss, std::nullopt,
                    c.f1, c.ece, c.acceptance_rate, c.toxic_fraction_true, c.diversity_ratio};
      rows.push_back(row);
      control_rows.push_back(c);
      control_rows.back().seed = seed;
    }
  }

  void selection(std::uint64_t seed) {
    const auto envs = training_envs(seed);
    record(seed, "TRAIN", envs);
    const double deploy_corr = 2.0 * cfg_.selection.deploy_pi - 1.0;
    const Environment deploy = sample_environment(cfg_.dgp, cfg_.selection.deploy_pi,
                                                  cfg_.selection.deploy_n, 9, derive_seed(seed, 600));
    const auto [val, test] = split_validation_test(deploy, derive_seed(seed, 601));
    const ObjectiveKind kind = cfg_.selection.kind;
    auto emit = [&](const std::string& split, double beta, const Model& m) {
      ResultRow row{split, kind, beta, seed, deploy_corr, {}, {}, {}, {}, {}, {}, {}};
      fill_eval(row, evaluate(m, test, cfg_.train.feat));
      rows.push_back(row);
    };
    std::vector<std::pair<double, Model>> trained;
    for (double beta : cfg_.selection.betas) {
      trained.emplace_back(beta, fit(envs, seed, "CANDIDATE", kind, beta, std::nullopt));
      emit("CANDIDATE", beta, trained.back().second);
    }
    auto model_for = [&](double beta) -> const Model& {
      for (const auto& [b, m] : trained)
        if (b == beta) return m;
      throw ContractViolation("selection: chosen beta is not a grid member");
    };
    for (SelectionProtocol p : cfg_.selection.protocols) {
      SelectionReport rep;
      if (p == SelectionProtocol::kOracle) {
        rep = oracle_select(trained, val, cfg_.train.feat);
      } else {
        std::vector<Example> pooled;
        for (const auto& e : envs) pooled.insert(pooled.end(), e.examples.begin(), e.examples.end());
        std::vector<double> feature;
        if (cfg_.selection.splitter == "EVIAN") {
          EvianConfig ec = cfg_.evian;
          ec.seed = derive_seed(seed, 610);
          feature = evian_partition(pooled, ec).predictions;
        } else {
          for (const auto& ex : pooled)
            feature.push_back(static_cast<double>(
                std::max_element(ex.metadata.begin(), ex.metadata.end() - 1) - ex.metadata.begin()));
        }
        rep = loo_select(pooled, feature, cfg_.selection.betas, train_config(seed),
                         {kind, 0.0, std::nullopt});
      }
      nlohmann::json j = selection_report_json(rep);
      j["seed"] = seed;
      selections.push_back(j);
      emit(std::string(to_string(p)) + "_SELECTED", rep.chosen_beta, model_for(rep.chosen_beta));
    }
  }

  const ExperimentConfig& cfg_;
  std::ostream* log_;
};

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary);
  out << j.dump(2) << '\n';
}

}  // namespace detail

struct RunResult {
  std::vector<ResultRow> rows;
  std::vector<std::string> files;
  bool complete = false;
};

// Runs the experiment and writes every output under out_dir. On a module
// error the rows gathered so far are flushed, the manifest is marked
// incomplete, and the error is rethrown.
inline RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "train.log", std::ios::binary);
  detail::Runner runner(cfg, &log);
  std::optional<std::string> error;
  std::exception_ptr failure;
  try {
    runner.run();
  } catch (const std::exception& e) {
    error = e.what();
    failure = std::current_exception();
  }
  log.close();

  RunResult res;
  res.complete = !error;
  res.rows = runner.rows;
  sort_rows(res.rows);
  {
    std::ofstream out(out_dir / "results.csv", std::ios::binary);
    write_results_csv(out, cfg.name, res.rows);
  }
  const auto cells = summarize(res.rows);
  nlohmann::json summary{{"experiment", cfg.name},
                         {"kind", to_string(cfg.kind)},
                         {"seeds", cfg.seeds},
                         {"cells", summary_json(cells)}};
  if (!runner.diagnostics.empty()) summary["environment_diagnostics"] = runner.diagnostics;
  if (!runner.selections.empty()) summary["selection"] = runner.selections;
  detail::write_json_file(out_dir / "summary.json", summary);
  {
    std::ofstream out(out_dir / "plot_data.csv", std::ios::binary);
    write_plot_csv(out, cells);
  }
  res.files = {"results.csv", "summary.json", "plot_data.csv", "train.log"};
  if (cfg.kind == ExperimentKind::kControlSweep) {
    auto rows = runner.control_rows;
    std::stable_sort(rows.begin(), rows.end(), [](const ControlRow& a, const ControlRow& b) {
      return std::tie(a.h, a.model, a.seed) < std::tie(b.h, b.model, b.seed);
    });
    std::ofstream out(out_dir / "control.csv", std::ios::binary);
    write_control_csv(out, rows);
    res.files.push_back("control.csv");
  }
  nlohmann::json manifest{{"tool", "ctgshift"},
                          {"version", kVersion},
                          {"complete", res.complete},
                          {"error", error ? nlohmann::json(*error) : nlohmann::json(nullptr)},
                          {"seeds", cfg.seeds},
                          {"files", res.files},
                          {"config", to_json(cfg)}};
  detail::write_json_file(out_dir / "MANIFEST.json", manifest);
  if (failure) std::rethrow_exception(failure);
  return res;
}

}  // namespace ctgshift
