#pragma once
// Run configuration: one JSON document with a section per stage. Every key is
// optional; an absent key keeps its default, an unknown key is an error.

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "nasforge/evolution.hpp"
#include "nasforge/pim.hpp"
#include "nasforge/pruning.hpp"
#include "nasforge/ranking.hpp"

namespace nasforge {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::size_t rows = 100000;
  std::size_t dense = 13;
  std::size_t sparse = 26;
  std::size_t vocab = 200;
  double teacher_scale = 1.0;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  std::size_t embedding_cap = kDefaultEmbeddingCap;
};

/// Settings for the search stage and the candidates it hands on.
struct SearchSection {
  EvolutionConfig evolution;
  bool finetune = false;
  /// Validation rows used for fitness; 0 means all of them.
  std::size_t val_rows = 0;
  double alpha = 1.0;
  double beta = 0.0;
  std::size_t top_k = 15;
  /// Leading candidates of the top-k list retrained from scratch.
  std::size_t retrain = 15;
  TrainConfig retrain_train;
  std::vector<double> lr_grid = kLrGrid;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string space_preset = "full";
  DataConfig data;
  SpaceConfig space;
  TrainConfig train;
  FinetuneConfig finetune;
  SearchSection search;
  RankConfig ranking;
  PruneConfig pruning;
  PruneVariant prune_variant = PruneVariant::kMask;
  HwConfig hw;

  /// Every error in the resolved configuration, one line each.
  std::vector<std::string> check() const {
    std::vector<std::string> e;
    auto add = [&e](const char* section, const std::vector<std::string>& v) {
      for (const auto& s : v) e.push_back(std::string(section) + ": " + s);
    };
    add("space", space.check());
    add("train", train.check());
    add("evolution", search.evolution.check());
    add("evolution.retrain", search.retrain_train.check());
    add("ranking.scratch", ranking.scratch.check());
    add("pruning.train", pruning.train.check());
    add("hw", hw.check());
    if (data.rows < 10) e.push_back("data: rows must be at least 10");
    if (data.vocab < 2) e.push_back("data: vocab must be at least 2");
    if (data.dense == 0 && data.sparse == 0) e.push_back("data: no features");
    if (!(data.train_fraction > 0 && data.val_fraction > 0 && data.train_fraction + data.val_fraction < 1))
      e.push_back("data: train and val fractions must be positive and leave a test split");
    if (search.top_k == 0) e.push_back("evolution: top_k must be positive");
    if (search.retrain == 0 || search.retrain > search.top_k) e.push_back("evolution: retrain must lie in [1, top_k]");
    for (double lr : search.lr_grid)
      if (!(lr > 0 && lr < 1)) e.push_back("evolution: lr_grid entries must lie in (0, 1)");
    if (!(search.alpha >= 0 && search.beta >= 0 && search.alpha + search.beta > 0))
      e.push_back("evolution: alpha and beta must be non-negative and not both zero");
    if (ranking.n_subnets < 2) e.push_back("ranking: n_subnets must be at least 2");
    if (ranking.top_fraction && !(*ranking.top_fraction > 0 && *ranking.top_fraction <= 1))
      e.push_back("ranking: top_fraction must lie in (0, 1]");
    if (!(pruning.rate > 0 && pruning.rate < 1)) e.push_back("pruning: rate must lie in (0, 1)");
    if (!(pruning.hidden_ratio >= 1)) e.push_back("pruning: hidden_ratio must be at least 1");
    if (workers == 0) e.push_back("workers must be positive");
    return e;
  }
};

namespace detail {

/// Reads optional keys from one JSON object and remembers which it saw.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where() + key + ": wrong type");
    }
  }

  template <class T, class Parse>
  void read_enum(const char* key, T& out, Parse parse) {
    std::string s;
    known_.insert(key);
    if (!j_.contains(key)) return;
    read(key, s);
    const auto v = parse(s);
    if (!v) throw ConfigError(where() + key + ": unknown value '" + s + "'");
    out = *v;
  }

  template <class T, class Parse>
  void read_enum_list(const char* key, std::vector<T>& out, Parse parse) {
    std::vector<std::string> names;
    known_.insert(key);
    if (!j_.contains(key)) return;
    read(key, names);
    out.clear();
    for (const auto& s : names) {
      const auto v = parse(s);
      if (!v) throw ConfigError(where() + key + ": unknown value '" + s + "'");
      out.push_back(*v);
    }
  }

  /// Nested object, or nullptr when absent.
  const nlohmann::json* child(const char* key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!known_.count(k)) throw ConfigError(where() + "unknown key '" + k + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : "config." + path_ + ": "; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> known_;
};

inline std::optional<TopFilter> parse_top_filter(const std::string& s) {
  for (auto f : {TopFilter::kGroundTruth, TopFilter::kSupernet})
    if (s == name_of(f)) return f;
  return std::nullopt;
}

inline std::optional<PruneVariant> parse_prune_variant(const std::string& s) {
  for (auto v : {PruneVariant::kMask, PruneVariant::kMagnitude})
    if (s == name_of(v)) return v;
  return std::nullopt;
}

inline std::optional<SpaceConfig> space_preset(const std::string& s) {
  if (s == "full") return SpaceConfig::full();
  if (s == "small") return SpaceConfig::small();
  return std::nullopt;
}

inline void read_train(const nlohmann::json& j, const std::string& path, TrainConfig& t) {
  Reader r(j, path);
  r.read("batch_size", t.batch_size);
  r.read("lr", t.lr0);
  r.read("epochs", t.epochs);
  r.read("max_steps", t.max_steps);
  r.read("log_every", t.log_every);
  r.read_enum("strategy", t.strategy, parse_strategy);
  r.read("warmup_fraction", t.warmup_fraction);
  r.finish();
}

inline nlohmann::json train_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size}, {"lr", t.lr0},
          {"epochs", t.epochs},         {"max_steps", t.max_steps},
          {"log_every", t.log_every},
          {"strategy", name_of(t.strategy)},  {"warmup_fraction", t.warmup_fraction}};
}

inline void read_finetune(const nlohmann::json& j, const std::string& path, FinetuneConfig& f) {
  Reader r(j, path);
  r.read("steps", f.steps);
  r.read("lr", f.lr);
  r.finish();
}

inline nlohmann::json finetune_json(const FinetuneConfig& f) { return {{"steps", f.steps}, {"lr", f.lr}}; }

template <class T>
nlohmann::json names_json(const std::vector<T>& v) {
  nlohmann::json out = nlohmann::json::array();
  for (auto x : v) out.push_back(name_of(x));
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const SpaceConfig& s) {
  return {{"blocks", s.num_blocks},
          {"dense_ops", detail::names_json(s.dense_ops)},
          {"sparse_ops", detail::names_json(s.sparse_ops)},
          {"dense_dims", s.dense_dims},
          {"sparse_dims", s.sparse_dims},
          {"mergers", s.allow_mergers},
          {"weight_bits", s.weight_bits_choices},
          {"dim_s", s.dim_s},
          {"heads", s.heads},
          {"balanced_dp", s.balanced_dp},
          {"codesign", s.codesign}};
}

inline void read_space(const nlohmann::json& j, const std::string& path, SpaceConfig& s) {
  detail::Reader r(j, path);
  r.read("blocks", s.num_blocks);
  r.read_enum_list("dense_ops", s.dense_ops, parse_dense_op);
  r.read_enum_list("sparse_ops", s.sparse_ops, parse_sparse_op);
  r.read("dense_dims", s.dense_dims);
  r.read("sparse_dims", s.sparse_dims);
  r.read("mergers", s.allow_mergers);
  r.read("weight_bits", s.weight_bits_choices);
  r.read("dim_s", s.dim_s);
  r.read("heads", s.heads);
  r.read("balanced_dp", s.balanced_dp);
  r.read("codesign", s.codesign);
  r.finish();
}

inline nlohmann::json to_json(const FeatureSpec& fs) { return {{"num_dense", fs.num_dense}, {"vocab", fs.vocab}}; }

inline FeatureSpec feature_spec_from_json(const nlohmann::json& j) {
  FeatureSpec fs;
  detail::Reader r(j, "features");
  r.read("num_dense", fs.num_dense);
  r.read("vocab", fs.vocab);
  r.finish();
  return fs;
}

inline HwConfig hw_from_json(const nlohmann::json& j, const std::string& path = "hw") {
  HwConfig h;
  detail::Reader r(j, path);
  r.read("rows", h.rows);
  r.read("cols", h.cols);
  r.read("cell_bits", h.cell_bits);
  r.read("dac_bits", h.dac_bits);
  r.read("adc_bits", h.adc_bits);
  r.read("cycle_ns", h.cycle_ns);
  r.read("crossbar_pj", h.crossbar_pj);
  r.read("digital_ns_per_mac", h.digital_ns_per_mac);
  r.read("digital_pj_per_mac", h.digital_pj_per_mac);
  r.read("buffer_pj_per_value", h.buffer_pj_per_value);
  r.read("crossbar_area", h.crossbar_area);
  r.read("digital_area", h.digital_area);
  r.finish();
  return h;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::Reader top(j, "");
  top.read("seed", c.seed);
  top.read("workers", c.workers);

  if (const auto* d = top.child("data")) {
    detail::Reader r(*d, "data");
    r.read("rows", c.data.rows);
    r.read("dense", c.data.dense);
    r.read("sparse", c.data.sparse);
    r.read("vocab", c.data.vocab);
    r.read("teacher_scale", c.data.teacher_scale);
    r.read("train_fraction", c.data.train_fraction);
    r.read("val_fraction", c.data.val_fraction);
    r.read("embedding_cap", c.data.embedding_cap);
    r.finish();
  }

  if (const auto* s = top.child("space")) {
    std::string preset = c.space_preset;
    if (s->is_object() && s->contains("preset")) {
      if (!(*s)["preset"].is_string()) throw ConfigError("config.space: preset: wrong type");
      preset = (*s)["preset"].get<std::string>();
    }
    const auto base = detail::space_preset(preset);
    if (!base) throw ConfigError("config.space: preset: unknown value '" + preset + "'");
    c.space_preset = preset;
    c.space = *base;
    nlohmann::json rest = *s;
    if (rest.is_object()) rest.erase("preset");
    read_space(rest, "space", c.space);
  }

  if (const auto* t = top.child("train")) {
    nlohmann::json rest = *t;
    if (rest.is_object() && rest.contains("finetune")) {
      detail::read_finetune(rest["finetune"], "train.finetune", c.finetune);
      rest.erase("finetune");
    }
    detail::read_train(rest, "train", c.train);
  }

  if (const auto* e = top.child("evolution")) {
    detail::Reader r(*e, "evolution");
    SearchSection& s = c.search;
    r.read("population", s.evolution.population_size);
    r.read("iterations", s.evolution.iterations);
    r.read("tournament", s.evolution.tournament);
    r.read("children", s.evolution.children_per_iter);
    r.read("duplicate_retries", s.evolution.duplicate_retries);
    r.read("finetune", s.finetune);
    r.read("val_rows", s.val_rows);
    r.read("alpha", s.alpha);
    r.read("beta", s.beta);
    r.read("top_k", s.top_k);
    r.read("retrain", s.retrain);
    r.read("lr_grid", s.lr_grid);
    if (const auto* t = r.child("retrain_train")) detail::read_train(*t, r.child_path("retrain_train"), s.retrain_train);
    r.finish();
  }

  if (const auto* k = top.child("ranking")) {
    detail::Reader r(*k, "ranking");
    RankConfig& rc = c.ranking;
    r.read("n_subnets", rc.n_subnets);
    r.read("finetune", rc.finetune);
    r.read("finetune_rows", rc.finetune_rows);
    if (const auto* f = r.child("top_fraction")) {
      if (f->is_null())
        rc.top_fraction.reset();
      else if (f->is_number())
        rc.top_fraction = f->get<double>();
      else
        throw ConfigError("config.ranking: top_fraction: wrong type");
    }
    r.read_enum("top_filter", rc.top_filter, detail::parse_top_filter);
    if (const auto* t = r.child("scratch")) detail::read_train(*t, r.child_path("scratch"), rc.scratch);
    r.finish();
  }

  if (const auto* p = top.child("pruning")) {
    detail::Reader r(*p, "pruning");
    r.read("iterations", c.pruning.iterations);
    r.read("rate", c.pruning.rate);
    r.read("global", c.pruning.global);
    r.read("hidden_ratio", c.pruning.hidden_ratio);
    r.read_enum("variant", c.prune_variant, detail::parse_prune_variant);
    if (const auto* t = r.child("train")) detail::read_train(*t, r.child_path("train"), c.pruning.train);
    r.finish();
  }

  if (const auto* h = top.child("hw")) c.hw = hw_from_json(*h);
  top.finish();
  return c;
}

/// The fully resolved configuration; reading it back yields the same document.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json space = to_json(c.space);
  space["preset"] = c.space_preset;
  nlohmann::json train = detail::train_json(c.train);
  train["finetune"] = detail::finetune_json(c.finetune);
  const SearchSection& s = c.search;
  return {{"seed", c.seed},
          {"workers", c.workers},
          {"data",
           {{"rows", c.data.rows},
            {"dense", c.data.dense},
            {"sparse", c.data.sparse},
            {"vocab", c.data.vocab},
            {"teacher_scale", c.data.teacher_scale},
            {"train_fraction", c.data.train_fraction},
            {"val_fraction", c.data.val_fraction},
            {"embedding_cap", c.data.embedding_cap}}},
          {"space", space},
          {"train", train},
          {"evolution",
           {{"population", s.evolution.population_size},
            {"iterations", s.evolution.iterations},
            {"tournament", s.evolution.tournament},
            {"children", s.evolution.children_per_iter},
            {"duplicate_retries", s.evolution.duplicate_retries},
            {"finetune", s.finetune},
            {"val_rows", s.val_rows},
            {"alpha", s.alpha},
            {"beta", s.beta},
            {"top_k", s.top_k},
            {"retrain", s.retrain},
            {"lr_grid", s.lr_grid},
            {"retrain_train", detail::train_json(s.retrain_train)}}},
          {"ranking",
           {{"n_subnets", c.ranking.n_subnets},
            {"finetune", c.ranking.finetune},
            {"finetune_rows", c.ranking.finetune_rows},
            {"top_fraction", c.ranking.top_fraction ? nlohmann::json(*c.ranking.top_fraction) : nlohmann::json(nullptr)},
            {"top_filter", name_of(c.ranking.top_filter)},
            {"scratch", detail::train_json(c.ranking.scratch)}}},
          {"pruning",
           {{"iterations", c.pruning.iterations},
            {"rate", c.pruning.rate},
            {"global", c.pruning.global},
            {"hidden_ratio", c.pruning.hidden_ratio},
            {"variant", name_of(c.prune_variant)},
            {"train", detail::train_json(c.pruning.train)}}},
          {"hw", to_json(c.hw)}};
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace nasforge
