#pragma once

// Regularized (aging) evolution, the random-search baseline, and top-k
// selection with from-scratch retraining.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nasforge/genotype_io.hpp"
#include "nasforge/parallel.hpp"
#include "nasforge/rng.hpp"
#include "nasforge/search_space.hpp"
#include "nasforge/trainer.hpp"

namespace nasforge {

struct EvolutionConfig {
  std::size_t population_size = 128;
  std::size_t iterations = 240;
  std::size_t tournament = 64;
  std::size_t children_per_iter = 8;
  std::uint64_t seed = 0;
  std::size_t duplicate_retries = 5;
  std::size_t workers = 1;

  std::vector<std::string> check() const {
    std::vector<std::string> e;
    if (population_size == 0) e.push_back("population_size must be positive");
    if (tournament == 0 || tournament > population_size) e.push_back("tournament must lie in [1, population_size]");
    if (children_per_iter == 0) e.push_back("children_per_iter must be at least 1");
    if (children_per_iter > population_size) e.push_back("children_per_iter must not exceed population_size");
    return e;
  }
};

/// Recorded fitness of a flagged (non-finite) evaluation; keeps records finite
/// while ranking them below every real evaluation.
inline constexpr double kFlaggedFitness = std::numeric_limits<double>::max();

struct SearchRecord {
  std::size_t id = 0;
  Genotype genotype;
  double fitness = 0;  // validation log loss, lower is better
  bool flagged = false;
  std::size_t iteration = 0;  // 0 for the initial population
  std::optional<std::size_t> parent;
};

using FitnessFn = std::function<double(const Genotype&)>;

inline std::string genotype_key(const Genotype& g) { return to_json(g).dump(); }

inline nlohmann::json to_json(const SearchRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["iteration"] = r.iteration;
  j["parent"] = r.parent ? nlohmann::json(*r.parent) : nlohmann::json(nullptr);
  j["fitness"] = r.fitness;
  j["flagged"] = r.flagged;
  j["genotype"] = to_json(r.genotype);
  return j;
}

inline SearchRecord record_from_json(const nlohmann::json& j) {
  SearchRecord r;
  r.id = j.at("id").get<std::size_t>();
  r.iteration = j.at("iteration").get<std::size_t>();
  if (!j.at("parent").is_null()) r.parent = j.at("parent").get<std::size_t>();
  r.fitness = j.at("fitness").get<double>();
  r.flagged = j.at("flagged").get<bool>();
  r.genotype = from_json(j.at("genotype"));
  return r;
}

inline void write_history_line(std::ostream& os, const SearchRecord& r) { os << to_json(r).dump() << '\n' << std::flush; }

/// Reads a JSON-lines history. A truncated final line (interrupted write) is dropped.
inline std::vector<SearchRecord> read_history(std::istream& is) {
  std::vector<SearchRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      if (is.peek() == std::char_traits<char>::eof()) break;
      throw ParseError("history line " + std::to_string(line_no) + ": malformed JSON");
    }
    out.push_back(record_from_json(j));
    if (out.back().id != out.size() - 1) throw ParseError("history line " + std::to_string(line_no) + ": ids out of order");
  }
  return out;
}

struct SearchOptions {
  /// Previously written prefix of this same run; its fitness values are reused
  /// and its genotypes must match what the seed regenerates.
  const std::vector<SearchRecord>* resume = nullptr;
  /// Called in id order as each record is finalized.
  std::function<void(const SearchRecord&)> on_record;
  /// Called after each evolution iteration with the ids removed (in removal
  /// order) and the surviving population (oldest first).
  std::function<void(std::size_t, const std::vector<std::size_t>&, const std::deque<std::size_t>&)> on_iteration;
};

namespace detail {

inline double ranking_key(const SearchRecord& r) { return r.flagged ? kFlaggedFitness : r.fitness; }

/// Evaluates a batch of genotypes into history, reusing resumed values.
inline void evaluate_batch(std::vector<SearchRecord>& history, std::vector<SearchRecord> batch, const FitnessFn& fitness,
                           std::size_t workers, const SearchOptions& opt) {
  std::vector<char> cached(batch.size(), 0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t id = batch[i].id;
    if (!opt.resume || id >= opt.resume->size()) continue;
    const SearchRecord& prior = (*opt.resume)[id];
    if (!(prior.genotype == batch[i].genotype) || prior.parent != batch[i].parent)
      throw std::runtime_error("resume history diverges at record " + std::to_string(id) +
                               " (different seed or configuration)");
    batch[i].fitness = prior.fitness;
    batch[i].flagged = prior.flagged;
    cached[i] = 1;
  }
  parallel_for(batch.size(), workers, [&](std::size_t i) {
    if (cached[i]) return;
    const double f = fitness(batch[i].genotype);
    batch[i].flagged = !std::isfinite(f);
    batch[i].fitness = batch[i].flagged ? kFlaggedFitness : f;
  });
  for (auto& r : batch) {
    if (opt.on_record) opt.on_record(r);
    history.push_back(std::move(r));
  }
}

}  // namespace detail

/// Regularized evolution: tournament selection of a parent, mutated children,
/// and removal of the oldest members so the population size never changes.
inline std::vector<SearchRecord> evolve(const FitnessFn& fitness, const EvolutionConfig& cfg, const SpaceConfig& space,
                                        const SearchOptions& opt = {}) {
  if (auto e = cfg.check(); !e.empty()) throw std::invalid_argument("evolution config: " + e.front());
  if (auto e = space.check(); !e.empty()) throw std::invalid_argument("space config: " + e.front());
  Rng rng(cfg.seed);
  std::vector<SearchRecord> history;
  history.reserve(cfg.population_size + cfg.iterations * cfg.children_per_iter);
  std::set<std::string> seen;

  std::vector<SearchRecord> initial(cfg.population_size);
  for (std::size_t i = 0; i < cfg.population_size; ++i) {
    initial[i].id = i;
    initial[i].genotype = random_genotype(space, rng);
    seen.insert(genotype_key(initial[i].genotype));
  }
  detail::evaluate_batch(history, std::move(initial), fitness, cfg.workers, opt);

  // Member ids in insertion order; the front is always the oldest.
  std::deque<std::size_t> population;
  for (std::size_t i = 0; i < cfg.population_size; ++i) population.push_back(i);

  std::vector<std::size_t> slots;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    // Tournament: `tournament` distinct members drawn uniformly.
    slots.assign(population.size(), 0);
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
    for (std::size_t i = 0; i < cfg.tournament; ++i) std::swap(slots[i], slots[i + rng.uniform_int(slots.size() - i)]);
    std::size_t parent = population[slots[0]];
    for (std::size_t i = 1; i < cfg.tournament; ++i) {
      const std::size_t cand = population[slots[i]];
      if (detail::ranking_key(history[cand]) < detail::ranking_key(history[parent])) parent = cand;
    }

    std::vector<SearchRecord> children(cfg.children_per_iter);
    for (std::size_t c = 0; c < cfg.children_per_iter; ++c) {
      Genotype child = mutate(history[parent].genotype, space, rng);
      for (std::size_t retry = 0; retry < cfg.duplicate_retries && seen.count(genotype_key(child)); ++retry)
        child = mutate(history[parent].genotype, space, rng);
      seen.insert(genotype_key(child));
      children[c].id = history.size() + c;
      children[c].genotype = std::move(child);
      children[c].iteration = it;
      children[c].parent = parent;
    }
    detail::evaluate_batch(history, std::move(children), fitness, cfg.workers, opt);
    std::vector<std::size_t> removed;
    for (std::size_t c = 0; c < cfg.children_per_iter; ++c) {
      population.push_back(history.size() - cfg.children_per_iter + c);
      removed.push_back(population.front());
      population.pop_front();
    }
    if (opt.on_iteration) opt.on_iteration(it, removed, population);
  }
  return history;
}

/// Current population after replaying the aging rule over a finished history.
inline std::vector<std::size_t> final_population(const std::vector<SearchRecord>& history, const EvolutionConfig& cfg) {
  const std::size_t n = std::min(cfg.population_size, history.size());
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = history.size() - n + i;
  return ids;
}

inline std::vector<SearchRecord> random_search(const FitnessFn& fitness, std::size_t n_samples, const SpaceConfig& space,
                                               std::uint64_t seed, std::size_t workers = 1, const SearchOptions& opt = {}) {
  if (auto e = space.check(); !e.empty()) throw std::invalid_argument("space config: " + e.front());
  Rng rng(seed);
  std::vector<SearchRecord> batch(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    batch[i].id = i;
    batch[i].genotype = random_genotype(space, rng);
  }
  std::vector<SearchRecord> history;
  detail::evaluate_batch(history, std::move(batch), fitness, workers, opt);
  return history;
}

inline const SearchRecord& best_record(const std::vector<SearchRecord>& history) {
  if (history.empty()) throw std::invalid_argument("empty history");
  return *std::min_element(history.begin(), history.end(), [](const SearchRecord& a, const SearchRecord& b) {
    return detail::ranking_key(a) < detail::ranking_key(b);
  });
}

/// The k best distinct genotypes by search fitness, best first. Ties keep
/// history order; each genotype is represented by its best record.
inline std::vector<SearchRecord> select_top_k(const std::vector<SearchRecord>& history, std::size_t k = 15) {
  std::vector<SearchRecord> sorted = history;
  std::stable_sort(sorted.begin(), sorted.end(), [](const SearchRecord& a, const SearchRecord& b) {
    return detail::ranking_key(a) < detail::ranking_key(b);
  });
  std::vector<SearchRecord> out;
  std::set<std::string> taken;
  for (auto& r : sorted) {
    if (out.size() == k) break;
    if (taken.insert(genotype_key(r.genotype)).second) out.push_back(std::move(r));
  }
  return out;
}

// ----------------------------------------------------------------- fitness

/// White-box fitness: minus the number of blocks whose dense set holds FC.
inline double fc_count_fitness(const Genotype& g) {
  double n = 0;
  for (const auto& b : g.blocks) n += b.dense.count(DenseOp::kFC) ? 1.0 : 0.0;
  return -n;
}

struct FitnessOptions {
  bool finetune = false;
  FinetuneConfig finetune_cfg;
  /// Head fine-tuning data; the validation set itself when null.
  const Dataset* finetune_data = nullptr;
};

/// Validation log loss of `g` evaluated with the frozen supernet's shared weights.
inline FitnessFn supernet_fitness(const Supernet& net, const Dataset& val, const FitnessOptions& opt = {}) {
  return [&net, &val, opt](const Genotype& g) {
    if (!opt.finetune) return evaluate(net, g, val).log_loss;
    const Model tuned = finetune_head(extract_subnet(net, g), opt.finetune_data ? *opt.finetune_data : val, opt.finetune_cfg);
    return evaluate(tuned, val).log_loss;
  };
}

// --------------------------------------------------------------- retraining

struct RetrainConfig {
  TrainConfig train;
  /// Learning rates tried per candidate; empty means train.lr0 only.
  std::vector<double> lr_grid;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

inline const std::vector<double> kLrGrid{0.10, 0.15, 0.20};

struct RetrainedModel {
  SearchRecord record;
  double lr = 0;
  double val_log_loss = 0;
  Model model;
};

/// Trains every candidate from scratch and sorts by validation log loss.
/// Initialization depends on the candidate's id only, so the lr grid compares
/// learning rates from identical starting weights.
inline std::vector<RetrainedModel> retrain_candidates(const std::vector<SearchRecord>& candidates, const SpaceConfig& space,
                                                      const Dataset& train, const Dataset& val, const RetrainConfig& cfg) {
  const std::vector<double> grid = cfg.lr_grid.empty() ? std::vector<double>{cfg.train.lr0} : cfg.lr_grid;
  std::vector<RetrainedModel> out(candidates.size());
  parallel_for(candidates.size(), cfg.workers, [&](std::size_t i) {
    const SearchRecord& rec = candidates[i];
    std::optional<RetrainedModel> best;
    for (double lr : grid) {
      TrainConfig tc = cfg.train;
      tc.lr0 = lr;
      tc.seed = derive_seed(cfg.seed, rec.id);
      Model m = init_model(rec.genotype, space, train.spec, derive_seed(cfg.seed ^ 0x5eedULL, rec.id));
      train_model(m, train, nullptr, tc);
      const double loss = evaluate(m, val).log_loss;
      if (!best || loss < best->val_log_loss) best = RetrainedModel{rec, lr, loss, std::move(m)};
    }
    out[i] = std::move(*best);
  });
  std::stable_sort(out.begin(), out.end(),
                   [](const RetrainedModel& a, const RetrainedModel& b) { return a.val_log_loss < b.val_log_loss; });
  return out;
}

}  // namespace nasforge
