#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "nasforge/evolution.hpp"

using namespace nasforge;

namespace {

SpaceConfig three_blocks() {
  SpaceConfig cfg = SpaceConfig::full();
  cfg.num_blocks = 3;
  return cfg;
}

/// Deterministic pseudo-fitness: a hash of the serialized genotype in [0, 1).
double hashed_fitness(const Genotype& g) {
  const std::string key = genotype_key(g);
  return double(splitmix64(std::hash<std::string>{}(key)) >> 11) * 0x1.0p-53;
}

EvolutionConfig small_cfg(std::uint64_t seed) {
  EvolutionConfig c;
  c.population_size = 16;
  c.iterations = 20;
  c.tournament = 4;
  c.children_per_iter = 3;
  c.seed = seed;
  return c;
}

std::string dump(const std::vector<SearchRecord>& h) {
  std::ostringstream os;
  for (const auto& r : h) write_history_line(os, r);
  return os.str();
}

Dataset synth(std::size_t rows, std::uint64_t seed) {
  SynthSpec s;
  s.num_dense = 4;
  s.num_sparse = 6;
  s.vocab = 20;
  s.rows = rows;
  s.seed = seed;
  return synth_generate(s);
}

SpaceConfig tiny_space() {
  SpaceConfig cfg = SpaceConfig::full();
  cfg.num_blocks = 2;
  cfg.dense_dims = {8, 16};
  cfg.sparse_dims = {4, 8};
  cfg.dim_s = 8;
  return cfg;
}

}  // namespace

TEST(Evolution, DefaultsMatchSearchProtocol) {
  const EvolutionConfig c;
  EXPECT_EQ(c.population_size, 128u);
  EXPECT_EQ(c.iterations, 240u);
  EXPECT_EQ(c.tournament, 64u);
  EXPECT_EQ(c.children_per_iter, 8u);
  EXPECT_TRUE(c.check().empty());
}

TEST(Evolution, ConfigValidation) {
  EvolutionConfig c;
  c.tournament = 129;
  EXPECT_FALSE(c.check().empty());
  c = EvolutionConfig{};
  c.children_per_iter = 0;
  EXPECT_FALSE(c.check().empty());
  EXPECT_THROW(evolve(hashed_fitness, c, three_blocks()), std::invalid_argument);
}

TEST(Evolution, AgingRemovesOldestAndKeepsPopulationSize) {
  const EvolutionConfig cfg = small_cfg(1);
  // Independent bookkeeping: ids are assigned in insertion order, so the
  // oldest member is the smallest id still alive.
  std::set<std::size_t> alive;
  for (std::size_t i = 0; i < cfg.population_size; ++i) alive.insert(i);
  std::size_t next_id = cfg.population_size, iterations_seen = 0;
  SearchOptions opt;
  opt.on_iteration = [&](std::size_t it, const std::vector<std::size_t>& removed, const std::deque<std::size_t>& pop) {
    EXPECT_EQ(it, ++iterations_seen);
    for (std::size_t c = 0; c < cfg.children_per_iter; ++c) alive.insert(next_id++);
    ASSERT_EQ(removed.size(), cfg.children_per_iter);
    for (std::size_t r : removed) {
      EXPECT_EQ(r, *alive.begin());
      alive.erase(alive.begin());
    }
    EXPECT_EQ(pop.size(), cfg.population_size);
    EXPECT_EQ(std::set<std::size_t>(pop.begin(), pop.end()), alive);
  };
  const auto history = evolve(hashed_fitness, cfg, three_blocks(), opt);
  EXPECT_EQ(iterations_seen, cfg.iterations);
  const auto fp = final_population(history, cfg);
  EXPECT_EQ(std::set<std::size_t>(fp.begin(), fp.end()), alive);
}

TEST(Evolution, HistoryLengthAndValidity) {
  const SpaceConfig space = three_blocks();
  const EvolutionConfig cfg = small_cfg(2);
  const auto history = evolve(hashed_fitness, cfg, space);
  ASSERT_EQ(history.size(), cfg.population_size + cfg.iterations * cfg.children_per_iter);
  for (std::size_t i = 0; i < history.size(); ++i) {
    const SearchRecord& r = history[i];
    EXPECT_EQ(r.id, i);
    EXPECT_TRUE(validate(r.genotype, space).empty());
    EXPECT_TRUE(std::isfinite(r.fitness));
    if (i < cfg.population_size) {
      EXPECT_EQ(r.iteration, 0u);
      EXPECT_FALSE(r.parent.has_value());
    } else {
      EXPECT_EQ(r.iteration, 1 + (i - cfg.population_size) / cfg.children_per_iter);
      ASSERT_TRUE(r.parent.has_value());
      EXPECT_LT(*r.parent, i);
    }
  }
}

TEST(Evolution, ParentsAreLivingMembers) {
  const EvolutionConfig cfg = small_cfg(3);
  std::deque<std::size_t> before;
  for (std::size_t i = 0; i < cfg.population_size; ++i) before.push_back(i);
  std::vector<std::deque<std::size_t>> pops{before};
  SearchOptions opt;
  opt.on_iteration = [&](std::size_t, const std::vector<std::size_t>&, const std::deque<std::size_t>& pop) {
    pops.push_back(pop);
  };
  const auto history = evolve(hashed_fitness, cfg, three_blocks(), opt);
  for (std::size_t i = cfg.population_size; i < history.size(); ++i) {
    const auto& pop = pops[history[i].iteration - 1];
    EXPECT_NE(std::find(pop.begin(), pop.end(), *history[i].parent), pop.end());
  }
}

TEST(Evolution, SameSeedSameHistory) {
  const auto a = evolve(hashed_fitness, small_cfg(4), three_blocks());
  const auto b = evolve(hashed_fitness, small_cfg(4), three_blocks());
  const auto c = evolve(hashed_fitness, small_cfg(5), three_blocks());
  EXPECT_EQ(dump(a), dump(b));
  EXPECT_NE(dump(a), dump(c));
}

TEST(Evolution, WorkersDoNotChangeHistory) {
  EvolutionConfig cfg = small_cfg(6);
  const auto serial = evolve(hashed_fitness, cfg, three_blocks());
  cfg.workers = 4;
  EXPECT_EQ(dump(serial), dump(evolve(hashed_fitness, cfg, three_blocks())));
}

TEST(Evolution, NanFitnessIsFlaggedAndRankedWorst) {
  auto fitness = [](const Genotype& g) {
    return g.blocks[0].dense.count(DenseOp::kSUM) ? std::numeric_limits<double>::quiet_NaN() : hashed_fitness(g);
  };
  const auto history = evolve(fitness, small_cfg(7), three_blocks());
  std::size_t flagged = 0;
  for (const auto& r : history) {
    const bool expect_flag = r.genotype.blocks[0].dense.count(DenseOp::kSUM) > 0;
    EXPECT_EQ(r.flagged, expect_flag);
    if (r.flagged) {
      ++flagged;
      EXPECT_EQ(r.fitness, kFlaggedFitness);
    }
  }
  ASSERT_GT(flagged, 0u);
  EXPECT_FALSE(best_record(history).flagged);
  const auto top = select_top_k(history, history.size());
  EXPECT_TRUE(top.back().flagged);
}

TEST(Evolution, WhiteBoxOptimumReachedForEverySeed) {
  const SpaceConfig space = three_blocks();
  int hits = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EvolutionConfig cfg;
    cfg.seed = seed;
    const auto history = evolve(fc_count_fitness, cfg, space);
    const SearchRecord& best = best_record(history);
    bool all_fc = true;
    for (const auto& b : best.genotype.blocks) all_fc &= b.dense.count(DenseOp::kFC) > 0;
    hits += all_fc ? 1 : 0;
    EXPECT_EQ(best.fitness, -3.0);
  }
  EXPECT_EQ(hits, 10);
}

TEST(Evolution, PairedComparisonWithRandomSearch) {
  const SpaceConfig space = three_blocks();
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    EvolutionConfig cfg;
    cfg.seed = seed;
    const double evo = best_record(evolve(fc_count_fitness, cfg, space)).fitness;
    const std::size_t budget = cfg.population_size + cfg.iterations * cfg.children_per_iter;
    const double rnd = best_record(random_search(fc_count_fitness, budget, space, seed)).fitness;
    wins += evo <= rnd ? 1 : 0;
  }
  EXPECT_GE(wins, 8);
}

TEST(RandomSearch, BestBeatsMedianAndIsDeterministic) {
  const SpaceConfig space = three_blocks();
  const auto h = random_search(hashed_fitness, 1000, space, 9);
  ASSERT_EQ(h.size(), 1000u);
  std::vector<double> f;
  for (const auto& r : h) f.push_back(r.fitness);
  std::nth_element(f.begin(), f.begin() + 500, f.end());
  EXPECT_LE(best_record(h).fitness, f[500]);
  EXPECT_EQ(dump(h), dump(random_search(hashed_fitness, 1000, space, 9)));
  EXPECT_EQ(dump(h), dump(random_search(hashed_fitness, 1000, space, 9, 3)));
}

TEST(History, JsonLinesRoundTrip) {
  const auto h = evolve(hashed_fitness, small_cfg(10), three_blocks());
  std::istringstream is(dump(h));
  const auto back = read_history(is);
  ASSERT_EQ(back.size(), h.size());
  EXPECT_EQ(dump(back), dump(h));
}

TEST(History, TruncatedFinalLineIsDropped) {
  const auto h = evolve(hashed_fitness, small_cfg(11), three_blocks());
  std::string text = dump(h);
  text.resize(text.size() - 20);
  std::istringstream is(text);
  EXPECT_EQ(read_history(is).size(), h.size() - 1);
}

TEST(History, ResumeReusesFitnessAndReproducesRun) {
  const SpaceConfig space = three_blocks();
  const EvolutionConfig cfg = small_cfg(12);
  std::ostringstream log;
  SearchOptions writer;
  writer.on_record = [&](const SearchRecord& r) { write_history_line(log, r); };
  const auto full = evolve(hashed_fitness, cfg, space, writer);
  EXPECT_EQ(log.str(), dump(full));

  std::istringstream partial_text(dump(std::vector<SearchRecord>(full.begin(), full.begin() + 30)));
  const auto partial = read_history(partial_text);
  std::size_t calls = 0;
  SearchOptions resume;
  resume.resume = &partial;
  const auto resumed = evolve([&](const Genotype& g) { ++calls; return hashed_fitness(g); }, cfg, space, resume);
  EXPECT_EQ(dump(resumed), dump(full));
  EXPECT_EQ(calls, full.size() - 30);

  EXPECT_THROW(evolve(hashed_fitness, small_cfg(13), space, resume), std::runtime_error);
}

TEST(Evolution, TinySpaceAcceptsDuplicatesAfterRetries) {
  SpaceConfig space = SpaceConfig::small();
  space.num_blocks = 1;
  space.dense_ops = {DenseOp::kFC};
  space.dense_dims = {8};
  space.sparse_dims = {4};
  space.allow_mergers = false;
  EvolutionConfig cfg = small_cfg(14);
  const auto h = evolve(hashed_fitness, cfg, space);
  EXPECT_EQ(h.size(), cfg.population_size + cfg.iterations * cfg.children_per_iter);
  EXPECT_EQ(select_top_k(h, 100).size(), 1u);
}

TEST(SelectTopK, DedupesSortsAndCapsAtDistinct) {
  const auto h = evolve(hashed_fitness, small_cfg(15), three_blocks());
  std::set<std::string> distinct;
  for (const auto& r : h) distinct.insert(genotype_key(r.genotype));
  const auto all = select_top_k(h, h.size() + 10);
  EXPECT_EQ(all.size(), distinct.size());
  const auto top = select_top_k(h, 15);
  ASSERT_EQ(top.size(), 15u);
  for (std::size_t i = 1; i < top.size(); ++i) EXPECT_LE(top[i - 1].fitness, top[i].fitness);
  std::set<std::string> keys;
  for (const auto& r : top) keys.insert(genotype_key(r.genotype));
  EXPECT_EQ(keys.size(), top.size());
  // No distinct genotype outside the selection scores better than the last pick.
  for (const auto& r : h) {
    if (!keys.count(genotype_key(r.genotype))) {
      EXPECT_GE(r.fitness, top.back().fitness);
    }
  }
}

TEST(SelectTopK, EndToEndSyntheticPickBeatsConstantPredictor) {
  const SpaceConfig space = tiny_space();
  const Dataset all = synth(12000, 21);
  const Split sp = split_indices(all.rows(), 21);
  const Dataset train = subset(all, sp.train), val = subset(all, sp.val), test = subset(all, sp.test);

  Supernet net(space, all.spec, 22);
  TrainConfig tc;
  tc.batch_size = 256;
  tc.epochs = 1;
  tc.seed = 23;
  train_supernet(net, train, nullptr, tc);

  EvolutionConfig ec;
  ec.population_size = 12;
  ec.iterations = 4;
  ec.tournament = 4;
  ec.children_per_iter = 3;
  ec.seed = 24;
  const auto history = evolve(supernet_fitness(net, val), ec, space);
  const auto top = select_top_k(history, 3);

  RetrainConfig rc;
  rc.train = tc;
  rc.lr_grid = kLrGrid;
  rc.seed = 25;
  const auto ranked = retrain_candidates(top, space, train, val, rc);
  ASSERT_EQ(ranked.size(), 3u);
  for (std::size_t i = 1; i < ranked.size(); ++i) EXPECT_LE(ranked[i - 1].val_log_loss, ranked[i].val_log_loss);
  for (const auto& r : ranked) EXPECT_NE(std::find(kLrGrid.begin(), kLrGrid.end(), r.lr), kLrGrid.end());
  EXPECT_LT(evaluate(ranked.front().model, test).log_loss, std::numbers::ln2);
}

TEST(SupernetFitness, FinetuneNeverWorseOnTuningData) {
  const SpaceConfig space = tiny_space();
  const Dataset all = synth(3000, 31);
  Supernet net(space, all.spec, 32);
  TrainConfig tc;
  tc.batch_size = 256;
  tc.seed = 33;
  train_supernet(net, all, nullptr, tc);
  FitnessOptions fo;
  fo.finetune = true;
  fo.finetune_cfg.steps = 50;
  const auto plain = supernet_fitness(net, all), tuned = supernet_fitness(net, all, fo);
  Rng rng(34);
  for (int i = 0; i < 5; ++i) {
    const Genotype g = random_genotype(space, rng);
    EXPECT_LE(tuned(g), plain(g) + 1e-12);
  }
}
