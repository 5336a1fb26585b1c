#include <gtest/gtest.h>

#include <regex>
#include <set>
#include <sstream>

#include "nasforge/genotype_io.hpp"
#include "nasforge/search_space.hpp"

using namespace nasforge;

namespace {

SpaceConfig tiny_space(std::size_t blocks) {
  SpaceConfig cfg = SpaceConfig::small();
  cfg.num_blocks = blocks;
  cfg.dense_dims = {8, 16};
  cfg.sparse_dims = {4, 8};
  return cfg;
}

// Independent enumerator: walks every block choice explicitly and yields each
// distinct genotype once.
void enumerate_blocks(const SpaceConfig& cfg, std::size_t n, Genotype& partial, std::vector<Genotype>& out) {
  if (n > cfg.num_blocks) {
    out.push_back(partial);
    return;
  }
  const std::size_t dense_options = cfg.dense_dims.size() + 1, sparse_options = cfg.sparse_dims.size() + 1;
  std::size_t dense_combos = 1, sparse_combos = 1;
  for (std::size_t i = 0; i < cfg.dense_ops.size(); ++i) dense_combos *= dense_options;
  for (std::size_t i = 0; i < cfg.sparse_ops.size(); ++i) sparse_combos *= sparse_options;
  const int merger_states = cfg.allow_mergers ? 4 : 1;
  for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask)
    for (std::size_t dc = 0; dc < dense_combos; ++dc)
      for (std::size_t sc = 0; sc < sparse_combos; ++sc)
        for (int m = 0; m < merger_states; ++m) {
          BlockGene b;
          for (std::size_t s = 0; s < n; ++s)
            if (mask >> s & 1) b.connections.push_back(SourceId(s));
          std::size_t code = dc;
          for (auto op : cfg.dense_ops) {
            const std::size_t choice = code % dense_options;
            code /= dense_options;
            if (choice) b.dense[op] = OpGene{cfg.dense_dims[choice - 1], 8};
          }
          code = sc;
          for (auto op : cfg.sparse_ops) {
            const std::size_t choice = code % sparse_options;
            code /= sparse_options;
            if (choice) b.sparse[op] = OpGene{cfg.sparse_dims[choice - 1], 8};
          }
          if (b.dense.empty() || b.sparse.empty()) continue;
          b.d2s = m & 1;
          b.s2d = m & 2;
          partial.blocks.push_back(b);
          enumerate_blocks(cfg, n + 1, partial, out);
          partial.blocks.pop_back();
        }
}

std::vector<Genotype> enumerate_all(const SpaceConfig& cfg) {
  Genotype g;
  std::vector<Genotype> out;
  enumerate_blocks(cfg, 1, g, out);
  return out;
}

// Minimal DOT checker for the statement forms the exporter may use.
bool dot_parses(const std::string& text) {
  static const std::string id = R"([A-Za-z_][A-Za-z0-9_]*)";
  static const std::string value = R"(([A-Za-z0-9_.]+|"([^"\\]|\\.)*"))";
  static const std::string attr = id + "=" + value;
  static const std::string attrs = R"(\[\s*)" + attr + R"((\s*,\s*)" + attr + R"()*\s*\])";
  static const std::regex header(R"(\s*digraph\s+)" + id + R"(\s*\{\s*)");
  static const std::regex graph_attr(R"(\s*)" + attr + R"(\s*;\s*)");
  static const std::regex node_default(R"(\s*(node|edge|graph)\s*)" + attrs + R"(\s*;\s*)");
  static const std::regex node(R"(\s*)" + id + R"(\s*)" + attrs + R"(\s*;\s*)");
  static const std::regex edge(R"(\s*)" + id + R"(\s*->\s*)" + id + R"(\s*;\s*)");
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || !std::regex_match(line, header)) return false;
  bool closed = false;
  while (std::getline(in, line)) {
    if (closed) return line.find_first_not_of(" \t") == std::string::npos;
    if (line == "}") {
      closed = true;
      continue;
    }
    if (!(std::regex_match(line, graph_attr) || std::regex_match(line, node_default) || std::regex_match(line, node) ||
          std::regex_match(line, edge)))
      return false;
  }
  return closed;
}

std::size_t count_edges(const std::string& dot) {
  std::size_t n = 0;
  for (std::size_t pos = dot.find("->"); pos != std::string::npos; pos = dot.find("->", pos + 2)) ++n;
  return n;
}

}  // namespace

TEST(SpaceConfig, PresetsAreValid) {
  EXPECT_TRUE(SpaceConfig::full().check().empty());
  EXPECT_TRUE(SpaceConfig::small().check().empty());
  EXPECT_EQ(SpaceConfig::full().dense_dims, (std::vector<std::size_t>{16, 32, 64, 128, 256, 512, 768, 1024}));
  EXPECT_EQ(SpaceConfig::full().sparse_dims, (std::vector<std::size_t>{16, 32, 48, 64}));
  SpaceConfig bad;
  bad.dense_dims = {32, 16};
  EXPECT_FALSE(bad.check().empty());
}

TEST(Validate, ReportsViolations) {
  const SpaceConfig cfg = SpaceConfig::full();
  Rng rng(1);
  Genotype g = random_genotype(cfg, rng);
  g.blocks[1].dense.clear();
  auto v = validate(g, cfg);
  ASSERT_FALSE(v.empty());
  EXPECT_NE(v.front().find("dense branch empty"), std::string::npos);

  Genotype h = random_genotype(cfg, rng);
  h.blocks[2].connections = {0, 5};
  bool forward = false;
  for (const auto& msg : validate(h, cfg)) forward |= msg.find("forward connection") != std::string::npos;
  EXPECT_TRUE(forward);

  Genotype k = random_genotype(cfg, rng);
  k.blocks[0].dense.begin()->second.dim = 17;
  EXPECT_FALSE(validate(k, cfg).empty());
}

TEST(RandomGenotype, AlwaysValidAndDeterministic) {
  for (const auto& cfg : {SpaceConfig::full(), SpaceConfig::small()}) {
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
      Rng rng(seed);
      const Genotype g = random_genotype(cfg, rng);
      ASSERT_TRUE(validate(g, cfg).empty()) << seed;
      ASSERT_EQ(g.blocks[0].connections, std::vector<SourceId>{kRawSource});
    }
  }
  Rng a(42), b(42);
  EXPECT_EQ(serialize(random_genotype(SpaceConfig::full(), a)), serialize(random_genotype(SpaceConfig::full(), b)));
}

TEST(RandomGenotype, ConnectionFrequenciesMatchNonemptySubsetLaw) {
  SpaceConfig cfg = SpaceConfig::full();
  cfg.num_blocks = 3;
  const std::size_t draws = 10000;
  std::vector<std::vector<double>> hits(4, std::vector<double>(3, 0));
  Rng rng(7);
  for (std::size_t i = 0; i < draws; ++i) {
    const Genotype g = random_genotype(cfg, rng);
    for (std::size_t n = 1; n <= 3; ++n)
      for (SourceId s : g.blocks[n - 1].connections) hits[n][std::size_t(s)] += 1;
  }
  for (std::size_t n = 1; n <= 3; ++n) {
    // Uniform over nonempty subsets of n sources: each source is in 2^(n-1) of 2^n - 1.
    const double exact = double(1u << (n - 1)) / double((1u << n) - 1);
    for (std::size_t s = 0; s < n; ++s) EXPECT_NEAR(hits[n][s] / double(draws), exact, 0.02) << n << "," << s;
  }
}

TEST(Mutate, PreservesValidity) {
  const SpaceConfig cfg = SpaceConfig::full();
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    Rng rng(seed);
    const Genotype parent = random_genotype(cfg, rng);
    ASSERT_TRUE(validate(mutate(parent, cfg, rng), cfg).empty()) << seed;
  }
}

TEST(Mutate, ActionFrequenciesAreUniform) {
  const SpaceConfig cfg = SpaceConfig::full();
  Rng rng(9);
  const Genotype g = random_genotype(cfg, rng);
  std::vector<double> counts(kBaseMutationActions, 0);
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i) counts[std::size_t(mutate_traced(g, cfg, rng).action)] += 1;
  for (double c : counts) EXPECT_NEAR(c / double(draws), 1.0 / 6.0, 0.02);
}

TEST(Mutate, ConnectionResampleOnFirstBlockKeepsRaw) {
  const SpaceConfig cfg = SpaceConfig::full();
  Rng rng(11);
  const Genotype g = random_genotype(cfg, rng);
  std::size_t seen = 0;
  for (int i = 0; i < 5000; ++i) {
    const Mutation m = mutate_traced(g, cfg, rng);
    if (m.action == MutationAction::kConnection && m.block == 0) {
      EXPECT_EQ(m.child.blocks[0].connections, std::vector<SourceId>{kRawSource});
      ++seen;
    }
  }
  EXPECT_GT(seen, 0u);
}

TEST(Mutate, DeterministicAndChangesAtMostOneBlock) {
  const SpaceConfig cfg = SpaceConfig::full();
  Rng seed_rng(12);
  const Genotype g = random_genotype(cfg, seed_rng);
  Rng a(3), b(3);
  EXPECT_EQ(mutate(g, cfg, a), mutate(g, cfg, b));
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const Mutation m = mutate_traced(g, cfg, rng);
    for (std::size_t k = 0; k < g.blocks.size(); ++k)
      if (k != m.block) {
        EXPECT_EQ(m.child.blocks[k], g.blocks[k]);
      }
  }
}

TEST(Cardinality, OperatorSubsetCounts) {
  EXPECT_EQ(operator_subset_count(SpaceConfig::full()), 45u);
  EXPECT_EQ(operator_subset_count(SpaceConfig::small()), 3u);
  EXPECT_EQ(operator_subset_count(SpaceConfig::full()) % operator_subset_count(SpaceConfig::small()), 0u);
  EXPECT_EQ(operator_subset_count(SpaceConfig::full()) / operator_subset_count(SpaceConfig::small()), 15u);
}

TEST(Cardinality, TrivialSpaceIsOne) {
  SpaceConfig cfg;
  cfg.num_blocks = 1;
  cfg.dense_ops = {DenseOp::kFC};
  cfg.sparse_ops = {SparseOp::kEFC};
  cfg.dense_dims = {16};
  cfg.sparse_dims = {16};
  cfg.allow_mergers = false;
  EXPECT_EQ(space_cardinality(cfg), 1);
  EXPECT_EQ(enumerate_all(cfg).size(), 1u);
}

TEST(Cardinality, SmallOneBlockTwoDims) {
  SpaceConfig cfg = tiny_space(1);
  // dense (1+2)^2 - 1 = 8, sparse (1+2) - 1 = 2, mergers 4, connections 1
  EXPECT_EQ(space_cardinality(cfg), 64);
}

TEST(Cardinality, MatchesExhaustiveEnumeration) {
  for (std::size_t blocks : {1u, 2u}) {
    for (bool mergers : {true, false}) {
      SpaceConfig cfg = tiny_space(blocks);
      cfg.allow_mergers = mergers;
      const auto all = enumerate_all(cfg);
      std::set<std::string> distinct;
      for (const auto& g : all) {
        ASSERT_TRUE(validate(g, cfg).empty());
        distinct.insert(serialize(g));
      }
      EXPECT_EQ(distinct.size(), all.size());
      EXPECT_EQ(space_cardinality(cfg), BigInt(all.size())) << blocks << " blocks, mergers " << mergers;
    }
  }
}

TEST(Cardinality, FullSevenBlocksExceedsTenToThe33) {
  const BigInt full = space_cardinality(SpaceConfig::full());
  BigInt bound = 1;
  for (int i = 0; i < 33; ++i) bound *= 10;
  EXPECT_GE(full, bound);
}

TEST(Serialize, RoundTrip) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const Genotype g = random_genotype(SpaceConfig::full(), rng);
    const std::string text = serialize(g);
    EXPECT_EQ(deserialize(text), g);
    EXPECT_EQ(serialize(deserialize(text)), text);
  }
}

TEST(Serialize, Errors) {
  Rng rng(5);
  std::string text = serialize(random_genotype(SpaceConfig::full(), rng));
  const auto pos = text.find("\"op\": \"");
  ASSERT_NE(pos, std::string::npos);
  std::string bad = text;
  bad.replace(pos + 7, 2, "XX");
  try {
    deserialize(bad);
    FAIL() << "unknown operator accepted";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown operator"), std::string::npos);
  }
  EXPECT_THROW(deserialize("{\"blocks\": [ {"), ParseError);
  EXPECT_THROW(deserialize("{\"blocks\": [{\"connections\": [\"RAW\"]}]}"), ParseError);
}

TEST(Serialize, FuzzedDimsFailValidation) {
  const SpaceConfig cfg = SpaceConfig::full();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Genotype g = random_genotype(cfg, rng);
    auto j = to_json(g);
    auto& block = j["blocks"][rng.uniform_int(g.blocks.size())];
    block["dense"][0]["dim"] = 1 + 2 * rng.uniform_int(500);  // odd dims are never in the list
    const Genotype parsed = from_json(j);
    EXPECT_FALSE(validate(parsed, cfg).empty());
  }
}

TEST(Dot, ChainIsAPath) {
  const SpaceConfig cfg = tiny_space(3);
  Genotype g = full_genotype(cfg);
  for (std::size_t n = 1; n <= 3; ++n) g.blocks[n - 1].connections = {SourceId(n - 1)};
  const std::string dot = to_dot(g);
  EXPECT_TRUE(dot_parses(dot)) << dot;
  EXPECT_EQ(count_edges(dot), 4u);  // RAW->B1->B2->B3->HEAD
  EXPECT_EQ(dot.find("dashed"), std::string::npos);
}

TEST(Dot, AllConnectionsEdgeCount) {
  const Genotype g = full_genotype(tiny_space(3));
  const std::string dot = to_dot(g);
  EXPECT_TRUE(dot_parses(dot)) << dot;
  for (const char* e : {"RAW -> B1;", "RAW -> B2;", "B1 -> B2;", "RAW -> B3;", "B1 -> B3;", "B2 -> B3;"})
    EXPECT_NE(dot.find(e), std::string::npos) << e;
  EXPECT_EQ(count_edges(dot), 6u + 1u);  // plus the head edge
}

TEST(Dot, UnusedBlocksDashedAndRandomOutputsParse) {
  Genotype g = full_genotype(tiny_space(3));
  g.blocks[2].connections = {0, 1};
  const std::string dot = to_dot(g);
  EXPECT_NE(dot.find("B2 [label="), std::string::npos);
  const auto b2 = dot.substr(dot.find("B2 [label="));
  EXPECT_NE(b2.substr(0, b2.find('\n')).find("dashed"), std::string::npos);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    EXPECT_TRUE(dot_parses(to_dot(random_genotype(SpaceConfig::full(), rng))));
  }
}
