#pragma once

// Search space definition: configurations, genotypes, sampling and mutation.

#include <boost/multiprecision/cpp_int.hpp>

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nasforge/rng.hpp"

namespace nasforge {

enum class DenseOp { kFC = 0, kSG, kSUM, kDP };
enum class SparseOp { kEFC = 0, kATTN };

inline const char* name_of(DenseOp op) {
  switch (op) {
    case DenseOp::kFC: return "FC";
    case DenseOp::kSG: return "SG";
    case DenseOp::kSUM: return "SUM";
    case DenseOp::kDP: return "DP";
  }
  return "?";
}

inline const char* name_of(SparseOp op) {
  switch (op) {
    case SparseOp::kEFC: return "EFC";
    case SparseOp::kATTN: return "ATTN";
  }
  return "?";
}

inline std::optional<DenseOp> parse_dense_op(const std::string& s) {
  for (auto op : {DenseOp::kFC, DenseOp::kSG, DenseOp::kSUM, DenseOp::kDP})
    if (s == name_of(op)) return op;
  return std::nullopt;
}

inline std::optional<SparseOp> parse_sparse_op(const std::string& s) {
  for (auto op : {SparseOp::kEFC, SparseOp::kATTN})
    if (s == name_of(op)) return op;
  return std::nullopt;
}

struct SpaceConfig {
  std::size_t num_blocks = 7;
  std::vector<DenseOp> dense_ops{DenseOp::kFC, DenseOp::kSG, DenseOp::kSUM, DenseOp::kDP};
  std::vector<SparseOp> sparse_ops{SparseOp::kEFC, SparseOp::kATTN};
  std::vector<std::size_t> dense_dims{16, 32, 64, 128, 256, 512, 768, 1024};
  std::vector<std::size_t> sparse_dims{16, 32, 48, 64};
  bool allow_mergers = true;
  std::vector<int> weight_bits_choices{4, 8};
  std::size_t dim_s = 16;
  std::size_t heads = 2;
  bool balanced_dp = true;
  // Bits genes are sampled and mutated only when co-design is on.
  bool codesign = false;

  static SpaceConfig full() { return SpaceConfig{}; }
  static SpaceConfig small() {
    SpaceConfig cfg;
    cfg.dense_ops = {DenseOp::kFC, DenseOp::kDP};
    cfg.sparse_ops = {SparseOp::kEFC};
    return cfg;
  }

  std::size_t max_dense_dim() const { return dense_dims.back(); }
  std::size_t max_sparse_dim() const { return sparse_dims.back(); }
  /// Embeddings a block can emit: the widest sparse op plus the dense-to-sparse merger.
  std::size_t max_sparse_out() const { return sparse_dims.back() + (allow_mergers ? kMergerEmbeddings : 0); }
  int default_bits() const {
    return std::find(weight_bits_choices.begin(), weight_bits_choices.end(), 8) != weight_bits_choices.end()
               ? 8
               : weight_bits_choices.back();
  }

  /// Embeddings produced by the dense-to-sparse merger.
  static constexpr std::size_t kMergerEmbeddings = 2;

  std::vector<std::string> check() const {
    std::vector<std::string> errors;
    if (num_blocks == 0) errors.push_back("num_blocks must be positive");
    if (dense_ops.empty()) errors.push_back("dense_ops is empty");
    if (sparse_ops.empty()) errors.push_back("sparse_ops is empty");
    auto increasing = [](const std::vector<std::size_t>& v) {
      if (v.empty() || v.front() == 0) return false;
      for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] <= v[i - 1]) return false;
      return true;
    };
    if (!increasing(dense_dims)) errors.push_back("dense_dims must be positive and strictly increasing");
    if (!increasing(sparse_dims)) errors.push_back("sparse_dims must be positive and strictly increasing");
    if (weight_bits_choices.empty()) errors.push_back("weight_bits_choices is empty");
    for (int b : weight_bits_choices)
      if (b < 4 || b > 8) errors.push_back("weight bits must lie in [4, 8]");
    if (dim_s == 0) errors.push_back("dim_s must be positive");
    if (heads == 0 || (dim_s % heads) != 0) errors.push_back("dim_s must be divisible by heads");
    std::set<DenseOp> d(dense_ops.begin(), dense_ops.end());
    std::set<SparseOp> s(sparse_ops.begin(), sparse_ops.end());
    if (d.size() != dense_ops.size() || s.size() != sparse_ops.size()) errors.push_back("duplicate operators");
    return errors;
  }
};

struct OpGene {
  std::size_t dim = 0;
  int bits = 8;
  bool operator==(const OpGene&) const = default;
};

/// Connection source id: 0 is the raw input, i >= 1 is the output of block i.
using SourceId = int;
inline constexpr SourceId kRawSource = 0;

struct BlockGene {
  std::vector<SourceId> connections;  // sorted ascending
  std::map<DenseOp, OpGene> dense;
  std::map<SparseOp, OpGene> sparse;
  bool d2s = false;
  bool s2d = false;
  bool operator==(const BlockGene&) const = default;
};

struct Genotype {
  std::vector<BlockGene> blocks;
  bool operator==(const Genotype&) const = default;
};

namespace detail {
template <class T>
bool contains(const std::vector<T>& v, const T& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}
}  // namespace detail

/// All invariant violations of `g` under `cfg`; empty means valid.
inline std::vector<std::string> validate(const Genotype& g, const SpaceConfig& cfg) {
  std::vector<std::string> out;
  if (g.blocks.size() != cfg.num_blocks)
    out.push_back("genotype has " + std::to_string(g.blocks.size()) + " blocks, space expects " +
                  std::to_string(cfg.num_blocks));
  for (std::size_t i = 0; i < g.blocks.size(); ++i) {
    const auto& b = g.blocks[i];
    const std::string tag = "block " + std::to_string(i + 1) + ": ";
    const auto n = static_cast<SourceId>(i + 1);
    if (b.connections.empty()) out.push_back(tag + "no connections");
    for (std::size_t k = 0; k < b.connections.size(); ++k) {
      const SourceId c = b.connections[k];
      if (c < 0) out.push_back(tag + "negative connection");
      if (c >= n) out.push_back(tag + "forward connection to B" + std::to_string(c));
      if (k > 0 && c <= b.connections[k - 1]) out.push_back(tag + "connections not sorted/unique");
    }
    if (b.dense.empty()) out.push_back(tag + "dense branch empty");
    if (b.sparse.empty()) out.push_back(tag + "sparse branch empty");
    for (const auto& [op, gene] : b.dense) {
      if (!detail::contains(cfg.dense_ops, op)) out.push_back(tag + name_of(op) + " not in space");
      if (!detail::contains(cfg.dense_dims, gene.dim))
        out.push_back(tag + name_of(op) + " dim " + std::to_string(gene.dim) + " not in dense_dims");
      if (!detail::contains(cfg.weight_bits_choices, gene.bits))
        out.push_back(tag + name_of(op) + " bits " + std::to_string(gene.bits) + " not allowed");
    }
    for (const auto& [op, gene] : b.sparse) {
      if (!detail::contains(cfg.sparse_ops, op)) out.push_back(tag + name_of(op) + " not in space");
      if (!detail::contains(cfg.sparse_dims, gene.dim))
        out.push_back(tag + name_of(op) + " dim " + std::to_string(gene.dim) + " not in sparse_dims");
      if (!detail::contains(cfg.weight_bits_choices, gene.bits))
        out.push_back(tag + name_of(op) + " bits " + std::to_string(gene.bits) + " not allowed");
    }
    if (!cfg.allow_mergers && (b.d2s || b.s2d)) out.push_back(tag + "mergers disabled in this space");
  }
  // Every block reads from earlier sources only, so block N always reaches RAW
  // once the checks above hold; keep the explicit walk as the contract.
  if (out.empty() && !g.blocks.empty()) {
    std::vector<bool> reaches(g.blocks.size() + 1, false);
    reaches[0] = true;
    for (std::size_t i = 0; i < g.blocks.size(); ++i)
      for (SourceId c : g.blocks[i].connections)
        if (reaches[std::size_t(c)]) reaches[i + 1] = true;
    if (!reaches.back()) out.push_back("no path from RAW to the last block");
  }
  return out;
}

/// Blocks whose outputs reach the head, indexed by block number (entry 0 is RAW).
inline std::vector<bool> reachable_blocks(const Genotype& g) {
  std::vector<bool> used(g.blocks.size() + 1, false);
  used[0] = true;
  if (g.blocks.empty()) return used;
  used.back() = true;
  for (std::size_t i = g.blocks.size(); i >= 1; --i) {
    if (!used[i]) continue;
    for (SourceId c : g.blocks[i - 1].connections) used[std::size_t(c)] = true;
  }
  return used;
}

namespace detail {
inline std::vector<SourceId> sample_connections(std::size_t block_number, Rng& rng) {
  std::vector<SourceId> picked;
  do {
    picked.clear();
    for (SourceId s = 0; s < SourceId(block_number); ++s)
      if (rng.coin()) picked.push_back(s);
  } while (picked.empty());
  return picked;
}

template <class Op>
std::vector<Op> sample_nonempty_subset(const std::vector<Op>& ops, Rng& rng) {
  std::vector<Op> picked;
  do {
    picked.clear();
    for (auto op : ops)
      if (rng.coin()) picked.push_back(op);
  } while (picked.empty());
  return picked;
}

inline int sample_bits(const SpaceConfig& cfg, Rng& rng) {
  if (!cfg.codesign) return cfg.default_bits();
  return cfg.weight_bits_choices[rng.uniform_int(cfg.weight_bits_choices.size())];
}

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.uniform_int(v.size())];
}
}  // namespace detail

inline Genotype random_genotype(const SpaceConfig& cfg, Rng& rng) {
  Genotype g;
  for (std::size_t n = 1; n <= cfg.num_blocks; ++n) {
    BlockGene b;
    b.connections = detail::sample_connections(n, rng);
    for (auto op : detail::sample_nonempty_subset(cfg.dense_ops, rng))
      b.dense[op] = OpGene{detail::pick(cfg.dense_dims, rng), detail::sample_bits(cfg, rng)};
    for (auto op : detail::sample_nonempty_subset(cfg.sparse_ops, rng))
      b.sparse[op] = OpGene{detail::pick(cfg.sparse_dims, rng), detail::sample_bits(cfg, rng)};
    if (cfg.allow_mergers) {
      b.d2s = rng.coin();
      b.s2d = rng.coin();
    }
    g.blocks.push_back(std::move(b));
  }
  return g;
}

/// Every operator at its widest dim, every connection, every merger.
inline Genotype full_genotype(const SpaceConfig& cfg) {
  Genotype g;
  for (std::size_t n = 1; n <= cfg.num_blocks; ++n) {
    BlockGene b;
    for (SourceId s = 0; s < SourceId(n); ++s) b.connections.push_back(s);
    for (auto op : cfg.dense_ops) b.dense[op] = OpGene{cfg.max_dense_dim(), cfg.default_bits()};
    for (auto op : cfg.sparse_ops) b.sparse[op] = OpGene{cfg.max_sparse_dim(), cfg.default_bits()};
    b.d2s = b.s2d = cfg.allow_mergers;
    g.blocks.push_back(std::move(b));
  }
  return g;
}

enum class MutationAction { kDenseDim = 0, kSparseDim, kDenseOp, kSparseOp, kConnection, kMerger, kBits };
inline constexpr std::size_t kBaseMutationActions = 6;

struct Mutation {
  Genotype child;
  std::size_t block = 0;  // 0-based
  MutationAction action = MutationAction::kDenseDim;
};

namespace detail {
template <class Op>
void resample_operator(std::map<Op, OpGene>& selected, const std::vector<Op>& space_ops,
                       const std::vector<std::size_t>& dims, const SpaceConfig& cfg, Rng& rng) {
  // Re-draw the inclusion of one operator; an empty branch is not allowed.
  for (;;) {
    const Op op = pick(space_ops, rng);
    if (rng.coin()) {
      selected[op] = OpGene{pick(dims, rng), sample_bits(cfg, rng)};
      return;
    }
    if (selected.size() == 1 && selected.count(op)) continue;
    selected.erase(op);
    return;
  }
}

template <class Op>
void resample_dim(std::map<Op, OpGene>& selected, const std::vector<std::size_t>& dims, Rng& rng) {
  auto it = selected.begin();
  std::advance(it, std::ptrdiff_t(rng.uniform_int(selected.size())));
  it->second.dim = pick(dims, rng);
}
}  // namespace detail

/// Picks a block uniformly, then one action uniformly from the six architecture
/// actions (seven with co-design bits), and applies it.
inline Mutation mutate_traced(const Genotype& g, const SpaceConfig& cfg, Rng& rng) {
  Mutation m{g, rng.uniform_int(g.blocks.size()), MutationAction::kDenseDim};
  const std::size_t actions = kBaseMutationActions + (cfg.codesign ? 1 : 0);
  m.action = static_cast<MutationAction>(rng.uniform_int(actions));
  BlockGene& b = m.child.blocks[m.block];
  switch (m.action) {
    case MutationAction::kDenseDim: detail::resample_dim(b.dense, cfg.dense_dims, rng); break;
    case MutationAction::kSparseDim: detail::resample_dim(b.sparse, cfg.sparse_dims, rng); break;
    case MutationAction::kDenseOp: detail::resample_operator(b.dense, cfg.dense_ops, cfg.dense_dims, cfg, rng); break;
    case MutationAction::kSparseOp:
      detail::resample_operator(b.sparse, cfg.sparse_ops, cfg.sparse_dims, cfg, rng);
      break;
    case MutationAction::kConnection: b.connections = detail::sample_connections(m.block + 1, rng); break;
    case MutationAction::kMerger:
      if (cfg.allow_mergers) {
        b.d2s = rng.coin();
        b.s2d = rng.coin();
      }
      break;
    case MutationAction::kBits: {
      const std::size_t total = b.dense.size() + b.sparse.size();
      std::size_t k = rng.uniform_int(total);
      const int bits = detail::pick(cfg.weight_bits_choices, rng);
      for (auto& [op, gene] : b.dense)
        if (k-- == 0) gene.bits = bits;
      for (auto& [op, gene] : b.sparse)
        if (k-- == 0) gene.bits = bits;
      break;
    }
  }
  return m;
}

inline Genotype mutate(const Genotype& g, const SpaceConfig& cfg, Rng& rng) { return mutate_traced(g, cfg, rng).child; }

/// Per-block count of (nonempty dense subset) x (nonempty sparse subset).
inline std::uint64_t operator_subset_count(const SpaceConfig& cfg) {
  return ((std::uint64_t{1} << cfg.dense_ops.size()) - 1) * ((std::uint64_t{1} << cfg.sparse_ops.size()) - 1);
}

using BigInt = boost::multiprecision::cpp_int;

/// Counting convention of space_cardinality().
inline constexpr const char* kCardinalityConvention =
    "per block: (prod over dense ops of (1 + |dense_dims|) - 1) * (prod over sparse ops of (1 + |sparse_dims|) - 1)"
    " * (4 if mergers else 1) * (2^n - 1) nonempty connection subsets for block n; dims are per operator;"
    " bits genes are excluded unless co-design is on, where each op option becomes |dims| * |bits|";

inline BigInt space_cardinality(const SpaceConfig& cfg) {
  const std::size_t bits = cfg.codesign ? cfg.weight_bits_choices.size() : 1;
  BigInt dense = 1, sparse = 1;
  for (std::size_t i = 0; i < cfg.dense_ops.size(); ++i) dense *= 1 + cfg.dense_dims.size() * bits;
  for (std::size_t i = 0; i < cfg.sparse_ops.size(); ++i) sparse *= 1 + cfg.sparse_dims.size() * bits;
  const BigInt per_block = (dense - 1) * (sparse - 1) * (cfg.allow_mergers ? 4 : 1);
  BigInt total = 1;
  for (std::size_t n = 1; n <= cfg.num_blocks; ++n) {
    BigInt connections = (BigInt(1) << n) - 1;
    total *= per_block * connections;
  }
  return total;
}

}  // namespace nasforge
