#pragma once
// Test-only helpers shared by the PIM suite and the acceptance binary.

#include <algorithm>
#include <set>

#include "nasforge/pim.hpp"

namespace nasforge::testkit {

/// Places every weight cell on a grid of crossbars and counts the distinct
/// crossbars touched. Cell (r, c) of weight (i, j) sits at row i, column
/// j * cells + c.
inline std::size_t simulate_crossbars(std::size_t fan_in, std::size_t fan_out, std::size_t cells, const HwConfig& hw) {
  std::set<std::pair<std::size_t, std::size_t>> used;
  for (std::size_t i = 0; i < fan_in; ++i)
    for (std::size_t j = 0; j < fan_out; ++j)
      for (std::size_t c = 0; c < cells; ++c) used.insert({i / hw.rows, (j * cells + c) / hw.cols});
  return used.size();
}

/// Grows `g` in one random way that only adds to what the network computes.
inline Genotype grow(const Genotype& g, const SpaceConfig& s, Rng& rng) {
  Genotype h = g;
  for (int attempt = 0; attempt < 50; ++attempt) {
    BlockGene& b = h.blocks[rng.uniform_int(h.blocks.size())];
    const std::size_t block_no = std::size_t(&b - h.blocks.data()) + 1;
    switch (rng.uniform_int(6)) {
      case 0: {  // widen a dense operator
        auto it = std::next(b.dense.begin(), std::ptrdiff_t(rng.uniform_int(b.dense.size())));
        auto pos = std::find(s.dense_dims.begin(), s.dense_dims.end(), it->second.dim);
        if (pos + 1 == s.dense_dims.end()) continue;
        it->second.dim = *(pos + 1);
        return h;
      }
      case 1: {  // widen a sparse operator
        auto it = std::next(b.sparse.begin(), std::ptrdiff_t(rng.uniform_int(b.sparse.size())));
        auto pos = std::find(s.sparse_dims.begin(), s.sparse_dims.end(), it->second.dim);
        if (pos + 1 == s.sparse_dims.end()) continue;
        it->second.dim = *(pos + 1);
        return h;
      }
      case 2: {  // raise a bit-width
        auto it = std::next(b.dense.begin(), std::ptrdiff_t(rng.uniform_int(b.dense.size())));
        if (it->second.bits == 8) continue;
        it->second.bits = 8;
        return h;
      }
      case 3: {  // add an operator
        const DenseOp op = s.dense_ops[rng.uniform_int(s.dense_ops.size())];
        if (b.dense.count(op)) continue;
        b.dense[op] = OpGene{s.dense_dims.front(), 4};
        return h;
      }
      case 4: {  // add a merger
        if (b.d2s && b.s2d) continue;
        (b.d2s ? b.s2d : b.d2s) = true;
        return h;
      }
      case 5: {  // add a later input; the first input, which SG and SUM use as x1, is kept
        const SourceId c = SourceId(rng.uniform_int(block_no));
        if (c <= b.connections.front() || std::find(b.connections.begin(), b.connections.end(), c) != b.connections.end())
          continue;
        b.connections.push_back(c);
        std::sort(b.connections.begin(), b.connections.end());
        return h;
      }
    }
  }
  return h;
}

}  // namespace nasforge::testkit
