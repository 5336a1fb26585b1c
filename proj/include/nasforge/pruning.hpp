#pragma once

// Iterative lottery-ticket pruning with a learned soft mask, the magnitude
// baseline, and structured FLOPs accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nasforge/trainer.hpp"

namespace nasforge {

/// Two-layer projection that scores every entry of an m x n weight matrix.
struct MaskMlp {
  Tensor w1;  // [h x m]
  Tensor w2;  // [m x h]
};

inline MaskMlp init_mask_mlp(std::size_t m, std::size_t h, Rng& rng) {
  ParamStore s;
  init_uniform(s, "w1", {h, m}, 1.0 / std::sqrt(double(std::max<std::size_t>(m, 1))), rng);
  init_uniform(s, "w2", {m, h}, 1.0 / std::sqrt(double(std::max<std::size_t>(h, 1))), rng);
  return {s["w1"], s["w2"]};
}

/// M = sigmoid(W2 relu(W1 W)), same shape as W.
inline Tensor gen_mask(const Tensor& w, const MaskMlp& mlp) {
  if (w.rank() != 2 || mlp.w1.rank() != 2 || mlp.w2.rank() != 2) throw DimensionError("gen_mask: expected matrices");
  const std::size_t m = w.dim(0), h = mlp.w1.dim(0);
  if (mlp.w1.dim(1) != m || mlp.w2.dim(0) != m || mlp.w2.dim(1) != h)
    throw DimensionError("gen_mask: mlp shapes " + shape_str(mlp.w1.shape()) + ", " + shape_str(mlp.w2.shape()) +
                         " do not fit weight " + shape_str(w.shape()));
  if (h < m) throw DimensionError("gen_mask: hidden width " + std::to_string(h) + " below " + std::to_string(m));
  return ops::sigmoid(ops::matmul(mlp.w2, ops::relu(ops::matmul(mlp.w1, w))));
}

/// One flag per entry, row-major; 0 marks a hard zero.
using KeepMask = std::vector<std::uint8_t>;

inline Tensor keep_tensor(const Shape& shape, const KeepMask& keep) {
  if (keep.size() != shape_numel(shape)) throw DimensionError("keep mask size does not match " + shape_str(shape));
  return Tensor(shape, std::vector<double>(keep.begin(), keep.end()));
}

/// M (.) W with hard-zeroed entries forced to exactly 0.
inline Tensor apply_mask(const Tensor& w, const Tensor& m, const KeepMask& keep) {
  if (w.shape() != m.shape()) throw DimensionError("apply_mask: " + shape_str(w.shape()) + " vs " + shape_str(m.shape()));
  return ops::mul(ops::mul(m, w), keep_tensor(w.shape(), keep));
}

// ----------------------------------------------------------------- accounting

/// Per-sample FLOPs with structured credit: a weight row or column that is
/// entirely zero is skipped. Scattered zeros still cost full FLOPs.
inline std::uint64_t structured_flops(const Model& m) {
  std::uint64_t total = 0;
  for (const PlannedOp& op : m.net_plan().used_ops()) {
    const OpFlops f = flops(op.spec);
    std::uint64_t saved = 0;
    for (const ParamShape& p : params(op.spec)) {
      if (!p.is_matrix() || p.rows == 0) continue;
      const Tensor& w = detail::lookup(m.params, op.prefix + p.name);
      const auto v = w.data();
      std::size_t live_rows = 0, live_cols = 0;
      std::vector<char> col_live(p.cols, 0);
      for (std::size_t r = 0; r < p.rows; ++r) {
        bool row_live = false;
        for (std::size_t c = 0; c < p.cols; ++c)
          if (v[r * p.cols + c] != 0.0) {
            row_live = true;
            col_live[c] = 1;
          }
        live_rows += row_live;
      }
      for (char c : col_live) live_cols += c;
      saved += 2ull * matrix_uses(op.spec, p.name) * (p.rows * p.cols - live_rows * live_cols);
    }
    total += f.total() - std::min(saved, f.mac);
  }
  return total;
}

/// Names of the matrices subject to pruning: every weight matrix except the
/// embedding table.
inline std::vector<std::string> prunable_matrices(const Model& m) {
  std::vector<std::string> names;
  for (const auto& [name, t] : m.params)
    if (name != kEmbeddingTable && t.rank() == 2 && t.numel() > 0) names.push_back(name);
  return names;
}

// ------------------------------------------------------------------ schedule

enum class PruneVariant { kMask, kMagnitude };

inline const char* name_of(PruneVariant v) { return v == PruneVariant::kMask ? "mask" : "magnitude"; }

struct PruneConfig {
  std::size_t iterations = 3;  // T
  double rate = 0.2;           // share of surviving entries removed per iteration
  bool global = false;         // rank across all matrices instead of per matrix
  double hidden_ratio = 2.0;   // mask MLP width h = ratio * m
  TrainConfig train;
  std::uint64_t seed = 0;
};

struct PruneRow {
  std::size_t t = 0;
  double log_loss = 0;
  double surviving = 1;  // fraction of prunable entries not hard-zeroed
  double mflops = 0;     // structured
  double percent = 100;  // structured FLOPs relative to the unpruned model
};

struct PruneResult {
  Model model;  // masks folded into the weights
  std::map<std::string, KeepMask> keep;
  std::vector<PruneRow> rows;  // one per t = 0..T
};

namespace detail {

inline std::size_t count_alive(const KeepMask& k) { return std::size_t(std::count(k.begin(), k.end(), 1)); }

/// Removes round(rate * alive) surviving entries with the lowest scores.
/// Ties go to the lower index so the schedule is deterministic.
inline void prune_lowest(std::vector<std::pair<KeepMask*, const std::vector<double>*>> groups, double rate) {
  std::vector<std::pair<std::size_t, std::size_t>> alive;  // (group, index)
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t i = 0; i < groups[g].first->size(); ++i)
      if ((*groups[g].first)[i]) alive.emplace_back(g, i);
  const std::size_t remove = round_half_up(rate * double(alive.size()));
  std::stable_sort(alive.begin(), alive.end(), [&](const auto& a, const auto& b) {
    return (*groups[a.first].second)[a.second] < (*groups[b.first].second)[b.second];
  });
  for (std::size_t k = 0; k < remove; ++k) (*groups[alive[k].first].first)[alive[k].second] = 0;
}

struct Round {
  Model baked;                                     // effective weights
  std::map<std::string, std::vector<double>> score;  // ranking key per entry
};

/// Trains from the stored initialization under the current hard zeros (and
/// a fresh mask MLP for the mask variant), then folds masks into the weights.
inline Round train_round(const Model& init, const Dataset& train, const std::map<std::string, KeepMask>& keep,
                         PruneVariant variant, const PruneConfig& cfg, std::size_t round) {
  ParamStore store;
  for (const auto& [name, t] : init.params) store[name] = t.clone(true);
  std::map<std::string, MaskMlp> mlps;
  std::map<std::string, Tensor> keeps;
  Rng rng(derive_seed(cfg.seed, round));
  for (const auto& [name, k] : keep) {
    const Tensor& w = store.at(name);
    keeps[name] = keep_tensor(w.shape(), k);
    if (variant == PruneVariant::kMask) {
      const std::size_t h = std::max<std::size_t>(w.dim(0), std::size_t(std::ceil(cfg.hidden_ratio * double(w.dim(0)))));
      const MaskMlp mlp = init_mask_mlp(w.dim(0), h, rng);
      store["mask:" + name + ".w1"] = mlp.w1;
      store["mask:" + name + ".w2"] = mlp.w2;
      mlps[name] = mlp;
    }
  }
  auto effective = [&](const std::string& name, const Tensor& w) -> Tensor {
    auto it = keeps.find(name);
    if (it == keeps.end()) return w;
    if (variant == PruneVariant::kMask) return ops::mul(ops::mul(gen_mask(w, mlps.at(name)), w), it->second);
    return ops::mul(w, it->second);
  };
  ForwardOptions opt;
  opt.weight_transform = effective;
  const NetPlan p = init.net_plan();
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.train.seed, round);
  train_loop(store, train, tc, [&](const FeatureBatch& b, std::size_t) {
    return ops::bce_with_logits(forward(CompactSource(store), p, init.features, init.cfg, b, opt).logits, b.labels);
  });

  Round r;
  r.baked = Model{init.cfg, init.features, init.genotype, {}};
  NoGradScope no_grad;
  for (const auto& [name, t] : init.params) {
    const Tensor& w = store.at(name);
    r.baked.params[name] = effective(name, w).clone(true);
    if (!keep.count(name)) continue;
    const Tensor score_src = variant == PruneVariant::kMask ? gen_mask(w, mlps.at(name)) : w;
    std::vector<double> s(score_src.data().begin(), score_src.data().end());
    if (variant == PruneVariant::kMagnitude)
      for (auto& x : s) x = std::abs(x);
    r.score[name] = std::move(s);
  }
  return r;
}

}  // namespace detail

/// Shared schedule of both variants. Round k trains under the hard zeros of
/// round k-1; its scores then remove `rate` of the survivors. Row t reports
/// the model trained under t pruning steps.
inline PruneResult prune_schedule(const Model& init, const Dataset& train, const Dataset& eval, PruneVariant variant,
                                  const PruneConfig& cfg) {
  if (!(cfg.rate > 0 && cfg.rate < 1)) throw std::invalid_argument("prune rate must lie in (0, 1)");
  if (cfg.hidden_ratio < 1) throw std::invalid_argument("mask hidden ratio must be at least 1");
  const double base_flops = double(flops(init.genotype, init.cfg, init.features));
  PruneResult out;
  for (const auto& name : prunable_matrices(init)) out.keep[name] = KeepMask(init.params.at(name).numel(), 1);
  std::size_t total = 0;
  for (const auto& [_, k] : out.keep) total += k.size();

  auto row = [&](std::size_t t, const Model& m) {
    std::size_t alive = 0;
    for (const auto& [_, k] : out.keep) alive += detail::count_alive(k);
    const double f = double(structured_flops(m));
    return PruneRow{t, evaluate(m, eval).log_loss, total ? double(alive) / double(total) : 1.0, f / 1e6,
                    base_flops > 0 ? 100.0 * f / base_flops : 100.0};
  };

  if (cfg.iterations == 0) {
    out.model = init.deep_copy();
    out.rows.push_back(row(0, out.model));
    return out;
  }
  for (std::size_t t = 0; t <= cfg.iterations; ++t) {
    detail::Round r = detail::train_round(init, train, out.keep, variant, cfg, t);
    out.rows.push_back(row(t, r.baked));
    if (t == cfg.iterations) {
      out.model = std::move(r.baked);
      break;
    }
    if (cfg.global) {
      std::vector<std::pair<KeepMask*, const std::vector<double>*>> groups;
      for (auto& [name, k] : out.keep) groups.emplace_back(&k, &r.score.at(name));
      detail::prune_lowest(std::move(groups), cfg.rate);
    } else {
      for (auto& [name, k] : out.keep) detail::prune_lowest({{&k, &r.score.at(name)}}, cfg.rate);
    }
  }
  return out;
}

/// Learned-mask lottery ticket: entries with the lowest mask values go first.
inline PruneResult iterate_prune(const Model& init, const Dataset& train, const Dataset& eval, const PruneConfig& cfg) {
  return prune_schedule(init, train, eval, PruneVariant::kMask, cfg);
}

/// Same schedule ranked by trained weight magnitude.
inline PruneResult magnitude_prune(const Model& init, const Dataset& train, const Dataset& eval, const PruneConfig& cfg) {
  return prune_schedule(init, train, eval, PruneVariant::kMagnitude, cfg);
}

inline std::string prune_report_csv(const std::string& dataset, const std::vector<std::pair<std::string, PruneRow>>& rows) {
  std::ostringstream os;
  os << "dataset,variant,T,log_loss,MFLOPs,percent\n";
  for (const auto& [variant, r] : rows)
    os << dataset << ',' << variant << ',' << r.t << ',' << format_double(r.log_loss) << ',' << format_double(r.mflops) << ','
       << format_double(r.percent) << '\n';
  return os.str();
}

}  // namespace nasforge
