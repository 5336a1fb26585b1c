#pragma once

// Parametric ReRAM crossbar cost model: symmetric quantization, operator
// tiling, DAG latency / additive energy / area, and hardware-aware co-search.
//
// Units: time in ns, energy in pJ, area in relative units. Elementwise
// activations and normalization run in the crossbar periphery and are folded
// into the per-pass crossbar cost; the digital unit executes interaction
// arithmetic (dot products, FM, attention scores and softmax, gating products,
// merges) and the partial-sum accumulation across row tiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nasforge/evolution.hpp"
#include "nasforge/trainer.hpp"

namespace nasforge {

struct HwConfig {
  std::size_t rows = 128;  // crossbar word lines
  std::size_t cols = 128;  // crossbar bit lines
  int cell_bits = 2;
  int dac_bits = 1;
  int adc_bits = 8;
  double cycle_ns = 100.0;            // one crossbar read pass
  double crossbar_pj = 30.0;          // one crossbar read pass including DAC/ADC
  double digital_ns_per_mac = 1.0;
  double digital_pj_per_mac = 4.0;
  double buffer_pj_per_value = 0.5;   // writing one activation between stages
  double crossbar_area = 1.0;
  double digital_area = 50.0;

  std::vector<std::string> check() const {
    std::vector<std::string> e;
    if (rows == 0 || cols == 0) e.push_back("crossbar rows and cols must be positive");
    if (cell_bits < 1 || cell_bits > 8) e.push_back("cell_bits must lie in [1, 8]");
    if (dac_bits < 1 || adc_bits < 1) e.push_back("dac_bits and adc_bits must be positive");
    for (double v : {cycle_ns, crossbar_pj, digital_ns_per_mac, digital_pj_per_mac, buffer_pj_per_value, crossbar_area, digital_area})
      if (!(v > 0)) {
        e.push_back("timing, energy and area constants must be positive");
        break;
      }
    return e;
  }
};

inline nlohmann::json to_json(const HwConfig& h) {
  return {{"rows", h.rows},
          {"cols", h.cols},
          {"cell_bits", h.cell_bits},
          {"dac_bits", h.dac_bits},
          {"adc_bits", h.adc_bits},
          {"cycle_ns", h.cycle_ns},
          {"crossbar_pj", h.crossbar_pj},
          {"digital_ns_per_mac", h.digital_ns_per_mac},
          {"digital_pj_per_mac", h.digital_pj_per_mac},
          {"buffer_pj_per_value", h.buffer_pj_per_value},
          {"crossbar_area", h.crossbar_area},
          {"digital_area", h.digital_area}};
}

// -------------------------------------------------------------- quantization

struct Quantized {
  Tensor values;  // dequantized
  double scale = 0;
};

/// Symmetric uniform quantization: scale = max|W| / (2^(bits-1) - 1),
/// W_q = round(W / scale) * scale with halves rounded away from zero.
inline Quantized quantize(const Tensor& w, int bits) {
  if (bits < 2 || bits > 16) throw std::invalid_argument("quantize: bits must lie in [2, 16], got " + std::to_string(bits));
  double max_abs = 0;
  for (double v : w.data()) max_abs = std::max(max_abs, std::abs(v));
  if (max_abs == 0) return {w.clone(), 0.0};
  const double levels = double((1 << (bits - 1)) - 1);
  // A scale with fl(fl(levels * s) / levels) == s is recovered exactly from
  // the quantized maximum, which makes quantization idempotent bit for bit.
  double scale = max_abs / levels;
  for (int i = 0; i < 8; ++i) {
    const double next = (levels * scale) / levels;
    if (next == scale) break;
    scale = next;
  }
  std::vector<double> q(w.numel());
  const auto src = w.data();
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = std::clamp(std::round(src[i] / scale), -levels, levels) * scale;
  return {Tensor(w.shape(), std::move(q)), scale};
}

// ------------------------------------------------------------------- mapping

struct QuantSpec {
  int weight_bits = 8;
  int activation_bits = 8;
};

struct MatrixTiles {
  std::string name;
  std::size_t fan_in = 0, fan_out = 0;
  std::size_t cells_per_weight = 0;
  std::size_t row_tiles = 0, col_tiles = 0;
  std::size_t crossbars = 0;
  std::size_t input_bit_passes = 0;
  std::size_t vectors = 0;  // input vectors per sample
};

struct TilePlan {
  std::vector<MatrixTiles> matrices;
  std::uint64_t crossbar_count = 0;
  std::uint64_t interaction_macs = 0;  // dot products, FM, attention, gating, merges
  std::uint64_t accumulate_macs = 0;   // partial sums across row tiles
  std::uint64_t digital_macs() const { return interaction_macs + accumulate_macs; }
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

inline MatrixTiles tile_matrix(const std::string& name, std::size_t fan_in, std::size_t fan_out, std::size_t vectors,
                               const QuantSpec& q, const HwConfig& hw) {
  MatrixTiles t;
  t.name = name;
  t.fan_in = fan_in;
  t.fan_out = fan_out;
  t.vectors = vectors;
  t.cells_per_weight = ceil_div(std::size_t(q.weight_bits), std::size_t(hw.cell_bits));
  t.row_tiles = ceil_div(fan_in, hw.rows);
  t.col_tiles = ceil_div(fan_out * t.cells_per_weight, hw.cols);
  t.crossbars = t.row_tiles * t.col_tiles;
  t.input_bit_passes = ceil_div(std::size_t(q.activation_bits), std::size_t(hw.dac_bits));
  return t;
}

/// Matrix-vector products go to crossbars; the rest of the operator's
/// arithmetic goes to the digital unit.
inline TilePlan map_to_crossbars(const OpSpec& op, const QuantSpec& q, const HwConfig& hw) {
  TilePlan plan;
  for (const ParamShape& p : params(op)) {
    if (!p.is_matrix() || p.rows == 0) continue;
    MatrixTiles t = tile_matrix(p.name, p.rows, p.cols, matrix_uses(op, p.name), q, hw);
    plan.crossbar_count += t.crossbars;
    plan.accumulate_macs += std::uint64_t(t.row_tiles - 1) * t.fan_out * t.vectors;
    plan.matrices.push_back(std::move(t));
  }
  const std::uint64_t ds = op.dim_s, n = op.n_in;
  switch (op.kind) {
    case OpKind::kSG: plan.interaction_macs = sg_width(op); break;
    case OpKind::kSUM: plan.interaction_macs = op.out_dim; break;
    case OpKind::kDP: plan.interaction_macs = ops::pair_count(dp_stacked_rows(op)) * ds; break;
    case OpKind::kATTN: plan.interaction_macs = 2 * n * n * ds + ceil_div(5 * op.heads * n * n, 2); break;
    case OpKind::kS2D: plan.interaction_macs = n * ds; break;
    default: break;
  }
  return plan;
}

// ---------------------------------------------------------------------- cost

/// Cost of one operator; latency is its serial execution time.
struct OpCost {
  double crossbar_ns = 0, digital_ns = 0;
  double crossbar_pj = 0, digital_pj = 0, buffer_pj = 0;
  std::uint64_t crossbars = 0;
  double latency_ns() const { return crossbar_ns + digital_ns; }
  double energy_pj() const { return crossbar_pj + digital_pj + buffer_pj; }
};

struct CostReport {
  double latency_ns = 0;
  double energy_pj = 0;
  double area_units = 0;
  double crossbar_latency_ns = 0;  // critical path with digital time removed
  double crossbar_energy_pj = 0;
  double digital_energy_pj = 0;
  std::uint64_t crossbar_count = 0;
  std::uint64_t digital_macs = 0;
};

inline nlohmann::json to_json(const CostReport& c) {
  return {{"latency_ns", c.latency_ns},
          {"energy_pj", c.energy_pj},
          {"area_units", c.area_units},
          {"crossbar_latency_ns", c.crossbar_latency_ns},
          {"crossbar_energy_pj", c.crossbar_energy_pj},
          {"digital_energy_pj", c.digital_energy_pj},
          {"crossbar_count", c.crossbar_count},
          {"digital_macs", c.digital_macs}};
}

inline std::uint64_t output_values(const OpSpec& s) {
  switch (s.kind) {
    case OpKind::kEFC:
    case OpKind::kATTN: return std::uint64_t(s.out_dim) * s.dim_s;
    case OpKind::kD2S: return std::uint64_t(kD2SEmbeddings) * s.dim_s;
    default: return s.out_dim;
  }
}

/// Overrides applied to every operator (both unset: use each operator's genes).
struct QuantOverride {
  std::optional<int> weight_bits;
  std::optional<int> activation_bits;
};

inline QuantSpec quant_of(const OpSpec& s, const QuantOverride& o = {}) {
  return {o.weight_bits.value_or(s.weight_bits), o.activation_bits.value_or(s.activation_bits)};
}

inline OpCost op_cost(const OpSpec& s, const HwConfig& hw, const QuantOverride& o = {}) {
  const TilePlan t = map_to_crossbars(s, quant_of(s, o), hw);
  OpCost c;
  for (const auto& m : t.matrices) {
    const double passes = double(m.input_bit_passes * m.vectors);
    c.crossbar_ns += passes * hw.cycle_ns;  // tiles of one matrix run in parallel
    c.crossbar_pj += passes * double(m.crossbars) * hw.crossbar_pj;
  }
  c.digital_ns = double(t.digital_macs()) * hw.digital_ns_per_mac;
  c.digital_pj = double(t.digital_macs()) * hw.digital_pj_per_mac;
  c.buffer_pj = double(output_values(s)) * hw.buffer_pj_per_value;
  c.crossbars = t.crossbar_count;
  return c;
}

namespace detail {

/// Finish time of every block under the dependency graph; dense and sparse
/// branches run in parallel and each merger waits for the branch it reads.
inline double dag_latency(const NetPlan& net, const std::function<double(const PlannedOp&)>& lat) {
  std::vector<double> finish(net.blocks.size() + 1, 0.0);
  for (const BlockPlan& b : net.blocks) {
    if (!b.used) continue;
    double start = 0;
    for (SourceId s : b.sources) start = std::max(start, finish[std::size_t(s)]);
    double dense = 0, sparse = 0;
    for (const auto& [_, op] : b.dense_ops) dense = std::max(dense, lat(op));
    for (const auto& [_, op] : b.sparse_ops) sparse = std::max(sparse, lat(op));
    const double d2s = b.d2s ? lat(*b.d2s) : 0.0, s2d = b.s2d ? lat(*b.s2d) : 0.0;
    finish[b.number] = start + std::max({dense, sparse, dense + d2s, sparse + s2d});
  }
  return finish.back() + lat(net.head);
}

}  // namespace detail

inline CostReport cost(const NetPlan& net, const HwConfig& hw, const QuantOverride& o = {}) {
  if (auto e = hw.check(); !e.empty()) throw std::invalid_argument("hw config: " + e.front());
  std::map<std::string, OpCost> costs;
  CostReport r;
  for (const PlannedOp& op : net.used_ops()) {
    const OpCost c = op_cost(op.spec, hw, o);
    costs[op.prefix] = c;
    r.energy_pj += c.energy_pj();
    r.crossbar_energy_pj += c.crossbar_pj;
    r.digital_energy_pj += c.digital_pj;
    r.crossbar_count += c.crossbars;
    r.digital_macs += map_to_crossbars(op.spec, quant_of(op.spec, o), hw).digital_macs();
  }
  r.latency_ns = detail::dag_latency(net, [&](const PlannedOp& op) { return costs.at(op.prefix).latency_ns(); });
  r.crossbar_latency_ns = detail::dag_latency(net, [&](const PlannedOp& op) { return costs.at(op.prefix).crossbar_ns; });
  r.area_units = double(r.crossbar_count) * hw.crossbar_area + hw.digital_area;
  return r;
}

inline CostReport cost(const Genotype& g, const SpaceConfig& space, const FeatureSpec& fs, const HwConfig& hw,
                       const QuantOverride& o = {}) {
  return cost(plan(g, space, fs), hw, o);
}

// ------------------------------------------------------------ fake quantizer

/// Forward options that quantize each weight matrix to its operator's bits.
inline ForwardOptions fake_quant_options(const NetPlan& net) {
  auto bits = std::make_shared<std::map<std::string, int>>();
  for (const PlannedOp& op : net.used_ops())
    for (const ParamShape& p : params(op.spec))
      if (p.is_matrix()) (*bits)[op.prefix + p.name] = op.spec.weight_bits;
  ForwardOptions opt;
  opt.weight_transform = [bits](const std::string& name, const Tensor& w) {
    auto it = bits->find(name);
    return it == bits->end() ? w : quantize(w, it->second).values;
  };
  return opt;
}

inline double quantized_log_loss(const Supernet& net, const Genotype& g, const Dataset& val) {
  const NetPlan p = plan(g, net.config(), net.features());
  return evaluate(net, g, val, fake_quant_options(p)).log_loss;
}

// ---------------------------------------------------------------- co-search

struct CosearchConfig {
  double alpha = 1.0;  // weight of the validation log loss
  double beta = 0.0;   // weight of the normalized latency
  EvolutionConfig evolution;
  HwConfig hw;
};

struct CosearchResult {
  std::vector<SearchRecord> history;
  std::vector<double> loss;         // per record
  std::vector<CostReport> costs;    // per record
  double latency_reference_ns = 0;  // latency normalizer
  std::vector<std::size_t> pareto;  // record ids, non-dominated in (loss, latency, energy)
};

/// Non-dominated records (each genotype once, flagged records excluded),
/// minimizing loss, latency and energy together.
inline std::vector<std::size_t> pareto_front(const std::vector<SearchRecord>& history, const std::vector<double>& loss,
                                             const std::vector<CostReport>& costs) {
  std::vector<std::size_t> cand;
  std::set<std::string> seen;
  for (const auto& r : history)
    if (!r.flagged && seen.insert(genotype_key(r.genotype)).second) cand.push_back(r.id);
  auto dominates = [&](std::size_t a, std::size_t b) {
    const double la = loss[a], lb = loss[b];
    const double ta = costs[a].latency_ns, tb = costs[b].latency_ns;
    const double ea = costs[a].energy_pj, eb = costs[b].energy_pj;
    return la <= lb && ta <= tb && ea <= eb && (la < lb || ta < tb || ea < eb);
  };
  std::vector<std::size_t> front;
  for (std::size_t a : cand) {
    bool dominated = false;
    for (std::size_t b : cand)
      if (dominates(b, a)) {
        dominated = true;
        break;
      }
    if (!dominated) front.push_back(a);
  }
  return front;
}

/// Evolution with fitness alpha * loss + beta * latency / reference, where the
/// reference is the latency of the full genotype at the widest bit-widths.
inline CosearchResult cosearch(const FitnessFn& loss_fn, const SpaceConfig& space, const FeatureSpec& fs, const CosearchConfig& cfg,
                               const SearchOptions& opt = {}) {
  CosearchResult out;
  out.latency_reference_ns = cost(full_genotype(space), space, fs, cfg.hw).latency_ns;
  std::mutex mu;
  std::map<std::string, double> losses;
  auto fitness = [&](const Genotype& g) {
    const double l = loss_fn(g);
    {
      std::lock_guard lock(mu);
      losses[genotype_key(g)] = l;
    }
    return cfg.alpha * l + cfg.beta * cost(g, space, fs, cfg.hw).latency_ns / out.latency_reference_ns;
  };
  out.history = evolve(fitness, cfg.evolution, space, opt);
  for (const auto& r : out.history) {
    auto it = losses.find(genotype_key(r.genotype));
    // Resumed records were never evaluated here; recompute their loss.
    out.loss.push_back(it != losses.end() ? it->second : loss_fn(r.genotype));
    out.costs.push_back(cost(r.genotype, space, fs, cfg.hw));
  }
  out.pareto = pareto_front(out.history, out.loss, out.costs);
  return out;
}

inline CosearchResult cosearch(const Supernet& net, const Dataset& val, const CosearchConfig& cfg, const SearchOptions& opt = {}) {
  return cosearch([&](const Genotype& g) { return quantized_log_loss(net, g, val); }, net.config(), net.features(), cfg, opt);
}

inline std::string pareto_csv(const CosearchResult& r) {
  std::ostringstream os;
  os << "loss,latency_ns,energy_pj,genotype_id\n";
  for (std::size_t id : r.pareto)
    os << format_double(r.loss[id]) << ',' << format_double(r.costs[id].latency_ns) << ',' << format_double(r.costs[id].energy_pj)
       << ',' << id << '\n';
  return os.str();
}

}  // namespace nasforge
