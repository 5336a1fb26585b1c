#pragma once

// Weight-sharing supernet over the choice-block space.
//
// Every block reads a compact concatenation of its sources. Supernet weights
// are allocated at maximal shapes in "source-aligned" row coordinates: the raw
// input occupies rows [0, raw), block i occupies [raw + (i-1)*max, raw + i*max).
// A genotype's forward pass gathers the row segments of its selected sources
// and the column prefix of its sampled dim, which is exactly the masked
// evaluation of the maximal network with extra dimensions zeroed. The same
// forward code runs over a standalone Model whose weights are the gathered
// slices themselves, so extracted subnets reproduce supernet logits.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nasforge/data.hpp"
#include "nasforge/hashing.hpp"
#include "nasforge/operators.hpp"
#include "nasforge/rng.hpp"
#include "nasforge/search_space.hpp"
#include "nasforge/tensor.hpp"

namespace nasforge {

using ParamStore = std::map<std::string, Tensor>;

class GenotypeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- planning

struct PlannedOp {
  std::string prefix;  // parameter name prefix, e.g. "b2.FC."
  OpSpec spec;
};

struct BlockPlan {
  std::size_t number = 0;  // 1-based
  bool used = true;
  std::vector<SourceId> sources;
  std::vector<ops::RowRange> dense_rows;   // supernet rows of the dense input
  std::vector<ops::RowRange> sparse_rows;  // supernet rows of the sparse input
  ops::RowRange x1_rows;
  std::size_t dense_in = 0, sparse_in = 0, x1_width = 0, x2_width = 0;
  std::vector<std::pair<DenseOp, PlannedOp>> dense_ops;
  std::vector<std::pair<SparseOp, PlannedOp>> sparse_ops;
  std::optional<PlannedOp> d2s, s2d;
  std::size_t dense_out = 0, sparse_ops_out = 0, sparse_out = 0;
};

struct NetPlan {
  std::vector<BlockPlan> blocks;
  PlannedOp head;
  std::size_t dim_s = 0;

  /// Every operator that runs, in execution order, including the head.
  std::vector<PlannedOp> used_ops() const {
    std::vector<PlannedOp> out;
    for (const auto& b : blocks) {
      if (!b.used) continue;
      for (const auto& [op, p] : b.dense_ops) out.push_back(p);
      for (const auto& [op, p] : b.sparse_ops) out.push_back(p);
      if (b.d2s) out.push_back(*b.d2s);
      if (b.s2d) out.push_back(*b.s2d);
    }
    out.push_back(head);
    return out;
  }
};

/// Supernet row offset of each source segment.
struct SourceLayout {
  std::size_t raw_dense = 0, raw_sparse = 0, max_dense = 0, max_sparse = 0;

  std::size_t dense_offset(SourceId s) const { return s == kRawSource ? 0 : raw_dense + std::size_t(s - 1) * max_dense; }
  std::size_t sparse_offset(SourceId s) const { return s == kRawSource ? 0 : raw_sparse + std::size_t(s - 1) * max_sparse; }
  std::size_t dense_in_max(std::size_t block) const { return raw_dense + (block - 1) * max_dense; }
  std::size_t sparse_in_max(std::size_t block) const { return raw_sparse + (block - 1) * max_sparse; }
};

inline SourceLayout source_layout(const SpaceConfig& cfg, const FeatureSpec& fs) {
  return {fs.num_dense, fs.num_sparse(), cfg.max_dense_dim(), cfg.max_sparse_out()};
}

inline std::string block_prefix(std::size_t number, const char* op) { return "b" + std::to_string(number) + "." + op + "."; }

/// Activation bits follow the weight gene, rounded up to the {4, 8} grid.
inline int activation_bits_for(int weight_bits) { return weight_bits <= 4 ? 4 : 8; }

inline NetPlan plan(const Genotype& g, const SpaceConfig& cfg, const FeatureSpec& fs) {
  const auto problems = validate(g, cfg);
  if (!problems.empty()) throw GenotypeError("invalid genotype: " + problems.front());
  const SourceLayout layout = source_layout(cfg, fs);
  const auto used = reachable_blocks(g);
  NetPlan net;
  net.dim_s = cfg.dim_s;
  std::vector<std::size_t> dense_width{fs.num_dense}, sparse_count{fs.num_sparse()};
  for (std::size_t n = 1; n <= g.blocks.size(); ++n) {
    const BlockGene& gene = g.blocks[n - 1];
    BlockPlan b;
    b.number = n;
    b.used = used[n];
    b.sources = gene.connections;
    for (SourceId s : gene.connections) {
      const std::size_t dw = dense_width[std::size_t(s)], sc = sparse_count[std::size_t(s)];
      if (dw) b.dense_rows.push_back({layout.dense_offset(s), dw});
      if (sc) b.sparse_rows.push_back({layout.sparse_offset(s), sc});
      b.dense_in += dw;
      b.sparse_in += sc;
    }
    const SourceId first = gene.connections.front();
    b.x1_rows = {layout.dense_offset(first), dense_width[std::size_t(first)]};
    b.x1_width = b.x1_rows.length;
    b.x2_width = gene.connections.size() == 1 ? b.x1_width : b.dense_in - b.x1_width;

    for (const auto& [op, og] : gene.dense) {
      OpSpec s;
      s.kind = kind_of(op);
      s.out_dim = og.dim;
      s.dim_s = cfg.dim_s;
      s.balanced = cfg.balanced_dp;
      s.weight_bits = og.bits;
      s.activation_bits = activation_bits_for(og.bits);
      if (op == DenseOp::kSG || op == DenseOp::kSUM) {
        s.dim_in = b.x1_width;
        s.dim_in2 = b.x2_width;
      } else {
        s.dim_in = b.dense_in;
      }
      if (op == DenseOp::kDP) s.n_in = b.sparse_in;
      b.dense_ops.push_back({op, PlannedOp{block_prefix(n, name_of(op)), s}});
      b.dense_out = std::max(b.dense_out, og.dim);
    }
    for (const auto& [op, og] : gene.sparse) {
      OpSpec s;
      s.kind = kind_of(op);
      s.n_in = b.sparse_in;
      s.out_dim = og.dim;
      s.dim_s = cfg.dim_s;
      s.heads = cfg.heads;
      s.weight_bits = og.bits;
      s.activation_bits = activation_bits_for(og.bits);
      b.sparse_ops.push_back({op, PlannedOp{block_prefix(n, name_of(op)), s}});
      b.sparse_ops_out = std::max(b.sparse_ops_out, og.dim);
    }
    b.sparse_out = b.sparse_ops_out;
    const int merger_bits = cfg.default_bits();
    if (gene.d2s) {
      OpSpec s{OpKind::kD2S, b.dense_out, 0, 0, kD2SEmbeddings, cfg.dim_s, 1, true, merger_bits, activation_bits_for(merger_bits)};
      b.d2s = PlannedOp{block_prefix(n, "D2S"), s};
      b.sparse_out += kD2SEmbeddings;
    }
    if (gene.s2d) {
      OpSpec s{OpKind::kS2D, 0, 0, b.sparse_ops_out, b.dense_out, cfg.dim_s, 1, true, merger_bits, activation_bits_for(merger_bits)};
      b.s2d = PlannedOp{block_prefix(n, "S2D"), s};
    }
    dense_width.push_back(b.dense_out);
    sparse_count.push_back(b.sparse_out);
    net.blocks.push_back(std::move(b));
  }
  const std::size_t head_in = net.blocks.empty() ? fs.num_dense : net.blocks.back().dense_out;
  net.head = PlannedOp{"head.", OpSpec{OpKind::kHEAD, head_in, 0, 0, 1, cfg.dim_s, 1, true, cfg.default_bits(), 8}};
  return net;
}

/// Parameter shapes of the maximal network (what the supernet allocates).
inline std::vector<std::pair<std::string, ParamShape>> supernet_params(const SpaceConfig& cfg, const FeatureSpec& fs) {
  const SourceLayout layout = source_layout(cfg, fs);
  std::vector<std::pair<std::string, ParamShape>> out;
  auto add = [&](const std::string& prefix, const OpSpec& s) {
    for (auto& p : params(s)) out.push_back({prefix + p.name, p});
  };
  for (std::size_t n = 1; n <= cfg.num_blocks; ++n) {
    const std::size_t din = layout.dense_in_max(n), sin = layout.sparse_in_max(n);
    for (DenseOp op : cfg.dense_ops) {
      OpSpec s;
      s.kind = kind_of(op);
      s.dim_in = din;
      s.dim_in2 = (op == DenseOp::kSG || op == DenseOp::kSUM) ? din : 0;
      s.n_in = op == DenseOp::kDP ? sin : 0;
      s.out_dim = cfg.max_dense_dim();
      s.dim_s = cfg.dim_s;
      s.balanced = cfg.balanced_dp;
      add(block_prefix(n, name_of(op)), s);
    }
    for (SparseOp op : cfg.sparse_ops) {
      OpSpec s;
      s.kind = kind_of(op);
      s.n_in = sin;
      s.out_dim = cfg.max_sparse_dim();
      s.dim_s = cfg.dim_s;
      s.heads = cfg.heads;
      add(block_prefix(n, name_of(op)), s);
    }
    if (cfg.allow_mergers) {
      add(block_prefix(n, "D2S"), OpSpec{OpKind::kD2S, cfg.max_dense_dim(), 0, 0, kD2SEmbeddings, cfg.dim_s});
      add(block_prefix(n, "S2D"), OpSpec{OpKind::kS2D, 0, 0, cfg.max_sparse_dim(), cfg.max_dense_dim(), cfg.dim_s});
    }
  }
  add("head.", OpSpec{OpKind::kHEAD, cfg.num_blocks ? cfg.max_dense_dim() : fs.num_dense, 0, 0, 1, cfg.dim_s});
  return out;
}

inline const char* kEmbeddingTable = "emb.table";

inline std::vector<std::int64_t> feature_offsets(const FeatureSpec& fs) {
  std::vector<std::int64_t> off(fs.num_sparse(), 0);
  for (std::size_t f = 1; f < off.size(); ++f) off[f] = off[f - 1] + std::int64_t(fs.vocab[f - 1]);
  return off;
}

// ---------------------------------------------------------- weight sources

/// Resolves a named parameter to the slice a genotype needs.
class WeightSource {
 public:
  virtual ~WeightSource() = default;
  virtual Tensor matrix(const std::string& name, const std::vector<ops::RowRange>& rows, std::size_t cols) const = 0;
  virtual Tensor vector(const std::string& name, std::size_t n) const = 0;
};

namespace detail {
inline const Tensor& lookup(const ParamStore& store, const std::string& name) {
  auto it = store.find(name);
  if (it == store.end()) throw std::out_of_range("parameter '" + name + "' not found");
  return it->second;
}

inline std::size_t total_rows(const std::vector<ops::RowRange>& rows) {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.length;
  return n;
}
}  // namespace detail

/// Gathers slices of maximal supernet weights; gradients flow to the full tensors.
class SupernetSource final : public WeightSource {
 public:
  explicit SupernetSource(const ParamStore& store) : store_(store) {}

  Tensor matrix(const std::string& name, const std::vector<ops::RowRange>& rows, std::size_t cols) const override {
    const Tensor& w = detail::lookup(store_, name);
    if (rows.size() == 1 && rows[0].begin == 0 && rows[0].length == w.dim(0) && cols == w.dim(1)) return w;
    return ops::take(w, rows, 0, cols);
  }
  Tensor vector(const std::string& name, std::size_t n) const override {
    const Tensor& w = detail::lookup(store_, name);
    if (n == w.dim(0)) return w;
    return ops::take(w, {{0, n}}, 0, 1);
  }

 private:
  const ParamStore& store_;
};

/// Standalone weights stored at exactly the requested shapes.
class CompactSource final : public WeightSource {
 public:
  explicit CompactSource(const ParamStore& store) : store_(store) {}

  Tensor matrix(const std::string& name, const std::vector<ops::RowRange>& rows, std::size_t cols) const override {
    const Tensor& w = detail::lookup(store_, name);
    if (w.rank() != 2 || w.dim(0) != detail::total_rows(rows) || w.dim(1) != cols)
      throw DimensionError("parameter '" + name + "' is " + shape_str(w.shape()) + ", expected " +
                           std::to_string(detail::total_rows(rows)) + "x" + std::to_string(cols));
    return w;
  }
  Tensor vector(const std::string& name, std::size_t n) const override {
    const Tensor& w = detail::lookup(store_, name);
    if (w.rank() != 1 || w.dim(0) != n)
      throw DimensionError("parameter '" + name + "' is " + shape_str(w.shape()) + ", expected " + std::to_string(n));
    return w;
  }

 private:
  const ParamStore& store_;
};

/// Records every slice it hands out as a detached copy.
class RecordingSource final : public WeightSource {
 public:
  explicit RecordingSource(const WeightSource& inner) : inner_(inner) {}

  Tensor matrix(const std::string& name, const std::vector<ops::RowRange>& rows, std::size_t cols) const override {
    Tensor t = inner_.matrix(name, rows, cols);
    recorded_[name] = t.clone(true);
    return t;
  }
  Tensor vector(const std::string& name, std::size_t n) const override {
    Tensor t = inner_.vector(name, n);
    recorded_[name] = t.clone(true);
    return t;
  }
  ParamStore take() { return std::move(recorded_); }

 private:
  const WeightSource& inner_;
  mutable ParamStore recorded_;
};

// ------------------------------------------------------------------ forward

struct ForwardOptions {
  /// Evaluate operators of each branch in reverse order (aggregation is a sum).
  bool reverse_branch_order = false;
  /// Keep per-block outputs zero-padded to the maximal widths.
  bool trace = false;
  /// Applied to every weight matrix after slicing (masks, fake quantization).
  std::function<Tensor(const std::string&, const Tensor&)> weight_transform = {};
};

struct BlockTrace {
  Tensor dense;   // [B x max_dense], zero beyond the active width
  Tensor sparse;  // [B x max_sparse_out x dim_s], zero beyond the active count
};

struct ForwardResult {
  Tensor logits;      // [B]
  Tensor head_input;  // [B x head width]
  std::vector<BlockTrace> trace;
};

namespace detail {
inline OpWeights fetch(const WeightSource& src, const PlannedOp& op, const BlockPlan* block, const ForwardOptions& opt) {
  OpWeights w;
  for (const ParamShape& p : params(op.spec)) {
    const std::string name = op.prefix + p.name;
    if (!p.is_matrix()) {
      w[p.name] = src.vector(name, p.rows);
      continue;
    }
    std::vector<ops::RowRange> rows;
    switch (p.row_space) {
      case RowSpace::kPrefix: rows = {{0, p.rows}}; break;
      case RowSpace::kDenseInput: rows = block->dense_rows; break;
      case RowSpace::kSparseInput: rows = block->sparse_rows; break;
      case RowSpace::kX1Input: rows = {block->x1_rows}; break;
    }
    if (total_rows(rows) != p.rows) throw std::logic_error("row plan mismatch for " + name);
    if (rows.empty()) rows = {{0, 0}};
    Tensor t = src.matrix(name, rows, p.cols);
    w[p.name] = opt.weight_transform ? opt.weight_transform(name, t) : t;
  }
  return w;
}

inline Tensor concat_or_empty(std::size_t axis, const std::vector<Tensor>& parts, Shape empty_shape) {
  std::vector<Tensor> nonempty;
  for (const auto& p : parts)
    if (p.dim(axis) > 0) nonempty.push_back(p);
  if (nonempty.empty()) return Tensor::zeros(std::move(empty_shape));
  if (nonempty.size() == 1) return nonempty.front();
  return ops::concat(axis, nonempty);
}

template <class Seq, class Fn>
void for_each_ordered(const Seq& seq, bool reverse, Fn fn) {
  if (reverse)
    for (auto it = seq.rbegin(); it != seq.rend(); ++it) fn(*it);
  else
    for (const auto& e : seq) fn(e);
}

inline Tensor run_dense_op(DenseOp op, const PlannedOp& p, const OpWeights& w, const Tensor& dense_in, const Tensor& x1,
                           const Tensor& x2, const Tensor& sparse_in) {
  switch (op) {
    case DenseOp::kFC: return fc(dense_in, w);
    case DenseOp::kSG: {
      const Tensor gated = sigmoid_gating(x1, x2, w);
      return detail::norm(fit(gated, 1, p.spec.out_dim), w, "ln");
    }
    case DenseOp::kSUM: return detail::norm(fit(sum_merge(x1, x2), 1, p.spec.out_dim), w, "ln");
    case DenseOp::kDP: {
      std::optional<Tensor> xd;
      if (dense_in.dim(1) > 0) xd = dense_in;
      return dot_product(xd, sparse_in, w, p.spec.balanced);
    }
  }
  throw std::logic_error("unknown dense operator");
}
}  // namespace detail

inline ForwardResult forward(const WeightSource& src, const NetPlan& net, const FeatureSpec& fs, const SpaceConfig& cfg,
                             const FeatureBatch& batch, const ForwardOptions& opt = {}) {
  const std::size_t B = batch.size(), ds = net.dim_s;
  if (batch.dense.dim(1) != fs.num_dense || batch.ids.cols != fs.num_sparse())
    throw DimensionError("batch does not match the feature spec");
  // Raw sparse input: one shared table with per-feature row offsets.
  Tensor raw_sparse = Tensor::zeros({B, 0, ds});
  if (fs.num_sparse() > 0) {
    ops::IdMatrix global = batch.ids;
    const auto offsets = feature_offsets(fs);
    for (std::size_t i = 0; i < global.values.size(); ++i) {
      const std::size_t f = i % global.cols;
      if (global.values[i] < 0 || std::size_t(global.values[i]) >= fs.vocab[f])
        throw IndexError("feature " + std::to_string(f) + " id " + std::to_string(global.values[i]) + " outside vocabulary");
      global.values[i] += offsets[f];
    }
    raw_sparse = ops::embedding_lookup(src.matrix(kEmbeddingTable, {{0, fs.total_vocab()}}, ds), global);
  }
  std::vector<Tensor> dense_out{batch.dense}, sparse_out{raw_sparse};
  ForwardResult result;
  for (const BlockPlan& b : net.blocks) {
    if (!b.used) {
      dense_out.push_back(Tensor::zeros({B, b.dense_out}));
      sparse_out.push_back(Tensor::zeros({B, b.sparse_out, ds}));
      if (opt.trace)
        result.trace.push_back({Tensor::zeros({B, cfg.max_dense_dim()}), Tensor::zeros({B, cfg.max_sparse_out(), ds})});
      continue;
    }
    std::vector<Tensor> dparts, sparts;
    for (SourceId s : b.sources) {
      dparts.push_back(dense_out[std::size_t(s)]);
      sparts.push_back(sparse_out[std::size_t(s)]);
    }
    const Tensor dense_in = detail::concat_or_empty(1, dparts, {B, 0});
    const Tensor sparse_in = detail::concat_or_empty(1, sparts, {B, 0, ds});
    const Tensor x1 = dparts.front();
    const Tensor x2 = dparts.size() == 1 ? x1 : detail::concat_or_empty(1, {dparts.begin() + 1, dparts.end()}, {B, 0});
    if (sparse_in.dim(1) == 0 && (!b.sparse_ops.empty()))
      throw GenotypeError("block " + std::to_string(b.number) + ": sparse operators need a nonempty sparse input");

    Tensor dense_acc, sparse_acc;
    detail::for_each_ordered(b.dense_ops, opt.reverse_branch_order, [&](const auto& entry) {
      const auto& [op, p] = entry;
      const Tensor y = fit(detail::run_dense_op(op, p, detail::fetch(src, p, &b, opt), dense_in, x1, x2, sparse_in), 1, b.dense_out);
      dense_acc = dense_acc.defined() ? ops::add(dense_acc, y) : y;
    });
    detail::for_each_ordered(b.sparse_ops, opt.reverse_branch_order, [&](const auto& entry) {
      const auto& [op, p] = entry;
      const OpWeights w = detail::fetch(src, p, &b, opt);
      Tensor y = op == SparseOp::kEFC ? efc(sparse_in, w) : fit(attention(sparse_in, w, p.spec.heads), 1, p.spec.out_dim);
      y = fit(y, 1, b.sparse_ops_out);
      sparse_acc = sparse_acc.defined() ? ops::add(sparse_acc, y) : y;
    });
    Tensor dense_final = dense_acc, sparse_final = sparse_acc;
    if (b.s2d) dense_final = ops::add(dense_acc, sparse_to_dense(sparse_acc, detail::fetch(src, *b.s2d, &b, opt)));
    if (b.d2s) sparse_final = ops::concat(1, {sparse_acc, dense_to_sparse(dense_acc, detail::fetch(src, *b.d2s, &b, opt), ds)});
    if (opt.trace) {
      NoGradScope no_grad;
      result.trace.push_back({ops::pad(dense_final, 1, cfg.max_dense_dim()), ops::pad(sparse_final, 1, cfg.max_sparse_out())});
    }
    dense_out.push_back(dense_final);
    sparse_out.push_back(sparse_final);
  }
  result.head_input = dense_out.back();
  result.logits = head(result.head_input, detail::fetch(src, net.head, nullptr, opt));
  return result;
}

inline std::string params_checksum(const ParamStore& store) {
  std::string bytes;
  for (const auto& [name, t] : store) {
    bytes += name;
    bytes += shape_str(t.shape());
    bytes.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(double));
  }
  return sha256_hex(bytes);
}

inline std::size_t params_size(const ParamStore& store) {
  std::size_t n = 0;
  for (const auto& [name, t] : store) n += t.numel();
  return n;
}

// ----------------------------------------------------------------- networks

/// A standalone network for one genotype.
struct Model {
  SpaceConfig cfg;
  FeatureSpec features;
  Genotype genotype;
  ParamStore params;

  NetPlan net_plan() const { return plan(genotype, cfg, features); }

  ForwardResult run(const FeatureBatch& batch, const ForwardOptions& opt = {}) const {
    return nasforge::forward(CompactSource(params), net_plan(), features, cfg, batch, opt);
  }
  Tensor forward(const FeatureBatch& batch, const ForwardOptions& opt = {}) const { return run(batch, opt).logits; }

  /// Copies share tensors; this one does not.
  Model deep_copy() const {
    Model m{cfg, features, genotype, {}};
    for (const auto& [name, t] : params) m.params[name] = t.clone(true);
    return m;
  }
};

inline void init_uniform(ParamStore& store, const std::string& name, Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  store[name] = Tensor(std::move(shape), std::move(v), true);
}

class Supernet {
 public:
  Supernet(SpaceConfig cfg, FeatureSpec features, std::uint64_t seed) : cfg_(std::move(cfg)), features_(std::move(features)) {
    const auto errors = cfg_.check();
    if (!errors.empty()) throw std::invalid_argument("space config: " + errors.front());
    if (features_.num_dense == 0 && features_.num_sparse() == 0) throw std::invalid_argument("empty feature spec");
    Rng rng(seed);
    // Matrices and their biases: uniform(+-1/sqrt(fan_in)). Norm gains 1, shifts 0.
    std::map<std::string, std::size_t> fan_in;
    for (const auto& [name, p] : supernet_params(cfg_, features_))
      if (p.is_matrix()) fan_in[name.substr(0, name.rfind('.'))] = p.rows;
    for (const auto& [name, p] : supernet_params(cfg_, features_)) {
      if (p.is_norm) {
        const bool gain = name.back() == 'g';
        params_[name] = Tensor::full({p.rows}, gain ? 1.0 : 0.0, true);
        continue;
      }
      const std::size_t fi = p.is_matrix() ? p.rows : fan_in[name.substr(0, name.rfind('.'))];
      const double bound = 1.0 / std::sqrt(double(std::max<std::size_t>(fi, 1)));
      init_uniform(params_, name, p.is_matrix() ? Shape{p.rows, p.cols} : Shape{p.rows}, bound, rng);
    }
    if (features_.num_sparse() > 0)
      init_uniform(params_, kEmbeddingTable, {features_.total_vocab(), cfg_.dim_s}, 1.0 / std::sqrt(double(cfg_.dim_s)), rng);
  }

  const SpaceConfig& config() const { return cfg_; }
  const FeatureSpec& features() const { return features_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::string checksum() const { return params_checksum(params_); }

  ForwardResult run(const Genotype& g, const FeatureBatch& batch, const ForwardOptions& opt = {}) const {
    return nasforge::forward(SupernetSource(params_), plan(g, cfg_, features_), features_, cfg_, batch, opt);
  }
  Tensor forward(const Genotype& g, const FeatureBatch& batch, const ForwardOptions& opt = {}) const {
    return run(g, batch, opt).logits;
  }

 private:
  SpaceConfig cfg_;
  FeatureSpec features_;
  ParamStore params_;
};

/// Copies exactly the weight slices `g` uses into a standalone model.
inline Model extract_subnet(const Supernet& net, const Genotype& g) {
  const NetPlan p = plan(g, net.config(), net.features());
  const FeatureSpec& fs = net.features();
  FeatureBatch probe;
  probe.dense = Tensor::zeros({1, fs.num_dense});
  probe.ids = ops::IdMatrix{1, fs.num_sparse(), std::vector<std::int64_t>(fs.num_sparse(), 0)};
  probe.labels = {0.0};
  SupernetSource base(net.params());
  RecordingSource recorder(base);
  {
    NoGradScope no_grad;
    forward(recorder, p, fs, net.config(), probe);
  }
  return Model{net.config(), fs, g, recorder.take()};
}

/// Parameters a standalone model of `g` holds: per-operator weights and
/// biases, layer-norm affines, head, and the embedding table.
inline std::size_t model_param_count(const Genotype& g, const SpaceConfig& cfg, const FeatureSpec& fs) {
  std::size_t n = fs.total_vocab() * cfg.dim_s;
  for (const auto& op : plan(g, cfg, fs).used_ops()) n += param_count(op.spec) + norm_param_count(op.spec);
  return n;
}

struct Reachability {
  Genotype genotype;
  std::vector<bool> used;  // used[n - 1] for block n
  std::size_t unused_count() const { return std::size_t(std::count(used.begin(), used.end(), false)); }
};

/// Marks blocks whose outputs never reach the head; connections are untouched.
inline Reachability prune_unreachable(const Genotype& g) {
  const auto r = reachable_blocks(g);
  return Reachability{g, std::vector<bool>(r.begin() + 1, r.end())};
}

// ---------------------------------------------------------------- sampling

enum class SamplingStrategy { kSingleOpSingleConn, kAnyOpAnyConn, kSingleOpAnyConn };

inline const char* name_of(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::kSingleOpSingleConn: return "single-op-single-conn";
    case SamplingStrategy::kAnyOpAnyConn: return "any-op-any-conn";
    case SamplingStrategy::kSingleOpAnyConn: return "single-op-any-conn";
  }
  return "?";
}

inline std::optional<SamplingStrategy> parse_strategy(const std::string& s) {
  for (auto k : {SamplingStrategy::kSingleOpSingleConn, SamplingStrategy::kAnyOpAnyConn, SamplingStrategy::kSingleOpAnyConn})
    if (s == name_of(k)) return k;
  return std::nullopt;
}

struct SamplingSchedule {
  SamplingStrategy kind = SamplingStrategy::kSingleOpAnyConn;
  double warmup_fraction = 0.2;
  std::size_t total_steps = 1;

  /// Probability of sampling the full supernet: max(0, 1 - step / (fraction * total)).
  double warmup_probability(std::size_t step) const {
    const double horizon = warmup_fraction * double(total_steps);
    if (horizon <= 0) return 0.0;
    return std::max(0.0, 1.0 - double(step) / horizon);
  }
};

inline Genotype sample_path(const SamplingSchedule& sched, const SpaceConfig& cfg, Rng& rng, std::size_t step) {
  const double p = sched.warmup_probability(step);
  if (p > 0 && rng.uniform() < p) return full_genotype(cfg);
  const bool single_op = sched.kind != SamplingStrategy::kAnyOpAnyConn;
  const bool single_conn = sched.kind == SamplingStrategy::kSingleOpSingleConn;
  Genotype g;
  for (std::size_t n = 1; n <= cfg.num_blocks; ++n) {
    BlockGene b;
    if (single_conn)
      b.connections = {SourceId(rng.uniform_int(n))};
    else
      b.connections = detail::sample_connections(n, rng);
    const auto dense = single_op ? std::vector<DenseOp>{detail::pick(cfg.dense_ops, rng)}
                                 : detail::sample_nonempty_subset(cfg.dense_ops, rng);
    const auto sparse = single_op ? std::vector<SparseOp>{detail::pick(cfg.sparse_ops, rng)}
                                  : detail::sample_nonempty_subset(cfg.sparse_ops, rng);
    for (auto op : dense) b.dense[op] = OpGene{detail::pick(cfg.dense_dims, rng), detail::sample_bits(cfg, rng)};
    for (auto op : sparse) b.sparse[op] = OpGene{detail::pick(cfg.sparse_dims, rng), detail::sample_bits(cfg, rng)};
    if (cfg.allow_mergers) {
      b.d2s = rng.coin();
      b.s2d = rng.coin();
    }
    g.blocks.push_back(std::move(b));
  }
  return g;
}

}  // namespace nasforge
