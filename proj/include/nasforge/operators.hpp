#pragma once

// Building operators, mergers and the final head, with their parameter lists
// and FLOPs formulas. Operators consume compact inputs (no zero padding beyond
// the active width) and named weights already sliced to the active shape.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nasforge/search_space.hpp"
#include "nasforge/tensor.hpp"

namespace nasforge {

enum class OpKind { kFC, kSG, kSUM, kDP, kEFC, kATTN, kD2S, kS2D, kHEAD };

inline const char* name_of(OpKind k) {
  switch (k) {
    case OpKind::kFC: return "FC";
    case OpKind::kSG: return "SG";
    case OpKind::kSUM: return "SUM";
    case OpKind::kDP: return "DP";
    case OpKind::kEFC: return "EFC";
    case OpKind::kATTN: return "ATTN";
    case OpKind::kD2S: return "D2S";
    case OpKind::kS2D: return "S2D";
    case OpKind::kHEAD: return "HEAD";
  }
  return "?";
}

inline OpKind kind_of(DenseOp op) {
  switch (op) {
    case DenseOp::kFC: return OpKind::kFC;
    case DenseOp::kSG: return OpKind::kSG;
    case DenseOp::kSUM: return OpKind::kSUM;
    case DenseOp::kDP: return OpKind::kDP;
  }
  return OpKind::kFC;
}

inline OpKind kind_of(SparseOp op) { return op == SparseOp::kEFC ? OpKind::kEFC : OpKind::kATTN; }

/// Embeddings emitted by the dense-to-sparse merger.
inline constexpr std::size_t kD2SEmbeddings = SpaceConfig::kMergerEmbeddings;

struct OpSpec {
  OpKind kind = OpKind::kFC;
  std::size_t dim_in = 0;   // dense input width; x1 width for SG/SUM
  std::size_t dim_in2 = 0;  // x2 width for SG/SUM
  std::size_t n_in = 0;     // sparse input embedding count
  std::size_t out_dim = 0;  // dense width, or embedding count for EFC/ATTN
  std::size_t dim_s = 0;
  std::size_t heads = 1;
  bool balanced = true;  // DP only
  int weight_bits = 8;
  int activation_bits = 8;
};

/// Which coordinate the rows of a parameter index. Columns are always a prefix.
enum class RowSpace { kPrefix, kDenseInput, kSparseInput, kX1Input };

struct ParamShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;  // 0 for vectors
  RowSpace row_space = RowSpace::kPrefix;
  bool is_norm = false;

  bool is_matrix() const { return cols != 0; }
  std::size_t size() const { return is_matrix() ? rows * cols : rows; }
};

/// Round half up.
inline std::size_t round_half_up(double v) { return std::size_t(std::floor(v + 0.5)); }

/// Embeddings kept by the balancing projection in front of the dot product.
inline std::size_t dp_balanced_count(std::size_t out_dim) { return std::max<std::size_t>(1, round_half_up(std::sqrt(2.0 * double(out_dim)))); }

/// Rows stacked before the pairwise dot products.
inline std::size_t dp_stacked_rows(const OpSpec& s) {
  return (s.dim_in > 0 ? 1 : 0) + (s.balanced ? dp_balanced_count(s.out_dim) : s.n_in);
}

inline std::size_t sg_width(const OpSpec& s) { return std::max(s.dim_in, s.dim_in2); }

inline std::vector<ParamShape> params(const OpSpec& s) {
  std::vector<ParamShape> p;
  auto norm = [&](const std::string& prefix, std::size_t n) {
    p.push_back({prefix + ".g", n, 0, RowSpace::kPrefix, true});
    p.push_back({prefix + ".b", n, 0, RowSpace::kPrefix, true});
  };
  switch (s.kind) {
    case OpKind::kFC:
      p.push_back({"W", s.dim_in, s.out_dim, RowSpace::kDenseInput});
      p.push_back({"b", s.out_dim, 0});
      norm("ln", s.out_dim);
      break;
    case OpKind::kSG:
      if (sg_width(s) > 0) {
        p.push_back({"gate.W", s.dim_in, sg_width(s), RowSpace::kX1Input});
        p.push_back({"gate.b", sg_width(s), 0});
      }
      norm("ln", s.out_dim);
      break;
    case OpKind::kSUM: norm("ln", s.out_dim); break;
    case OpKind::kDP:
      if (s.dim_in > 0) {
        p.push_back({"proj.W", s.dim_in, s.dim_s, RowSpace::kDenseInput});
        p.push_back({"proj.b", s.dim_s, 0});
      }
      if (s.balanced) {
        p.push_back({"efc.W", s.n_in, dp_balanced_count(s.out_dim), RowSpace::kSparseInput});
        p.push_back({"efc.b", dp_balanced_count(s.out_dim), 0});
      }
      p.push_back({"out.W", ops::pair_count(dp_stacked_rows(s)), s.out_dim});
      p.push_back({"out.b", s.out_dim, 0});
      norm("ln", s.out_dim);
      break;
    case OpKind::kEFC:
      p.push_back({"W", s.n_in, s.out_dim, RowSpace::kSparseInput});
      p.push_back({"b", s.out_dim, 0});
      norm("ln", s.dim_s);
      break;
    case OpKind::kATTN:
      for (const char* m : {"q.W", "k.W", "v.W", "o.W"}) p.push_back({m, s.dim_s, s.dim_s});
      norm("ln1", s.dim_s);
      p.push_back({"ff1.W", s.dim_s, 2 * s.dim_s});
      p.push_back({"ff1.b", 2 * s.dim_s, 0});
      p.push_back({"ff2.W", 2 * s.dim_s, s.dim_s});
      p.push_back({"ff2.b", s.dim_s, 0});
      norm("ln2", s.dim_s);
      break;
    case OpKind::kD2S:
      p.push_back({"W", s.dim_in, kD2SEmbeddings * s.dim_s});
      p.push_back({"b", kD2SEmbeddings * s.dim_s, 0});
      norm("ln", s.dim_s);
      break;
    case OpKind::kS2D:
      p.push_back({"W", s.dim_s, s.out_dim});
      p.push_back({"b", s.out_dim, 0});
      norm("ln", s.out_dim);
      break;
    case OpKind::kHEAD:
      p.push_back({"W", s.dim_in, 1});
      p.push_back({"b", 1, 0});
      break;
  }
  return p;
}

/// Weights plus biases; layer-norm affine parameters are counted by norm_param_count.
inline std::size_t param_count(const OpSpec& s) {
  std::size_t n = 0;
  for (const auto& p : params(s))
    if (!p.is_norm) n += p.size();
  return n;
}

inline std::size_t norm_param_count(const OpSpec& s) {
  std::size_t n = 0;
  for (const auto& p : params(s))
    if (p.is_norm) n += p.size();
  return n;
}

/// Bias-free closed forms for the dot-product interaction weights:
/// balanced d^2 + N * round(sqrt(2d)), unbalanced (N^2 / 2) * d.
inline std::uint64_t dp_weight_formula(std::uint64_t n_sparse, std::uint64_t out_dim, bool balanced) {
  if (balanced) return out_dim * out_dim + n_sparse * dp_balanced_count(out_dim);
  return n_sparse * n_sparse / 2 * out_dim;
}

/// Per-sample FLOPs: `mac` is 2 per multiply-accumulate; `other` is 5 per
/// element for sigmoid, softmax and layer-norm and 2 per input element of
/// the factorization machine. Additions, relu, padding and lookups are free.
struct OpFlops {
  std::uint64_t mac = 0;
  std::uint64_t other = 0;
  std::uint64_t total() const { return mac + other; }
  OpFlops& operator+=(const OpFlops& o) {
    mac += o.mac;
    other += o.other;
    return *this;
  }
};

inline OpFlops flops(const OpSpec& s) {
  OpFlops f;
  const std::uint64_t ds = s.dim_s;
  switch (s.kind) {
    case OpKind::kFC:
      f.mac = 2ull * s.dim_in * s.out_dim;
      f.other = 5ull * s.out_dim;
      break;
    case OpKind::kSG:
      f.mac = 2ull * s.dim_in * sg_width(s);
      f.other = 5ull * sg_width(s) + 5ull * s.out_dim;
      break;
    case OpKind::kSUM: f.other = 5ull * s.out_dim; break;
    case OpKind::kDP: {
      const std::uint64_t pairs = ops::pair_count(dp_stacked_rows(s));
      if (s.dim_in > 0) f.mac += 2ull * s.dim_in * ds;
      if (s.balanced) f.mac += 2ull * s.n_in * dp_balanced_count(s.out_dim) * ds;
      f.mac += 2ull * pairs * ds + 2ull * pairs * s.out_dim;
      f.other = 5ull * s.out_dim;
      break;
    }
    case OpKind::kEFC:
      f.mac = 2ull * s.n_in * s.out_dim * ds;
      f.other = 5ull * s.out_dim * ds;
      break;
    case OpKind::kATTN: {
      const std::uint64_t n = s.n_in;
      f.mac = 16ull * n * ds * ds + 4ull * n * n * ds;
      f.other = 5ull * s.heads * n * n + 10ull * n * ds;
      break;
    }
    case OpKind::kD2S:
      f.mac = 2ull * s.dim_in * kD2SEmbeddings * ds;
      f.other = 5ull * kD2SEmbeddings * ds;
      break;
    case OpKind::kS2D:
      f.mac = 2ull * ds * s.out_dim;
      f.other = 2ull * s.n_in * ds + 5ull * s.out_dim;
      break;
    case OpKind::kHEAD: f.mac = 2ull * s.dim_in; break;
  }
  return f;
}

/// How many input rows per sample a weight matrix multiplies.
inline std::size_t matrix_uses(const OpSpec& s, const std::string& local) {
  switch (s.kind) {
    case OpKind::kEFC: return s.dim_s;
    case OpKind::kDP: return local == "efc.W" ? s.dim_s : 1;
    case OpKind::kATTN: return s.n_in;
    default: return 1;
  }
}

using OpWeights = std::map<std::string, Tensor>;

namespace detail {
inline const Tensor& weight(const OpWeights& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw std::invalid_argument("operator weight '" + name + "' missing");
  return it->second;
}

/// x [R x k] * W [k x n] + b.
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& b) { return ops::add_bias(ops::matmul(x, W), b); }
inline Tensor linear(const Tensor& x, const Tensor& W) { return ops::matmul(x, W); }

inline Tensor norm(const Tensor& x, const OpWeights& w, const std::string& prefix) {
  return ops::layer_norm(x, weight(w, prefix + ".g"), weight(w, prefix + ".b"));
}
}  // namespace detail

/// Slices or zero-pads `axis` to exactly `extent`.
inline Tensor fit(const Tensor& x, std::size_t axis, std::size_t extent) {
  if (x.dim(axis) == extent) return x;
  if (x.dim(axis) > extent) return ops::slice(x, axis, 0, extent);
  return ops::pad(x, axis, extent);
}

/// Keeps indices < d along `axis` and zeros the rest.
inline Tensor dim_mask(const Tensor& v, std::size_t d, std::size_t axis) {
  if (axis >= v.rank()) throw DimensionError("dim_mask: axis out of range for " + shape_str(v.shape()));
  if (d > v.dim(axis))
    throw DimensionError("dim_mask: d=" + std::to_string(d) + " exceeds extent " + std::to_string(v.dim(axis)));
  if (d == v.dim(axis)) return v;
  return ops::pad(ops::slice(v, axis, 0, d), axis, v.dim(axis));
}

inline Tensor fc(const Tensor& x, const OpWeights& w) {
  return detail::norm(ops::relu(detail::linear(x, detail::weight(w, "W"), detail::weight(w, "b"))), w, "ln");
}

/// sigmoid(x1 Wg + bg) * pad(x2), width max(d1, d2); the narrower input is zero-padded.
inline Tensor sigmoid_gating(const Tensor& x1, const Tensor& x2, const OpWeights& w) {
  const std::size_t width = std::max(x1.dim(1), x2.dim(1));
  if (width == 0) return Tensor::zeros({x1.dim(0), 0});
  const Tensor gate = ops::sigmoid(detail::linear(x1, detail::weight(w, "gate.W"), detail::weight(w, "gate.b")));
  if (gate.dim(1) != width) throw DimensionError("sigmoid_gating: gate width " + std::to_string(gate.dim(1)) + " != " + std::to_string(width));
  return ops::mul(gate, fit(x2, 1, width));
}

/// Zero-pad the narrower input, then add.
inline Tensor sum_merge(const Tensor& x1, const Tensor& x2) {
  const std::size_t width = std::max(x1.dim(1), x2.dim(1));
  return ops::add(fit(x1, 1, width), fit(x2, 1, width));
}

/// Pairwise interactions of the projected dense row and the (optionally
/// balanced) sparse embeddings, then FC to out_dim, relu, layer-norm.
inline Tensor dot_product(const std::optional<Tensor>& x_d, const Tensor& x_s, const OpWeights& w, bool balanced) {
  const std::size_t batch = x_s.dim(0), ds = x_s.dim(2);
  std::vector<Tensor> rows;
  if (x_d && x_d->dim(1) > 0) {
    const Tensor proj = detail::linear(*x_d, detail::weight(w, "proj.W"), detail::weight(w, "proj.b"));
    rows.push_back(ops::reshape(proj, {batch, 1, ds}));
  }
  if (balanced) {
    // Same computation as efc() minus its activation and normalization.
    const std::size_t n = x_s.dim(1);
    const Tensor flat = ops::reshape(ops::transpose(x_s), {batch * ds, n});
    const Tensor& W = detail::weight(w, "efc.W");
    const Tensor mixed = detail::linear(flat, W, detail::weight(w, "efc.b"));
    rows.push_back(ops::transpose(ops::reshape(mixed, {batch, ds, W.dim(1)})));
  } else {
    rows.push_back(x_s);
  }
  const Tensor stacked = rows.size() == 1 ? rows.front() : ops::concat(1, rows);
  const Tensor dots = ops::pairwise_dots(stacked);
  return detail::norm(ops::relu(detail::linear(dots, detail::weight(w, "out.W"), detail::weight(w, "out.b"))), w, "ln");
}

/// FC along the embedding axis: [B x N_in x s] -> [B x N_out x s].
inline Tensor efc(const Tensor& x_s, const OpWeights& w) {
  const std::size_t batch = x_s.dim(0), n = x_s.dim(1), ds = x_s.dim(2);
  const Tensor& W = detail::weight(w, "W");
  if (W.dim(0) != n) throw DimensionError("efc: weight rows " + std::to_string(W.dim(0)) + " != N_in " + std::to_string(n));
  const Tensor flat = ops::reshape(ops::transpose(x_s), {batch * ds, n});
  const Tensor mixed = detail::linear(flat, W, detail::weight(w, "b"));
  const Tensor out = ops::transpose(ops::reshape(mixed, {batch, ds, W.dim(1)}));
  return detail::norm(ops::relu(out), w, "ln");
}

/// One transformer encoder layer with identical queries, keys and values.
inline Tensor attention(const Tensor& x_s, const OpWeights& w, std::size_t heads) {
  const std::size_t batch = x_s.dim(0), n = x_s.dim(1), ds = x_s.dim(2);
  if (heads == 0 || ds % heads != 0)
    throw DimensionError("attention: dim_s " + std::to_string(ds) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t hd = ds / heads;
  const Tensor flat = ops::reshape(x_s, {batch * n, ds});
  auto project = [&](const char* name) { return ops::reshape(ops::matmul(flat, detail::weight(w, name)), {batch, n, ds}); };
  const Tensor q = project("q.W"), k = project("k.W"), v = project("v.W");
  std::vector<Tensor> per_head;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = ops::slice(q, 2, h * hd, (h + 1) * hd);
    const Tensor kh = ops::slice(k, 2, h * hd, (h + 1) * hd);
    const Tensor vh = ops::slice(v, 2, h * hd, (h + 1) * hd);
    const Tensor scores = ops::scale(ops::batched_matmul(qh, ops::transpose(kh)), 1.0 / std::sqrt(double(hd)));
    per_head.push_back(ops::batched_matmul(ops::softmax(scores), vh));
  }
  const Tensor mixed = per_head.size() == 1 ? per_head.front() : ops::concat(2, per_head);
  const Tensor attended = ops::matmul(ops::reshape(mixed, {batch * n, ds}), detail::weight(w, "o.W"));
  const Tensor h1 = detail::norm(ops::add(flat, attended), w, "ln1");
  const Tensor ff = detail::linear(ops::relu(detail::linear(h1, detail::weight(w, "ff1.W"), detail::weight(w, "ff1.b"))),
                                   detail::weight(w, "ff2.W"), detail::weight(w, "ff2.b"));
  return ops::reshape(detail::norm(ops::add(h1, ff), w, "ln2"), {batch, n, ds});
}

/// FC to k * s, reshaped to k embeddings of width s.
inline Tensor dense_to_sparse(const Tensor& x_d, const OpWeights& w, std::size_t dim_s) {
  const Tensor proj = detail::linear(x_d, detail::weight(w, "W"), detail::weight(w, "b"));
  return detail::norm(ops::reshape(proj, {x_d.dim(0), kD2SEmbeddings, dim_s}), w, "ln");
}

/// Second-order FM over the embeddings, then FC to the dense width.
inline Tensor sparse_to_dense(const Tensor& x_s, const OpWeights& w) {
  return detail::norm(detail::linear(ops::factorization_machine(x_s), detail::weight(w, "W"), detail::weight(w, "b")), w, "ln");
}

/// Final logit: linear, no activation. Returns [B].
inline Tensor head(const Tensor& x_d, const OpWeights& w) {
  const Tensor z = detail::linear(x_d, detail::weight(w, "W"), detail::weight(w, "b"));
  return ops::reshape(z, {x_d.dim(0)});
}

}  // namespace nasforge
