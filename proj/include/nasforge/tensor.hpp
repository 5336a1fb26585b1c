#pragma once

// Dense f64 tensors with a reverse-mode gradient tape.
//
// Ops record onto the thread's active Tape (see TapeScope) when at least one
// input requires a gradient. With no active tape, ops run in inference mode.
// Gradient buffers live in the Gradients object returned by backward(), not in
// the tensors, so several tapes can run over the same read-only parameters.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace nasforge {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const double> data() const { return impl_->data; }
  // Parameter updates and initialisation only; never mutate a tensor that a live tape references.
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw DimensionError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }
  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw IndexError("at: wrong index rank");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= impl_->shape[axis]) throw IndexError("at: index out of range");
      flat = flat * impl_->shape[axis] + i;
      ++axis;
    }
    return impl_->data[flat];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), impl_->data, requires_grad); }
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

class Gradients;

class Tape {
 public:
  using Backward =
      std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

  void record(std::vector<Tensor> inputs, const Tensor& output, Backward fn) {
    nodes_.push_back(Node{std::move(inputs), output, std::move(fn)});
  }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    Backward backward;
  };
  std::vector<Node> nodes_;
  friend Gradients backward(const Tensor& loss, const Tape& tape);
};

class Gradients {
 public:
  const std::vector<double>* find(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
  }
  // Zeros when the tensor did not contribute to the loss.
  std::vector<double> of(const Tensor& t) const {
    if (const auto* g = find(t)) return *g;
    return std::vector<double>(t.numel(), 0.0);
  }

 private:
  std::unordered_map<const void*, std::vector<double>> grads_;
  friend Gradients backward(const Tensor& loss, const Tape& tape);
};

inline Gradients backward(const Tensor& loss, const Tape& tape) {
  if (loss.numel() != 1) throw DimensionError("backward: loss " + shape_str(loss.shape()) + " is not scalar");
  Gradients g;
  g.grads_[loss.id()] = {1.0};
  std::vector<std::span<double>> grad_in;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) {
    auto out = g.grads_.find(it->output.id());
    if (out == g.grads_.end()) continue;
    grad_in.clear();
    for (const auto& in : it->inputs) {
      if (!in.requires_grad()) {
        grad_in.emplace_back();
        continue;
      }
      auto& buf = g.grads_[in.id()];
      if (buf.size() != in.numel()) buf.assign(in.numel(), 0.0);
      grad_in.emplace_back(buf);
    }
    it->backward(out->second, grad_in);
  }
  return g;
}

namespace detail {
inline thread_local Tape* active_tape = nullptr;
inline thread_local std::uint64_t* flop_sink = nullptr;

inline void count_flops(std::uint64_t n) {
  if (flop_sink) *flop_sink += n;
}

template <class Fn>
Tensor record(Tensor out, std::vector<Tensor> inputs, Fn&& fn) {
  Tape* tape = active_tape;
  if (!tape) return out;
  if (std::none_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); })) return out;
  out.set_requires_grad(true);
  tape->record(std::move(inputs), out, Tape::Backward(std::forward<Fn>(fn)));
  return out;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// c (+)= a * b with optional transposes, all row-major.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                 bool trans_a, bool trans_b, bool accumulate) {
  MutMap C(c, Eigen::Index(m), Eigen::Index(n));
  if (k == 0) {
    if (!accumulate) C.setZero();
    return;
  }
  const auto A = ConstMap(a, trans_a ? Eigen::Index(k) : Eigen::Index(m), trans_a ? Eigen::Index(m) : Eigen::Index(k));
  const auto B = ConstMap(b, trans_b ? Eigen::Index(n) : Eigen::Index(k), trans_b ? Eigen::Index(k) : Eigen::Index(n));
  if (trans_a && trans_b) {
    if (accumulate) C.noalias() += A.transpose() * B.transpose(); else C.noalias() = A.transpose() * B.transpose();
  } else if (trans_a) {
    if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (trans_b) {
    if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
  }
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

/// Makes `tape` the recording target for ops on this thread while in scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape) { detail::active_tape = &tape; }
  ~TapeScope() { detail::active_tape = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape) { detail::active_tape = nullptr; }
  ~NoGradScope() { detail::active_tape = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

/// Counts FLOPs issued by ops on this thread while in scope.
/// Convention: 2 per multiply-accumulate; 5 per output element of sigmoid,
/// softmax and layer_norm; 2 per input element of the FM reduction. Everything
/// else (add, relu, bias, reshapes, lookups) is free.
class FlopCounter {
 public:
  FlopCounter() : prev_(detail::flop_sink) { detail::flop_sink = &count_; }
  ~FlopCounter() { detail::flop_sink = prev_; }
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* prev_;
};

namespace ops {

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::gemm(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n, false, false, false);
  detail::count_flops(2 * m * k * n);
  return detail::record(out, {a, b}, [a, b, m, k, n](std::span<const double> g, std::span<const std::span<double>> gin) {
    if (!gin[0].empty()) detail::gemm(g.data(), b.data().data(), gin[0].data(), m, n, k, false, true, true);
    if (!gin[1].empty()) detail::gemm(a.data().data(), g.data(), gin[1].data(), k, m, n, true, false, true);
  });
}

inline Tensor batched_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("batched_matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out = Tensor::zeros({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm(a.data().data() + i * m * k, b.data().data() + i * k * n, out.mutable_data().data() + i * m * n, m, k,
                 n, false, false, false);
  detail::count_flops(2 * batch * m * k * n);
  return detail::record(out, {a, b}, [a, b, batch, m, k, n](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (std::size_t i = 0; i < batch; ++i) {
      const double* gi = g.data() + i * m * n;
      if (!gin[0].empty())
        detail::gemm(gi, b.data().data() + i * k * n, gin[0].data() + i * m * k, m, n, k, false, true, true);
      if (!gin[1].empty())
        detail::gemm(a.data().data() + i * m * k, gi, gin[1].data() + i * k * n, k, m, n, true, false, true);
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[i] > 0.0 ? xs[i] : 0.0;
  // subgradient at 0 is 0
  return detail::record(Tensor(x.shape(), std::move(y)), {x}, [x](std::span<const double> g, std::span<const std::span<double>> gin) {
    const auto xs = x.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xs[i] > 0.0) gin[0][i] += g[i];
  });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sigmoid_scalar(xs[i]);
  detail::count_flops(5 * y.size());
  Tensor out(x.shape(), std::move(y));
  return detail::record(out, {x}, [out](std::span<const double> g, std::span<const std::span<double>> gin) {
    const auto ys = out.data();
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * ys[i] * (1.0 - ys[i]);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
  return detail::record(Tensor(a.shape(), std::move(y)), {a, b}, [](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (int s = 0; s < 2; ++s)
      if (!gin[s].empty())
        for (std::size_t i = 0; i < g.size(); ++i) gin[s][i] += g[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
  return detail::record(Tensor(a.shape(), std::move(y)), {a, b}, [](std::span<const double> g, std::span<const std::span<double>> gin) {
    if (!gin[0].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    if (!gin[1].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
  return detail::record(Tensor(a.shape(), std::move(y)), {a, b}, [a, b](std::span<const double> g, std::span<const std::span<double>> gin) {
    if (!gin[0].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * b.data()[i];
    if (!gin[1].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * a.data()[i];
  });
}

enum class Elementwise { kRelu, kSigmoid, kAdd, kMul, kSub };

inline Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b = Tensor()) {
  const bool binary = op == Elementwise::kAdd || op == Elementwise::kMul || op == Elementwise::kSub;
  if (binary && !b.defined()) throw DimensionError("elementwise: binary op needs two operands");
  switch (op) {
    case Elementwise::kRelu: return relu(a);
    case Elementwise::kSigmoid: return sigmoid(a);
    case Elementwise::kAdd: return add(a, b);
    case Elementwise::kMul: return mul(a, b);
    case Elementwise::kSub: return sub(a, b);
  }
  throw std::logic_error("elementwise: unknown op");
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.data()[i] * s;
  return detail::record(Tensor(x.shape(), std::move(y)), {x}, [s](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * s;
  });
}

/// x[..., j] + bias[j]; the one sanctioned broadcast.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0))
    throw DimensionError("add_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
  const std::size_t n = bias.dim(0);
  std::vector<double> y(x.values());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias.data()[i % n];
  return detail::record(Tensor(x.shape(), std::move(y)), {x, bias}, [n](std::span<const double> g, std::span<const std::span<double>> gin) {
    if (!gin[0].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    if (!gin[1].empty())
      for (std::size_t i = 0; i < g.size(); ++i) gin[1][i % n] += g[i];
  });
}

namespace impl {
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}
}  // namespace impl

inline Tensor concat(std::size_t axis, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no parts");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i])
        throw DimensionError("concat: extent mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    out_shape[axis] += p.dim(axis);
  }
  const auto os = impl::split_axis(out_shape, axis);
  std::vector<double> y(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * os.inner;
    for (std::size_t o = 0; o < os.outer; ++o)
      std::copy_n(p.data().data() + o * chunk, chunk, y.data() + o * os.extent * os.inner + offset * os.inner);
    offset += p.dim(axis);
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.dim(axis));
  return detail::record(Tensor(out_shape, std::move(y)), parts,
                        [os, offsets, extents](std::span<const double> g, std::span<const std::span<double>> gin) {
                          for (std::size_t p = 0; p < gin.size(); ++p) {
                            if (gin[p].empty()) continue;
                            const std::size_t chunk = extents[p] * os.inner;
                            for (std::size_t o = 0; o < os.outer; ++o) {
                              const double* src = g.data() + o * os.extent * os.inner + offsets[p] * os.inner;
                              double* dst = gin[p].data() + o * chunk;
                              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis))
    throw DimensionError("slice: [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto xs = impl::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * xs.inner;
  std::vector<double> y(shape_numel(out_shape));
  for (std::size_t o = 0; o < xs.outer; ++o)
    std::copy_n(x.data().data() + o * xs.extent * xs.inner + begin * xs.inner, chunk, y.data() + o * chunk);
  return detail::record(Tensor(out_shape, std::move(y)), {x}, [xs, begin, chunk](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (std::size_t o = 0; o < xs.outer; ++o) {
      double* dst = gin[0].data() + o * xs.extent * xs.inner + begin * xs.inner;
      const double* src = g.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

/// Zero-pads `x` at the end of `axis` up to `extent`.
inline Tensor pad(const Tensor& x, std::size_t axis, std::size_t extent) {
  if (axis >= x.rank() || extent < x.dim(axis))
    throw DimensionError("pad: cannot pad axis " + std::to_string(axis) + " of " + shape_str(x.shape()) + " to " +
                         std::to_string(extent));
  if (extent == x.dim(axis)) return x;
  const auto xs = impl::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = extent;
  const std::size_t chunk = xs.extent * xs.inner;
  const std::size_t out_chunk = extent * xs.inner;
  std::vector<double> y(shape_numel(out_shape), 0.0);
  for (std::size_t o = 0; o < xs.outer; ++o) std::copy_n(x.data().data() + o * chunk, chunk, y.data() + o * out_chunk);
  return detail::record(Tensor(out_shape, std::move(y)), {x}, [xs, chunk, out_chunk](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (std::size_t o = 0; o < xs.outer; ++o)
      for (std::size_t i = 0; i < chunk; ++i) gin[0][o * chunk + i] += g[o * out_chunk + i];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  return detail::record(Tensor(std::move(shape), x.values()), {x}, [](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("transpose: rank-2/3 only, got " + shape_str(x.shape()));
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<double> y(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) y[b * r * c + j * r + i] = x.data()[b * r * c + i * c + j];
  return detail::record(Tensor(out_shape, std::move(y)), {x}, [batch, r, c](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gin[0][b * r * c + i * c + j] += g[b * r * c + j * r + i];
  });
}

namespace impl {
inline Tensor layer_norm_impl(const Tensor& x, const Tensor* gamma, const Tensor* beta, double eps) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("layer_norm: empty last axis in " + shape_str(x.shape()));
  const std::size_t n = x.shape().back();
  if (gamma && (gamma->rank() != 1 || gamma->dim(0) != n || beta->rank() != 1 || beta->dim(0) != n))
    throw DimensionError("layer_norm: affine params do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  std::vector<double> xhat(x.numel()), inv_std(rows), y(x.numel());
  const double* xs = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xs[r * n + j];
    mean /= double(n);
    double var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xs[r * n + j] - mean;
      var += d * d;
    }
    var /= double(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xs[r * n + j] - mean) * inv_std[r];
      xhat[r * n + j] = h;
      y[r * n + j] = gamma ? h * gamma->data()[j] + beta->data()[j] : h;
    }
  }
  nasforge::detail::count_flops(5 * x.numel());
  std::vector<Tensor> inputs{x};
  if (gamma) {
    inputs.push_back(*gamma);
    inputs.push_back(*beta);
  }
  Tensor g_copy = gamma ? *gamma : Tensor();
  return nasforge::detail::record(Tensor(x.shape(), std::move(y)), std::move(inputs),
                [xhat = std::move(xhat), inv_std = std::move(inv_std), g_copy, n, rows](
                    std::span<const double> g, std::span<const std::span<double>> gin) {
                  const bool affine = g_copy.defined();
                  std::vector<double> gy(n);
                  for (std::size_t r = 0; r < rows; ++r) {
                    double mean_gy = 0, mean_gy_xhat = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double gj = g[r * n + j];
                      gy[j] = affine ? gj * g_copy.data()[j] : gj;
                      mean_gy += gy[j];
                      mean_gy_xhat += gy[j] * xhat[r * n + j];
                      if (affine) {
                        if (!gin[1].empty()) gin[1][j] += gj * xhat[r * n + j];
                        if (!gin[2].empty()) gin[2][j] += gj;
                      }
                    }
                    if (gin[0].empty()) continue;
                    mean_gy /= double(n);
                    mean_gy_xhat /= double(n);
                    for (std::size_t j = 0; j < n; ++j)
                      gin[0][r * n + j] += inv_std[r] * (gy[j] - mean_gy - xhat[r * n + j] * mean_gy_xhat);
                  }
                });
}
}  // namespace impl

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& x, double eps = kLayerNormEps) {
  return impl::layer_norm_impl(x, nullptr, nullptr, eps);
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps) {
  return impl::layer_norm_impl(x, &gamma, &beta, eps);
}

/// Row-major matrix of categorical ids.
struct IdMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int64_t> values;
};

inline Tensor embedding_lookup(const Tensor& table, const IdMatrix& ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
  if (ids.values.size() != ids.rows * ids.cols) throw DimensionError("embedding_lookup: malformed id matrix");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  for (auto id : ids.values)
    if (id < 0 || std::size_t(id) >= vocab)
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
  std::vector<double> y(ids.values.size() * width);
  for (std::size_t i = 0; i < ids.values.size(); ++i)
    std::copy_n(table.data().data() + std::size_t(ids.values[i]) * width, width, y.data() + i * width);
  return detail::record(Tensor({ids.rows, ids.cols, width}, std::move(y)), {table},
                        [ids, width](std::span<const double> g, std::span<const std::span<double>> gin) {
                          for (std::size_t i = 0; i < ids.values.size(); ++i) {
                            double* dst = gin[0].data() + std::size_t(ids.values[i]) * width;
                            for (std::size_t j = 0; j < width; ++j) dst[j] += g[i * width + j];
                          }
                        });
}

inline Tensor softmax(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax: empty last axis");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<double> y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xs = x.data().data() + r * n;
    const double mx = *std::max_element(xs, xs + n);
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) total += (y[r * n + j] = std::exp(xs[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] /= total;
  }
  detail::count_flops(5 * x.numel());
  Tensor out(x.shape(), std::move(y));
  return detail::record(out, {x}, [out, n, rows](std::span<const double> g, std::span<const std::span<double>> gin) {
    const double* ys = out.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * ys[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gin[0][r * n + j] += ys[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double total = 0;
  for (double v : x.data()) total += v;
  return detail::record(Tensor({1}, {total}), {x}, [](std::span<const double> g, std::span<const std::span<double>> gin) {
    for (auto& v : gin[0]) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / double(x.numel()));
}

/// Second-order factorization machine over the middle axis:
/// v[b,k] = 0.5 * ((sum_n x[b,n,k])^2 - sum_n x[b,n,k]^2).
inline Tensor factorization_machine(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("factorization_machine: expects [B x N x d], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), count = x.dim(1), width = x.dim(2);
  std::vector<double> y(batch * width), sums(batch * width);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < width; ++k) {
      double s = 0, sq = 0;
      for (std::size_t n = 0; n < count; ++n) {
        const double v = x.data()[(b * count + n) * width + k];
        s += v;
        sq += v * v;
      }
      sums[b * width + k] = s;
      y[b * width + k] = 0.5 * (s * s - sq);
    }
  detail::count_flops(2 * x.numel());
  return detail::record(Tensor({batch, width}, std::move(y)), {x},
                        [x, sums = std::move(sums), batch, count, width](std::span<const double> g,
                                                                         std::span<const std::span<double>> gin) {
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t n = 0; n < count; ++n)
                              for (std::size_t k = 0; k < width; ++k) {
                                const std::size_t i = (b * count + n) * width + k;
                                gin[0][i] += g[b * width + k] * (sums[b * width + k] - x.data()[i]);
                              }
                        });
}

/// Number of strict upper-triangle pairs among n rows.
constexpr std::size_t pair_count(std::size_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

/// Inner products of every row pair (i < j) per batch entry, ordered
/// column-major: (0,1), (0,2), (1,2), (0,3), ... so the pairs of the first n
/// rows form a prefix of the pairs of n + 1 rows.
inline Tensor pairwise_dots(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("pairwise_dots: expects [B x n x d], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), n = x.dim(1), width = x.dim(2), pairs = pair_count(n);
  std::vector<double> y(batch * pairs);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* rows = x.data().data() + b * n * width;
    std::size_t p = 0;
    for (std::size_t j = 1; j < n; ++j)
      for (std::size_t i = 0; i < j; ++i, ++p) {
        double dot = 0;
        for (std::size_t k = 0; k < width; ++k) dot += rows[i * width + k] * rows[j * width + k];
        y[b * pairs + p] = dot;
      }
  }
  detail::count_flops(2 * batch * pairs * width);
  return detail::record(Tensor({batch, pairs}, std::move(y)), {x},
                        [x, batch, n, width, pairs](std::span<const double> g, std::span<const std::span<double>> gin) {
                          for (std::size_t b = 0; b < batch; ++b) {
                            const double* rows = x.data().data() + b * n * width;
                            double* grows = gin[0].data() + b * n * width;
                            std::size_t p = 0;
                            for (std::size_t j = 1; j < n; ++j)
                              for (std::size_t i = 0; i < j; ++i, ++p) {
                                const double gp = g[b * pairs + p];
                                for (std::size_t k = 0; k < width; ++k) {
                                  grows[i * width + k] += gp * rows[j * width + k];
                                  grows[j * width + k] += gp * rows[i * width + k];
                                }
                              }
                          }
                        });
}

/// Half-open row range [begin, begin + length).
struct RowRange {
  std::size_t begin = 0;
  std::size_t length = 0;
};

/// Gathers rows `ranges` and columns [col_begin, col_begin + col_count) of a
/// matrix; gradients scatter back. A rank-1 input treats `ranges` as element ranges.
inline Tensor take(const Tensor& w, const std::vector<RowRange>& ranges, std::size_t col_begin, std::size_t col_count) {
  if (w.rank() != 1 && w.rank() != 2) throw DimensionError("take: rank-1/2 only, got " + shape_str(w.shape()));
  const std::size_t cols = w.rank() == 2 ? w.dim(1) : 1;
  if (w.rank() == 1 && (col_begin != 0 || col_count != 1)) throw DimensionError("take: rank-1 input has one column");
  if (col_begin + col_count > cols) throw DimensionError("take: columns out of range of " + shape_str(w.shape()));
  std::size_t rows = 0;
  for (const auto& r : ranges) {
    if (r.begin + r.length > w.dim(0)) throw DimensionError("take: rows out of range of " + shape_str(w.shape()));
    rows += r.length;
  }
  std::vector<double> y(rows * col_count);
  std::size_t out_row = 0;
  for (const auto& r : ranges)
    for (std::size_t i = 0; i < r.length; ++i, ++out_row)
      std::copy_n(w.data().data() + (r.begin + i) * cols + col_begin, col_count, y.data() + out_row * col_count);
  Shape out_shape = w.rank() == 2 ? Shape{rows, col_count} : Shape{rows};
  return detail::record(Tensor(out_shape, std::move(y)), {w},
                        [ranges, cols, col_begin, col_count](std::span<const double> g, std::span<const std::span<double>> gin) {
                          std::size_t out_row = 0;
                          for (const auto& r : ranges)
                            for (std::size_t i = 0; i < r.length; ++i, ++out_row)
                              for (std::size_t j = 0; j < col_count; ++j)
                                gin[0][(r.begin + i) * cols + col_begin + j] += g[out_row * col_count + j];
                        });
}

/// Mean binary cross-entropy on raw logits, labels in {0,1}.
inline Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
  if (logits.numel() != labels.size() || labels.empty())
    throw DimensionError("bce_with_logits: " + std::to_string(logits.numel()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t n = labels.size();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits.data()[i];
    total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<double> y(labels.begin(), labels.end());
  return detail::record(Tensor({1}, {total / double(n)}), {logits},
                        [logits, y = std::move(y), n](std::span<const double> g, std::span<const std::span<double>> gin) {
                          for (std::size_t i = 0; i < n; ++i)
                            gin[0][i] += g[0] * (sigmoid_scalar(logits.data()[i]) - y[i]) / double(n);
                        });
}

}  // namespace ops

/// Max relative error between the taped gradient of scalar `f` at `x` and a
/// central difference with step `h`: |analytic - numeric| / (|analytic| + 1e-8).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor probe = x.clone(true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f(probe);
  }
  const auto analytic = backward(loss, tape).of(probe);
  NoGradScope no_grad;
  double worst = 0;
  std::vector<double> values(x.values());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double up = f(Tensor(x.shape(), values)).item();
    values[i] = orig - h;
    const double down = f(Tensor(x.shape(), values)).item();
    values[i] = orig;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8));
  }
  return worst;
}

}  // namespace nasforge
