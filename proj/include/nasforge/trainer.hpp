#pragma once

// Adagrad with a cosine schedule, supernet and standalone training loops,
// evaluation, head fine-tuning and the FLOPs profiler.

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nasforge/data.hpp"
#include "nasforge/metrics.hpp"
#include "nasforge/supernet.hpp"

namespace nasforge {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kAdagradEps = 1e-10;

/// acc += g^2; w -= lr * g / (sqrt(acc) + eps).
inline void adagrad_step(std::span<double> w, std::span<const double> g, std::span<double> acc, double lr) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc[i] += g[i] * g[i];
    w[i] -= lr * g[i] / (std::sqrt(acc[i]) + kAdagradEps);
  }
}

/// lr0 * (1 + cos(pi * step / total)) / 2.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (total == 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * double(std::min(step, total)) / double(total)));
}

class Adagrad {
 public:
  /// Updates every parameter that received a gradient; `only`, when given,
  /// restricts the update to the named parameters.
  void step(ParamStore& params, const Gradients& grads, double lr, const std::set<std::string>* only = nullptr) {
    for (auto& [name, w] : params) {
      if (only && !only->count(name)) continue;
      const auto* g = grads.find(w);
      if (!g) continue;
      auto& acc = state_[name];
      if (acc.size() != w.numel()) acc.assign(w.numel(), 0.0);
      adagrad_step(w.mutable_data(), *g, acc, lr);
    }
  }

 private:
  std::map<std::string, std::vector<double>> state_;
};

struct TrainConfig {
  std::size_t batch_size = 1024;
  double lr0 = 0.12;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: run whole epochs
  std::size_t embedding_cap = kDefaultEmbeddingCap;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
  SamplingStrategy strategy = SamplingStrategy::kSingleOpAnyConn;
  double warmup_fraction = 0.2;
  double divergence_loss = 10.0 * std::numbers::ln2;
  std::size_t divergence_patience = 100;

  std::vector<std::string> check() const {
    std::vector<std::string> e;
    if (batch_size == 0) e.push_back("batch_size must be positive");
    if (!(lr0 > 0 && lr0 < 1)) e.push_back("lr0 must lie in (0, 1)");
    if (embedding_cap < 1) e.push_back("embedding_cap must be at least 1");
    if (epochs == 0 && max_steps == 0) e.push_back("epochs or max_steps must be positive");
    if (!(warmup_fraction >= 0 && warmup_fraction <= 1)) e.push_back("warmup_fraction must lie in [0, 1]");
    return e;
  }

  std::size_t total_steps(std::size_t rows) const {
    const std::size_t per_epoch = (rows + batch_size - 1) / batch_size;
    const std::size_t full = per_epoch * epochs;
    return max_steps ? (epochs ? std::min(max_steps, full) : max_steps) : full;
  }
};

struct MetricsRow {
  std::size_t step = 0;
  double lr = 0;
  double train_loss = 0;
  std::optional<double> val_loss, val_auc;
};

struct TrainHistory {
  std::vector<MetricsRow> rows;
  std::optional<double> val_loss, val_auc;
  std::size_t steps = 0;
};

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string metrics_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "step,lr,train_loss,val_loss,val_auc\n";
  for (const auto& r : h.rows) {
    os << r.step << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ',';
    if (r.val_loss) os << format_double(*r.val_loss);
    os << ',';
    if (r.val_auc) os << format_double(*r.val_auc);
    os << '\n';
  }
  return os.str();
}

struct EvalResult {
  double log_loss = 0;
  double auc = 0;
  std::vector<double> probabilities;
};

inline EvalResult evaluate(const std::function<Tensor(const FeatureBatch&)>& logits_of, const Dataset& data,
                           std::size_t batch_size = 4096) {
  if (data.rows() == 0) throw std::invalid_argument("evaluate: empty dataset");
  NoGradScope no_grad;
  EvalResult r;
  r.probabilities.reserve(data.rows());
  for (std::size_t begin = 0; begin < data.rows(); begin += batch_size) {
    const FeatureBatch b = make_batch(data, begin, std::min(data.rows(), begin + batch_size));
    const Tensor logits = logits_of(b);
    for (double z : logits.values()) r.probabilities.push_back(ops::sigmoid_scalar(z));
  }
  r.log_loss = log_loss(r.probabilities, data.labels);
  r.auc = auc(r.probabilities, data.labels);
  return r;
}

inline EvalResult evaluate(const Model& m, const Dataset& data, const ForwardOptions& opt = {}) {
  return evaluate([&](const FeatureBatch& b) { return m.forward(b, opt); }, data);
}

inline EvalResult evaluate(const Supernet& net, const Genotype& g, const Dataset& data, const ForwardOptions& opt = {}) {
  const NetPlan p = plan(g, net.config(), net.features());
  const SupernetSource src(net.params());
  return evaluate([&](const FeatureBatch& b) { return forward(src, p, net.features(), net.config(), b, opt).logits; }, data);
}

/// Minibatch loop shared by supernet and standalone training. `loss_of`
/// builds the loss for a batch (recording onto the active tape).
inline TrainHistory train_loop(ParamStore& params, const Dataset& train, const TrainConfig& cfg,
                               const std::function<Tensor(const FeatureBatch&, std::size_t step)>& loss_of) {
  const auto errors = cfg.check();
  if (!errors.empty()) throw std::invalid_argument("train config: " + errors.front());
  if (train.rows() == 0) throw std::invalid_argument("train: empty dataset");
  const std::size_t total = cfg.total_steps(train.rows());
  Adagrad opt;
  TrainHistory h;
  double window = 0;
  std::size_t window_n = 0, bad_streak = 0, step = 0;
  for (std::size_t epoch = 0; step < total; ++epoch) {
    std::vector<std::size_t> order(train.rows());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, 0x100 + epoch));
    shuffle_rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size() && step < total; begin += cfg.batch_size, ++step) {
      const std::vector<std::size_t> rows(order.begin() + long(begin), order.begin() + long(std::min(order.size(), begin + cfg.batch_size)));
      const FeatureBatch batch = make_batch(train, rows);
      const double lr = cosine_lr(step, total, cfg.lr0);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = loss_of(batch, step);
      }
      const double value = loss.item();
      if (!std::isfinite(value) || value > cfg.divergence_loss) {
        if (++bad_streak >= cfg.divergence_patience || !std::isfinite(value))
          throw TrainingError("training diverged at step " + std::to_string(step) + " (loss " + format_double(value) + ")");
      } else {
        bad_streak = 0;
      }
      opt.step(params, backward(loss, tape), lr);
      window += value;
      ++window_n;
      if ((step + 1) % cfg.log_every == 0 || step + 1 == total) {
        h.rows.push_back({step + 1, lr, window / double(window_n), std::nullopt, std::nullopt});
        window = 0;
        window_n = 0;
      }
    }
  }
  h.steps = step;
  return h;
}

inline void attach_validation(TrainHistory& h, const EvalResult& r) {
  h.val_loss = r.log_loss;
  h.val_auc = r.auc;
  if (!h.rows.empty()) {
    h.rows.back().val_loss = r.log_loss;
    h.rows.back().val_auc = r.auc;
  }
}

/// One path per minibatch; warm-up samples the full supernet with a linearly
/// decaying probability.
inline TrainHistory train_supernet(Supernet& net, const Dataset& train, const Dataset* val, const TrainConfig& cfg) {
  const SamplingSchedule sched{cfg.strategy, cfg.warmup_fraction, cfg.total_steps(train.rows())};
  Rng path_rng(derive_seed(cfg.seed, 0xA11));
  TrainHistory h = train_loop(net.params(), train, cfg, [&](const FeatureBatch& b, std::size_t step) {
    const Genotype g = sample_path(sched, net.config(), path_rng, step);
    return ops::bce_with_logits(net.forward(g, b), b.labels);
  });
  if (val && val->rows()) {
    // End-of-epoch supernet validation on the full path.
    attach_validation(h, evaluate(net, full_genotype(net.config()), *val));
  }
  return h;
}

/// Fresh standalone model for `g`: matrices and biases uniform(+-1/sqrt(fan_in)),
/// norm gains 1 and shifts 0, embeddings uniform(+-1/sqrt(dim_s)).
inline Model init_model(const Genotype& g, const SpaceConfig& cfg, const FeatureSpec& fs, std::uint64_t seed) {
  Model m{cfg, fs, g, {}};
  Rng rng(seed);
  for (const PlannedOp& op : plan(g, cfg, fs).used_ops()) {
    // Keyed by full name so "b1.FC.b" pairs with "b1.FC.W".
    std::map<std::string, std::size_t> fan_in;
    const auto ps = params(op.spec);
    for (const auto& p : ps) {
      const std::string name = op.prefix + p.name;
      if (p.is_matrix()) fan_in[name.substr(0, name.rfind('.'))] = p.rows;
    }
    for (const auto& p : ps) {
      const std::string name = op.prefix + p.name;
      if (p.is_norm) {
        m.params[name] = Tensor::full({p.rows}, p.name.back() == 'g' ? 1.0 : 0.0, true);
        continue;
      }
      const std::size_t fi = p.is_matrix() ? p.rows : fan_in[name.substr(0, name.rfind('.'))];
      init_uniform(m.params, name, p.is_matrix() ? Shape{p.rows, p.cols} : Shape{p.rows},
                   1.0 / std::sqrt(double(std::max<std::size_t>(fi, 1))), rng);
    }
  }
  if (fs.num_sparse() > 0) init_uniform(m.params, kEmbeddingTable, {fs.total_vocab(), cfg.dim_s}, 1.0 / std::sqrt(double(cfg.dim_s)), rng);
  return m;
}

inline TrainHistory train_model(Model& m, const Dataset& train, const Dataset* val, const TrainConfig& cfg,
                                const ForwardOptions& opt = {}) {
  const NetPlan p = m.net_plan();
  TrainHistory h = train_loop(m.params, train, cfg, [&](const FeatureBatch& b, std::size_t) {
    return ops::bce_with_logits(forward(CompactSource(m.params), p, m.features, m.cfg, b, opt).logits, b.labels);
  });
  if (val && val->rows()) attach_validation(h, evaluate(m, *val, opt));
  return h;
}

struct FinetuneConfig {
  std::size_t steps = 500;
  double lr = 0.05;
};

/// Trains only the head on features computed once by the frozen body.
/// Full-batch Adagrad on a convex objective; the best iterate on `data` is kept.
inline Model finetune_head(const Model& model, const Dataset& data, const FinetuneConfig& cfg = {}) {
  Model out = model;
  if (cfg.steps == 0 || data.rows() == 0) return out;
  Tensor features;
  {
    NoGradScope no_grad;
    std::vector<Tensor> parts;
    for (std::size_t begin = 0; begin < data.rows(); begin += 4096)
      parts.push_back(model.run(make_batch(data, begin, std::min(data.rows(), begin + 4096))).head_input);
    features = parts.size() == 1 ? parts.front() : ops::concat(0, parts);
  }
  // Fresh copies so the input model's tensors are not mutated.
  for (const char* name : {"head.W", "head.b"}) out.params[name] = detail::lookup(model.params, name).clone(true);
  const OpWeights w{{"W", out.params["head.W"]}, {"b", out.params["head.b"]}};
  auto loss_now = [&] {
    NoGradScope no_grad;
    return ops::bce_with_logits(head(features, w), data.labels).item();
  };
  double best = loss_now();
  std::vector<double> best_w = w.at("W").values(), best_b = w.at("b").values();
  Adagrad opt;
  const std::set<std::string> only{"head.W", "head.b"};
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = ops::bce_with_logits(head(features, w), data.labels);
    }
    opt.step(out.params, backward(loss, tape), cfg.lr, &only);
    const double now = loss_now();
    if (now < best) {
      best = now;
      best_w = w.at("W").values();
      best_b = w.at("b").values();
    }
  }
  std::copy(best_w.begin(), best_w.end(), out.params["head.W"].mutable_data().begin());
  std::copy(best_b.begin(), best_b.end(), out.params["head.b"].mutable_data().begin());
  return out;
}

// ----------------------------------------------------------------- profiler

/// Per-sample FLOPs of the operators that reach the head (MAC = 2 FLOPs,
/// sigmoid/softmax/layer-norm 5 per element, FM 2 per input element).
inline OpFlops flops_breakdown(const Genotype& g, const SpaceConfig& cfg, const FeatureSpec& fs) {
  OpFlops total;
  for (const auto& op : plan(g, cfg, fs).used_ops()) total += flops(op.spec);
  return total;
}

inline std::uint64_t flops(const Genotype& g, const SpaceConfig& cfg, const FeatureSpec& fs) {
  return flops_breakdown(g, cfg, fs).total();
}

inline double mflops(const Genotype& g, const SpaceConfig& cfg, const FeatureSpec& fs) { return double(flops(g, cfg, fs)) / 1e6; }

}  // namespace nasforge
