#pragma once

// Rank fidelity of a trained supernet: Kendall's tau-b, Pearson's rho, the
// sampled-subnet experiment and its CDF export.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nasforge/evolution.hpp"
#include "nasforge/parallel.hpp"
#include "nasforge/trainer.hpp"

namespace nasforge {

namespace detail {

inline void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (a.size() < 2) throw std::invalid_argument("need at least two observations");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::isnan(a[i]) || std::isnan(b[i])) throw std::invalid_argument("NaN observation at index " + std::to_string(i));
}

inline std::int64_t tied_pairs(std::int64_t run) { return run * (run - 1) / 2; }

/// Sorts v ascending and returns the number of strict inversions removed.
inline std::int64_t sort_counting_inversions(std::vector<double>& v, std::vector<double>& scratch, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = sort_counting_inversions(v, scratch, lo, mid) + sort_counting_inversions(v, scratch, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += std::int64_t(mid - i);
      scratch[k++] = v[j++];
    } else {
      scratch[k++] = v[i++];
    }
  }
  while (i < mid) scratch[k++] = v[i++];
  while (j < hi) scratch[k++] = v[j++];
  std::copy(scratch.begin() + std::ptrdiff_t(lo), scratch.begin() + std::ptrdiff_t(hi), v.begin() + std::ptrdiff_t(lo));
  return swaps;
}

}  // namespace detail

/// Kendall's tau-b in O(n log n) (Knight's merge-sort count).
inline double kendall_tau(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const std::size_t n = a.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return a[i] != a[j] ? a[i] < a[j] : b[i] < b[j]; });

  const std::int64_t n0 = detail::tied_pairs(std::int64_t(n));
  std::int64_t ties_a = 0, ties_ab = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && a[idx[j]] == a[idx[i]]) ++j;
    ties_a += detail::tied_pairs(std::int64_t(j - i));
    for (std::size_t k = i; k < j;) {
      std::size_t m = k;
      while (m < j && b[idx[m]] == b[idx[k]]) ++m;
      ties_ab += detail::tied_pairs(std::int64_t(m - k));
      k = m;
    }
    i = j;
  }
  std::vector<double> bs(n), scratch(n);
  for (std::size_t i = 0; i < n; ++i) bs[i] = b[idx[i]];
  const std::int64_t swaps = detail::sort_counting_inversions(bs, scratch, 0, n);
  std::int64_t ties_b = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && bs[j] == bs[i]) ++j;
    ties_b += detail::tied_pairs(std::int64_t(j - i));
    i = j;
  }
  const std::int64_t untied_a = n0 - ties_a, untied_b = n0 - ties_b;
  if (untied_a == 0 || untied_b == 0) throw std::domain_error("kendall_tau undefined: an input is constant");
  // Concordant minus discordant pairs.
  const std::int64_t s = n0 - ties_a - ties_b + ties_ab - 2 * swaps;
  return double(s) / std::sqrt(double(untied_a) * double(untied_b));
}

inline double pearson_rho(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const double n = double(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw std::domain_error("pearson_rho undefined: an input is constant");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// -------------------------------------------------------------- experiment

enum class TopFilter { kGroundTruth, kSupernet };

inline const char* name_of(TopFilter f) { return f == TopFilter::kGroundTruth ? "ground-truth" : "supernet"; }

struct RankPair {
  double supernet = 0;  // supernet-scored validation log loss
  double scratch = 0;   // from-scratch validation log loss
};

struct RankReport {
  std::size_t n = 0;
  double tau = 0;
  double rho = 0;
  std::vector<RankPair> pairs;
  std::optional<double> top_fraction;
  TopFilter top_filter = TopFilter::kGroundTruth;
  std::size_t n_top = 0;
  std::optional<double> tau_top;
  std::optional<double> rho_top;
  bool finetune = false;
  std::string budget;  // human-readable from-scratch budget label
};

/// Correlations over `pairs` and, when requested, over the best
/// ceil(fraction * n) of them by the chosen axis (lower loss is better).
inline RankReport rank_report(std::vector<RankPair> pairs, std::optional<double> top_fraction = std::nullopt,
                              TopFilter filter = TopFilter::kGroundTruth) {
  RankReport r;
  r.n = pairs.size();
  auto correlate = [](const std::vector<RankPair>& ps, double& tau, double& rho) {
    std::vector<double> x, y;
    for (const auto& p : ps) {
      x.push_back(p.supernet);
      y.push_back(p.scratch);
    }
    tau = kendall_tau(x, y);
    rho = pearson_rho(x, y);
  };
  correlate(pairs, r.tau, r.rho);
  r.top_fraction = top_fraction;
  r.top_filter = filter;
  if (top_fraction) {
    if (!(*top_fraction > 0 && *top_fraction <= 1)) throw std::invalid_argument("top_fraction must lie in (0, 1]");
    std::vector<RankPair> sorted = pairs;
    std::stable_sort(sorted.begin(), sorted.end(), [filter](const RankPair& x, const RankPair& y) {
      return filter == TopFilter::kGroundTruth ? x.scratch < y.scratch : x.supernet < y.supernet;
    });
    r.n_top = std::size_t(std::ceil(*top_fraction * double(sorted.size()) - 1e-9));
    sorted.resize(r.n_top);
    if (r.n_top >= 2) {
      double tau = 0, rho = 0;
      try {
        correlate(sorted, tau, rho);
        r.tau_top = tau;
        r.rho_top = rho;
      } catch (const std::domain_error&) {
        // A constant subset has no defined correlation; leave it unset.
      }
    }
  }
  r.pairs = std::move(pairs);
  return r;
}

inline nlohmann::json to_json(const RankReport& r) {
  nlohmann::json j;
  j["n"] = r.n;
  j["tau"] = r.tau;
  j["rho"] = r.rho;
  j["finetune"] = r.finetune;
  j["budget"] = r.budget;
  j["top_fraction"] = r.top_fraction ? nlohmann::json(*r.top_fraction) : nlohmann::json(nullptr);
  j["top_filter"] = name_of(r.top_filter);
  j["n_top"] = r.n_top;
  j["tau_top"] = r.tau_top ? nlohmann::json(*r.tau_top) : nlohmann::json(nullptr);
  j["rho_top"] = r.rho_top ? nlohmann::json(*r.rho_top) : nlohmann::json(nullptr);
  auto& pairs = j["pairs"] = nlohmann::json::array();
  for (const auto& p : r.pairs) pairs.push_back({p.supernet, p.scratch});
  return j;
}

struct CdfRow {
  std::size_t rank = 0;  // 1-based
  double log_loss = 0;
  double cum_fraction = 0;
};

inline std::vector<CdfRow> cdf_rows(std::vector<double> losses) {
  std::sort(losses.begin(), losses.end());
  std::vector<CdfRow> rows;
  for (std::size_t i = 0; i < losses.size(); ++i) rows.push_back({i + 1, losses[i], double(i + 1) / double(losses.size())});
  return rows;
}

inline std::string cdf_csv(const std::vector<CdfRow>& rows) {
  std::ostringstream os;
  os << "rank,log_loss,cum_fraction\n";
  for (const auto& r : rows) os << r.rank << ',' << format_double(r.log_loss) << ',' << format_double(r.cum_fraction) << '\n';
  return os.str();
}

struct RankConfig {
  std::size_t n_subnets = 100;
  bool finetune = false;
  FinetuneConfig finetune_cfg;
  /// Rows of the training split used for head fine-tuning.
  std::size_t finetune_rows = 10000;
  std::optional<double> top_fraction;
  TopFilter top_filter = TopFilter::kGroundTruth;
  /// From-scratch proxy budget: fixed steps at a fixed batch size.
  TrainConfig scratch = [] {
    TrainConfig t;
    t.batch_size = 1024;
    t.epochs = 0;
    t.max_steps = 2000;
    return t;
  }();
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct RankResult {
  std::vector<Genotype> genotypes;
  RankReport without_finetune;
  std::optional<RankReport> with_finetune;  // present when finetune is on
  std::vector<CdfRow> cdf;                  // from-scratch losses
  const RankReport& primary() const { return with_finetune ? *with_finetune : without_finetune; }
};

inline std::string budget_label(const TrainConfig& t) {
  std::ostringstream os;
  if (t.max_steps) os << t.max_steps << " steps";
  else os << t.epochs << " epochs";
  os << " at batch " << t.batch_size;
  return os.str();
}

/// Samples subnets (single operator per branch, any connections, no warm-up),
/// scores them with the shared weights and against from-scratch training.
inline RankResult rank_experiment(const Supernet& net, const Dataset& train, const Dataset& val, const RankConfig& cfg) {
  if (cfg.n_subnets < 2) throw std::invalid_argument("n_subnets must be at least 2");
  RankResult out;
  Rng rng(derive_seed(cfg.seed, 0xa11));
  const SamplingSchedule sched{SamplingStrategy::kSingleOpAnyConn, 0.0, 1};
  for (std::size_t i = 0; i < cfg.n_subnets; ++i) out.genotypes.push_back(sample_path(sched, net.config(), rng, 0));

  std::vector<std::size_t> tune_rows(std::min(cfg.finetune_rows, train.rows()));
  std::iota(tune_rows.begin(), tune_rows.end(), 0);
  const Dataset tune = cfg.finetune ? subset(train, tune_rows) : Dataset{};

  const std::size_t n = cfg.n_subnets;
  std::vector<double> plain(n), tuned(n), scratch(n);
  parallel_for(n, cfg.workers, [&](std::size_t i) {
    const Genotype& g = out.genotypes[i];
    plain[i] = evaluate(net, g, val).log_loss;
    if (cfg.finetune) tuned[i] = evaluate(finetune_head(extract_subnet(net, g), tune, cfg.finetune_cfg), val).log_loss;
    TrainConfig tc = cfg.scratch;
    tc.seed = derive_seed(cfg.seed, 2 * i + 1);
    Model m = init_model(g, net.config(), net.features(), derive_seed(cfg.seed, 2 * i + 2));
    train_model(m, train, nullptr, tc);
    scratch[i] = evaluate(m, val).log_loss;
  });

  auto report = [&](const std::vector<double>& scores, bool finetuned) {
    std::vector<RankPair> pairs(n);
    for (std::size_t i = 0; i < n; ++i) pairs[i] = {scores[i], scratch[i]};
    RankReport r = rank_report(std::move(pairs), cfg.top_fraction, cfg.top_filter);
    r.finetune = finetuned;
    r.budget = budget_label(cfg.scratch);
    return r;
  };
  out.without_finetune = report(plain, false);
  if (cfg.finetune) out.with_finetune = report(tuned, true);
  out.cdf = cdf_rows(scratch);
  return out;
}

}  // namespace nasforge
