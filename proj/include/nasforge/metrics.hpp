#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace nasforge {

inline constexpr double kProbClamp = 1e-7;

/// Mean negative log-likelihood with probabilities clamped to [1e-7, 1 - 1e-7].
inline double log_loss(std::span<const double> p, std::span<const double> y) {
  if (p.size() != y.size() || p.empty()) throw std::invalid_argument("log_loss: size mismatch or empty input");
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    total -= y[i] > 0.5 ? std::log(q) : std::log1p(-q);
  }
  return total / double(p.size());
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied scores
/// share their average rank, so each tied positive/negative pair counts 1/2.
/// NaN when only one class is present.
inline double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * double(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] > 0.5) {
        rank_sum += avg_rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  return (rank_sum - double(pos) * double(pos + 1) / 2.0) / (double(pos) * double(neg));
}

}  // namespace nasforge
