#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nasforge/operators.hpp"
#include "test_support.hpp"

using namespace nasforge;

namespace {

using testkit::random_tensor;
using testkit::weighted_sum;
using testkit::random_weights;

// Plain-loop layer norm without affine terms.
std::vector<double> ref_layer_norm(std::vector<double> v) {
  double mean = 0, var = 0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  for (double x : v) var += (x - mean) * (x - mean);
  var /= double(v.size());
  for (auto& x : v) x = (x - mean) / std::sqrt(var + ops::kLayerNormEps);
  return v;
}

}  // namespace

TEST(DimMask, Examples) {
  const Tensor v({3}, {5, 6, 7});
  EXPECT_EQ(dim_mask(v, 2, 0).values(), (std::vector<double>{5, 6, 0}));
  EXPECT_EQ(dim_mask(v, 3, 0).values(), v.values());
  EXPECT_EQ(dim_mask(v, 0, 0).values(), (std::vector<double>{0, 0, 0}));
  EXPECT_THROW(dim_mask(v, 4, 0), DimensionError);
}

TEST(DimMask, MonotoneNestingOnBothAxes) {
  Rng rng(1);
  const Tensor dense = random_tensor({4, 9}, rng);
  const Tensor sparse = random_tensor({2, 7, 3}, rng);
  for (std::size_t d1 = 0; d1 <= 9; ++d1)
    for (std::size_t d2 = 0; d2 <= 9; ++d2)
      EXPECT_EQ(dim_mask(dim_mask(dense, d1, 1), d2, 1).values(), dim_mask(dense, std::min(d1, d2), 1).values());
  for (std::size_t d1 = 0; d1 <= 7; ++d1)
    for (std::size_t d2 = 0; d2 <= 7; ++d2)
      EXPECT_EQ(dim_mask(dim_mask(sparse, d1, 1), d2, 1).values(), dim_mask(sparse, std::min(d1, d2), 1).values());
  const Tensor masked = dim_mask(sparse, 3, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 7; ++n)
      for (std::size_t k = 0; k < 3; ++k)
        EXPECT_EQ(masked.at({b, n, k}), n < 3 ? sparse.at({b, n, k}) : 0.0);
}

TEST(Fc, CountsAndFlops) {
  EXPECT_EQ(param_count({.kind = OpKind::kFC, .dim_in = 64, .out_dim = 32}), 64u * 32u + 32u);
  EXPECT_EQ(param_count({.kind = OpKind::kFC, .dim_in = 64, .out_dim = 32}), 2080u);
  EXPECT_EQ(flops({.kind = OpKind::kFC, .dim_in = 13, .out_dim = 64}).mac, 1664u);
  EXPECT_EQ(norm_param_count({.kind = OpKind::kFC, .dim_in = 64, .out_dim = 32}), 64u);
}

TEST(Fc, MatchesLoopOracle) {
  Rng rng(2);
  const OpSpec spec{.kind = OpKind::kFC, .dim_in = 5, .out_dim = 4};
  OpWeights w = random_weights(spec, rng);
  w["ln.g"] = Tensor::full({4}, 1.0);
  w["ln.b"] = Tensor::zeros({4});
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor y = fc(x, w);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> pre(4);
    for (std::size_t j = 0; j < 4; ++j) {
      double z = w["b"].at({j});
      for (std::size_t i = 0; i < 5; ++i) z += x.at({r, i}) * w["W"].at({i, j});
      pre[j] = std::max(z, 0.0);
    }
    const auto expect = ref_layer_norm(pre);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at({r, j}), expect[j], 1e-12);
  }
}

TEST(Fc, WidthZeroInputGivesNormalizedBias) {
  const OpSpec spec{.kind = OpKind::kFC, .dim_in = 0, .out_dim = 3};
  OpWeights w{{"W", Tensor::zeros({0, 3})}, {"b", Tensor::zeros({3})}, {"ln.g", Tensor::full({3}, 1.0)}, {"ln.b", Tensor::zeros({3})}};
  const Tensor y = fc(Tensor::zeros({2, 0}), w);
  EXPECT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  w["b"] = Tensor({3}, {1, 2, 3});
  const Tensor y2 = fc(Tensor::zeros({2, 0}), w);
  const auto expect = ref_layer_norm({1, 2, 3});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y2.at({1, j}), expect[j], 1e-12);
  (void)spec;
}

TEST(SigmoidGating, ZeroWeightsHalveInput) {
  Rng rng(3);
  const Tensor x1 = random_tensor({2, 3}, rng), x2 = random_tensor({2, 5}, rng);
  OpWeights w{{"gate.W", Tensor::zeros({3, 5})}, {"gate.b", Tensor::zeros({5})}};
  const Tensor y = sigmoid_gating(x1, x2, w);
  EXPECT_EQ(y.shape(), (Shape{2, 5}));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], 0.5 * x2.data()[i]);
}

TEST(SigmoidGating, PadsNarrowerInputAndSelfGates) {
  Rng rng(4);
  const Tensor x1 = random_tensor({2, 5}, rng), x2 = random_tensor({2, 3}, rng);
  OpWeights w{{"gate.W", random_tensor({5, 5}, rng)}, {"gate.b", random_tensor({5}, rng)}};
  const Tensor y = sigmoid_gating(x1, x2, w);
  EXPECT_EQ(y.shape(), (Shape{2, 5}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 3; j < 5; ++j) EXPECT_EQ(y.at({r, j}), 0.0);

  // 1-d self-gating by hand: sigmoid(w x + b) * x.
  OpWeights w1{{"gate.W", Tensor({1, 1}, {2.0})}, {"gate.b", Tensor({1}, {-1.0})}};
  const Tensor x({1, 1}, {0.75});
  EXPECT_NEAR(sigmoid_gating(x, x, w1).item(), 0.75 / (1.0 + std::exp(-(2.0 * 0.75 - 1.0))), 1e-15);
}

TEST(SumMerge, Examples) {
  const Tensor a({1, 2}, {1, 2}), b({1, 3}, {3, 4, 5});
  EXPECT_EQ(sum_merge(a, b).values(), (std::vector<double>{4, 6, 5}));
  EXPECT_EQ(sum_merge(b, a).values(), sum_merge(a, b).values());
  EXPECT_EQ(sum_merge(b, Tensor::zeros({1, 3})).values(), b.values());
}

TEST(DotProduct, PairCountsAndCountFormulas) {
  EXPECT_EQ(ops::pair_count(4), 6u);
  EXPECT_EQ(dp_weight_formula(448, 512, false), 51380224u);
  EXPECT_EQ(dp_weight_formula(448, 512, true), 276480u);
  EXPECT_EQ(dp_balanced_count(512), 32u);
  EXPECT_EQ(dp_balanced_count(2), 2u);    // sqrt(4) = 2
  EXPECT_EQ(dp_balanced_count(1), 1u);    // sqrt(2) = 1.41
  EXPECT_EQ(dp_balanced_count(3), 2u);    // sqrt(6) = 2.45
  EXPECT_EQ(dp_balanced_count(6), 3u);    // sqrt(12) = 3.46
  EXPECT_EQ(dp_balanced_count(128), 16u);
  // Balanced grows linearly in N, unbalanced quadratically.
  const std::uint64_t ns[] = {64, 128, 256, 448};
  for (std::size_t i = 1; i < 4; ++i) {
    const double bal = double(dp_weight_formula(ns[i], 512, true) - 512 * 512) /
                       double(dp_weight_formula(ns[i - 1], 512, true) - 512 * 512);
    EXPECT_DOUBLE_EQ(bal, double(ns[i]) / double(ns[i - 1]));
    const double unbal = double(dp_weight_formula(ns[i], 512, false)) / double(dp_weight_formula(ns[i - 1], 512, false));
    EXPECT_DOUBLE_EQ(unbal, double(ns[i] * ns[i]) / double(ns[i - 1] * ns[i - 1]));
  }
}

TEST(DotProduct, BalancedParamsMatchFormulaPlusExtras) {
  const OpSpec spec{.kind = OpKind::kDP, .dim_in = 0, .n_in = 448, .out_dim = 512, .dim_s = 16, .balanced = true};
  // efc.W N*m plus out.W C(m,2)*d; with m = 32 the pair block is 496*512 < d^2.
  std::size_t weights = 0;
  for (const auto& p : params(spec))
    if (p.is_matrix()) weights += p.size();
  EXPECT_EQ(weights, 448u * 32u + 496u * 512u);
  EXPECT_LE(weights, dp_weight_formula(448, 512, true));
}

TEST(DotProduct, OrthonormalRowsGiveZeroInteractions) {
  const Tensor x({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  for (double v : std::vector<double>(ops::pairwise_dots(x).values())) EXPECT_EQ(v, 0.0);
}

TEST(DotProduct, UnbalancedMatchesManualPipeline) {
  Rng rng(5);
  const OpSpec spec{.kind = OpKind::kDP, .dim_in = 3, .n_in = 3, .out_dim = 4, .dim_s = 2, .balanced = false};
  const OpWeights w = random_weights(spec, rng);
  const Tensor xd = random_tensor({2, 3}, rng), xs = random_tensor({2, 3, 2}, rng);
  const Tensor y = dot_product(xd, xs, w, false);
  EXPECT_EQ(w.at("out.W").dim(0), 6u);  // 4 stacked rows
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<std::vector<double>> rows(4, std::vector<double>(2));
    for (std::size_t k = 0; k < 2; ++k) {
      double z = w.at("proj.b").at({k});
      for (std::size_t i = 0; i < 3; ++i) z += xd.at({b, i}) * w.at("proj.W").at({i, k});
      rows[0][k] = z;
    }
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t k = 0; k < 2; ++k) rows[n + 1][k] = xs.at({b, n, k});
    // Interaction order: (0,1), (0,2), (1,2), (0,3), (1,3), (2,3).
    std::vector<double> dots;
    for (std::size_t j = 1; j < 4; ++j)
      for (std::size_t i = 0; i < j; ++i) dots.push_back(rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1]);
    std::vector<double> pre(4);
    for (std::size_t o = 0; o < 4; ++o) {
      double z = w.at("out.b").at({o});
      for (std::size_t p = 0; p < 6; ++p) z += dots[p] * w.at("out.W").at({p, o});
      pre[o] = std::max(z, 0.0);
    }
    auto normed = ref_layer_norm(pre);
    for (std::size_t o = 0; o < 4; ++o)
      EXPECT_NEAR(y.at({b, o}), normed[o] * w.at("ln.g").at({o}) + w.at("ln.b").at({o}), 1e-12);
  }
}

TEST(DotProduct, SparseOnlyInput) {
  Rng rng(6);
  const OpSpec spec{.kind = OpKind::kDP, .dim_in = 0, .n_in = 5, .out_dim = 8, .dim_s = 4, .balanced = true};
  const Tensor y = dot_product(std::nullopt, random_tensor({3, 5, 4}, rng), random_weights(spec, rng), true);
  EXPECT_EQ(y.shape(), (Shape{3, 8}));
}

TEST(Efc, CountsAndFlops) {
  EXPECT_EQ(param_count({.kind = OpKind::kEFC, .n_in = 26, .out_dim = 32, .dim_s = 16}), 864u);
  EXPECT_EQ(flops({.kind = OpKind::kEFC, .n_in = 26, .out_dim = 32, .dim_s = 16}).mac, 26624u);
}

TEST(Efc, IdentityWeightsPreserveInputBeforeActivation) {
  Rng rng(7);
  Tensor x = random_tensor({2, 4, 3}, rng);
  for (auto& v : x.mutable_data()) v = std::abs(v);  // relu is then the identity
  Tensor eye = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 4 + i] = 1.0;
  const OpWeights w{{"W", eye}, {"b", Tensor::zeros({4})}, {"ln.g", Tensor::full({3}, 1.0)}, {"ln.b", Tensor::zeros({3})}};
  const Tensor y = efc(x, w);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 3}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 4; ++n) {
      const auto expect = ref_layer_norm({x.at({b, n, 0}), x.at({b, n, 1}), x.at({b, n, 2})});
      for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(y.at({b, n, k}), expect[k], 1e-12);
    }
}

TEST(Attention, SingleTokenUsesValuePathOnly) {
  Rng rng(8);
  const OpSpec spec{.kind = OpKind::kATTN, .n_in = 1, .out_dim = 1, .dim_s = 4, .heads = 2};
  OpWeights w = random_weights(spec, rng);
  const Tensor x = random_tensor({1, 1, 4}, rng);
  const Tensor y = attention(x, w, 2);
  // Perturbing the query and key projections cannot matter with one key.
  w["q.W"] = random_tensor({4, 4}, rng);
  w["k.W"] = random_tensor({4, 4}, rng);
  const Tensor y2 = attention(x, w, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], y2.data()[i], 1e-12);
}

TEST(Attention, MatchesScriptedOracle) {
  Rng rng(9);
  const std::size_t B = 2, N = 3, S = 4, H = 2, hd = 2;
  const OpSpec spec{.kind = OpKind::kATTN, .n_in = N, .out_dim = N, .dim_s = S, .heads = H};
  const OpWeights w = random_weights(spec, rng);
  const Tensor x = random_tensor({B, N, S}, rng);
  const Tensor y = attention(x, w, H);

  auto mat = [&](const char* name, std::size_t i, std::size_t j) { return w.at(name).at({i, j}); };
  auto vec = [&](const char* name, std::size_t i) { return w.at(name).at({i}); };
  auto affine_norm = [&](std::vector<double> v, const char* g, const char* b) {
    v = ref_layer_norm(v);
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = v[k] * vec(g, k) + vec(b, k);
    return v;
  };
  for (std::size_t b = 0; b < B; ++b) {
    double q[N][S] = {}, k[N][S] = {}, v[N][S] = {};
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < S; ++o)
        for (std::size_t i = 0; i < S; ++i) {
          q[n][o] += x.at({b, n, i}) * mat("q.W", i, o);
          k[n][o] += x.at({b, n, i}) * mat("k.W", i, o);
          v[n][o] += x.at({b, n, i}) * mat("v.W", i, o);
        }
    double mixed[N][S] = {};
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t n = 0; n < N; ++n) {
        double score[N], mx = -1e300, z = 0;
        for (std::size_t m = 0; m < N; ++m) {
          score[m] = 0;
          for (std::size_t c = 0; c < hd; ++c) score[m] += q[n][h * hd + c] * k[m][h * hd + c];
          score[m] /= std::sqrt(double(hd));
          mx = std::max(mx, score[m]);
        }
        for (std::size_t m = 0; m < N; ++m) z += (score[m] = std::exp(score[m] - mx));
        for (std::size_t m = 0; m < N; ++m)
          for (std::size_t c = 0; c < hd; ++c) mixed[n][h * hd + c] += score[m] / z * v[m][h * hd + c];
      }
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<double> res(S);
      for (std::size_t o = 0; o < S; ++o) {
        res[o] = x.at({b, n, o});
        for (std::size_t i = 0; i < S; ++i) res[o] += mixed[n][i] * mat("o.W", i, o);
      }
      const auto h1 = affine_norm(res, "ln1.g", "ln1.b");
      std::vector<double> hidden(2 * S), out(S);
      for (std::size_t j = 0; j < 2 * S; ++j) {
        double z = vec("ff1.b", j);
        for (std::size_t i = 0; i < S; ++i) z += h1[i] * mat("ff1.W", i, j);
        hidden[j] = std::max(z, 0.0);
      }
      for (std::size_t o = 0; o < S; ++o) {
        double z = vec("ff2.b", o);
        for (std::size_t j = 0; j < 2 * S; ++j) z += hidden[j] * mat("ff2.W", j, o);
        out[o] = h1[o] + z;
      }
      const auto expect = affine_norm(out, "ln2.g", "ln2.b");
      for (std::size_t o = 0; o < S; ++o) EXPECT_NEAR(y.at({b, n, o}), expect[o], 1e-10);
    }
  }
}

TEST(Attention, SoftmaxRowsSumToOneAndDivisibility) {
  Rng rng(10);
  const Tensor s = ops::softmax(random_tensor({3, 4, 4}, rng, 3.0));
  for (std::size_t r = 0; r < 12; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 4; ++c) total += s.data()[r * 4 + c];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  const OpSpec spec{.kind = OpKind::kATTN, .n_in = 2, .out_dim = 2, .dim_s = 5, .heads = 2};
  EXPECT_THROW(attention(random_tensor({1, 2, 5}, rng), random_weights(spec, rng), 2), DimensionError);
}

TEST(Mergers, DenseToSparseShapes) {
  Rng rng(11);
  const OpSpec spec{.kind = OpKind::kD2S, .dim_in = 6, .dim_s = 4};
  OpWeights w = random_weights(spec, rng);
  const Tensor e = dense_to_sparse(random_tensor({3, 6}, rng), w, 4);
  EXPECT_EQ(e.shape(), (Shape{3, 2, 4}));
  EXPECT_EQ(ops::concat(1, {random_tensor({3, 26, 4}, rng), e}).dim(1), 28u);
  w["W"] = Tensor::zeros({6, 8});
  w["b"] = Tensor::zeros({8});
  w["ln.b"] = Tensor::zeros({4});
  for (double v : std::vector<double>(dense_to_sparse(random_tensor({3, 6}, rng), w, 4).values())) EXPECT_EQ(v, 0.0);
}

TEST(Mergers, FactorizationMachineHandCases) {
  const Tensor two({1, 2, 2}, {1, 0, 1, 0});
  EXPECT_EQ(ops::factorization_machine(two).values(), (std::vector<double>{1, 0}));
  Rng rng(12);
  for (double v : std::vector<double>(ops::factorization_machine(random_tensor({2, 1, 5}, rng)).values())) EXPECT_EQ(v, 0.0);
  const Tensor x = random_tensor({1, 4, 3}, rng);
  std::vector<double> permuted;
  for (std::size_t n : {2, 0, 3, 1}) {
    const auto r = ops::slice(x, 1, n, n + 1).values();
    permuted.insert(permuted.end(), r.begin(), r.end());
  }
  const auto a = ops::factorization_machine(x).values();
  const auto b = ops::factorization_machine(Tensor({1, 4, 3}, permuted)).values();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Mergers, SparseToDenseProjectsFm) {
  Rng rng(13);
  const OpSpec spec{.kind = OpKind::kS2D, .n_in = 3, .out_dim = 5, .dim_s = 2};
  EXPECT_EQ(sparse_to_dense(random_tensor({4, 3, 2}, rng), random_weights(spec, rng)).shape(), (Shape{4, 5}));
}

TEST(Head, LinearLogit) {
  const OpWeights w{{"W", Tensor({2, 1}, {2, -1})}, {"b", Tensor({1}, {0.5})}};
  EXPECT_EQ(head(Tensor({2, 2}, {1, 1, 0, 3}), w).values(), (std::vector<double>{1.5, -2.5}));
}

TEST(Shapes, WidthContracts) {
  Rng rng(14);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d1 = 1 + rng.uniform_int(6), d2 = 1 + rng.uniform_int(6), B = 1 + rng.uniform_int(4);
    const Tensor a = random_tensor({B, d1}, rng), b = random_tensor({B, d2}, rng);
    EXPECT_EQ(sum_merge(a, b).shape(), (Shape{B, std::max(d1, d2)}));
    const OpWeights w{{"gate.W", random_tensor({d1, std::max(d1, d2)}, rng)}, {"gate.b", random_tensor({std::max(d1, d2)}, rng)}};
    EXPECT_EQ(sigmoid_gating(a, b, w).shape(), (Shape{B, std::max(d1, d2)}));
  }
}

TEST(Flops, FormulaMatchesCounterForMacHeavyOps) {
  Rng rng(15);
  // MAC-only accounting in the counter is compared against flops(spec).mac.
  auto counted = [](auto&& fn) {
    FlopCounter c;
    fn();
    return c.count();
  };
  const OpSpec fc_spec{.kind = OpKind::kFC, .dim_in = 13, .out_dim = 64};
  const OpWeights fw = random_weights(fc_spec, rng);
  const Tensor x = random_tensor({1, 13}, rng);
  EXPECT_EQ(counted([&] { fc(x, fw); }), flops(fc_spec).total());

  const OpSpec efc_spec{.kind = OpKind::kEFC, .n_in = 26, .out_dim = 32, .dim_s = 16};
  const OpWeights ew = random_weights(efc_spec, rng);
  const Tensor xs = random_tensor({1, 26, 16}, rng);
  EXPECT_EQ(counted([&] { efc(xs, ew); }), flops(efc_spec).total());

  const OpSpec attn{.kind = OpKind::kATTN, .n_in = 5, .out_dim = 5, .dim_s = 8, .heads = 2};
  const OpWeights aw = random_weights(attn, rng);
  EXPECT_EQ(counted([&] { attention(random_tensor({1, 5, 8}, rng), aw, 2); }), flops(attn).total());

  const OpSpec dp{.kind = OpKind::kDP, .dim_in = 7, .n_in = 6, .out_dim = 8, .dim_s = 4, .balanced = true};
  const OpWeights dw = random_weights(dp, rng);
  EXPECT_EQ(counted([&] { dot_product(random_tensor({1, 7}, rng), random_tensor({1, 6, 4}, rng), dw, true); }),
            flops(dp).total());

  const OpSpec s2d{.kind = OpKind::kS2D, .n_in = 6, .out_dim = 8, .dim_s = 4};
  const OpWeights sw = random_weights(s2d, rng);
  EXPECT_EQ(counted([&] { sparse_to_dense(random_tensor({1, 6, 4}, rng), sw); }), flops(s2d).total());
}

TEST(GradCheck, EveryOperator) {
  Rng rng(16);
  const double tol = 1e-4;
  auto check = [&](std::function<Tensor(const Tensor&)> f, Shape shape) {
    return testkit::grad_check_nondegenerate(f, [&] { return random_tensor(shape, rng); });
  };
  for (int trial = 0; trial < 20; ++trial) {
    const std::uint64_t seed = 1000 + trial;
    {
      const OpWeights w = random_weights({.kind = OpKind::kFC, .dim_in = 4, .out_dim = 3}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(fc(x, w), seed); }, {2, 4}), tol);
      const Tensor x = random_tensor({2, 4}, rng);
      EXPECT_LT(check([&](const Tensor& W) {
                  OpWeights w2 = w;
                  w2["W"] = W;
                  return weighted_sum(fc(x, w2), seed);
                }, {4, 3}),
                tol);
    }
    {
      const OpWeights w{{"gate.W", random_tensor({3, 4}, rng)}, {"gate.b", random_tensor({4}, rng)}};
      const Tensor x1 = random_tensor({2, 3}, rng), x2 = random_tensor({2, 4}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(sigmoid_gating(x, x2, w), seed); }, {2, 3}), tol);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(sigmoid_gating(x1, x, w), seed); }, {2, 4}), tol);
    }
    {
      const Tensor b = random_tensor({2, 5}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(sum_merge(x, b), seed); }, {2, 3}), tol);
    }
    for (bool balanced : {true, false}) {
      const OpSpec s{.kind = OpKind::kDP, .dim_in = 3, .n_in = 4, .out_dim = 5, .dim_s = 3, .balanced = balanced};
      const OpWeights w = random_weights(s, rng);
      const Tensor xd = random_tensor({2, 3}, rng), xs = random_tensor({2, 4, 3}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(dot_product(xd, x, w, balanced), seed); }, {2, 4, 3}), tol);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(dot_product(x, xs, w, balanced), seed); }, {2, 3}), tol);
    }
    {
      const OpWeights w = random_weights({.kind = OpKind::kEFC, .n_in = 4, .out_dim = 3, .dim_s = 3}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(efc(x, w), seed); }, {2, 4, 3}), tol);
    }
    {
      const OpWeights w = random_weights({.kind = OpKind::kATTN, .n_in = 3, .out_dim = 3, .dim_s = 4, .heads = 2}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(attention(x, w, 2), seed); }, {2, 3, 4}), tol);
    }
    {
      const OpWeights w = random_weights({.kind = OpKind::kD2S, .dim_in = 3, .dim_s = 3}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(dense_to_sparse(x, w, 3), seed); }, {2, 3}), tol);
    }
    {
      const OpWeights w = random_weights({.kind = OpKind::kS2D, .n_in = 3, .out_dim = 4, .dim_s = 3}, rng);
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(sparse_to_dense(x, w), seed); }, {2, 3, 3}), tol);
    }
    {
      // The input gradient of a linear head is W itself, so degeneracy lives in the weights.
      Tensor W = random_tensor({3, 1}, rng);
      while (std::ranges::any_of(W.values(), [](double v) { return std::abs(v) < 0.05; })) W = random_tensor({3, 1}, rng);
      const OpWeights w{{"W", W}, {"b", random_tensor({1}, rng)}};
      EXPECT_LT(check([&](const Tensor& x) { return weighted_sum(head(x, w), seed); }, {2, 3}), tol);
    }
  }
}
