#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "rapnet/attention.hpp"
#include "test_util.hpp"

using namespace rapnet;
using testutil::cvar;
using testutil::matches;
using testutil::random_tensor;
using testutil::to_vec;

TEST(ScaledDotAttention, SingleKeyReturnsValue) {
  std::mt19937_64 gen(1);
  auto q = cvar(random_tensor({1, 3, 4}, gen));
  auto k = cvar(random_tensor({1, 1, 4}, gen));
  auto v = cvar(Tensor<double>(Shape{1, 1, 2}, {3, 7}));
  auto r = scaled_dot_attention(q, k, v);
  for (int i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(r.output.value().at(0, i, 0), 3.0);
    EXPECT_DOUBLE_EQ(r.output.value().at(0, i, 1), 7.0);
  }
}

TEST(ScaledDotAttention, EqualLogitsAverageValues) {
  auto q = cvar(Tensor<double>(Shape{1, 1, 2}, {1, 0}));
  auto k = cvar(Tensor<double>(Shape{1, 2, 2}, {2, 5, 2, -3}));
  auto v = cvar(Tensor<double>(Shape{1, 2, 2}, {0, 2, 4, 6}));
  auto r = scaled_dot_attention(q, k, v);
  EXPECT_NEAR(r.output.value()[0], 2.0, 1e-12);
  EXPECT_NEAR(r.output.value()[1], 4.0, 1e-12);
}

TEST(ScaledDotAttention, MatchesOracle) {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_tensor({2, 3, 5}, gen), k = random_tensor({2, 4, 5}, gen),
               v = random_tensor({2, 4, 6}, gen);
    auto r = scaled_dot_attention(cvar(q), cvar(k), cvar(v));
    const auto ref = oracle::oracle_attention(to_vec(q), to_vec(k), to_vec(v), 2, 3, 4, 5, 6);
    EXPECT_TRUE(matches(ref.output, to_vec(r.output), 1e-12));
    EXPECT_TRUE(matches(ref.weights, to_vec(r.weights), 1e-12));
  }
}

TEST(ScaledDotAttention, MaskedKeysGetZeroWeight) {
  std::mt19937_64 gen(3);
  const auto q = random_tensor({2, 3, 4}, gen), k = random_tensor({2, 5, 4}, gen),
             v = random_tensor({2, 5, 3}, gen);
  KeyMask keep(Shape{2, 5});
  std::vector<bool> flags(10);
  for (int i = 0; i < 10; ++i) {
    flags[i] = (i % 3) != 1;
    keep[i] = flags[i];
  }
  auto r = scaled_dot_attention(cvar(q), cvar(k), cvar(v), &keep);
  const auto ref = oracle::oracle_attention(to_vec(q), to_vec(k), to_vec(v), 2, 3, 5, 4, 3, &flags);
  EXPECT_TRUE(matches(ref.output, to_vec(r.output), 1e-12));
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        if (!keep.at(b, j)) {
          EXPECT_EQ(r.weights.value().at(b, i, j), 0.0);
        }
      }
}

TEST(ScaledDotAttention, AllMaskedIsInvalid) {
  std::mt19937_64 gen(4);
  KeyMask keep(Shape{2, 3});
  keep.at(0, 1) = 1;  // batch 1 has no key left
  EXPECT_THROW(scaled_dot_attention(cvar(random_tensor({2, 1, 2}, gen)),
                                    cvar(random_tensor({2, 3, 2}, gen)),
                                    cvar(random_tensor({2, 3, 2}, gen)), &keep),
               InvalidMaskError);
}

TEST(ScaledDotAttention, ShapeErrors) {
  std::mt19937_64 gen(5);
  auto q = cvar(random_tensor({1, 2, 3}, gen));
  EXPECT_THROW(scaled_dot_attention(q, cvar(random_tensor({1, 2, 4}, gen)),
                                    cvar(random_tensor({1, 2, 4}, gen))),
               ShapeError);
  EXPECT_THROW(scaled_dot_attention(q, cvar(random_tensor({1, 2, 3}, gen)),
                                    cvar(random_tensor({1, 3, 3}, gen))),
               ShapeError);
  EXPECT_THROW(scaled_dot_attention(cvar(random_tensor({2, 3}, gen)), q, q), ShapeError);
}

TEST(ScaledDotAttention, RowsAreStochastic) {
  std::mt19937_64 gen(6);
  for (int trial = 0; trial < 100; ++trial) {
    auto r = scaled_dot_attention(cvar(random_tensor({2, 4, 3}, gen, -4, 4)),
                                  cvar(random_tensor({2, 6, 3}, gen, -4, 4)),
                                  cvar(random_tensor({2, 6, 2}, gen)));
    const auto& w = r.weights.value();
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < 4; ++i) {
        double s = 0;
        for (int j = 0; j < 6; ++j) {
          EXPECT_GE(w.at(b, i, j), 0.0);
          s += w.at(b, i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  }
}

TEST(ScaledDotAttention, KeyPermutationInvariance) {
  std::mt19937_64 gen(7);
  const auto q = random_tensor({1, 3, 4}, gen), k = random_tensor({1, 5, 4}, gen),
             v = random_tensor({1, 5, 2}, gen);
  std::vector<int> perm = {3, 0, 4, 1, 2};
  Tensor<double> kp(k.shape()), vp(v.shape());
  for (int j = 0; j < 5; ++j) {
    for (int d = 0; d < 4; ++d) kp.at(0, j, d) = k.at(0, perm[j], d);
    for (int d = 0; d < 2; ++d) vp.at(0, j, d) = v.at(0, perm[j], d);
  }
  auto a = scaled_dot_attention(cvar(q), cvar(k), cvar(v)).output.value();
  auto b = scaled_dot_attention(cvar(q), cvar(kp), cvar(vp)).output.value();
  EXPECT_LT(max_abs_diff(a, b), 1e-6);
}

TEST(ScaledDotAttention, OutputInConvexHullOfValues) {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto v = random_tensor({1, 4, 3}, gen, -5, 5);
    auto out = scaled_dot_attention(cvar(random_tensor({1, 2, 3}, gen, -3, 3)),
                                    cvar(random_tensor({1, 4, 3}, gen, -3, 3)), cvar(v))
                   .output.value();
    for (int i = 0; i < 2; ++i)
      for (int d = 0; d < 3; ++d) {
        double lo = 1e9, hi = -1e9;
        for (int j = 0; j < 4; ++j) {
          lo = std::min(lo, v.at(0, j, d));
          hi = std::max(hi, v.at(0, j, d));
        }
        EXPECT_GE(out.at(0, i, d), lo - 1e-12);
        EXPECT_LE(out.at(0, i, d), hi + 1e-12);
      }
  }
}

TEST(Softmax, ShiftInvariance) {
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_tensor({3, 7}, gen, -10, 10);
    Tensor<double> shifted = x;
    std::uniform_real_distribution<double> c(-50, 50);
    for (int r = 0; r < 3; ++r) {
      const double s = c(gen);
      for (int j = 0; j < 7; ++j) shifted.at(r, j) += s;
    }
    EXPECT_LT(max_abs_diff(ops::softmax(cvar(x), 1).value(), ops::softmax(cvar(shifted), 1).value()),
              1e-6);
  }
}

TEST(SpatialAttention, SinglePixelIsValueProjection) {
  ParamStore<double> store;
  Rng rng(3);
  SpatialAttentionParams<double>::init(store, rng, "sa", 3);
  auto p = SpatialAttentionParams<double>::bind(store, "sa");
  std::mt19937_64 gen(10);
  auto f = cvar(random_tensor({2, 3, 1, 1}, gen));
  auto out = spatial_attention(f, p);
  auto vproj = ops::conv2d(f, p.value.weight, p.value.bias);
  EXPECT_EQ(out.shape(), f.shape());
  EXPECT_LT(max_abs_diff(out.value(), vproj.value()), 1e-12);
}

TEST(SpatialAttention, MatchesOracleAfterProjection) {
  ParamStore<double> store;
  Rng rng(4);
  SpatialAttentionParams<double>::init(store, rng, "sa", 2);
  auto p = SpatialAttentionParams<double>::bind(store, "sa");
  std::mt19937_64 gen(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = random_tensor({1, 2, 3, 3}, gen);
    auto out = spatial_attention(cvar(f), p);
    ASSERT_EQ(out.shape(), f.shape());
    // Tokens are pixels: token j = (y, x), features = channels after 1x1 projection.
    auto project = [&](const ConvParams<double>& cp) {
      std::vector<double> t(9 * 2);
      for (int j = 0; j < 9; ++j)
        for (int o = 0; o < 2; ++o) {
          double s = 0;
          for (int c = 0; c < 2; ++c) s += cp.weight.value().at(o, c, 0, 0) * f[c * 9 + j];
          t[j * 2 + o] = s;
        }
      return t;
    };
    const auto ref = oracle::oracle_attention(project(p.query), project(p.key), project(p.value), 1,
                                              9, 9, 2, 2);
    std::vector<double> expect(18);
    for (int j = 0; j < 9; ++j)
      for (int c = 0; c < 2; ++c) expect[c * 9 + j] = ref.output[j * 2 + c];
    EXPECT_TRUE(matches(expect, to_vec(out), 1e-12));
  }
}

TEST(SpatialAttention, RejectsNonRank4) {
  ParamStore<double> store;
  Rng rng(5);
  SpatialAttentionParams<double>::init(store, rng, "sa", 2);
  auto p = SpatialAttentionParams<double>::bind(store, "sa");
  std::mt19937_64 gen(12);
  EXPECT_THROW(spatial_attention(cvar(random_tensor({2, 3, 3}, gen)), p), ShapeError);
}

TEST(ChannelAttention, SingleKeyChannelIsBroadcast) {
  std::mt19937_64 gen(13);
  const auto query = random_tensor({1, 3, 2, 2}, gen);
  const auto kv = random_tensor({1, 1, 2, 2}, gen);
  auto out = channel_attention(cvar(query), cvar(kv)).value();
  ASSERT_EQ(out.shape(), query.shape());
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out[c * 4 + i], kv[i]);
}

TEST(ChannelAttention, MatchesOracle) {
  std::mt19937_64 gen(14);
  for (int trial = 0; trial < 20; ++trial) {
    const auto query = random_tensor({2, 3, 3, 4}, gen);
    const auto kv = random_tensor({2, 5, 3, 4}, gen);
    auto out = channel_attention(cvar(query), cvar(kv));
    EXPECT_EQ(out.shape(), query.shape());
    const auto ref = oracle::oracle_channel_attention(to_vec(query), to_vec(kv), 2, 3, 5, 12);
    EXPECT_TRUE(matches(ref.output, to_vec(out), 1e-12));
  }
}

TEST(ChannelAttention, SpatialMismatchIsShapeError) {
  std::mt19937_64 gen(15);
  EXPECT_THROW(channel_attention(cvar(random_tensor({1, 2, 3, 3}, gen)),
                                 cvar(random_tensor({1, 2, 3, 4}, gen))),
               ShapeError);
}

TEST(AttentionGradient, MatchesFiniteDifferences) {
  std::mt19937_64 gen(16);
  const auto q0 = random_tensor({1, 2, 3}, gen), k0 = random_tensor({1, 4, 3}, gen),
             v0 = random_tensor({1, 4, 2}, gen), w = random_tensor({1, 2, 2}, gen);
  auto q = Var<double>::parameter(q0), k = Var<double>::parameter(k0), v = Var<double>::parameter(v0);
  backward(ops::weighted_sum(scaled_dot_attention(q, k, v).output, w));
  auto check = [&](const Tensor<double>& base, int which, const Tensor<double>& analytic) {
    auto f = [&](const std::vector<double>& x) {
      Tensor<double> t(base.shape(), x);
      auto qq = which == 0 ? t : q0, kk = which == 1 ? t : k0, vv = which == 2 ? t : v0;
      return ops::weighted_sum(scaled_dot_attention(cvar(qq), cvar(kk), cvar(vv)).output, w)
          .value()[0];
    };
    const auto num = oracle::oracle_finite_diff(f, to_vec(base), 1e-6);
    EXPECT_TRUE(matches(num, to_vec(analytic), 1e-7));
  };
  check(q0, 0, q.grad());
  check(k0, 1, k.grad());
  check(v0, 2, v.grad());
}
