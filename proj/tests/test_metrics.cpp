#include <gtest/gtest.h>

#include "rapnet/metrics.hpp"
#include "test_util.hpp"

using namespace rapnet;
using testutil::matches;

namespace {

using Pixels = Tensor<std::uint8_t>;

Pixels random_pixels(const Shape& s, std::mt19937_64& gen) {
  std::uniform_int_distribution<int> d(0, 255);
  Pixels t(s);
  for (auto& v : t.storage()) v = static_cast<std::uint8_t>(d(gen));
  return t;
}

// Blobby frames so SSIM sees structure rather than white noise.
Pixels smooth_pixels(int t, int h, int w, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(0, 1);
  Pixels out(Shape{t, h, w});
  for (int f = 0; f < t; ++f) {
    const double cy = u(gen) * h, cx = u(gen) * w, s = 2 + 4 * u(gen), a = 60 + 190 * u(gen);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = a * std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (2 * s * s)) +
                         10 * u(gen);
        out.at(f, y, x) = static_cast<std::uint8_t>(std::min(255.0, v));
      }
  }
  return out;
}

ContingencyTable table(std::uint64_t tp, std::uint64_t fn, std::uint64_t fp, std::uint64_t tn) {
  ContingencyTable t;
  t.tp = tp;
  t.fn = fn;
  t.fp = fp;
  t.tn = tn;
  return t;
}

Tensor<double> frame_of(const Pixels& p, int t) {
  const int h = p.dim(1), w = p.dim(2);
  Tensor<double> out(Shape{h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = p.at(t, y, x);
  return out;
}

}  // namespace

TEST(ZR, Endpoints) {
  EXPECT_EQ(pixel_to_dbz(0), -10.0);
  EXPECT_EQ(pixel_to_dbz(255), 85.0);
  EXPECT_NEAR(pixel_to_dbz(134), 39.9216, 1e-4);
  EXPECT_THROW(pixel_to_dbz(-1), ValidationError);
  EXPECT_THROW(pixel_to_dbz(256), ValidationError);
}

TEST(ZR, Inverse) {
  EXPECT_EQ(dbz_to_pixel(-10), 0.0);
  EXPECT_NEAR(dbz_to_pixel(30), 107.368, 1e-3);
  EXPECT_EQ(dbz_to_pixel(-40), 0.0);
  EXPECT_EQ(dbz_to_pixel(100), 255.0);
  for (int p = 0; p <= 255; ++p) EXPECT_NEAR(dbz_to_pixel(pixel_to_dbz(p)), p, 1e-6);
}

TEST(Contingency, IdenticalFrames) {
  std::mt19937_64 gen(1);
  const auto p = random_pixels({8, 8}, gen);
  for (double tau : {5.0, 20.0, 40.0}) {
    const auto t = contingency(p, p, tau);
    EXPECT_EQ(t.fn, 0u);
    EXPECT_EQ(t.fp, 0u);
    EXPECT_EQ(t.tp + t.tn, 64u);
    EXPECT_EQ(t.threshold_dbz, tau);
  }
}

TEST(Contingency, AllFalseAlarms) {
  const auto t = contingency(Pixels(Shape{6, 6}, 255), Pixels(Shape{6, 6}, 0), 20.0);
  auto expected = table(0, 0, 36, 0);
  expected.threshold_dbz = 20.0;
  EXPECT_EQ(t, expected);
}

TEST(Contingency, StrictThreshold) {
  // 80 -> 19.8 dBZ, 81 -> 20.18 dBZ: only the latter is an event at 20.
  Pixels pred(Shape{1, 2}, std::vector<std::uint8_t>{80, 81});
  const auto t = contingency(pred, pred, 20.0);
  EXPECT_EQ(t.tp, 1u);
  EXPECT_EQ(t.tn, 1u);
}

TEST(Contingency, MatchesOracle) {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_pixels({8, 8}, gen), o = random_pixels({8, 8}, gen);
    for (double tau : {5.0, 20.0, 40.0}) {
      const auto ref = oracle::oracle_contingency({p.storage().begin(), p.storage().end()},
                                                      {o.storage().begin(), o.storage().end()}, tau);
      const auto t = contingency(p, o, tau);
      ASSERT_EQ(t.tp, ref.tp);
      ASSERT_EQ(t.fn, ref.fn);
      ASSERT_EQ(t.fp, ref.fp);
      ASSERT_EQ(t.tn, ref.tn);
    }
  }
  EXPECT_THROW(contingency(Pixels(Shape{2, 2}), Pixels(Shape{2, 3}), 5.0), ShapeError);
}

TEST(Scores, HeidkeExamples) {
  EXPECT_NEAR(*hss(table(25, 25, 25, 25)), 0.0, 1e-6);
  EXPECT_NEAR(*hss(table(10, 0, 0, 90)), 1.0, 1e-6);
  EXPECT_NEAR(*hss(table(40, 10, 20, 30)), 0.4, 1e-6);
  EXPECT_FALSE(hss(table(0, 0, 0, 0)).has_value());
}

TEST(Scores, CriticalSuccessExamples) {
  EXPECT_NEAR(*csi(table(10, 0, 0, 90)), 1.0, 1e-6);
  EXPECT_NEAR(*csi(table(0, 4, 3, 10)), 0.0, 1e-6);
  EXPECT_NEAR(*csi(table(40, 10, 20, 30)), 40.0 / 70.0, 1e-6);
  EXPECT_NEAR(*csi(table(40, 10, 20, 30)), 0.5714, 1e-4);
  EXPECT_FALSE(csi(table(0, 0, 0, 50)).has_value());
}

TEST(Scores, HeidkeSwapSymmetryAndBounds) {
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<int> d(0, 50);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = table(d(gen), d(gen), d(gen), d(gen));
    const auto swapped = table(t.tp, t.fp, t.fn, t.tn);
    const auto a = hss(t), b = hss(swapped);
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) {
      ASSERT_NEAR(*a, *b, 1e-12);
      ASSERT_LE(*a, 1.0 + 1e-12);
      ASSERT_GE(*a, -1.0 - 1e-12);
    }
    if (auto c = csi(t)) {
      ASSERT_GE(*c, 0.0);
      ASSERT_LE(*c, 1.0);
    }
  }
}

TEST(Scores, RaisingThresholdNeverAddsForecastEvents) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_pixels({8, 8}, gen), o = random_pixels({8, 8}, gen);
    std::uint64_t last = 65;
    for (double tau = -10; tau <= 85; tau += 2.5) {
      const auto t = contingency(p, o, tau);
      ASSERT_LE(t.tp + t.fp, last);
      last = t.tp + t.fp;
    }
  }
}

TEST(Mae, Basics) {
  std::mt19937_64 gen(5);
  auto p = random_pixels({4, 5}, gen);
  EXPECT_EQ(mae(p, p), 0.0);
  Tensor<double> a(Shape{3, 3}, 4.0), b(Shape{3, 3}, 3.0);
  EXPECT_EQ(mae(a, b), 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_pixels({6, 7}, gen), y = random_pixels({6, 7}, gen);
    long double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(int(x[i]) - int(y[i]));
    EXPECT_NEAR(mae(x, y), static_cast<double>(s / x.size()), 1e-9);
  }
  EXPECT_THROW(mae(a, Tensor<double>(Shape{3, 4})), ShapeError);
}

TEST(Ssim, IdenticalFramesScoreOne) {
  std::mt19937_64 gen(6);
  const auto p = smooth_pixels(1, 16, 20, gen);
  EXPECT_NEAR(ssim(frame_of(p, 0), frame_of(p, 0)), 1.0, 1e-9);
}

TEST(Ssim, ConstantFramesClosedForm) {
  const double c1 = std::pow(0.01 * 255, 2), c2 = std::pow(0.03 * 255, 2);
  for (auto [a, b] : {std::pair{0.0, 255.0}, {10.0, 200.0}, {128.0, 128.0}}) {
    const double expected = ((2 * a * b + c1) * c2) / ((a * a + b * b + c1) * c2);
    const double got = ssim(Tensor<double>(Shape{12, 12}, a), Tensor<double>(Shape{12, 12}, b));
    EXPECT_NEAR(got, expected, 1e-9) << a << " vs " << b;
  }
  const double tiny = ssim(Tensor<double>(Shape{11, 11}, 0.0), Tensor<double>(Shape{11, 11}, 255.0));
  EXPECT_GT(tiny, 0.0);
  EXPECT_LT(tiny, 1e-3);
}

TEST(Ssim, MatchesOracle) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = smooth_pixels(1, 16, 18, gen), b = smooth_pixels(1, 16, 18, gen);
    const auto fa = frame_of(a, 0), fb = frame_of(b, 0);
    const double ref = oracle::oracle_ssim(testutil::to_vec(fa), testutil::to_vec(fb), 16, 18);
    ASSERT_NEAR(ssim(fa, fb), ref, 1e-6);
    const auto na = random_pixels({13, 15}, gen), nb = random_pixels({13, 15}, gen);
    ASSERT_NEAR(ssim(na, nb),
                oracle::oracle_ssim(testutil::to_vec(na), testutil::to_vec(nb), 13, 15), 1e-6);
  }
}

TEST(Ssim, RejectsSmallFrames) {
  EXPECT_THROW(ssim(Tensor<double>(Shape{10, 20}), Tensor<double>(Shape{10, 20})), ShapeError);
}

TEST(Evaluate, PerfectForecast) {
  std::mt19937_64 gen(8);
  const auto truth = smooth_pixels(10, 16, 16, gen);
  const auto r = evaluate<std::uint8_t>({truth}, {truth});
  ASSERT_EQ(r.thresholds.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    if (r.tables[k].tp > 0) {
      EXPECT_DOUBLE_EQ(*r.hss[k], 1.0);
      EXPECT_DOUBLE_EQ(*r.csi[k], 1.0);
    }
  }
  EXPECT_EQ(r.mae, 0.0);
  EXPECT_NEAR(r.ssim, 1.0, 1e-9);
  EXPECT_EQ(r.n_frames, 10u);
}

TEST(Evaluate, PooledRecount) {
  std::mt19937_64 gen(9);
  std::vector<Pixels> preds, truths;
  for (int s = 0; s < 3; ++s) {
    preds.push_back(smooth_pixels(10, 16, 16, gen));
    truths.push_back(smooth_pixels(10, 16, 16, gen));
  }
  const auto r = evaluate(preds, truths);
  std::vector<std::uint8_t> all_p, all_t;
  double mae_sum = 0, ssim_sum = 0;
  for (int s = 0; s < 3; ++s) {
    all_p.insert(all_p.end(), preds[s].storage().begin(), preds[s].storage().end());
    all_t.insert(all_t.end(), truths[s].storage().begin(), truths[s].storage().end());
    for (int t = 0; t < 10; ++t) {
      const auto a = frame_of(preds[s], t), b = frame_of(truths[s], t);
      double m = 0;
      for (std::size_t i = 0; i < a.size(); ++i) m += std::abs(a[i] - b[i]);
      mae_sum += m / a.size();
      ssim_sum += oracle::oracle_ssim(testutil::to_vec(a), testutil::to_vec(b), 16, 16);
    }
  }
  double hss_sum = 0, csi_sum = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto c = oracle::oracle_contingency(all_p, all_t, r.thresholds[k]);
    EXPECT_EQ(r.tables[k].tp, c.tp);
    EXPECT_EQ(r.tables[k].fn, c.fn);
    EXPECT_EQ(r.tables[k].fp, c.fp);
    EXPECT_EQ(r.tables[k].tn, c.tn);
    const double tp = c.tp, fn = c.fn, fp = c.fp, tn = c.tn;
    const double h = 2 * (tp * tn - fn * fp) / ((tp + fn) * (fn + tn) + (tp + fp) * (fp + tn));
    EXPECT_NEAR(*r.hss[k], h, 1e-12);
    EXPECT_NEAR(*r.csi[k], tp / (tp + fn + fp), 1e-12);
    hss_sum += h;
    csi_sum += tp / (tp + fn + fp);
  }
  EXPECT_NEAR(*r.hss_avg, hss_sum / 3, 1e-12);
  EXPECT_NEAR(*r.csi_avg, csi_sum / 3, 1e-12);
  EXPECT_NEAR(r.mae, mae_sum / 30, 1e-9);
  EXPECT_NEAR(r.ssim, ssim_sum / 30, 1e-6);

  // Sequence order does not matter.
  std::reverse(preds.begin(), preds.end());
  std::reverse(truths.begin(), truths.end());
  const auto again = evaluate(preds, truths);
  EXPECT_EQ(again.tables, r.tables);
}

TEST(Evaluate, UndefinedScoresAreExcluded) {
  // No pixel ever exceeds 40 dBZ (pixel 135), so both scores at 40 are undefined.
  Pixels low(Shape{1, 12, 12}, 100);
  Pixels lower(Shape{1, 12, 12}, 50);
  const auto r = evaluate<std::uint8_t>({low}, {lower});
  EXPECT_FALSE(r.hss[2].has_value());
  EXPECT_FALSE(r.csi[2].has_value());
  ASSERT_TRUE(r.csi_avg.has_value());
  EXPECT_NEAR(*r.csi_avg, (*r.csi[0] + *r.csi[1]) / 2, 1e-12);
  const auto j = report_to_json(r);
  EXPECT_TRUE(j["hss_40"].is_null());
}

TEST(Evaluate, Errors) {
  EXPECT_THROW(evaluate<std::uint8_t>({}, {}), ValidationError);
  EXPECT_THROW(evaluate<std::uint8_t>({Pixels(Shape{1, 12, 12})}, {}), ShapeError);
  EXPECT_THROW(evaluate<std::uint8_t>({Pixels(Shape{1, 12, 12})}, {Pixels(Shape{2, 12, 12})}),
               ShapeError);
}

TEST(Evaluate, ReportFields) {
  std::mt19937_64 gen(10);
  const auto a = smooth_pixels(2, 12, 12, gen);
  const auto j = report_to_json(evaluate<std::uint8_t>({a}, {a}));
  std::set<std::string> keys;
  for (const auto& [k, _] : j.items()) keys.insert(k);
  const std::set<std::string> expected = {"hss_5", "hss_20", "hss_40", "hss_avg", "csi_5", "csi_20",
                                          "csi_40", "csi_avg", "mae", "ssim", "n_frames"};
  EXPECT_EQ(keys, expected);
  EXPECT_EQ(j["n_frames"], 2);
}
