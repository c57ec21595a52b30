// Forecast verification in the 0..255 pixel domain.
#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rapnet/tensor.hpp"

namespace rapnet {

/// Z-R relationship: dBZ = p * 95 / 255 - 10.
inline double pixel_to_dbz(double p) {
  if (!(p >= 0.0 && p <= 255.0)) throw ValidationError("pixel_to_dbz: pixel outside [0, 255]");
  return p * 95.0 / 255.0 - 10.0;
}

inline double dbz_to_pixel(double dbz) {
  return std::clamp((dbz + 10.0) * 255.0 / 95.0, 0.0, 255.0);
}

struct ContingencyTable {
  std::uint64_t tp = 0, fn = 0, fp = 0, tn = 0;
  double threshold_dbz = 0;

  std::uint64_t total() const { return tp + fn + fp + tn; }

  ContingencyTable& operator+=(const ContingencyTable& o) {
    tp += o.tp;
    fn += o.fn;
    fp += o.fp;
    tn += o.tn;
    return *this;
  }

  friend bool operator==(const ContingencyTable&, const ContingencyTable&) = default;
};

/// Both frames binarized at dBZ strictly greater than `tau_dbz`.
template <class P>
ContingencyTable contingency(const Tensor<P>& pred, const Tensor<P>& truth, double tau_dbz) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("contingency: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  }
  ContingencyTable t;
  t.threshold_dbz = tau_dbz;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pixel_to_dbz(static_cast<double>(pred[i])) > tau_dbz;
    const bool o = pixel_to_dbz(static_cast<double>(truth[i])) > tau_dbz;
    if (p && o) {
      ++t.tp;
    } else if (!p && o) {
      ++t.fn;
    } else if (p && !o) {
      ++t.fp;
    } else {
      ++t.tn;
    }
  }
  return t;
}

/// Heidke skill score; nullopt when the denominator vanishes.
inline std::optional<double> hss(const ContingencyTable& t) {
  const double tp = static_cast<double>(t.tp), fn = static_cast<double>(t.fn),
               fp = static_cast<double>(t.fp), tn = static_cast<double>(t.tn);
  const double den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn);
  if (den == 0) return std::nullopt;
  return 2.0 * (tp * tn - fn * fp) / den;
}

/// Critical success index; nullopt when no event was forecast or observed.
inline std::optional<double> csi(const ContingencyTable& t) {
  const std::uint64_t den = t.tp + t.fn + t.fp;
  if (den == 0) return std::nullopt;
  return static_cast<double>(t.tp) / static_cast<double>(den);
}

template <class P>
double mae(const Tensor<P>& pred, const Tensor<P>& truth) {
  if (pred.shape() != truth.shape()) throw ShapeError("mae: shape mismatch");
  if (pred.empty()) throw ShapeError("mae: empty input");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    s += std::abs(static_cast<double>(pred[i]) - static_cast<double>(truth[i]));
  }
  return s / static_cast<double>(pred.size());
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;
};

/// Mean SSIM over every position where the Gaussian window fits entirely
/// inside [H, W] frames. Local statistics come from separable filtering.
template <class P>
double ssim(const Tensor<P>& a, const Tensor<P>& b, const SsimOptions& opt = {}) {
  if (a.shape() != b.shape() || a.rank() != 2) throw ShapeError("ssim: expected equal [H,W] frames");
  const int h = a.dim(0), w = a.dim(1), win = opt.window;
  if (h < win || w < win) throw ShapeError("ssim: frame smaller than the window");
  std::vector<double> g(win);
  double gsum = 0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * opt.sigma * opt.sigma));
    gsum += g[i];
  }
  for (auto& v : g) v /= gsum;

  const int oh = h - win + 1, ow = w - win + 1;
  // Horizontal pass then vertical pass, valid region only.
  auto filter = [&](auto value) {
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int k = 0; k < win; ++k) s += g[k] * value(y, x + k);
        rows[static_cast<std::size_t>(y) * ow + x] = s;
      }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double s = 0;
        for (int k = 0; k < win; ++k) s += g[k] * rows[static_cast<std::size_t>(y + k) * ow + x];
        out[static_cast<std::size_t>(y) * ow + x] = s;
      }
    return out;
  };
  auto av = [&](int y, int x) { return static_cast<double>(a.at(y, x)); };
  auto bv = [&](int y, int x) { return static_cast<double>(b.at(y, x)); };
  const auto mu_a = filter(av);
  const auto mu_b = filter(bv);
  const auto aa = filter([&](int y, int x) { return av(y, x) * av(y, x); });
  const auto bb = filter([&](int y, int x) { return bv(y, x) * bv(y, x); });
  const auto ab = filter([&](int y, int x) { return av(y, x) * bv(y, x); });

  const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2);
  const double c2 = std::pow(opt.k2 * opt.dynamic_range, 2);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = aa[i] - mu_a[i] * mu_a[i];
    const double vb = bb[i] - mu_b[i] * mu_b[i];
    const double cov = ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

inline const std::vector<double>& default_thresholds() {
  static const std::vector<double> t = {5.0, 20.0, 40.0};
  return t;
}

/// Formats a threshold for a field name: 5 -> "5", 2.5 -> "2.5".
inline std::string threshold_key(double t) {
  std::ostringstream os;
  os << std::setprecision(10) << t;
  return os.str();
}

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<ContingencyTable> tables;
  std::vector<std::optional<double>> hss;
  std::vector<std::optional<double>> csi;
  std::optional<double> hss_avg;
  std::optional<double> csi_avg;
  double mae = 0;
  double ssim = 0;
  std::size_t n_frames = 0;
};

namespace detail {

inline std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0;
  int n = 0;
  for (const auto& x : v) {
    if (x) {
      s += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / n;
}

}  // namespace detail

/// Scores aligned forecasts. Each entry is one sequence [T, H, W] in the
/// 0..255 domain. Contingency counts are pooled over every pixel of every
/// frame before HSS/CSI are computed; MAE and SSIM are per-frame means.
template <class P>
EvalReport evaluate(const std::vector<Tensor<P>>& predictions, const std::vector<Tensor<P>>& truths,
                    const std::vector<double>& thresholds = default_thresholds()) {
  if (predictions.empty()) throw ValidationError("evaluate: no sequences");
  if (predictions.size() != truths.size()) throw ShapeError("evaluate: sequence count mismatch");
  EvalReport r;
  r.thresholds = thresholds;
  r.tables.resize(thresholds.size());
  for (std::size_t k = 0; k < thresholds.size(); ++k) r.tables[k].threshold_dbz = thresholds[k];
  double mae_sum = 0, ssim_sum = 0;
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    const auto& pred = predictions[s];
    const auto& truth = truths[s];
    if (pred.shape() != truth.shape() || pred.rank() != 3) {
      throw ShapeError("evaluate: sequence " + std::to_string(s) + " shapes " +
                       shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
    }
    const int h = pred.dim(1), w = pred.dim(2);
    const std::size_t per = static_cast<std::size_t>(h) * w;
    for (int t = 0; t < pred.dim(0); ++t) {
      Tensor<P> pf(Shape{h, w}, std::vector<P>(pred.data() + t * per, pred.data() + (t + 1) * per));
      Tensor<P> tf(Shape{h, w},
                   std::vector<P>(truth.data() + t * per, truth.data() + (t + 1) * per));
      for (std::size_t k = 0; k < thresholds.size(); ++k) {
        r.tables[k] += contingency(pf, tf, thresholds[k]);
      }
      mae_sum += mae(pf, tf);
      ssim_sum += ssim(pf, tf);
      ++r.n_frames;
    }
  }
  if (r.n_frames == 0) throw ValidationError("evaluate: no frames");
  for (const auto& t : r.tables) {
    r.hss.push_back(hss(t));
    r.csi.push_back(csi(t));
  }
  r.hss_avg = detail::mean_defined(r.hss);
  r.csi_avg = detail::mean_defined(r.csi);
  r.mae = mae_sum / static_cast<double>(r.n_frames);
  r.ssim = ssim_sum / static_cast<double>(r.n_frames);
  return r;
}

/// Fixed field set: hss_<t>, hss_avg, csi_<t>, csi_avg, mae, ssim, n_frames.
/// Undefined scores are null.
inline nlohmann::json report_to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t k = 0; k < r.thresholds.size(); ++k) {
    j["hss_" + threshold_key(r.thresholds[k])] = opt(r.hss[k]);
    j["csi_" + threshold_key(r.thresholds[k])] = opt(r.csi[k]);
  }
  j["hss_avg"] = opt(r.hss_avg);
  j["csi_avg"] = opt(r.csi_avg);
  j["mae"] = r.mae;
  j["ssim"] = r.ssim;
  j["n_frames"] = r.n_frames;
  return j;
}

}  // namespace rapnet
