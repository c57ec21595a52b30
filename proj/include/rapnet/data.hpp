// Radar sequence container, RSEQ file format, normalization, dataset
// splitting and the synthetic moving-echo generator.
//
// RSEQ layout (little endian):
//   bytes 0..7    "RSEQ1\0" followed by two zero bytes
//   bytes 8..23   uint32 count, T, H, W
//   bytes 24..    count*T*H*W uint8 pixels, sequence-major, frame-major,
//                 row-major
#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "rapnet/params.hpp"
#include "rapnet/tensor.hpp"

namespace rapnet {

struct RadarSequence {
  Tensor<std::uint8_t> frames;  // [T, H, W]
  double minutes_per_frame = 6.0;
  double km_per_pixel = 1.0;

  int length() const { return frames.dim(0); }
  int height() const { return frames.dim(1); }
  int width() const { return frames.dim(2); }
};

inline constexpr std::array<char, 8> kRseqMagic = {'R', 'S', 'E', 'Q', '1', '\0', '\0', '\0'};
inline constexpr std::size_t kRseqHeaderBytes = 24;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace detail

/// Writes `bytes` to a sibling temp file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::string encode_rseq(const std::vector<RadarSequence>& seqs) {
  std::uint32_t t = 0, h = 0, w = 0;
  if (!seqs.empty()) {
    t = static_cast<std::uint32_t>(seqs[0].length());
    h = static_cast<std::uint32_t>(seqs[0].height());
    w = static_cast<std::uint32_t>(seqs[0].width());
  }
  for (const auto& s : seqs) {
    if (s.frames.rank() != 3 || static_cast<std::uint32_t>(s.length()) != t ||
        static_cast<std::uint32_t>(s.height()) != h || static_cast<std::uint32_t>(s.width()) != w) {
      throw ShapeError("write_rseq: all sequences must share T, H, W");
    }
  }
  std::string out(kRseqMagic.begin(), kRseqMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(seqs.size()));
  detail::put_u32(out, t);
  detail::put_u32(out, h);
  detail::put_u32(out, w);
  out.reserve(kRseqHeaderBytes + seqs.size() * t * h * w);
  for (const auto& s : seqs) out.append(reinterpret_cast<const char*>(s.frames.data()), s.frames.size());
  return out;
}

inline std::vector<RadarSequence> decode_rseq(const std::string& bytes) {
  if (bytes.size() < kRseqHeaderBytes ||
      std::memcmp(bytes.data(), kRseqMagic.data(), kRseqMagic.size()) != 0) {
    if (bytes.size() >= kRseqMagic.size() &&
        std::memcmp(bytes.data(), kRseqMagic.data(), kRseqMagic.size()) == 0) {
      throw FormatError("rseq: truncated header");
    }
    throw FormatError("rseq: bad magic");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t count = detail::get_u32(p + 8), t = detail::get_u32(p + 12),
                      h = detail::get_u32(p + 16), w = detail::get_u32(p + 20);
  // Each extent is < 2^32, so the frame product fits in 64 bits only when
  // checked step by step.
  constexpr std::uint64_t kMaxInt = static_cast<std::uint64_t>(std::numeric_limits<int>::max());
  if (t > kMaxInt || h > kMaxInt || w > kMaxInt) throw FormatError("rseq: dimension overflow");
  std::uint64_t per = t;
  for (std::uint64_t d : {h, w}) {
    if (d != 0 && per > std::numeric_limits<std::uint64_t>::max() / d) {
      throw FormatError("rseq: dimension overflow");
    }
    per *= d;
  }
  if (count != 0 && per > (std::numeric_limits<std::uint64_t>::max() - kRseqHeaderBytes) / count) {
    throw FormatError("rseq: dimension overflow");
  }
  const std::uint64_t payload = per * count;
  if (bytes.size() - kRseqHeaderBytes < payload) throw FormatError("rseq: truncated payload");
  if (bytes.size() - kRseqHeaderBytes > payload) throw FormatError("rseq: trailing bytes");
  std::vector<RadarSequence> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto* src = p + kRseqHeaderBytes + i * per;
    RadarSequence s;
    s.frames = Tensor<std::uint8_t>(
        Shape{static_cast<int>(t), static_cast<int>(h), static_cast<int>(w)},
        std::vector<std::uint8_t>(src, src + per));
    out.push_back(std::move(s));
  }
  return out;
}

inline void write_rseq(const std::filesystem::path& path, const std::vector<RadarSequence>& seqs) {
  write_file_atomic(path, encode_rseq(seqs));
}

inline std::vector<RadarSequence> read_rseq(const std::filesystem::path& path) {
  return decode_rseq(read_file(path));
}

inline double normalize(std::uint8_t p) { return static_cast<double>(p) / 255.0; }

/// Inverse of normalize: scale, round to nearest, clamp to [0, 255].
inline std::uint8_t denormalize(double v) {
  const double scaled = std::nearbyint(v * 255.0);
  if (!(scaled > 0)) return 0;  // also maps NaN to 0
  return scaled >= 255 ? std::uint8_t{255} : static_cast<std::uint8_t>(scaled);
}

/// Stacks the given sequences into [B, T, 1, H, W] scaled to [0, 1].
template <class T>
Tensor<T> to_batch(const std::vector<RadarSequence>& seqs, const std::vector<std::size_t>& index,
                   int first_frame = 0, int frame_count = -1) {
  if (index.empty()) throw ShapeError("to_batch: empty batch");
  const auto& ref = seqs.at(index[0]);
  const int t_all = ref.length(), h = ref.height(), w = ref.width();
  if (frame_count < 0) frame_count = t_all - first_frame;
  if (first_frame < 0 || first_frame + frame_count > t_all) throw ShapeError("to_batch: frame range");
  const std::size_t per = static_cast<std::size_t>(h) * w;
  Tensor<T> out(Shape{static_cast<int>(index.size()), frame_count, 1, h, w});
  T* dst = out.data();
  for (std::size_t i : index) {
    const auto& s = seqs.at(i);
    if (s.length() != t_all || s.height() != h || s.width() != w) {
      throw ShapeError("to_batch: sequences differ in shape");
    }
    const std::uint8_t* src = s.frames.data() + static_cast<std::size_t>(first_frame) * per;
    for (std::size_t k = 0; k < per * frame_count; ++k) *dst++ = static_cast<T>(normalize(src[k]));
  }
  return out;
}

/// Inverse of to_batch for one batch entry of [B, T, 1, H, W].
template <class T>
Tensor<std::uint8_t> to_pixels(const Tensor<T>& batch, int b) {
  const Shape& s = batch.shape();
  if (s.size() != 5 || s[2] != 1) throw ShapeError("to_pixels: expected [B,T,1,H,W]");
  const std::size_t per = static_cast<std::size_t>(s[1]) * s[3] * s[4];
  Tensor<std::uint8_t> out(Shape{s[1], s[3], s[4]});
  for (std::size_t k = 0; k < per; ++k) {
    out[k] = denormalize(static_cast<double>(batch[static_cast<std::size_t>(b) * per + k]));
  }
  return out;
}

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
};

/// Shuffles indices 0..pool-1 with `seed` and holds out the first n_val as
/// validation; the rest stay in train.
inline DatasetSplit split_dataset(std::size_t pool, std::size_t n_val, std::uint64_t seed) {
  if (pool == 0 || n_val >= pool) {
    throw ValidationError("split_dataset: need 0 <= n_val < pool (pool " + std::to_string(pool) +
                          ", n_val " + std::to_string(n_val) + ")");
  }
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = pool - 1; i > 0; --i) std::swap(idx[i], idx[rng.below(i + 1)]);
  DatasetSplit s;
  s.seed = seed;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

struct SynthParams {
  int min_echoes = 1;
  int max_echoes = 4;
  double min_sigma = 2.5;   // pixels
  double max_sigma = 5.0;
  double max_speed = 1.5;   // pixels per frame along each axis
  double min_amplitude = 0.4;
  double max_amplitude = 1.0;
  double min_growth = -0.05;  // log-amplitude change per frame
  double max_growth = 0.08;
  double margin = 0.2;        // initial centers kept this fraction away from the border
};

struct Echo {
  double cy, cx;  // center at frame 0
  double vy, vx;
  double sigma;
  double amplitude;
  double growth;
};

/// Renders echoes at frame t: clamp(round(255 * sum_k A_k(t) exp(-d^2 / 2 sigma_k^2))).
inline Tensor<std::uint8_t> render_echoes(const std::vector<Echo>& echoes, int frames, int height,
                                          int width) {
  Tensor<std::uint8_t> out(Shape{frames, height, width});
  for (int t = 0; t < frames; ++t)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double v = 0;
        for (const auto& e : echoes) {
          const double dy = y - (e.cy + e.vy * t);
          const double dx = x - (e.cx + e.vx * t);
          v += e.amplitude * std::exp(e.growth * t) *
               std::exp(-(dy * dy + dx * dx) / (2 * e.sigma * e.sigma));
        }
        out.at(t, y, x) = static_cast<std::uint8_t>(std::clamp(std::nearbyint(v * 255.0), 0.0, 255.0));
      }
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Sequence i uses its own generator seeded from (seed, i), so the output is
/// independent of how sequences are scheduled.
inline std::vector<RadarSequence> generate_synthetic(std::size_t n, int frames, int height, int width,
                                                     std::uint64_t seed,
                                                     const SynthParams& p = {}) {
  if (height < 16 || width < 16) throw ValidationError("generate_synthetic: frames must be >= 16x16");
  if (frames < 1) throw ValidationError("generate_synthetic: frames must be >= 1");
  if (p.min_echoes < 1 || p.max_echoes < p.min_echoes) {
    throw ValidationError("generate_synthetic: bad echo count range");
  }
  std::vector<RadarSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(splitmix64(seed ^ splitmix64(i)));
    const int k = p.min_echoes + static_cast<int>(rng.below(p.max_echoes - p.min_echoes + 1));
    std::vector<Echo> echoes;
    for (int e = 0; e < k; ++e) {
      Echo echo{};
      echo.cy = rng.uniform(p.margin * height, (1 - p.margin) * height);
      echo.cx = rng.uniform(p.margin * width, (1 - p.margin) * width);
      echo.vy = rng.uniform(-p.max_speed, p.max_speed);
      echo.vx = rng.uniform(-p.max_speed, p.max_speed);
      echo.sigma = rng.uniform(p.min_sigma, p.max_sigma);
      echo.amplitude = rng.uniform(p.min_amplitude, p.max_amplitude);
      echo.growth = rng.uniform(p.min_growth, p.max_growth);
      echoes.push_back(echo);
    }
    RadarSequence s;
    s.frames = render_echoes(echoes, frames, height, width);
    out.push_back(std::move(s));
  }
  return out;
}

/// Dataset manifest: file, split seed and counts.
inline nlohmann::json dataset_manifest(const std::string& path, const DatasetSplit& split,
                                       std::size_t count) {
  return {{"path", path},
          {"split_seed", split.seed},
          {"count", count},
          {"n_train", split.train.size()},
          {"n_val", split.val.size()},
          {"n_test", split.test.size()}};
}

}  // namespace rapnet
