// Helpers shared by the command-line tool: content hashes, run manifests,
// worker count and PNG rendering of reflectivity frames.
#pragma once

#include <openssl/evp.h>
#include <png.h>

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "rapnet/data.hpp"
#include "rapnet/metrics.hpp"

namespace rapnet::cli {

/// Git blob hash: SHA-1 of "blob <size>\0" followed by the content.
inline std::string git_blob_hash(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest.data(), &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    const unsigned char b = digest[i];
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 15]);
  }
  return out;
}

inline std::string file_hash(const std::filesystem::path& path) { return git_blob_hash(read_file(path)); }

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

/// RAPNET_THREADS caps the worker count; unset or invalid means one per core.
inline unsigned worker_count() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RAPNET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return std::min<unsigned>(hw, static_cast<unsigned>(v));
  }
  return hw;
}

struct Rgb {
  std::uint8_t r, g, b;
};

struct ColorBin {
  double lower_dbz;  // bin covers [lower, next lower)
  Rgb color;
};

/// Piecewise-constant reflectivity palette in 5 dBZ steps, starting at 5 dBZ;
/// anything weaker is drawn white.
inline const std::vector<ColorBin>& reflectivity_palette() {
  static const std::vector<ColorBin> bins = {
      {5, {0x04, 0xe9, 0xe7}},  {10, {0x01, 0x9f, 0xf4}}, {15, {0x03, 0x00, 0xf4}},
      {20, {0x02, 0xfd, 0x02}}, {25, {0x01, 0xc5, 0x01}}, {30, {0x00, 0x8e, 0x00}},
      {35, {0xfd, 0xf8, 0x02}}, {40, {0xe5, 0xbc, 0x00}}, {45, {0xfd, 0x95, 0x00}},
      {50, {0xfd, 0x00, 0x00}}, {55, {0xd4, 0x00, 0x00}}, {60, {0xbc, 0x00, 0x00}},
      {65, {0xf8, 0x00, 0xfd}}, {70, {0x98, 0x54, 0xc6}}, {75, {0x60, 0x30, 0x90}},
  };
  return bins;
}

inline Rgb dbz_color(double dbz) {
  Rgb c{255, 255, 255};
  for (const auto& bin : reflectivity_palette()) {
    if (dbz >= bin.lower_dbz) c = bin.color;
  }
  return c;
}

class RgbImage {
 public:
  RgbImage(int width, int height) : w_(width), h_(height), px_(static_cast<std::size_t>(width) * height * 3, 255) {}
  int width() const { return w_; }
  int height() const { return h_; }
  void set(int x, int y, Rgb c) {
    auto* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }
  Rgb get(int x, int y) const {
    const auto* p = &px_[(static_cast<std::size_t>(y) * w_ + x) * 3];
    return {p[0], p[1], p[2]};
  }
  const std::uint8_t* row(int y) const { return &px_[static_cast<std::size_t>(y) * w_ * 3]; }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

/// Frames [H, W] in pixel units, side by side, followed by a vertical color
/// bar spanning -10..85 dBZ bottom to top.
inline RgbImage render_panels(const std::vector<const Tensor<std::uint8_t>*>& frames, int scale) {
  const int h = frames.at(0)->dim(0), w = frames.at(0)->dim(1);
  const int gap = 4, bar = 12;
  const int panels = static_cast<int>(frames.size());
  RgbImage img(panels * (w * scale + gap) + bar, h * scale);
  for (int k = 0; k < panels; ++k) {
    const auto& f = *frames[k];
    const int x0 = k * (w * scale + gap);
    for (int y = 0; y < h * scale; ++y)
      for (int x = 0; x < w * scale; ++x) {
        img.set(x0 + x, y, dbz_color(pixel_to_dbz(f.at(y / scale, x / scale))));
      }
    for (int y = 0; y < h * scale; ++y)
      for (int x = 0; x < gap; ++x) img.set(x0 + w * scale + x, y, {0, 0, 0});
  }
  const int bx = panels * (w * scale + gap);
  for (int y = 0; y < img.height(); ++y) {
    const double dbz = 85.0 - 95.0 * (y + 0.5) / img.height();
    for (int x = 0; x < bar; ++x) img.set(bx + x, y, dbz_color(dbz));
  }
  return img;
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  auto tmp = path;
  tmp += ".tmp";
  FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width(), img.height(), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height(); ++y) png_write_row(png, img.row(y));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  std::filesystem::rename(tmp, path);
}

}  // namespace rapnet::cli
