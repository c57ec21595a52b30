// Model checkpoint archive.
//
// Layout (little endian):
//   "RAPNETCKPT1\0"                       12 bytes
//   u32 n, n bytes of JSON                {"model": {...}, "meta": {...}}
//   u32 parameter count, then per parameter in name order:
//     u32 name length, name bytes, u32 rank, rank x u32 extents,
//     extents-product x f64 values
#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>

#include "rapnet/data.hpp"
#include "rapnet/rap_net.hpp"

namespace rapnet {

inline constexpr char kCheckpointMagic[12] = {'R', 'A', 'P', 'N', 'E', 'T',
                                              'C', 'K', 'P', 'T', '1', '\0'};

template <class T>
struct Checkpoint {
  ModelConfig model;
  nlohmann::json meta = nlohmann::json::object();
  ParamStore<T> params;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  const unsigned char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint: truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() { return get_u32(take(4)); }
  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::string str(std::size_t n) { return std::string(reinterpret_cast<const char*>(take(n)), n); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class T>
std::string encode_checkpoint(const Checkpoint<T>& ckpt) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::string header = nlohmann::json{{"model", ckpt.model}, {"meta", ckpt.meta}}.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, var] : ckpt.params.entries()) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const auto& v = var.value();
    detail::put_u32(out, static_cast<std::uint32_t>(v.rank()));
    for (int d : v.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T x : v.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(static_cast<double>(x)));
  }
  return out;
}

template <class T>
Checkpoint<T> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  detail::Reader r(bytes);
  r.take(sizeof(kCheckpointMagic));
  Checkpoint<T> ckpt;
  const std::uint32_t header_len = r.u32();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str(header_len));
    ckpt.model = header.at("model").get<ModelConfig>();
    ckpt.meta = header.value("meta", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("checkpoint: implausible rank for " + name);
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = r.u32();
      if (e > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
        throw FormatError("checkpoint: extent overflow in " + name);
      }
      shape.push_back(static_cast<int>(e));
    }
    Tensor<T> v(shape);
    for (auto& x : v.storage()) x = static_cast<T>(std::bit_cast<double>(r.u64()));
    ckpt.params.add(name, std::move(v));
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes");
  return ckpt;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file(path));
}

}  // namespace rapnet
