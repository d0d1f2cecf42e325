#pragma once

// Binary checkpoint layout (all integers little-endian):
//   8-byte magic "CDNETCKP", u32 version, u64 header length, JSON header,
//   then per tensor: u32 name length, name bytes, u32 rank, u64 extents,
//   f64 values; finally a u32 CRC-32 of every preceding byte.

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdnet/config.hpp"
#include "cdnet/data.hpp"
#include "cdnet/error.hpp"
#include "cdnet/network.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'D', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  NetworkSpec spec;
  ModelParams params;
  std::vector<std::string> label_names;
  ImageShape image_shape;
  ValueRange range;
  std::size_t iteration = 0;

  Model model() const { return Model{spec, params}; }
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in pieces.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(n));
    offset += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class T>
  void le(T v) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  std::vector<std::uint8_t>& bytes() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, std::string_view what) {
    if (n > bytes_.size() - pos_) throw FormatError("truncated checkpoint while reading " + std::string(what), pos_);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <class T>
  T le(std::string_view what) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const auto s = take(sizeof(U), what);
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(s[i]) << (8 * i);
    return std::bit_cast<T>(u);
  }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline nlohmann::json checkpoint_header(const Checkpoint& ck) {
  return {{"format", "cdnet-checkpoint"},
          {"config", to_json(ck.config)},
          {"network", to_json(ck.spec)},
          {"label_names", ck.label_names},
          {"image_shape", {ck.image_shape.height, ck.image_shape.width}},
          {"value_range", {ck.range.lo, ck.range.hi}},
          {"iteration", ck.iteration},
          {"init_seed", ck.params.init_seed},
          {"tensor_count", ck.params.tensors.size()}};
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.le<std::uint32_t>(kCheckpointVersion);
  const std::string header = checkpoint_header(ck).dump();
  w.le<std::uint64_t>(header.size());
  w.raw(header.data(), header.size());
  for (const auto& [name, t] : ck.params.tensors) {
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) w.le<std::uint64_t>(e);
    for (double v : t.values()) w.le<double>(v);
  }
  w.le<std::uint32_t>(crc32_of(w.bytes()));
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 4 + 8 + 4) throw FormatError("checkpoint too short", 0);
  const std::size_t body = bytes.size() - 4;
  {
    detail::ByteReader tail(bytes.subspan(body));
    const auto stored = tail.le<std::uint32_t>("checksum");
    if (stored != crc32_of(bytes.first(body))) throw FormatError("checkpoint checksum mismatch", body);
  }
  detail::ByteReader r(bytes.first(body));
  const auto magic = r.take(kCheckpointMagic.size(), "magic");
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) throw FormatError("bad checkpoint magic", 0);
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      8);
  }
  const auto header_len = r.le<std::uint64_t>("header length");
  const std::size_t header_at = r.position();
  const auto header_bytes = r.take(header_len, "header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what(), header_at);
  }

  Checkpoint ck;
  std::size_t tensor_count = 0;
  try {
    ck.config = parse_run_config(h.at("config"));
    ck.spec = network_spec_from_json(h.at("network"));
    ck.label_names = h.at("label_names").get<std::vector<std::string>>();
    ck.image_shape = {h.at("image_shape").at(0).get<std::size_t>(), h.at("image_shape").at(1).get<std::size_t>()};
    ck.range = {h.at("value_range").at(0).get<double>(), h.at("value_range").at(1).get<double>()};
    ck.iteration = h.at("iteration").get<std::size_t>();
    ck.params.init_seed = h.at("init_seed").get<std::uint64_t>();
    tensor_count = h.at("tensor_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete checkpoint header: ") + e.what(), header_at);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid configuration in checkpoint header: ") + e.what(), header_at);
  }

  for (std::size_t i = 0; i < tensor_count; ++i) {
    const std::size_t at = r.position();
    const auto name_len = r.le<std::uint32_t>("tensor name length");
    const auto name_bytes = r.take(name_len, "tensor name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = r.le<std::uint32_t>("tensor rank");
    if (rank == 0 || rank > 8) throw FormatError("implausible rank for tensor '" + name + "'", at);
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = r.le<std::uint64_t>("tensor extent");
      if (e == 0 || count > (body / 8) / e) throw FormatError("implausible extent for tensor '" + name + "'", at);
      shape.push_back(e);
      count *= e;
    }
    std::vector<double> values(count);
    for (double& v : values) v = r.le<double>("tensor values");
    if (!ck.params.tensors.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw FormatError("duplicate tensor '" + name + "'", at);
    }
  }
  if (r.position() != body) throw FormatError("trailing bytes after tensor records", r.position());

  // The tensors must be exactly what the declared network needs.
  const ModelParams expected = initialize_params(ck.spec, 0);
  for (const auto& [name, t] : expected.tensors) {
    auto it = ck.params.tensors.find(name);
    if (it == ck.params.tensors.end()) throw FormatError("checkpoint lacks tensor '" + name + "'", header_at);
    if (it->second.shape() != t.shape()) throw FormatError("tensor '" + name + "' has the wrong shape", header_at);
  }
  if (expected.tensors.size() != ck.params.tensors.size()) {
    throw FormatError("checkpoint holds tensors the network does not declare", header_at);
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  // Write then rename so readers never observe a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

/// CRC-32 of a checkpoint file body, i.e. the value stored in its trailer.
inline std::uint32_t checkpoint_checksum(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() < 4) throw FormatError("checkpoint too short", 0);
  return crc32_of(std::span<const std::uint8_t>(bytes).first(bytes.size() - 4));
}

}  // namespace cdnet
