#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <zlib.h>

#include "heightbins/errors.hpp"

namespace heightbins {

enum class RasterKind { image, height, footprint };

inline std::string to_string(RasterKind k) {
  switch (k) {
    case RasterKind::image: return "image";
    case RasterKind::height: return "height";
    case RasterKind::footprint: return "footprint";
  }
  return "image";
}

inline std::optional<RasterKind> parse_raster_kind(const std::string& s) {
  for (RasterKind k : {RasterKind::image, RasterKind::height, RasterKind::footprint})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

/// Single patch, values stored channel-major then row-major, float32.
struct RasterPatch {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  double gsd = 1.0;
  RasterKind kind = RasterKind::height;
  std::vector<float> values;

  float at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }

  bool operator==(const RasterPatch&) const = default;
};

enum class RasterErrc {
  bad_magic,
  truncated_header,
  malformed_header,
  length_mismatch,
  truncated_payload,
  checksum_mismatch,
  trailing_data,
  invalid_values,
};

inline const char* to_string(RasterErrc c) {
  switch (c) {
    case RasterErrc::bad_magic: return "bad_magic";
    case RasterErrc::truncated_header: return "truncated_header";
    case RasterErrc::malformed_header: return "malformed_header";
    case RasterErrc::length_mismatch: return "length_mismatch";
    case RasterErrc::truncated_payload: return "truncated_payload";
    case RasterErrc::checksum_mismatch: return "checksum_mismatch";
    case RasterErrc::trailing_data: return "trailing_data";
    case RasterErrc::invalid_values: return "invalid_values";
  }
  return "malformed_header";
}

struct RasterParseError : ParseError {
  RasterParseError(RasterErrc code, const std::string& what, std::size_t offset)
      : ParseError(std::string("raster ") + to_string(code) + ": " + what, offset), code(code) {}
  RasterErrc code;
};

// Layout (all integers little-endian):
//   [0, 8)        magic "HMR1\0\0\0\0"
//   [8, 12)       u32 header length L
//   [12, 12+L)    UTF-8 JSON header
//                 {width, height, channels, gsd, kind, dtype: "f32", byte_length}
//   payload       byte_length bytes of float32 values
//   trailer       u32 CRC-32 (zlib polynomial) of every preceding byte

inline constexpr char kRasterMagic[8] = {'H', 'M', 'R', '1', 0, 0, 0, 0};

namespace detail {
inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
inline std::uint32_t crc32_of(const std::string& bytes, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  for (std::size_t done = 0; done < n;) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n - done, 1u << 30));
    crc = ::crc32(crc, p + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}
}  // namespace detail

inline void validate_raster(const RasterPatch& r) {
  if (r.width == 0 || r.height == 0 || r.channels == 0) throw ContractViolation("raster: empty extent");
  if (r.values.size() != r.width * r.height * r.channels) {
    throw ContractViolation("raster: value buffer holds " + std::to_string(r.values.size()) + ", expected " +
                            std::to_string(r.width * r.height * r.channels));
  }
  if (!(r.gsd > 0.0) || !std::isfinite(r.gsd)) throw ContractViolation("raster: gsd must be positive");
}

inline std::string encode_raster(const RasterPatch& r) {
  validate_raster(r);
  const std::size_t byte_length = r.values.size() * 4;
  const nlohmann::json header = {{"width", r.width},   {"height", r.height},         {"channels", r.channels},
                                 {"gsd", r.gsd},       {"kind", to_string(r.kind)}, {"dtype", "f32"},
                                 {"byte_length", byte_length}};
  const std::string h = header.dump();
  std::string out(kRasterMagic, 8);
  detail::put_u32_le(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  out.reserve(out.size() + byte_length + 4);
  for (float v : r.values) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
  detail::put_u32_le(out, detail::crc32_of(out, out.size()));
  return out;
}

inline RasterPatch decode_raster(const std::string& bytes) {
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kRasterMagic, 8) != 0) {
    throw RasterParseError(RasterErrc::bad_magic, "expected HMR1 magic", 0);
  }
  if (bytes.size() < 12) throw RasterParseError(RasterErrc::truncated_header, "missing header length", bytes.size());
  const std::size_t hlen = detail::get_u32_le(u + 8);
  if (bytes.size() < 12 + hlen) {
    throw RasterParseError(RasterErrc::truncated_header,
                           "header declares " + std::to_string(hlen) + " bytes", bytes.size());
  }
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<long>(hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw RasterParseError(RasterErrc::malformed_header, "invalid JSON header", 12 + e.byte);
  }
  RasterPatch r;
  std::size_t byte_length = 0;
  auto fail = [](const std::string& what) { throw RasterParseError(RasterErrc::malformed_header, what, 12); };
  if (!h.is_object()) fail("header is not an object");
  auto count = [&](const char* key) -> std::size_t {
    if (!h.contains(key) || !h[key].is_number_integer() || h[key].get<std::int64_t>() < 0) fail(std::string("field '") + key + "' must be a nonnegative integer");
    return h[key].get<std::size_t>();
  };
  r.width = count("width");
  r.height = count("height");
  r.channels = count("channels");
  byte_length = count("byte_length");
  if (!h.contains("gsd") || !h["gsd"].is_number()) fail("field 'gsd' must be a number");
  r.gsd = h["gsd"].get<double>();
  if (!(r.gsd > 0.0) || !std::isfinite(r.gsd)) fail("field 'gsd' must be positive");
  if (!h.contains("kind") || !h["kind"].is_string()) fail("field 'kind' must be a string");
  const auto kind = parse_raster_kind(h["kind"].get<std::string>());
  if (!kind) fail("unknown kind '" + h["kind"].get<std::string>() + "'");
  r.kind = *kind;
  if (!h.contains("dtype") || h["dtype"] != "f32") fail("field 'dtype' must be \"f32\"");
  if (r.width == 0 || r.height == 0 || r.channels == 0) fail("extent must be positive");
  const std::size_t n = r.width * r.height * r.channels;
  if (n / r.width / r.height != r.channels || byte_length / 4 != n || byte_length % 4 != 0) {
    throw RasterParseError(RasterErrc::length_mismatch,
                           "byte_length " + std::to_string(byte_length) + " does not match " + std::to_string(r.width) +
                               "x" + std::to_string(r.height) + "x" + std::to_string(r.channels) + " f32",
                           12);
  }
  const std::size_t payload = 12 + hlen;
  if (bytes.size() < payload + byte_length + 4) {
    throw RasterParseError(RasterErrc::truncated_payload,
                           "payload needs " + std::to_string(byte_length + 4) + " bytes, " +
                               std::to_string(bytes.size() - payload) + " present",
                           bytes.size());
  }
  const std::size_t crc_at = payload + byte_length;
  if (bytes.size() > crc_at + 4) {
    throw RasterParseError(RasterErrc::trailing_data, std::to_string(bytes.size() - crc_at - 4) + " extra bytes",
                           crc_at + 4);
  }
  if (detail::get_u32_le(u + crc_at) != detail::crc32_of(bytes, crc_at)) {
    throw RasterParseError(RasterErrc::checksum_mismatch, "CRC-32 differs", crc_at);
  }
  r.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.values[i] = std::bit_cast<float>(detail::get_u32_le(u + payload + 4 * i));
    if (!std::isfinite(r.values[i])) {
      throw RasterParseError(RasterErrc::invalid_values, "non-finite value", payload + 4 * i);
    }
    if (r.kind == RasterKind::footprint && r.values[i] != 0.0f && r.values[i] != 1.0f) {
      throw RasterParseError(RasterErrc::invalid_values, "footprint value not in {0,1}", payload + 4 * i);
    }
    if (r.kind == RasterKind::height && r.values[i] < 0.0f) {
      throw RasterParseError(RasterErrc::invalid_values, "negative height", payload + 4 * i);
    }
  }
  return r;
}

inline void write_raster(const RasterPatch& r, const std::string& path) {
  const std::string bytes = encode_raster(r);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open raster for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing raster: " + path);
}

inline RasterPatch read_raster(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open raster: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_raster(ss.str());
}

}  // namespace heightbins
