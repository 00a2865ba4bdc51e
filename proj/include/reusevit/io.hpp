// SPDX-License-Identifier: Apache-2.0
//
// Little-endian binary helpers shared by the checkpoint, frame and
// embedding-store formats.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "reusevit/error.hpp"

namespace reusevit::io {

template <class U>
  requires std::is_unsigned_v<U>
void put_uint(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(buf.data(), buf.size());
}

template <class U>
  requires std::is_unsigned_v<U>
U get_uint(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf{};
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size())) throw FormatError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline void put_f32(std::ostream& os, float v) { put_uint(os, std::bit_cast<std::uint32_t>(v)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_uint<std::uint32_t>(is)); }

inline void put_f32s(std::ostream& os, std::span<const float> v) {
  for (float x : v) put_f32(os, x);
}
inline void get_f32s(std::istream& is, std::span<float> out) {
  for (auto& x : out) x = get_f32(is);
}

inline void put_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic, const std::string& what) {
  std::array<char, 4> buf{};
  if (!is.read(buf.data(), 4) || std::string_view(buf.data(), 4) != magic)
    throw FormatError(what + ": bad magic, expected \"" + std::string(magic) + "\"");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return is;
}

/// 64-bit FNV-1a over raw bytes; used to fingerprint frozen weights.
inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = 1469598103934665603ull) {
  for (auto b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace reusevit::io
