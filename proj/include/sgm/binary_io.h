#pragma once

// Little-endian primitives shared by the model, checkpoint, and keypoint
// file formats.

#include "sgm/tensor.h"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace sgm::binary {

template <class U>
void write_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <class U>
U read_le(std::istream& in, std::string_view what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size()))
    throw Error(ErrorKind::format, "truncated file while reading " + std::string(what));
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
inline void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }
inline void write_f32(std::ostream& out, float v) { write_le(out, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t read_u32(std::istream& in, std::string_view what) { return read_le<std::uint32_t>(in, what); }
inline std::uint64_t read_u64(std::istream& in, std::string_view what) { return read_le<std::uint64_t>(in, what); }
inline double read_f64(std::istream& in, std::string_view what) {
  return std::bit_cast<double>(read_le<std::uint64_t>(in, what));
}
inline float read_f32(std::istream& in, std::string_view what) {
  return std::bit_cast<float>(read_le<std::uint32_t>(in, what));
}

inline void write_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), magic.size()); }

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!in.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic)
    throw Error(ErrorKind::format, "bad magic: expected \"" + std::string(magic) + "\"");
}

/// u32 rows, u32 cols, then rows*cols f64 values.
inline void write_tensor(std::ostream& out, const Matrix& m) {
  write_u32(out, static_cast<std::uint32_t>(m.rows()));
  write_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) write_f64(out, v);
}

/// Reads a tensor whose shape must equal target's current shape.
inline void read_tensor_into(std::istream& in, Matrix& target, std::string_view what) {
  const std::uint32_t rows = read_u32(in, what);
  const std::uint32_t cols = read_u32(in, what);
  if (rows != target.rows() || cols != target.cols())
    throw Error(ErrorKind::format, "tensor shape mismatch in " + std::string(what) + ": file has " +
                                       std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                                       target.shape_string());
  for (double& v : target.data()) v = read_f64(in, what);
}

inline bool at_end(std::istream& in) { return in.peek() == std::char_traits<char>::eof(); }

/// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sgm::binary
