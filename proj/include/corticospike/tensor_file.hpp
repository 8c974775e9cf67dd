#pragma once

// "AADT" tensor files: 4-byte magic, u8 version, u8 dtype code, u8 ndim,
// ndim little-endian u32 dims, then the row-major little-endian payload.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"

namespace corticospike::io {

inline constexpr std::array<char, 4> kTensorMagic{'A', 'A', 'D', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

enum class DType : std::uint8_t { f32 = 0, i16 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 2; }

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::variant<std::vector<float>, std::vector<std::int16_t>> values;

  DType dtype() const {
    return std::holds_alternative<std::vector<float>>(values) ? DType::f32
                                                              : DType::i16;
  }
  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims)
      n *= d;
    return n;
  }
  const std::vector<float> &f32() const {
    return std::get<std::vector<float>>(values);
  }
  const std::vector<std::int16_t> &i16() const {
    return std::get<std::vector<std::int16_t>>(values);
  }

  friend bool operator==(const Tensor &, const Tensor &) = default;
};

namespace detail {
inline void put_u32(std::vector<unsigned char> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}
inline std::uint32_t get_u32(const unsigned char *p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}
} // namespace detail

inline std::vector<unsigned char> encode_tensor(const Tensor &t) {
  if (t.dims.size() > 255)
    throw FormatError("ndim", "more than 255 dimensions");
  const std::size_t count = t.element_count();
  std::vector<unsigned char> out;
  out.reserve(7 + 4 * t.dims.size() + count * dtype_size(t.dtype()));
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(kTensorVersion);
  out.push_back(static_cast<unsigned char>(t.dtype()));
  out.push_back(static_cast<unsigned char>(t.dims.size()));
  for (auto d : t.dims)
    detail::put_u32(out, d);
  if (t.dtype() == DType::f32) {
    const auto &v = t.f32();
    if (v.size() != count)
      throw FormatError("payload", "value count does not match dims");
    for (float f : v) {
      if (!std::isfinite(f))
        throw DataError("tensor contains a non-finite value");
      detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  } else {
    const auto &v = t.i16();
    if (v.size() != count)
      throw FormatError("payload", "value count does not match dims");
    for (std::int16_t s : v) {
      const auto u = static_cast<std::uint16_t>(s);
      out.push_back(static_cast<unsigned char>(u & 0xFFu));
      out.push_back(static_cast<unsigned char>(u >> 8));
    }
  }
  return out;
}

inline Tensor decode_tensor(const std::vector<unsigned char> &bytes) {
  if (bytes.size() < 4 ||
      std::memcmp(bytes.data(), kTensorMagic.data(), kTensorMagic.size()) != 0)
    throw FormatError("magic", "expected \"AADT\"");
  if (bytes.size() < 7)
    throw FormatError("version", "truncated header");
  if (bytes[4] != kTensorVersion)
    throw FormatError("version", "unsupported version " + std::to_string(bytes[4]));
  if (bytes[5] > 1)
    throw FormatError("dtype", "unknown dtype code " + std::to_string(bytes[5]));
  const auto dtype = static_cast<DType>(bytes[5]);
  const std::size_t ndim = bytes[6];
  if (ndim == 0)
    throw FormatError("ndim", "zero dimensions");
  if (bytes.size() < 7 + 4 * ndim)
    throw FormatError("dims", "truncated dimension list");

  Tensor t;
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint32_t d = detail::get_u32(bytes.data() + 7 + 4 * i);
    t.dims.push_back(d);
    count *= d;
  }
  const std::size_t offset = 7 + 4 * ndim;
  const std::size_t payload = bytes.size() - offset;
  if (payload != count * dtype_size(dtype))
    throw FormatError("payload", "expected " +
                                     std::to_string(count * dtype_size(dtype)) +
                                     " payload bytes, found " +
                                     std::to_string(payload));
  const unsigned char *p = bytes.data() + offset;
  if (dtype == DType::f32) {
    std::vector<float> v(count);
    for (std::size_t i = 0; i < count; ++i)
      v[i] = std::bit_cast<float>(detail::get_u32(p + 4 * i));
    t.values = std::move(v);
  } else {
    std::vector<std::int16_t> v(count);
    for (std::size_t i = 0; i < count; ++i)
      v[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(
          p[2 * i] | (static_cast<unsigned>(p[2 * i + 1]) << 8)));
    t.values = std::move(v);
  }
  return t;
}

inline void write_tensor(const std::filesystem::path &path, const Tensor &t) {
  const auto bytes = encode_tensor(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    throw DataError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char *>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os)
    throw DataError("failed writing " + path.string());
}

inline Tensor read_tensor(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

template <typename T> Tensor to_tensor(const Matrix<T> &m) {
  return {{static_cast<std::uint32_t>(m.rows()),
           static_cast<std::uint32_t>(m.cols())},
          std::vector<float>(m.data().begin(), m.data().end())};
}

template <typename T> Matrix<T> to_matrix(const Tensor &t) {
  if (t.dims.size() != 2)
    throw FormatError("ndim", "expected a 2-D tensor, found " +
                                  std::to_string(t.dims.size()) + "-D");
  if (t.dtype() == DType::f32)
    return Matrix<T>(t.dims[0], t.dims[1],
                     std::vector<T>(t.f32().begin(), t.f32().end()));
  return Matrix<T>(t.dims[0], t.dims[1],
                   std::vector<T>(t.i16().begin(), t.i16().end()));
}

template <typename T>
void write_matrix(const std::filesystem::path &path, const Matrix<T> &m) {
  write_tensor(path, to_tensor(m));
}

template <typename T> Matrix<T> read_matrix(const std::filesystem::path &path) {
  return to_matrix<T>(read_tensor(path));
}

} // namespace corticospike::io
