#pragma once

// Binary tensor files ("RRST") and content hashing for artifacts.
//
// Layout, all integers little-endian:
//   bytes 0-3   magic "RRST"
//   bytes 4-5   u16 version (1)
//   bytes 6-7   u16 dtype code (1 = f32 little-endian)
//   bytes 8-11  u32 rank
//   then rank x u64 dims, then the row-major f32 payload.

#include "rrs/common.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace rrs {

inline constexpr std::array<char, 4> kTensorMagic = {'R', 'R', 'S', 'T'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint16_t kDtypeF32 = 1;

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  std::uint64_t numel() const {
    return std::accumulate(dims.begin(), dims.end(), std::uint64_t{1}, std::multiplies<>());
  }
  bool operator==(const Tensor&) const = default;
};

inline std::size_t tensor_header_size(std::size_t rank) { return 12 + 8 * rank; }

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  if (t.numel() != t.data.size())
    throw std::invalid_argument("tensor payload size does not match its dims");
  std::string out;
  out.reserve(tensor_header_size(t.dims.size()) + 4 * t.data.size());
  out.append(kTensorMagic.data(), kTensorMagic.size());
  detail::put_le<std::uint16_t>(out, kTensorVersion);
  detail::put_le<std::uint16_t>(out, kDtypeF32);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) detail::put_le<std::uint64_t>(out, d);
  for (float f : t.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline Tensor decode_tensor(std::span<const unsigned char> bytes, const std::string& what = "tensor") {
  if (bytes.size() < 12) throw FormatError(what + ": file too short for header");
  if (std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0) throw FormatError(what + ": bad magic");
  const auto version = detail::get_le<std::uint16_t>(bytes.data() + 4);
  if (version != kTensorVersion)
    throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto dtype = detail::get_le<std::uint16_t>(bytes.data() + 6);
  if (dtype != kDtypeF32) throw FormatError(what + ": unsupported dtype code " + std::to_string(dtype));
  const auto rank = detail::get_le<std::uint32_t>(bytes.data() + 8);
  const std::size_t header = tensor_header_size(rank);
  if (bytes.size() < header) throw FormatError(what + ": truncated dims");
  Tensor t;
  t.dims.resize(rank);
  for (std::uint32_t i = 0; i < rank; ++i) t.dims[i] = detail::get_le<std::uint64_t>(bytes.data() + 12 + 8 * i);
  const std::uint64_t expected = 4 * t.numel();
  const std::uint64_t actual = bytes.size() - header;
  if (expected != actual)
    throw FormatError(what + ": payload size mismatch, expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(actual));
  t.data.resize(t.numel());
  for (std::size_t i = 0; i < t.data.size(); ++i)
    t.data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes.data() + header + 4 * i));
  return t;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file_bytes(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  return decode_tensor({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()}, path.string());
}

template <typename T>
Tensor to_tensor(const Matrix<T>& m) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.resize(m.size());
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[i] = static_cast<float>(m.data()[i]);
  return t;
}

template <typename T>
Tensor to_tensor(const Vector<T>& v) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(v.size())};
  t.data.resize(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
  return t;
}

template <typename T>
Matrix<T> to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw FormatError("expected a rank-2 tensor, got rank " + std::to_string(t.dims.size()));
  Matrix<T> m(static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.data[i]);
  return m;
}

template <typename T>
Vector<T> to_vector(const Tensor& t) {
  if (t.dims.size() != 1) throw FormatError("expected a rank-1 tensor, got rank " + std::to_string(t.dims.size()));
  Vector<T> v(static_cast<Eigen::Index>(t.dims[0]));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(t.data[i]);
  return v;
}

/// Hex SHA-256 of a byte string.
inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file_bytes(path)); }

/// Hash of a directory tree: relative paths and file contents in sorted order.
inline std::string sha256_tree(const std::filesystem::path& root) {
  if (std::filesystem::is_regular_file(root)) return sha256_file(root);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) {
    acc += std::filesystem::relative(f, root).generic_string();
    acc += '\0';
    acc += sha256_file(f);
    acc += '\n';
  }
  return sha256_hex(acc);
}

}  // namespace rrs
