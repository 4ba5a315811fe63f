#pragma once

// NPY v1.0 reader/writer for little-endian f4/f8 C-order arrays. The writer
// produces the same bytes as numpy.save: the header dict is padded with spaces
// and a trailing newline so the payload starts on a 64-byte boundary.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "cfmd/error.hpp"
#include "cfmd/tensor.hpp"

namespace cfmd {

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

namespace npy_detail {

inline constexpr char kMagic[] = "\x93NUMPY";
inline constexpr std::size_t kPreamble = 10;  // magic(6) + version(2) + header length(2)

inline std::string shape_tuple(const std::vector<std::size_t>& dims) {
  std::string s = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(dims[i]);
  }
  if (dims.size() == 1) s += ",";
  return s + ")";
}

// Lexical view over the header dict; positions are reported as absolute file offsets.
struct HeaderCursor {
  std::string_view text;
  std::size_t base;

  std::size_t find_key(std::string_view key) const {
    const std::string quoted = "'" + std::string(key) + "'";
    const std::size_t k = text.find(quoted);
    if (k == std::string_view::npos) throw FormatError("header lacks key " + quoted, base);
    std::size_t p = text.find(':', k + quoted.size());
    if (p == std::string_view::npos) throw FormatError("malformed entry for " + quoted, base + k);
    ++p;
    while (p < text.size() && text[p] == ' ') ++p;
    return p;
  }
};

}  // namespace npy_detail

/// Serializes with an explicit shape tuple whose product equals t.numel().
template <Scalar T>
std::vector<std::uint8_t> npy_encode(const Tensor<T>& t, const std::vector<std::size_t>& dims) {
  std::size_t prod = 1;
  for (auto d : dims) prod *= d;
  if (prod != t.numel()) throw ShapeError("npy shape tuple does not match element count");
  std::string header = "{'descr': '";
  header += std::is_same_v<T, float> ? "<f4" : "<f8";
  header += "', 'fortran_order': False, 'shape': " + npy_detail::shape_tuple(dims) + ", }";
  const std::size_t unpadded = npy_detail::kPreamble + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  if (header.size() > 0xffff) throw FormatError("header too long for NPY v1.0", 8);

  std::vector<std::uint8_t> out(npy_detail::kMagic, npy_detail::kMagic + 6);
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
  out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());
  const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data().data());
  out.insert(out.end(), bytes, bytes + t.numel() * sizeof(T));
  return out;
}

template <Scalar T>
std::vector<std::uint8_t> npy_encode(const Tensor<T>& t) {
  const Shape& s = t.shape();
  return npy_encode(t, {s.n(), s.c(), s.h(), s.w()});
}

struct NpyHeader {
  DType dtype;
  std::vector<std::size_t> dims;
  std::size_t data_offset;
};

inline NpyHeader npy_parse_header(const std::vector<std::uint8_t>& buf) {
  using npy_detail::kPreamble;
  if (buf.size() < kPreamble) throw FormatError("file shorter than NPY preamble", buf.size());
  if (std::memcmp(buf.data(), npy_detail::kMagic, 6) != 0) throw FormatError("bad magic", 0);
  if (buf[6] != 1 || buf[7] != 0) {
    throw FormatError("unsupported NPY version " + std::to_string(buf[6]) + "." + std::to_string(buf[7]), 6);
  }
  const std::size_t hlen = buf[8] | (static_cast<std::size_t>(buf[9]) << 8);
  if (buf.size() < kPreamble + hlen) throw FormatError("truncated header", buf.size());
  const npy_detail::HeaderCursor cur{
      std::string_view(reinterpret_cast<const char*>(buf.data()) + kPreamble, hlen), kPreamble};

  NpyHeader h{};
  std::size_t p = cur.find_key("descr");
  if (cur.text.substr(p, 5) == "'<f4'") {
    h.dtype = DType::f32;
  } else if (cur.text.substr(p, 5) == "'<f8'") {
    h.dtype = DType::f64;
  } else {
    const std::size_t e = cur.text.find('\'', p + 1);
    throw FormatError("unsupported dtype " + std::string(cur.text.substr(p, e == std::string_view::npos ? 5 : e - p + 1)),
                      kPreamble + p);
  }
  p = cur.find_key("fortran_order");
  if (cur.text.substr(p, 5) != "False") throw FormatError("fortran_order arrays are not supported", kPreamble + p);
  p = cur.find_key("shape");
  if (p >= cur.text.size() || cur.text[p] != '(') throw FormatError("shape is not a tuple", kPreamble + p);
  const std::size_t close = cur.text.find(')', p);
  if (close == std::string_view::npos) throw FormatError("unterminated shape tuple", kPreamble + p);
  std::size_t value = 0;
  bool in_number = false;
  for (std::size_t i = p + 1; i < close; ++i) {
    const char c = cur.text[i];
    if (c >= '0' && c <= '9') {
      value = value * 10 + static_cast<std::size_t>(c - '0');
      in_number = true;
    } else if (c == ',' || c == ' ') {
      if (in_number) h.dims.push_back(value);
      value = 0;
      in_number = false;
    } else {
      throw FormatError("unexpected character in shape tuple", kPreamble + i);
    }
  }
  if (in_number) h.dims.push_back(value);
  if (h.dims.size() > 4) throw FormatError("rank above 4 is not supported", kPreamble + p);
  h.data_offset = kPreamble + hlen;
  return h;
}

/// Decodes into a rank-4 tensor; lower-rank arrays gain leading unit axes.
template <Scalar T>
Tensor<T> npy_decode(const std::vector<std::uint8_t>& buf) {
  const NpyHeader h = npy_parse_header(buf);
  if (h.dtype != dtype_of<T>()) {
    throw FormatError(std::string("file holds ") + dtype_name(h.dtype) + ", requested " + dtype_name(dtype_of<T>()),
                      npy_detail::kPreamble);
  }
  std::array<std::size_t, 4> d{1, 1, 1, 1};
  for (std::size_t i = 0; i < h.dims.size(); ++i) d[4 - h.dims.size() + i] = h.dims[i];
  const Shape shape(d[0], d[1], d[2], d[3]);
  const std::size_t bytes = shape.numel() * sizeof(T);
  if (buf.size() < h.data_offset + bytes) throw FormatError("truncated payload", buf.size());
  std::vector<T> values(shape.numel());
  std::memcpy(values.data(), buf.data() + h.data_offset, bytes);
  return Tensor<T>(shape, std::move(values));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

template <Scalar T>
void npy_write(const Tensor<T>& t, const std::string& path) {
  write_file_bytes(path, npy_encode(t));
}

template <Scalar T>
Tensor<T> npy_read(const std::string& path) {
  return npy_decode<T>(read_file_bytes(path));
}

/// Peeks at the dtype stored in a file.
inline DType npy_file_dtype(const std::string& path) { return npy_parse_header(read_file_bytes(path)).dtype; }

}  // namespace cfmd
