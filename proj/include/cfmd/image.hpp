#pragma once

// Binary PGM (P5) and PPM (P6) with maxval 255. Pixels map to [0, 1].

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cfmd/error.hpp"
#include "cfmd/npy.hpp"
#include "cfmd/tensor.hpp"

namespace cfmd {

namespace image_detail {

struct PnmReader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void skip_space_and_comments() {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + (buf[pos] - '0');
      if (v > (1u << 24)) throw FormatError(std::string(what) + " too large", start);
      ++pos;
    }
    if (pos == start) throw FormatError(std::string("expected ") + what, start);
    return v;
  }
};

}  // namespace image_detail

template <Scalar T>
Tensor<T> image_decode(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    throw FormatError("expected P5 or P6 magic", 0);
  }
  const std::size_t channels = buf[1] == '5' ? 1 : 3;
  image_detail::PnmReader r{buf, 2};
  const std::size_t width = r.number("width");
  const std::size_t height = r.number("height");
  const std::size_t maxval_at = r.pos;
  const std::size_t maxval = r.number("maxval");
  if (maxval != 255) throw FormatError("maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (r.pos >= buf.size() || !std::isspace(buf[r.pos])) throw FormatError("missing separator before raster", r.pos);
  ++r.pos;
  const std::size_t count = width * height * channels;
  if (buf.size() < r.pos + count) throw FormatError("truncated raster", buf.size());
  Tensor<T> t(Shape(1, channels, height, width));
  auto d = t.mutable_data();
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        d[(c * height + y) * width + x] = static_cast<T>(buf[r.pos + (y * width + x) * channels + c]) / T(255);
      }
  return t;
}

inline std::uint8_t quantize_unit(double v) {
  if (!(v >= 0)) v = 0;  // also maps NaN to 0
  if (v > 1) v = 1;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

template <Scalar T>
std::vector<std::uint8_t> image_encode(const Tensor<T>& t) {
  const Shape& s = t.shape();
  if (s.n() != 1) throw ContractError("image_write expects batch 1, got " + s.str());
  if (s.c() != 1 && s.c() != 3) throw ContractError("image_write expects 1 or 3 channels, got " + s.str());
  const std::string header = std::string(s.c() == 1 ? "P5" : "P6") + "\n" + std::to_string(s.w()) + " " +
                             std::to_string(s.h()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + s.numel());
  for (std::size_t y = 0; y < s.h(); ++y)
    for (std::size_t x = 0; x < s.w(); ++x)
      for (std::size_t c = 0; c < s.c(); ++c) out.push_back(quantize_unit(static_cast<double>(t.at(0, c, y, x))));
  return out;
}

template <Scalar T>
Tensor<T> image_read(const std::string& path) {
  return image_decode<T>(read_file_bytes(path));
}

template <Scalar T>
void image_write(const Tensor<T>& t, const std::string& path) {
  write_file_bytes(path, image_encode(t));
}

}  // namespace cfmd
