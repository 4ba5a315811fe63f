#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "cfmd/error.hpp"
#include "cfmd/rng.hpp"

namespace cfmd {

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

enum class DType { f32, f64 };

template <Scalar T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

/// Rank-4 extents (N, C, H, W); W varies fastest in memory.
struct Shape {
  std::array<std::size_t, 4> dims{0, 0, 0, 0};

  constexpr Shape() = default;
  constexpr Shape(std::size_t n, std::size_t c, std::size_t h, std::size_t w) : dims{n, c, h, w} {}

  constexpr std::size_t n() const { return dims[0]; }
  constexpr std::size_t c() const { return dims[1]; }
  constexpr std::size_t h() const { return dims[2]; }
  constexpr std::size_t w() const { return dims[3]; }
  constexpr std::size_t operator[](std::size_t i) const { return dims[i]; }

  /// Total element count; throws a size error on overflow.
  std::size_t numel() const {
    std::size_t total = 1;
    for (std::size_t d : dims) {
      if (d != 0 && total > std::numeric_limits<std::size_t>::max() / d) {
        throw Error(ErrorKind::size, "size error: element count overflows for shape " + str());
      }
      total *= d;
    }
    return total;
  }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * dims[1] + c) * dims[2] + h) * dims[3] + w;
  }

  std::string str() const {
    return "(" + std::to_string(dims[0]) + "," + std::to_string(dims[1]) + "," +
           std::to_string(dims[2]) + "," + std::to_string(dims[3]) + ")";
  }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

/// Dense rank-4 tensor with shared, copy-on-write storage. Copies are cheap and
/// never alias observable mutation.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(std::make_shared<std::vector<T>>(shape.numel(), fill)) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(shape), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (data_->size() != shape_.numel()) {
      throw ShapeError("data length " + std::to_string(data_->size()) + " != numel of " +
                       shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_->size(); }
  bool empty() const { return data_->empty(); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }

  /// Mutable view; detaches from any other owner first.
  std::span<T> mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
    return {data_->data(), data_->size()};
  }

  T operator[](std::size_t i) const { return (*data_)[i]; }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return (*data_)[shape_.offset(n, c, h, w)];
  }

  /// Same storage order, different extents.
  Tensor reshaped(Shape s) const {
    if (s.numel() != numel()) throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    Tensor out = *this;
    out.shape_ = s;
    return out;
  }

  template <Scalar U>
  Tensor<U> cast() const {
    std::vector<U> v(numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(v));
  }

  bool all_finite() const {
    for (T v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool bitwise_equal(const Tensor& o) const {
    return shape_ == o.shape_ && numel() == o.numel() &&
           (numel() == 0 || std::memcmp(data_->data(), o.data_->data(), numel() * sizeof(T)) == 0);
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Construction

struct Zeros {};
struct Ones {};
struct Uniform {
  double lo, hi;
  Rng* rng;
};
struct Normal {
  double mean, stddev;
  Rng* rng;
};

template <Scalar T>
Tensor<T> tensor_create(Shape shape, Zeros) {
  return Tensor<T>(shape, T(0));
}

template <Scalar T>
Tensor<T> tensor_create(Shape shape, Ones) {
  return Tensor<T>(shape, T(1));
}

template <Scalar T>
Tensor<T> tensor_create(Shape shape, Uniform u) {
  if (!(u.lo <= u.hi)) throw ContractError("uniform fill requires lo <= hi");
  Tensor<T> t(shape);
  for (T& v : t.mutable_data()) v = static_cast<T>(u.rng->uniform(u.lo, u.hi));
  return t;
}

template <Scalar T>
Tensor<T> tensor_create(Shape shape, Normal nd) {
  if (!(nd.stddev >= 0)) throw ContractError("normal fill requires stddev >= 0");
  Tensor<T> t(shape);
  for (T& v : t.mutable_data()) v = static_cast<T>(nd.mean + nd.stddev * nd.rng->normal());
  return t;
}

template <Scalar T>
Tensor<T> zeros_like(const Tensor<T>& t) {
  return Tensor<T>(t.shape(), T(0));
}

template <Scalar T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff " + a.shape().str() + " vs " + b.shape().str());
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <Scalar T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError(what + " produced non-finite values");
}

}  // namespace cfmd
