#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "cfmd/autodiff.hpp"
#include "cfmd/image.hpp"
#include "cfmd/npy.hpp"
#include "cfmd/testing/oracles.hpp"

using namespace cfmd;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

// Reference xoshiro256** seeded by splitmix64, written from the published algorithm.
struct Xoshiro {
  std::uint64_t s[4];
  explicit Xoshiro(std::uint64_t seed) {
    for (auto& v : s) {
      seed += 0x9e3779b97f4a7c15ULL;
      std::uint64_t z = seed;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      v = z ^ (z >> 31);
    }
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t r = rotl(s[1] * 5, 7) * 9, t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return r;
  }
};

}  // namespace

TEST(TensorCreate, ZerosAndOnes) {
  const auto z = tensor_create<float>(Shape(1, 1, 2, 2), Zeros{});
  EXPECT_EQ(z.shape(), Shape(1, 1, 2, 2));
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
  const auto o = tensor_create<double>(Shape(1, 1, 1, 1), Ones{});
  ASSERT_EQ(o.numel(), 1u);
  EXPECT_EQ(o[0], 1.0);
}

TEST(TensorCreate, UniformIsDeterministicUnderSeed) {
  Rng a(7), b(7);
  const auto x = tensor_create<float>(Shape(2, 3, 4, 4), Uniform{0, 1, &a});
  const auto y = tensor_create<float>(Shape(2, 3, 4, 4), Uniform{0, 1, &b});
  EXPECT_TRUE(x.bitwise_equal(y));
  for (float v : x.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(TensorCreate, OverflowingShapeIsSizeError) {
  const std::size_t big = std::size_t{1} << 20;
  try {
    (void)Shape(big, big, big, big).numel();
    FAIL() << "expected a size error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::size);
  }
}

TEST(Tensor, CopyOnWriteDetaches) {
  Tensor<float> a(Shape(1, 1, 1, 3), 1.0f);
  Tensor<float> b = a;
  b.mutable_data()[0] = 5.0f;
  EXPECT_EQ(a[0], 1.0f);
  EXPECT_EQ(b[0], 5.0f);
}

TEST(Tensor, WrongDataLengthIsShapeError) {
  EXPECT_THROW(Tensor<float>(Shape(1, 1, 2, 2), std::vector<float>(3)), ShapeError);
}

TEST(Rng, MatchesReferenceXoshiro256StarStar) {
  for (std::uint64_t seed : {0ull, 1ull, 42ull, 0xdeadbeefcafef00dull}) {
    Rng r(seed);
    Xoshiro ref(seed);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(r.next_u64(), ref.next()) << "seed " << seed << " draw " << i;
  }
}

TEST(Rng, DeriveDoesNotAdvanceAndSplitDoes) {
  Rng a(3), b(3);
  (void)a.derive(11);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(3), d(3);
  (void)c.split();
  EXPECT_NE(c.next_u64(), d.next_u64());
  EXPECT_EQ(Rng(5).derive(1).next_u64(), Rng(5).derive(1).next_u64());
  EXPECT_NE(Rng(5).derive(1).next_u64(), Rng(5).derive(2).next_u64());
}

TEST(Elementwise, ScalarExamples) {
  Tape<double> t;
  const auto zero = t.constant(Tensor<double>(Shape(1, 1, 1, 1), 0.0));
  EXPECT_EQ(tanh(zero).value()[0], 0.0);
  EXPECT_EQ(sigmoid(zero).value()[0], 0.5);
  EXPECT_EQ(softplus(zero).value()[0], std::log(2.0));
}

TEST(Elementwise, GeluMatchesGaussianCdfQuadrature) {
  Tape<double> t;
  const std::vector<double> xs{-3, -1, 0, 1, 3};
  const auto y = gelu(t.constant(Tensor<double>(Shape(1, 1, 1, 5), xs))).value();
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_NEAR(y[i], oracle::gelu(xs[i]), 1e-12) << "x = " << xs[i];
}

TEST(Elementwise, RangesOnLargeInputs) {
  Rng r(1);
  Tape<float> t;
  const auto x = t.constant(oracle::random_tensor<float>(Shape(1, 2, 8, 8), r, -40, 40));
  for (float v : tanh(x).value().data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  for (float v : sigmoid(x).value().data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_TRUE(softplus(x).value().all_finite());
  EXPECT_TRUE(silu(x).value().all_finite());
}

TEST(Elementwise, DispatcherMatchesNamedOps) {
  Rng r(2);
  Tape<double> t;
  const auto a = t.constant(oracle::random_tensor<double>(Shape(1, 2, 3, 3), r));
  const auto b = t.constant(oracle::random_tensor<double>(Shape(1, 2, 1, 1), r));
  EXPECT_TRUE(elementwise(Elementwise::add, a, &b).value().bitwise_equal(add(a, b).value()));
  EXPECT_TRUE(elementwise<double>(Elementwise::scale, a, nullptr, 3.0).value().bitwise_equal(scale(a, 3.0).value()));
  EXPECT_TRUE(elementwise(Elementwise::gelu, a).value().bitwise_equal(gelu(a).value()));
}

TEST(Elementwise, ShapeMismatchIsShapeError) {
  Tape<float> t;
  const auto a = t.constant(Tensor<float>(Shape(1, 2, 3, 3)));
  const auto b = t.constant(Tensor<float>(Shape(1, 3, 1, 1)));
  const auto c = t.constant(Tensor<float>(Shape(1, 2, 3, 2)));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, c), ShapeError);
}

TEST(Elementwise, BroadcastEqualsTiling) {
  Rng r(3);
  const auto a = oracle::random_tensor<double>(Shape(2, 3, 4, 5), r);
  const auto b = oracle::random_tensor<double>(Shape(2, 3, 1, 1), r);
  const auto bt = oracle::tile(b, a.shape());
  Tape<double> t;
  const auto m = mul(t.constant(a), t.constant(b)).value();
  const auto s = sub(t.constant(b), t.constant(a)).value();
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_EQ(m[i], a[i] * bt[i]);
    EXPECT_EQ(s[i], bt[i] - a[i]);
  }
}

TEST(MatmulLastdim, IdentityZeroAndOracle) {
  Rng r(4);
  const auto a = oracle::random_tensor<double>(Shape(1, 1, 4, 3), r);
  Tensor<double> eye(Shape(1, 1, 3, 3));
  for (std::size_t i = 0; i < 3; ++i) eye.mutable_data()[i * 3 + i] = 1;
  Tape<double> t;
  EXPECT_TRUE(matmul_lastdim(t.constant(a), t.constant(eye)).value().bitwise_equal(a));
  for (double v : matmul_lastdim(t.constant(a), t.constant(Tensor<double>(Shape(1, 1, 3, 2)))).value().data()) {
    EXPECT_EQ(v, 0.0);
  }
  const auto w = oracle::random_tensor<double>(Shape(1, 1, 3, 2), r);
  const auto y = matmul_lastdim(t.constant(a), t.constant(w)).value();
  const auto want = oracle::matmul(a, w);
  ASSERT_EQ(y.shape(), Shape(1, 1, 4, 2));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
}

TEST(MatmulLastdim, InnerMismatchIsShapeError) {
  Tape<float> t;
  EXPECT_THROW(matmul_lastdim(t.constant(Tensor<float>(Shape(1, 1, 4, 3))), t.constant(Tensor<float>(Shape(1, 1, 2, 2)))),
               ShapeError);
}

TEST(Backward, SumOfSquares) {
  Rng r(5);
  const auto x = oracle::random_tensor<double>(Shape(1, 2, 3, 3), r);
  Tape<double> t;
  const auto v = t.leaf(x);
  const auto g = t.backward(sum(mul(v, v)));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(g.at(v.id())[i], 2 * x[i]);
}

TEST(Backward, LinearInConstantBroadcast) {
  Rng r(6);
  const auto x = oracle::random_tensor<double>(Shape(2, 3, 2, 2), r);
  const auto c = oracle::random_tensor<double>(Shape(2, 3, 1, 1), r);
  Tape<double> t;
  const auto v = t.leaf(x);
  const auto vc = t.constant(c);
  const auto g = t.backward(sum(mul(vc, v)));
  const auto ct = oracle::tile(c, x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(g.at(v.id())[i], ct[i]);
  EXPECT_EQ(g.count(vc.id()), 0u);
}

TEST(Backward, UnreachedLeafGetsZeroGradient) {
  Tape<double> t;
  const auto a = t.leaf(Tensor<double>(Shape(1, 1, 1, 2), 3.0));
  const auto unused = t.leaf(Tensor<double>(Shape(1, 1, 2, 2), 1.0));
  const auto g = t.backward(sum(a));
  for (double v : g.at(unused.id()).data()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarRootAndReuseAreContractErrors) {
  Tape<double> t;
  const auto a = t.leaf(Tensor<double>(Shape(1, 1, 1, 2), 3.0));
  EXPECT_THROW(t.backward(a), ContractError);
  (void)t.backward(sum(a));
  EXPECT_THROW(t.backward(sum(a)), ContractError);
}

TEST(FiniteDiff, SumHasExactGradient) {
  Rng r(7);
  const auto x = oracle::random_tensor<double>(Shape(1, 2, 3, 4), r);
  const auto res = finite_diff_check<double>([](Tape<double>&, const Var<double>& v) { return sum(v); }, x);
  EXPECT_LT(res.max_rel_error, 1e-10);
  EXPECT_EQ(res.checked, x.numel());
}

TEST(FiniteDiff, SigmoidAtZeroIsQuarter) {
  const Tensor<double> x(Shape(1, 1, 2, 3), 0.0);
  Tape<double> t;
  const auto v = t.leaf(x);
  const auto g = t.backward(sum(sigmoid(v)));
  for (double e : g.at(v.id()).data()) EXPECT_DOUBLE_EQ(e, 0.25);
  const auto res = finite_diff_check<double>([](Tape<double>&, const Var<double>& a) { return sum(sigmoid(a)); }, x);
  EXPECT_LT(res.max_rel_error, 1e-8);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  GradCheckOptions opt;
  opt.analytic_scale = 1.5;
  Rng r(8);
  const auto x = oracle::random_tensor<double>(Shape(1, 1, 2, 2), r);
  const auto res = finite_diff_check<double>([](Tape<double>&, const Var<double>& v) { return sum(mul(v, v)); }, x, opt);
  EXPECT_GT(res.max_rel_error, 0.3);
}

TEST(FiniteDiff, NonFiniteEvaluationIsReported) {
  const Tensor<double> x(Shape(1, 1, 1, 1), 1.0);
  EXPECT_THROW(finite_diff_check<double>(
                   [](Tape<double>& t, const Var<double>& v) {
                     return mul(v, t.constant(Tensor<double>(Shape(1, 1, 1, 1), INFINITY)));
                   },
                   x),
               NumericError);
}

TEST(Npy, RoundTripBothDtypes) {
  Rng r(9);
  const auto f = tensor_create<float>(Shape(2, 3, 4, 5), Normal{0, 1, &r});
  const auto d = tensor_create<double>(Shape(2, 3, 4, 5), Normal{0, 1, &r});
  EXPECT_TRUE(npy_decode<float>(npy_encode(f)).bitwise_equal(f));
  EXPECT_TRUE(npy_decode<double>(npy_encode(d)).bitwise_equal(d));
}

TEST(Npy, HeaderMatchesHandAssembly) {
  // v1.0 layout: magic, version 1.0, little-endian u16 header length, then the
  // dict padded with spaces and a final newline to a 64-byte boundary.
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (1,), }";
  const std::size_t total = (10 + dict.size() + 1 + 63) / 64 * 64;
  dict += std::string(total - 10 - dict.size() - 1, ' ') + "\n";
  std::string expected = std::string("\x93NUMPY", 6) + '\x01' + '\x00';
  expected += static_cast<char>(dict.size() & 0xff);
  expected += static_cast<char>(dict.size() >> 8);
  expected += dict;
  const float value = 1.5f;  // 0x3fc00000
  expected += std::string("\x00\x00\xc0\x3f", 4);
  const auto got = npy_encode(Tensor<float>(Shape(1, 1, 1, 1), value), {1});
  ASSERT_EQ(got.size(), expected.size());
  EXPECT_EQ(std::memcmp(got.data(), expected.data(), 16), 0) << "first 16 header bytes";
  EXPECT_EQ(got, bytes_of(expected));
}

TEST(Npy, RejectsBigEndianBadMagicAndTruncation) {
  auto good = npy_encode(Tensor<float>(Shape(1, 1, 2, 2), 1.0f));
  auto big = good;
  const std::string text(big.begin(), big.end());
  const auto at = text.find("<f4");
  big[at] = '>';
  EXPECT_THROW(npy_decode<float>(big), FormatError);
  auto magic = good;
  magic[1] = 'X';
  try {
    npy_decode<float>(magic);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  try {
    npy_decode<float>(truncated);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 10u);
  }
  EXPECT_THROW(npy_decode<double>(good), FormatError);
}

TEST(Image, BlackPgmIsZero) {
  const auto t = image_decode<float>(bytes_of(std::string("P5\n2 2\n255\n") + std::string(4, '\0')));
  EXPECT_EQ(t.shape(), Shape(1, 1, 2, 2));
  for (float v : t.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Image, PpmBytesMapToChannels) {
  std::vector<std::uint8_t> px;
  for (int i = 1; i <= 18; ++i) px.push_back(static_cast<std::uint8_t>(10 * i));
  auto buf = bytes_of("P6\n3 2\n255\n");
  buf.insert(buf.end(), px.begin(), px.end());
  const auto t = image_decode<double>(buf);
  ASSERT_EQ(t.shape(), Shape(1, 3, 2, 3));
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 3; ++x)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(t.at(0, c, y, x), px[(y * 3 + x) * 3 + c] / 255.0);
  EXPECT_EQ(image_encode(t), buf);
}

TEST(Image, QuantizationFixpoint) {
  Rng r(10);
  const auto t = oracle::random_tensor<float>(Shape(1, 3, 5, 7), r, -0.5, 1.5);
  const auto once = image_decode<float>(image_encode(t));
  const auto twice = image_decode<float>(image_encode(once));
  EXPECT_TRUE(once.bitwise_equal(twice));
  for (float v : once.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Image, FormatAndContractErrors) {
  EXPECT_THROW(image_decode<float>(bytes_of("P3\n1 1\n255\n1 2 3")), FormatError);
  EXPECT_THROW(image_decode<float>(bytes_of(std::string("P5\n1 1\n65535\n") + std::string(2, '\0'))), FormatError);
  EXPECT_THROW(image_decode<float>(bytes_of("P5\n2 2\n255\n\x01")), FormatError);
  EXPECT_THROW(image_encode(Tensor<float>(Shape(1, 2, 2, 2))), ContractError);
}
