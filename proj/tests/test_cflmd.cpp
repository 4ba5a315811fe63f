#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cfmd/cflmd.hpp"
#include "cfmd/testing/oracles.hpp"

using namespace cfmd;

namespace {

TensorD rnd(Rng& r, Shape s, double a = 0.5) { return oracle::random_tensor<double>(s, r, -a, a); }

DumParams<double> make_dum(Tape<double>& t, Rng& r, std::size_t C, std::size_t Cm, std::size_t s, std::size_t G,
                           double offset_scale = 1.0, OffsetVariant variant = OffsetVariant::tanh_bounded,
                           OffsetOrder order = OffsetOrder::linear_then_shuffle) {
  DumParams<double> p;
  p.conv = {t.constant(rnd(r, Shape(Cm, C, 1, 1))), t.constant(rnd(r, Shape(1, Cm, 1, 1)))};
  p.dw = {t.constant(rnd(r, Shape(Cm, 1, 3, 3))), t.constant(rnd(r, Shape(1, Cm, 1, 1)))};
  const bool low = order == OffsetOrder::linear_then_shuffle;
  const std::size_t out = low ? 2 * s * s * G : 2 * G;
  p.offset_w = t.constant(rnd(r, Shape(out, low ? Cm : Cm / (s * s), 1, 1), offset_scale));
  p.scope_w1 = t.constant(rnd(r, Shape(out, low ? C : C / (s * s), 1, 1), offset_scale));
  p.scope_w2 = t.constant(rnd(r, Shape(out, low ? C : C / (s * s), 1, 1), offset_scale));
  p.scale = s;
  p.groups = G;
  p.variant = variant;
  p.order = order;
  return p;
}

}  // namespace

TEST(DumMid, ZeroWeightsGiveDwconvBias) {
  Rng r(1);
  Tape<double> t;
  auto p = make_dum(t, r, 4, 6, 2, 2);
  p.conv = {t.constant(TensorD(Shape(6, 4, 1, 1))), std::nullopt};
  p.dw.weight = t.constant(TensorD(Shape(6, 1, 3, 3)));
  const auto bias = p.dw.bias->value();
  const auto y = dum_mid(t.constant(rnd(r, Shape(2, 4, 5, 5))), p).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 6; ++c)
      for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y[y.shape().offset(n, c, 0, 0) + i], bias[c]);
  p.dw.bias.reset();
  for (double v : dum_mid(t.constant(rnd(r, Shape(1, 4, 3, 3))), p).value().data()) EXPECT_EQ(v, 0.0);
}

TEST(DumMid, IdentityConvAndDeltaKernelGiveGelu) {
  Rng r(2);
  Tape<double> t;
  auto p = make_dum(t, r, 3, 3, 2, 1);
  TensorD eye(Shape(3, 3, 1, 1)), delta(Shape(3, 1, 3, 3));
  for (std::size_t i = 0; i < 3; ++i) {
    eye.mutable_data()[4 * i] = 1;
    delta.mutable_data()[9 * i + 4] = 1;
  }
  p.conv = {t.constant(eye), std::nullopt};
  p.dw = {t.constant(delta), std::nullopt};
  const auto x = rnd(r, Shape(1, 3, 4, 4), 3);
  const auto y = dum_mid(t.constant(x), p).value();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], oracle::gelu(x[i]), 1e-12);
}

TEST(DumMid, GradientMatchesFiniteDifferences) {
  Rng r(3);
  const std::vector<TensorD> in{rnd(r, Shape(1, 3, 4, 4), 1), rnd(r, Shape(5, 3, 1, 1)), rnd(r, Shape(1, 5, 1, 1)),
                                rnd(r, Shape(5, 1, 3, 3)), rnd(r, Shape(1, 5, 1, 1))};
  const auto probe = rnd(r, Shape(1, 5, 4, 4), 1);
  MultiFn<double> f = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
    DumParams<double> p;
    p.conv = {v[1], v[2]};
    p.dw = {v[3], v[4]};
    return sum(mul(dum_mid(v[0], p), t.constant(probe)));
  };
  for (const auto& res : finite_diff_check_all<double>(f, in, {"F_in", "conv_w", "conv_b", "dw_w", "dw_b"}))
    EXPECT_LT(res.max_rel_error, 1e-4) << res.name;
}

TEST(GenOffsets, ZeroProjectionGivesZeroOffsets) {
  Rng r(4);
  Tape<double> t;
  auto p = make_dum(t, r, 4, 8, 2, 2);
  p.offset_w = t.constant(TensorD(Shape(16, 8, 1, 1)));
  const auto f = gen_offsets(dum_mid(t.constant(rnd(r, Shape(1, 4, 3, 3))), p), p);
  EXPECT_EQ(f.raw.shape(), Shape(1, 16, 3, 3));
  EXPECT_EQ(f.reconstructed.shape(), Shape(1, 4, 6, 6));
  for (double v : f.reconstructed.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(GenOffsets, TanhVariantIsBounded) {
  Rng r(5);
  Tape<double> t;
  const auto p = make_dum(t, r, 4, 8, 2, 2, 50.0);
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const auto f = gen_offsets(dum_mid(t.constant(rnd(r, Shape(1, 4, 4, 4), 10)), p), p);
    for (double v : f.raw.value().data()) worst = std::max(worst, std::abs(v));
  }
  EXPECT_LE(worst, 0.25);
  EXPECT_GT(worst, 0.2);
}

TEST(GenOffsets, ReconstructionIsPixelShuffleOfRaw) {
  Rng r(6);
  Tape<double> t;
  const auto p = make_dum(t, r, 4, 8, 2, 2);
  const auto f = gen_offsets(dum_mid(t.constant(rnd(r, Shape(2, 4, 3, 3))), p), p);
  EXPECT_TRUE(f.reconstructed.value().bitwise_equal(oracle::pixel_shuffle(f.raw.value(), 2)));
}

TEST(GenOffsets, SigmoidScopeGateInOpenHalfInterval) {
  Rng r(7);
  Tape<double> t;
  const auto p = make_dum(t, r, 4, 8, 2, 2, 3.0, OffsetVariant::sigmoid_scope);
  const auto x = rnd(r, Shape(1, 4, 4, 4), 2);
  const auto f = gen_offsets(t.constant(x), p);
  // Recompute both factors independently and recover the gate.
  const auto z1 = oracle::conv1x1(x, p.scope_w1.value(), static_cast<const TensorD*>(nullptr));
  const auto z2 = oracle::conv1x1(x, p.scope_w2.value(), static_cast<const TensorD*>(nullptr));
  for (std::size_t i = 0; i < z1.numel(); ++i) {
    const double gate = 0.5 / (1 + std::exp(-z1[i]));
    EXPECT_GT(gate, 0.0);
    EXPECT_LT(gate, 0.5);
    EXPECT_NEAR(f.raw.value()[i], gate * z2[i], 1e-12);
  }
}

TEST(GenOffsets, ShuffleThenLinearPredictsAtHighResolution) {
  Rng r(8);
  Tape<double> t;
  const auto p = make_dum(t, r, 4, 8, 2, 2, 1.0, OffsetVariant::tanh_bounded, OffsetOrder::shuffle_then_linear);
  const auto f = gen_offsets(dum_mid(t.constant(rnd(r, Shape(1, 4, 3, 3))), p), p);
  EXPECT_EQ(f.reconstructed.shape(), Shape(1, 4, 6, 6));
  for (double v : f.reconstructed.value().data()) EXPECT_LE(std::abs(v), 0.25);
}

TEST(DumUpsample, ZeroOffsetsEqualBilinearResize) {
  Rng r(9);
  for (std::size_t s : {1u, 2u, 4u}) {
    Tape<double> t;
    auto p = make_dum(t, r, 4, 8, s, 2);
    p.offset_w = t.constant(TensorD(p.offset_w.shape()));
    const auto x = rnd(r, Shape(2, 4, 4, 4), 2);
    const auto y = dum_upsample(t.constant(x), p).value();
    EXPECT_LT(max_abs_diff(y, oracle::bilinear_resize(x, s)), 1e-6) << "s = " << s;
    if (s == 1) {
      EXPECT_LT(max_abs_diff(y, x), 1e-15);
    }
  }
}

TEST(DumUpsample, ConstantInputStaysConstant) {
  Rng r(10);
  Tape<double> t;
  const auto p = make_dum(t, r, 4, 8, 2, 2, 5.0);
  for (double v : dum_upsample(t.constant(TensorD(Shape(1, 4, 4, 4), -1.25)), p).value().data())
    EXPECT_NEAR(v, -1.25, 1e-14);
}

TEST(DumUpsample, MatchesGridSampleOracleAtShiftedGrid) {
  Rng r(11);
  Tape<double> t;
  const auto p = make_dum(t, r, 4, 8, 2, 2, 3.0);
  const auto x = rnd(r, Shape(1, 4, 3, 5), 1);
  const auto xv = t.constant(x);
  const auto offs = gen_offsets(dum_mid(xv, p), p);
  const auto grid = group_grid<double>(3, 5, 2, 2);
  TensorD sampled(offs.reconstructed.shape());
  for (std::size_t i = 0; i < sampled.numel(); ++i) sampled.mutable_data()[i] = offs.reconstructed.value()[i] + grid[i];
  EXPECT_LT(max_abs_diff(dum_upsample(xv, p).value(), oracle::grid_sample(x, sampled)), 1e-12);
}

TEST(DumUpsample, GroupsAreIndependent) {
  Rng r(12);
  Tape<double> t;
  auto p = make_dum(t, r, 6, 8, 2, 3, 3.0);
  const auto x = t.constant(rnd(r, Shape(1, 6, 4, 4), 1));
  const auto before = dum_upsample(x, p).value();
  // Rows 8..15 of the low-resolution projection feed group 1 after the shuffle.
  TensorD w = p.offset_w.value();
  for (std::size_t o = 8; o < 16; ++o)
    for (std::size_t c = 0; c < 8; ++c) w.mutable_data()[o * 8 + c] = 0;
  p.offset_w = t.constant(w);
  const auto after = dum_upsample(x, p).value();
  const std::size_t plane = 8 * 8;
  for (std::size_t c = 0; c < 6; ++c) {
    double diff = 0;
    for (std::size_t i = 0; i < plane; ++i) diff = std::max(diff, std::abs(after[c * plane + i] - before[c * plane + i]));
    if (c / 2 == 1) {
      EXPECT_GT(diff, 0.0) << "channel " << c;
    } else {
      EXPECT_EQ(diff, 0.0) << "channel " << c;
    }
  }
}

TEST(DumUpsample, BoundedOffsetsKeepGridMonotone) {
  Rng r(13);
  Tape<double> t;
  const auto p = make_dum(t, r, 4, 8, 2, 2, 2.0);
  const auto x = t.constant(rnd(r, Shape(1, 4, 6, 6), 2));
  const auto offs = gen_offsets(dum_mid(x, p), p).reconstructed.value();
  const auto grid = group_grid<double>(6, 6, 2, 2);
  const std::size_t H = 12, W = 12;
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j + 1 < W; ++j) {
        const std::size_t a = (2 * g * H + i) * W + j;
        EXPECT_LT(grid[a] + offs[a], grid[a + 1] + offs[a + 1]);
        const std::size_t b = ((2 * g + 1) * H + j) * W + i;
        EXPECT_LT(grid[b] + offs[b], grid[b + W] + offs[b + W]);
      }
}

TEST(DumUpsample, IndivisibleChannelsIsShapeError) {
  Rng r(14);
  Tape<double> t;
  const auto p = make_dum(t, r, 5, 8, 2, 2);
  EXPECT_THROW(dum_upsample(t.constant(rnd(r, Shape(1, 5, 4, 4))), p), ShapeError);
}

namespace {

std::vector<DumParams<double>> branches(Tape<double>& t, Rng& r, std::size_t C, const std::vector<std::size_t>& ratios,
                                        double offset_scale = 1.0) {
  std::vector<DumParams<double>> out;
  for (std::size_t s : ratios) out.push_back(make_dum(t, r, C, 8, s, 2, offset_scale));
  return out;
}

const std::vector<std::size_t> kRatios{1, 1, 2, 2, 4, 8};

}  // namespace

TEST(CflmdDistribute, ConstantInputGivesConstantLevels) {
  Rng r(15);
  Tape<double> t;
  auto br = branches(t, r, 4, kRatios);
  for (auto& b : br) b.offset_w = t.constant(TensorD(b.offset_w.shape()));
  const auto pyr = cflmd_distribute(t.constant(TensorD(Shape(1, 4, 16, 16), 0.5)), br, kRatios);
  ASSERT_EQ(pyr.levels.size(), 4u);
  const double want[4] = {1.0, 1.0, 0.5, 0.5};
  for (std::size_t l = 0; l < 4; ++l)
    for (double v : pyr.levels[l].value().data()) EXPECT_NEAR(v, want[l], 1e-14) << "level " << l;
}

TEST(CflmdDistribute, LevelsAreSumsOfBranches) {
  Rng r(16);
  Tape<double> t;
  const auto br = branches(t, r, 4, kRatios, 2.0);
  const auto x = t.constant(rnd(r, Shape(1, 4, 16, 16), 1));
  const auto pyr = cflmd_distribute(x, br, kRatios);
  std::vector<TensorD> each;
  for (std::size_t i = 0; i < kRatios.size(); ++i) {
    const std::size_t q = kRatios[i];
    each.push_back(dum_upsample(q == 1 ? x : adaptive_avg_pool(x, 16 / q, 16 / q), br[i]).value());
  }
  auto sum2 = [](const TensorD& a, const TensorD& b) {
    TensorD s = a;
    for (std::size_t i = 0; i < s.numel(); ++i) s.mutable_data()[i] += b[i];
    return s;
  };
  EXPECT_TRUE(pyr.levels[0].value().bitwise_equal(sum2(each[0], each[1])));
  EXPECT_TRUE(pyr.levels[1].value().bitwise_equal(sum2(each[2], each[3])));
  EXPECT_TRUE(pyr.levels[2].value().bitwise_equal(each[4]));
  EXPECT_TRUE(pyr.levels[3].value().bitwise_equal(each[5]));
}

TEST(CflmdDistribute, DefaultWidthShapeContract) {
  Rng r(17);
  Tape<float> t;
  std::vector<DumParams<float>> br;
  for (std::size_t s : kRatios) {
    DumParams<float> p;
    p.conv = {t.constant(oracle::random_tensor<float>(Shape(64, 256, 1, 1), r, -0.05, 0.05)), std::nullopt};
    p.dw = {t.constant(oracle::random_tensor<float>(Shape(64, 1, 3, 3), r, -0.3, 0.3)), std::nullopt};
    p.offset_w = t.constant(Tensor<float>(Shape(2 * s * s * 4, 64, 1, 1)));
    p.scale = s;
    br.push_back(p);
  }
  const auto pyr = cflmd_distribute(t.constant(oracle::random_tensor<float>(Shape(1, 256, 16, 16), r)), br, kRatios);
  ASSERT_EQ(pyr.levels.size(), 4u);
  for (const auto& l : pyr.levels) EXPECT_EQ(l.shape(), Shape(1, 256, 16, 16));
}

TEST(CflmdDistribute, ContractErrors) {
  Rng r(18);
  Tape<double> t;
  const auto br = branches(t, r, 4, kRatios);
  EXPECT_THROW(cflmd_distribute(t.constant(TensorD(Shape(1, 4, 12, 12))), br, kRatios), ContractError);
  EXPECT_THROW(cflmd_distribute(t.constant(TensorD(Shape(1, 4, 16, 16))), br, {1, 1, 2, 2, 4}), ContractError);
  auto swapped = br;
  std::swap(swapped[4], swapped[5]);
  EXPECT_THROW(cflmd_distribute(t.constant(TensorD(Shape(1, 4, 16, 16))), swapped, kRatios), ContractError);
}

TEST(CflmdDistribute, GradientAtSmallInput) {
  Rng r(19);
  Tape<double> setup;
  const std::vector<std::size_t> ratios{1, 2};
  const auto br = branches(setup, r, 2, ratios, 0.5);
  const std::vector<TensorD> in{rnd(r, Shape(1, 2, 8, 8), 1), br[1].offset_w.value(), br[0].conv.weight.value()};
  const auto probe = rnd(r, Shape(1, 2, 8, 8), 1);
  MultiFn<double> f = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
    std::vector<DumParams<double>> b = br;
    for (auto& p : b) {
      p.conv = {t.constant(p.conv.weight.value()), t.constant(p.conv.bias->value())};
      p.dw = {t.constant(p.dw.weight.value()), t.constant(p.dw.bias->value())};
      p.offset_w = t.constant(p.offset_w.value());
    }
    b[1].offset_w = v[1];
    b[0].conv.weight = v[2];
    const auto pyr = cflmd_distribute(v[0], b, ratios);
    return add(sum(mul(pyr.levels[0], t.constant(probe))), sum(mul(pyr.levels[1], t.constant(probe))));
  };
  for (const auto& res : finite_diff_check_all<double>(f, in, {"F_agg", "offset_w", "conv_w"}))
    EXPECT_LT(res.max_rel_error, 1e-3) << res.name;
}
