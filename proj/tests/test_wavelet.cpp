#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "topowmamba/gradcheck.hpp"
#include "topowmamba/ops.hpp"
#include "topowmamba/wavelet.hpp"

using namespace twm;

namespace {

template <typename T>
double energy(const Tensor<T>& t) {
  double e = 0;
  for (std::int64_t i = 0; i < t.numel(); ++i) e += static_cast<double>(t.data()[i]) * t.data()[i];
  return e;
}

}  // namespace

TEST_CASE("constant image decomposes to ll=2v and zero detail") {
  auto x = Tensor<float>::full({1, 1, 4, 4}, 3.0f);
  auto b = dwt2(x);
  for (auto v : b.ll.values()) CHECK(v == doctest::Approx(6.0f));
  for (auto v : b.lh.values()) CHECK(v == 0.0f);
  for (auto v : b.hl.values()) CHECK(v == 0.0f);
  for (auto v : b.hh.values()) CHECK(v == 0.0f);
}

TEST_CASE("2x2 block matches the direct Haar matrix product") {
  // [[1,2],[3,4]]: the 4x4 orthonormal Haar matrix applied by hand.
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  auto b = dwt2(x);
  CHECK(b.ll.item() == doctest::Approx(5.0));
  CHECK(b.lh.item() == doctest::Approx(-2.0));
  CHECK(b.hl.item() == doctest::Approx(-1.0));
  CHECK(b.hh.item() == doctest::Approx(0.0));

  auto back = iwt2(b);
  CHECK(back.values()[0] == doctest::Approx(1.0));
  CHECK(back.values()[1] == doctest::Approx(2.0));
  CHECK(back.values()[2] == doctest::Approx(3.0));
  CHECK(back.values()[3] == doctest::Approx(4.0));
}

TEST_CASE("band energies sum to the input energy") {
  Rng rng(11);
  auto x = oracle::random_tensor<double>(rng, {1, 1, 8, 8}, -2.0, 2.0);
  auto b = dwt2(x);
  const double e = energy(b.ll) + energy(b.lh) + energy(b.hl) + energy(b.hh);
  CHECK(e == doctest::Approx(energy(x)).epsilon(1e-6));
}

TEST_CASE("constant-ll bands invert to a constant image") {
  WaveletBands<float> b{Tensor<float>::full({1, 1, 2, 2}, 8.0f), Tensor<float>::zeros({1, 1, 2, 2}),
                        Tensor<float>::zeros({1, 1, 2, 2}), Tensor<float>::zeros({1, 1, 2, 2})};
  auto x = iwt2(b);
  for (auto v : x.values()) CHECK(v == doctest::Approx(4.0f));
}

TEST_CASE("perfect reconstruction over 100 random draws") {
  Rng rng(2211);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t n = 1 + rng.uniform_int(2);
    const std::int64_t c = 1 + rng.uniform_int(4);
    const std::int64_t h = 2 * (1 + rng.uniform_int(12));
    const std::int64_t w = 2 * (1 + rng.uniform_int(12));

    auto xd = oracle::random_tensor<double>(rng, {n, c, h, w}, -5.0, 5.0);
    auto rd = iwt2(dwt2(xd));
    double worst64 = 0;
    for (std::int64_t i = 0; i < xd.numel(); ++i)
      worst64 = std::max(worst64, std::abs(rd.data()[i] - xd.data()[i]));
    REQUIRE(worst64 < 1e-12);

    auto xf = cast_tensor<float>(xd);
    auto rf = iwt2(dwt2(xf));
    double worst32 = 0;
    for (std::int64_t i = 0; i < xf.numel(); ++i)
      worst32 = std::max(worst32, std::abs(static_cast<double>(rf.data()[i]) - xf.data()[i]));
    REQUIRE(worst32 < 1e-5);
  }
}

TEST_CASE("dwt2 is linear") {
  Rng rng(37);
  auto x = oracle::random_tensor<double>(rng, {1, 2, 6, 6}, -1.0, 1.0);
  auto y = oracle::random_tensor<double>(rng, {1, 2, 6, 6}, -1.0, 1.0);
  const double alpha = 1.7, beta = -0.4;
  std::vector<double> mix(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) mix[static_cast<std::size_t>(i)] = alpha * x.data()[i] + beta * y.data()[i];
  auto bm = dwt2(Tensor<double>::from_data(x.shape(), std::move(mix)));
  auto bx = dwt2(x);
  auto by = dwt2(y);
  auto check_band = [&](const Tensor<double>& m, const Tensor<double>& a, const Tensor<double>& b) {
    for (std::int64_t i = 0; i < m.numel(); ++i)
      CHECK(m.data()[i] == doctest::Approx(alpha * a.data()[i] + beta * b.data()[i]).epsilon(1e-5));
  };
  check_band(bm.ll, bx.ll, by.ll);
  check_band(bm.lh, bx.lh, by.lh);
  check_band(bm.hl, bx.hl, by.hl);
  check_band(bm.hh, bx.hh, by.hh);
}

TEST_CASE("both transforms differentiate through the tape") {
  Rng rng(53);
  auto x = oracle::random_tensor<double>(rng, {1, 2, 4, 4}, -1.0, 1.0, true);
  auto wll = oracle::random_tensor<double>(rng, {1, 2, 2, 2}, 0.5, 1.5);
  auto wlh = oracle::random_tensor<double>(rng, {1, 2, 2, 2}, 0.5, 1.5);
  auto whl = oracle::random_tensor<double>(rng, {1, 2, 2, 2}, 0.5, 1.5);
  auto whh = oracle::random_tensor<double>(rng, {1, 2, 2, 2}, 0.5, 1.5);
  auto wx = oracle::random_tensor<double>(rng, {1, 2, 4, 4}, 0.5, 1.5);

  auto res = grad_check(
      [&] {
        auto b = dwt2(x);
        // weight the bands so no gradient path collapses
        WaveletBands<double> wb{mul(b.ll, wll), mul(b.lh, wlh), mul(b.hl, whl), mul(b.hh, whh)};
        return sum(mul(iwt2(wb), wx));
      },
      {x}, 1e-4, 1e-4);
  CHECK(res.pass);
}

TEST_CASE("odd extents are rejected") {
  auto x = Tensor<float>::zeros({1, 1, 3, 4});
  CHECK_THROWS_AS(dwt2(x), ShapeError);
}

TEST_CASE("mismatched band shapes are rejected") {
  WaveletBands<float> b{Tensor<float>::zeros({1, 1, 2, 2}), Tensor<float>::zeros({1, 1, 2, 2}),
                        Tensor<float>::zeros({1, 1, 2, 2}), Tensor<float>::zeros({1, 1, 2, 3})};
  CHECK_THROWS_AS(iwt2(b), ShapeError);
}
