#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "topowmamba/gradcheck.hpp"
#include "topowmamba/ops.hpp"

using namespace twm;

namespace {

template <typename T>
Tensor<T> t4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w, std::vector<T> v, bool rg = false) {
  return Tensor<T>::from_data({n, c, h, w}, std::move(v), rg);
}

}  // namespace

TEST_CASE("conv2d scalar kernel scales the input") {
  auto x = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
  auto w = t4<float>(1, 1, 1, 1, {2});
  auto y = conv2d<float>(x, w, std::nullopt, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.values() == std::vector<float>{2, 4, 6, 8});
}

TEST_CASE("conv2d delta kernel is the identity") {
  Rng rng(7);
  auto x = oracle::random_tensor<float>(rng, {1, 1, 5, 4}, -3.f, 3.f);
  std::vector<float> k(9, 0.f);
  k[4] = 1.f;
  auto w = t4<float>(1, 1, 3, 3, k);
  auto y = conv2d<float>(x, w, std::nullopt, 1, 1);
  CHECK(y.values() == x.values());
}

TEST_CASE("conv2d matches the naive loop oracle bit-for-bit") {
  Rng rng(123);
  auto x = oracle::random_tensor<double>(rng, {1, 2, 5, 5}, -1.0, 1.0);
  auto w = oracle::random_tensor<double>(rng, {3, 2, 3, 3}, -1.0, 1.0);
  auto y = conv2d<double>(x, w, std::nullopt, 2, 1);
  auto ref = oracle::conv2d_naive<double>(x, w, nullptr, 2, 1, 1);
  REQUIRE(y.shape() == ref.shape());
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == ref.data()[i]);
}

TEST_CASE("conv2d equals the oracle over 100 random draws including groups") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::int64_t groups = 1 + rng.uniform_int(3);
    const std::int64_t cg = 1 + rng.uniform_int(3);
    const std::int64_t cpg = 1 + rng.uniform_int(3);
    const std::int64_t cin = groups * cg, cout = groups * cpg;
    const std::int64_t kh = 1 + rng.uniform_int(4), kw = 1 + rng.uniform_int(4);
    const std::int64_t stride = 1 + rng.uniform_int(3);
    const std::int64_t pad = rng.uniform_int(3);
    const std::int64_t h = kh + rng.uniform_int(6), w = kw + rng.uniform_int(6);
    const std::int64_t n = 1 + rng.uniform_int(2);
    auto x = oracle::random_tensor<double>(rng, {n, cin, h, w}, -2.0, 2.0);
    auto wt = oracle::random_tensor<double>(rng, {cout, cg, kh, kw}, -2.0, 2.0);
    auto b = oracle::random_tensor<double>(rng, {cout}, -1.0, 1.0);
    auto y = conv2d<double>(x, wt, b, stride, pad, groups);
    auto ref = oracle::conv2d_naive<double>(x, wt, b.data(), stride, pad, groups);
    REQUIRE(y.shape() == ref.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) REQUIRE(y.data()[i] == ref.data()[i]);
  }
}

TEST_CASE("conv2d rejects bad geometry") {
  auto x = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
  auto w = t4<float>(1, 1, 3, 3, std::vector<float>(9, 0.f));
  CHECK_THROWS_AS(conv2d<float>(x, w, std::nullopt, 1, 0), ShapeError);
  auto w2 = t4<float>(1, 2, 1, 1, {1, 1});
  CHECK_THROWS_AS(conv2d<float>(x, w2, std::nullopt, 1, 0), ShapeError);
}

TEST_CASE("linear identity and hand dot product") {
  auto x = Tensor<float>::from_data({2}, {1, 2});
  auto eye = Tensor<float>::from_data({2, 2}, {1, 0, 0, 1});
  auto y = linear<float>(x, eye, std::nullopt);
  CHECK(y.values() == x.values());

  auto w = Tensor<float>::from_data({1, 2}, {1, 1});
  auto b = Tensor<float>::from_data({1}, {0.5f});
  auto z = linear<float>(x, w, b);
  CHECK(z.values() == std::vector<float>{3.5f});
}

TEST_CASE("linear gradient wrt weights matches finite differences") {
  Rng rng(5);
  auto x = oracle::random_tensor<double>(rng, {3, 4}, -1.0, 1.0);
  auto w = oracle::random_tensor<double>(rng, {2, 4}, -1.0, 1.0, true);
  auto b = oracle::random_tensor<double>(rng, {2}, -1.0, 1.0, true);
  auto res = grad_check([&] { return sum(linear<double>(x, w, b)); }, {w, b}, 1e-5, 1e-6);
  CHECK(res.pass);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layer_norm spot values") {
  auto g1 = Tensor<float>::from_data({3}, {1, 1, 1});
  auto b0 = Tensor<float>::from_data({3}, {0, 0, 0});

  auto c = Tensor<float>::from_data({3}, {4, 4, 4});
  auto y = layer_norm<float>(c, g1, b0);
  for (auto v : y.values()) CHECK(v == doctest::Approx(0.f));

  auto x = Tensor<float>::from_data({3}, {1, 2, 3});
  auto z = layer_norm<float>(x, g1, b0);
  CHECK(z.values()[0] == doctest::Approx(-1.2247f).epsilon(1e-3));
  CHECK(z.values()[1] == doctest::Approx(0.f).epsilon(1e-3));
  CHECK(z.values()[2] == doctest::Approx(1.2247f).epsilon(1e-3));

  auto g0 = Tensor<float>::from_data({3}, {0, 0, 0});
  auto b7 = Tensor<float>::from_data({3}, {7, 7, 7});
  auto s = layer_norm<float>(x, g0, b7);
  CHECK(s.values() == std::vector<float>{7, 7, 7});
}

TEST_CASE("pool_reduce exact reductions") {
  auto cst = t4<float>(1, 2, 3, 3, std::vector<float>(18, 2.5f));
  for (auto kind : {PoolKind::GlobalMax, PoolKind::GlobalAvg, PoolKind::ChannelMax, PoolKind::ChannelMean}) {
    auto pooled = pool_reduce<float>(cst, kind);
    for (auto v : pooled.values()) CHECK(v == 2.5f);
  }

  auto x = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
  CHECK(pool_reduce<float>(x, PoolKind::GlobalMax).values() == std::vector<float>{4});
  CHECK(pool_reduce<float>(x, PoolKind::GlobalAvg).values() == std::vector<float>{2.5f});

  auto two = t4<float>(1, 2, 1, 1, {1, 5});
  CHECK(pool_reduce<float>(two, PoolKind::ChannelMax).values() == std::vector<float>{5});
  CHECK(pool_reduce<float>(two, PoolKind::ChannelMean).values() == std::vector<float>{3});
}

TEST_CASE("resample2d nearest replicates 2x2 blocks") {
  auto x = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
  auto y = resample2d<float>(x, ResampleMode::Nearest);
  CHECK(y.values() == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
}

TEST_CASE("resample2d preserves constants in both modes") {
  auto x = t4<float>(2, 3, 4, 4, std::vector<float>(96, 1.25f));
  for (auto mode : {ResampleMode::Nearest, ResampleMode::Bilinear}) {
    auto up = resample2d<float>(x, mode);
    for (auto v : up.values()) CHECK(v == doctest::Approx(1.25f));
  }
}

TEST_CASE("resample2d bilinear matches the direct interpolation formula") {
  auto x = t4<double>(1, 1, 2, 2, {0, 1, 2, 3});
  auto y = resample2d<double>(x, ResampleMode::Bilinear);
  const std::int64_t h = 2, w = 2;
  for (std::int64_t oh = 0; oh < 4; ++oh) {
    for (std::int64_t ow = 0; ow < 4; ++ow) {
      const double sr = 0.5 * oh - 0.25, sc = 0.5 * ow - 0.25;
      const double fr = sr - std::floor(sr), fc = sc - std::floor(sc);
      auto cl = [](std::int64_t i, std::int64_t n) { return std::clamp<std::int64_t>(i, 0, n - 1); };
      const auto rf = static_cast<std::int64_t>(std::floor(sr)), cf = static_cast<std::int64_t>(std::floor(sc));
      const auto r0 = cl(rf, h), r1 = cl(rf + 1, h);
      const auto c0 = cl(cf, w), c1 = cl(cf + 1, w);
      const double want = (1 - fr) * ((1 - fc) * x.data()[r0 * w + c0] + fc * x.data()[r0 * w + c1]) +
                          fr * ((1 - fc) * x.data()[r1 * w + c0] + fc * x.data()[r1 * w + c1]);
      CHECK(y.data()[oh * 4 + ow] == doctest::Approx(want).epsilon(1e-6));
    }
  }
}

TEST_CASE("activation and softmax spot values") {
  auto x = Tensor<float>::from_data({4}, {-1, 0, 1, 2});
  CHECK(relu(x).values() == std::vector<float>{0, 0, 1, 2});
  CHECK(sigmoid(x).values()[1] == doctest::Approx(0.5f));
  CHECK(gelu(x).values()[1] == doctest::Approx(0.f));
  CHECK(silu(x).values()[1] == doctest::Approx(0.f));

  auto s = softmax(Tensor<float>::from_data({2}, {0, 0}));
  CHECK(s.values()[0] == doctest::Approx(0.5f));
  auto ls = log_softmax(Tensor<float>::from_data({2}, {0, 0}));
  CHECK(ls.values()[0] == doctest::Approx(std::log(0.5f)));
}

TEST_CASE("shape ops: permute, concat, gather, slice") {
  auto x = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto p = permute<float>(x, {1, 0});
  CHECK(p.shape() == Shape{3, 2});
  CHECK(p.values() == std::vector<float>{1, 4, 2, 5, 3, 6});

  auto a = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
  auto b = t4<float>(1, 1, 2, 2, {5, 6, 7, 8});
  auto cat = concat<float>({a, b}, 1);
  CHECK(cat.shape() == Shape{1, 2, 2, 2});
  CHECK(cat.values() == std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8});

  auto g = gather_last<float>(x, {2, 0});
  CHECK(g.values() == std::vector<float>{3, 1, 6, 4});
  auto sl = slice_last<float>(x, 1, 2);
  CHECK(sl.values() == std::vector<float>{2, 3, 5, 6});
}

TEST_CASE("broadcast helpers") {
  auto s = t4<float>(1, 2, 1, 1, {2, 3});
  auto bs = broadcast_spatial<float>(s, 2, 2);
  CHECK(bs.values() == std::vector<float>{2, 2, 2, 2, 3, 3, 3, 3});

  auto m = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
  auto bc = broadcast_channels<float>(m, 2);
  CHECK(bc.values() == std::vector<float>{1, 2, 3, 4, 1, 2, 3, 4});
}

TEST_CASE("backward of sum gives ones and chain rule works") {
  auto x = Tensor<float>::from_data({3}, {5, -1, 2}, true);
  {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto loss = sum(x);
    tape.backward(loss);
  }
  CHECK(x.grad_dense() == std::vector<float>{1, 1, 1});

  auto z = Tensor<float>::from_data({2}, {1, -2}, true);
  {
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto loss = sum(mul(z, z));
    tape.backward(loss);
  }
  CHECK(z.grad_dense() == std::vector<float>{2, -4});
}

TEST_CASE("backward rejects non-scalar loss and tape reuse") {
  auto x = Tensor<float>::from_data({2}, {1, 2}, true);
  Tape<float> tape;
  Tensor<float> y;
  {
    Tape<float>::Scope scope(tape);
    y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }
  {
    Tape<float>::Scope scope(tape);
    auto loss = sum(y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), NumericError);
  }
}

TEST_CASE("gradients of unused leaves stay zero") {
  auto x = Tensor<float>::from_data({2}, {1, 2}, true);
  auto unused = Tensor<float>::from_data({2}, {3, 4}, true);
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  auto loss = sum(x);
  tape.backward(loss);
  CHECK(unused.grad_dense() == std::vector<float>{0, 0});
}

TEST_CASE("non-finite op outputs raise NumericError") {
  auto a = Tensor<float>::from_data({1}, {1});
  auto b = Tensor<float>::from_data({1}, {0});
  CHECK_THROWS_AS(div(a, b), NumericError);
  CHECK_THROWS_AS(Tensor<float>::from_data({1}, {std::numeric_limits<float>::quiet_NaN()}), NumericError);
}

TEST_CASE("elementwise ops demand matching shapes") {
  auto a = Tensor<float>::from_data({2}, {1, 2});
  auto b = Tensor<float>::from_data({3}, {1, 2, 3});
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(mul(a, b), ShapeError);
}

TEST_CASE("forward agrees between f32 and f64 within 1e-4 relative") {
  Rng rng(99);
  auto xd = oracle::random_tensor<double>(rng, {2, 3, 4, 4}, -10.0, 10.0);
  auto xf = cast_tensor<float>(xd);
  auto wd = oracle::random_tensor<double>(rng, {3, 3, 3, 3}, -0.5, 0.5);
  auto wf = cast_tensor<float>(wd);

  auto agree = [](const Tensor<double>& d, const Tensor<float>& f) {
    REQUIRE(d.numel() == f.numel());
    for (std::int64_t i = 0; i < d.numel(); ++i) {
      const double a = d.data()[i], b = static_cast<double>(f.data()[i]);
      const double rel = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
      REQUIRE(rel < 1e-4);
    }
  };
  agree(conv2d<double>(xd, wd, std::nullopt, 1, 1), conv2d<float>(xf, wf, std::nullopt, 1, 1));
  agree(gelu(xd), gelu(xf));
  agree(silu(xd), silu(xf));
  agree(softmax(xd), softmax(xf));
  auto g1d = Tensor<double>::full({4}, 1.0), b0d = Tensor<double>::zeros({4});
  auto g1f = Tensor<float>::full({4}, 1.0f), b0f = Tensor<float>::zeros({4});
  agree(layer_norm<double>(xd, g1d, b0d), layer_norm<float>(xf, g1f, b0f));
  agree(pool_reduce(xd, PoolKind::GlobalAvg), pool_reduce(xf, PoolKind::GlobalAvg));
  agree(resample2d(xd, ResampleMode::Bilinear), resample2d(xf, ResampleMode::Bilinear));
}

TEST_CASE("identical seeds produce bitwise-identical op outputs") {
  auto run = [] {
    Rng rng(4242);
    auto x = oracle::random_tensor<float>(rng, {1, 2, 6, 6}, -1.f, 1.f);
    auto w = oracle::random_tensor<float>(rng, {2, 2, 3, 3}, -1.f, 1.f);
    return conv2d<float>(gelu(x), w, std::nullopt, 1, 1).values();
  };
  CHECK(run() == run());
}
