#include <doctest.h>

#include <cmath>

#include "../support/fixtures.hpp"
#include "../support/oracles.hpp"
#include "veil/errors.hpp"
#include "veil/imaging.hpp"

using namespace veil;
using veil::testing::naive_ssim;
using veil::testing::random_image;

TEST_CASE("dssim of an image with itself is zero") {
  SeededRng rng(1);
  const Image x = random_image(32, 32, 3, rng);
  CHECK(std::abs(dssim(x, x)) < 1e-12);
}

TEST_CASE("dssim of constant black vs white matches the closed form and the naive oracle") {
  const Image zeros(32, 32, 3, 0.0), ones(32, 32, 3, 1.0);
  const double c1 = 1e-4;
  const double closed = (1.0 - c1 / (1.0 + c1)) / 2.0;
  CHECK(std::abs(dssim(zeros, ones) - closed) < 1e-6);
  CHECK(std::abs(dssim(zeros, ones) - (1.0 - naive_ssim(zeros, ones, 7, 0.01, 0.03, 1.0)) / 2.0) <
        1e-6);
}

TEST_CASE("ssim matches the naive window oracle on random images") {
  SeededRng rng(2);
  for (int t = 0; t < 5; ++t) {
    const int c = t % 2 == 0 ? 3 : 1;
    const Image a = random_image(20, 24, c, rng), b = random_image(20, 24, c, rng);
    CHECK(std::abs(ssim(a, b) - naive_ssim(a, b, 7, 0.01, 0.03, 1.0)) < 1e-9);
    SsimParams p;
    p.window_size = 3;
    CHECK(std::abs(ssim(a, b, p) - naive_ssim(a, b, 3, 0.01, 0.03, 1.0)) < 1e-9);
  }
}

TEST_CASE("dssim is symmetric and lies in the unit interval") {
  SeededRng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Image a = random_image(16, 16, 3, rng), b = random_image(16, 16, 3, rng);
    const double ab = dssim(a, b), ba = dssim(b, a);
    CHECK(std::abs(ab - ba) < 1e-12);
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
  }
}

TEST_CASE("dssim rejects mismatched shapes and oversized windows") {
  const Image a(16, 16, 3), b(16, 20, 3), g(16, 16, 1);
  CHECK_THROWS_AS(dssim(a, b), DimensionError);
  CHECK_THROWS_AS(dssim(a, g), DimensionError);
  SsimParams p;
  p.window_size = 17;
  CHECK_THROWS_AS(dssim(a, a, p), ParamError);
  p.window_size = 4;
  CHECK_THROWS_AS(dssim(a, a, p), ParamError);
}

TEST_CASE("dssim gradient matches central finite differences") {
  SeededRng rng(4);
  const Image a = random_image(16, 16, 3, rng, 0.1, 0.9);
  Image b = a;
  for (double& p : b.data()) p = std::clamp(p + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  const DssimGradient g = dssim_with_grad(a, b);
  CHECK(std::abs(g.value - dssim(a, b)) < 1e-14);
  REQUIRE(g.grad.size() == b.size());
  const double h = 1e-4;
  for (int t = 0; t < 40; ++t) {
    const std::size_t i = rng.index(b.size());
    Image plus = b, minus = b;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    const double fd = (dssim(a, plus) - dssim(a, minus)) / (2 * h);
    const double denom = std::max(std::abs(fd), 1e-8);
    CHECK(std::abs(g.grad[i] - fd) / denom < 1e-3);
  }
}

TEST_CASE("gaussian blur of a constant image is that constant") {
  const Image x(20, 20, 3, 0.37);
  const Image y = gaussian_blur(x, 5, 1.0);
  CHECK(max_abs_diff(x, y) < 1e-12);
}

TEST_CASE("a 1x1 blur kernel is the identity") {
  SeededRng rng(5);
  const Image x = random_image(16, 16, 3, rng);
  CHECK(gaussian_blur(x, 1, 2.0) == x);
}

TEST_CASE("blurring an impulse reproduces the hand-computed 3x3 kernel") {
  Image x(16, 16, 1, 0.0);
  x.at(8, 8, 0) = 1.0;
  const Image y = gaussian_blur(x, 3, 0.8);
  // 1-D taps (e, 1, e) / (1 + 2e) with e = exp(-1 / (2 * 0.8^2)).
  CHECK(std::abs(y.at(8, 8, 0) - 0.2724959735107282) < 1e-12);
  CHECK(std::abs(y.at(8, 9, 0) - 0.12475774762164545) < 1e-12);
  CHECK(std::abs(y.at(7, 8, 0) - 0.12475774762164545) < 1e-12);
  CHECK(y.at(8, 10, 0) == 0.0);
}

TEST_CASE("blur borders reflect and even kernels are rejected") {
  Image x(16, 16, 1, 0.0);
  x.at(0, 0, 0) = 1.0;
  const Image y = gaussian_blur(x, 3, 0.8);
  // Reflect-101 never maps a neighbor tap back onto the border pixel, so the
  // corner keeps exactly center^2.
  CHECK(std::abs(y.at(0, 0, 0) - 0.2724959735107282) < 1e-12);
  CHECK_THROWS_AS(gaussian_blur(x, 4, 1.0), ParamError);
  for (double p : y.data()) {
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
}

TEST_CASE("gaussian noise: zero std is identity, fixed seed is reproducible") {
  SeededRng rng(6);
  const Image x = random_image(16, 16, 3, rng);
  SeededRng r0(1);
  CHECK(gaussian_noise(x, 0.0, r0) == x);
  SeededRng r1(9), r2(9);
  CHECK(gaussian_noise(x, 0.1, r1) == gaussian_noise(x, 0.1, r2));
}

TEST_CASE("gaussian noise has the requested spread") {
  // Mid-gray keeps clamping out of play at std 0.05.
  const Image x(64, 64, 3, 0.5);
  SeededRng rng(7);
  const Image y = gaussian_noise(x, 0.05, rng);
  double s = 0, ss = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = y.data()[i] - x.data()[i];
    s += d;
    ss += d * d;
  }
  const double n = static_cast<double>(x.size());
  const double sd = std::sqrt(ss / n - (s / n) * (s / n));
  CHECK(std::abs(sd - 0.05) < 0.005);
}

TEST_CASE("jpeg round trip preserves shape, orders by quality, and keeps flat gray") {
  SeededRng rng(8);
  for (int h : {32, 48, 64}) {
    for (int w : {32, 48, 64}) {
      const Image x = random_image(h, w, 3, rng);
      const Image y = jpeg_roundtrip(x, 50);
      CHECK(y.height() == h);
      CHECK(y.width() == w);
      CHECK(y.channels() == 3);
    }
  }
  const Image gray(32, 32, 3, 128.0 / 255.0);
  CHECK(max_abs_diff(gray, jpeg_roundtrip(gray, 50)) <= 2.0 / 255.0 + 1e-12);

  Image natural(32, 32, 3);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      natural.at(y, x, 0) = 0.5 + 0.4 * std::sin(x * 0.3);
      natural.at(y, x, 1) = 0.5 + 0.4 * std::cos(y * 0.25);
      natural.at(y, x, 2) = (x + y) / 64.0;
    }
  }
  CHECK(ssim(natural, jpeg_roundtrip(natural, 95)) > ssim(natural, jpeg_roundtrip(natural, 5)));

  const Image mono(32, 32, 1, 0.25);
  CHECK(jpeg_roundtrip(mono, 75).channels() == 1);
  CHECK_THROWS_AS(jpeg_roundtrip(natural, 4), ParamError);
  CHECK_THROWS_AS(jpeg_roundtrip(natural, 96), ParamError);
}

TEST_CASE("augment with zero ranges is the identity and is seed-deterministic") {
  SeededRng rng(10);
  const Image x = random_image(32, 32, 3, rng);
  SeededRng r0(1);
  CHECK(max_abs_diff(augment(x, AugmentParams{0, 0, 0, 0}, r0), x) < 1e-12);
  SeededRng r1(5), r2(5);
  CHECK(augment(x, AugmentParams{}, r1) == augment(x, AugmentParams{}, r2));
}

TEST_CASE("a 90 degree rotation permutes 2x2 blocks as computed by hand") {
  // 16x16 image of 8x8 distinct 2x2 blocks.
  Image x(16, 16, 1);
  for (int y = 0; y < 16; ++y) {
    for (int c = 0; c < 16; ++c) x.at(y, c, 0) = ((y / 2) * 8 + c / 2) / 64.0;
  }
  AffineParams p;
  p.rotation_deg = 90.0;
  const Image r = affine_transform(x, p);
  // Clockwise as displayed: output block (by, bx) shows input block (7 - bx, by).
  for (int y = 0; y < 16; ++y) {
    for (int c = 0; c < 16; ++c) {
      const int by = y / 2, bx = c / 2;
      CHECK(r.at(y, c, 0) == doctest::Approx(((7 - bx) * 8 + by) / 64.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("transformations preserve unit range") {
  SeededRng rng(11);
  const Image x = random_image(32, 32, 3, rng);
  SeededRng r(3);
  for (const Image& y : {gaussian_blur(x, 5, 1.5), gaussian_noise(x, 0.3, r), jpeg_roundtrip(x, 10),
                         augment(x, AugmentParams{}, r)}) {
    CHECK(y.same_shape(x));
    for (double p : y.data()) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
  }
}
