#include "doctest.h"

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ringmo/freq.hpp"

using namespace ringmo;
using namespace ringmo::freq;

namespace {

Patch random_patch(int h, int w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return oracle::random_tensor<double>({h, w}, rng, lo, hi);
}

Patch checkerboard(int n, double lo = -1.0, double hi = 1.0) {
  Patch p(Shape{n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) p[y * n + x] = (x + y) % 2 ? lo : hi;
  return p;
}

double energy(const Patch& p) {
  double e = 0;
  for (auto v : p.vec()) e += v * v;
  return e;
}

}  // namespace

TEST_CASE("fast and direct transforms agree with the loop oracle") {
  std::mt19937_64 rng(11);
  for (auto [h, w] : {std::pair{1, 1}, {4, 4}, {5, 3}, {8, 6}, {7, 7}}) {
    auto p = random_patch(h, w, rng, -1, 1);
    const auto ref = oracle::dft2(p);
    const auto fast = dft2(p), direct = dft2_direct(p);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(fast.coeffs[i] - ref[i]) < 1e-9);
      CHECK(std::abs(direct.coeffs[i] - ref[i]) < 1e-9);
    }
  }
}

TEST_CASE("inverse transform round-trips, centered or not") {
  std::mt19937_64 rng(12);
  auto p = random_patch(6, 5, rng);
  double imag = 1;
  auto back = idft2(dft2(p), &imag);
  CHECK(oracle::max_abs_diff(back, p) < 1e-12);
  CHECK(imag < 1e-12);
  CHECK(oracle::max_abs_diff(idft2(centered(dft2(p))), p) < 1e-12);
  auto spec = dft2(p);
  auto twice = uncentered(centered(spec));
  for (std::size_t i = 0; i < spec.coeffs.size(); ++i) CHECK(twice.coeffs[i] == spec.coeffs[i]);
}

TEST_CASE("centering puts DC at (H/2, W/2)") {
  Patch ones(Shape{4, 6}, 1.0);
  auto c = centered(dft2(ones));
  CHECK(std::abs(c.at(2, 3) - Complex(24, 0)) < 1e-12);
  CHECK(normalized_radius(2, 3, 4, 6) == 0.0);
  // axis Nyquist sits at radius 1
  CHECK(normalized_radius(0, 3, 4, 6) == doctest::Approx(1.0));
}

TEST_CASE("Parseval holds") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_patch(8, 8, rng, -2, 2);
    const auto be = band_energy(centered(dft2(p)), 0.25);
    CHECK(be.total / 64.0 == doctest::Approx(energy(p)).epsilon(1e-10));
  }
}

TEST_CASE("high-pass plus low-pass reconstructs the patch") {
  std::mt19937_64 rng(14);
  for (double cutoff : {0.1, 0.25, 0.5, 0.9}) {
    auto p = random_patch(8, 8, rng);
    double r1 = 1, r2 = 1;
    auto hp = ideal_filter(p, cutoff, FilterKind::HighPass, &r1);
    auto lp = ideal_filter(p, cutoff, FilterKind::LowPass, &r2);
    Patch sum(Shape{8, 8});
    for (int i = 0; i < 64; ++i) sum[i] = hp[i] + lp[i];
    CHECK(oracle::max_abs_diff(sum, p) < 1e-10);
    CHECK(r1 < 1e-10);
    CHECK(r2 < 1e-10);
  }
}

TEST_CASE("constant patch is Low and survives low-pass unchanged") {
  Patch c(Shape{8, 8}, 0.7);
  const auto cls = classify_patch(c);
  CHECK(cls.band == Band::Low);
  CHECK(cls.ratio == 0.0);
  CHECK(oracle::max_abs_diff(ideal_filter(c, 0.25, FilterKind::LowPass), c) < 1e-12);
  CHECK(oracle::max_abs_diff(ideal_filter(c, 0.25, FilterKind::HighPass), Patch(Shape{8, 8}, 0.0)) < 1e-12);
}

TEST_CASE("Nyquist checkerboard is High") {
  CHECK(classify_patch(checkerboard(8)).band == Band::High);
  CHECK(classify_patch(checkerboard(8)).ratio == doctest::Approx(1.0));
  // a [0,1] checkerboard is the same pattern plus an offset
  CHECK(classify_patch(checkerboard(32, 0.0, 1.0)).band == Band::High);
}

TEST_CASE("DC plus equal-amplitude Nyquist splits energy in half") {
  // x = 1 + (-1)^(x+y): coefficients 64 at DC and 64 at the corner
  Patch p(Shape{8, 8});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) p[y * 8 + x] = 1.0 + ((x + y) % 2 ? -1.0 : 1.0);
  CHECK(radial_energy_ratio(centered(dft2(p)), 0.25) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("classification ignores brightness offsets") {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = random_patch(8, 8, rng);
    auto shifted = p;
    for (auto& v : shifted.vec()) v += 3.0;
    CHECK(classify_patch(p).band == classify_patch(shifted).band);
    CHECK(classify_patch(p).ratio == doctest::Approx(classify_patch(shifted).ratio).epsilon(1e-9));
  }
}

TEST_CASE("smooth ramp is Low") {
  Patch ramp(Shape{16, 16});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) ramp[y * 16 + x] = std::sin(M_PI * x / 16.0) * std::sin(M_PI * y / 16.0);
  CHECK(classify_patch(ramp).band == Band::Low);
}

TEST_CASE("channel pooling") {
  std::vector<Patch> chans{checkerboard(8), Patch(Shape{8, 8}, 0.2), checkerboard(8)};
  CHECK(classify_channels(chans).band == Band::High);
  std::vector<Patch> flat(3, Patch(Shape{8, 8}, 0.5));
  CHECK(classify_channels(flat).band == Band::Low);
}

TEST_CASE("all-zero spectrum has ratio 0") {
  CHECK(radial_energy_ratio(centered(dft2(Patch(Shape{4, 4}, 0.0))), 0.25) == 0.0);
}

TEST_CASE("argument validation") {
  Patch p(Shape{4, 4}, 1.0);
  CHECK_THROWS_AS(band_energy(dft2(p), 0.25), std::invalid_argument);
  CHECK_THROWS_AS(radial_energy_ratio(centered(dft2(p)), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(radial_energy_ratio(centered(dft2(p)), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(classify_patch(p, 0.25, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(dft2(Patch(Shape{2, 2, 2})), ShapeError);
}

TEST_CASE("log magnitude is non-negative and peaks at DC for a positive patch") {
  Patch p(Shape{4, 4}, 2.0);
  auto lm = log_magnitude(centered(dft2(p)));
  CHECK(lm.shape() == Shape{4, 4});
  CHECK(lm.at({2, 2}) == doctest::Approx(std::log1p(32.0)));
  for (auto v : lm.vec()) CHECK(v >= 0.0);
}

TEST_CASE("raising the cutoff never raises the ratio") {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const auto spec = centered(dft2(random_patch(9, 12, rng)));
    double prev = 1.0;
    for (double c = 0.05; c < 1.0; c += 0.05) {
      const double r = radial_energy_ratio(spec, c);
      CHECK(r <= prev + 1e-15);
      prev = r;
    }
  }
}
