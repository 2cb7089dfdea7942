// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include "doctest.h"
#include "pixelpost/schedule.hpp"
#include "pixelpost/tensor.hpp"
#include "test_util.hpp"

using namespace pixelpost;
using namespace pixelpost::testutil;

TEST_CASE("single-step schedule has alpha_bar = 1 - beta") {
  NoiseSchedule s = linear_schedule(1, 0.01, 0.01);
  CHECK(s.T == 1);
  CHECK(s.beta(1) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(s.alpha_bar(1) == doctest::Approx(0.99).epsilon(1e-12));
}

TEST_CASE("two-step schedule multiplies the alphas") {
  NoiseSchedule s = linear_schedule(2, 0.1, 0.2);
  CHECK(s.beta(1) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(s.beta(2) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-12));
}

TEST_CASE("default schedule matches an independently coded product") {
  NoiseSchedule s = linear_schedule();
  CHECK(s.T == 1000);

  // Oracle: rebuild the cumulative product with a differently-phrased
  // interpolation (counting down from the top endpoint) and long-double
  // accumulation, sharing no code with the library.
  const int T = 1000;
  const long double lo = 1e-4L, hi = 0.02L;
  long double prod = 1.0L;
  std::vector<long double> oracle(T);
  for (int i = 0; i < T; ++i) {
    const long double beta = hi - (hi - lo) * static_cast<long double>(T - 1 - i) / (T - 1);
    prod *= (1.0L - beta);
    oracle[i] = prod;
  }
  CHECK(static_cast<double>(oracle[T - 1]) < 1e-4);
  for (int t = 1; t <= T; ++t) {
    const double rel = std::abs(s.alpha_bar(t) - static_cast<double>(oracle[t - 1])) /
                       static_cast<double>(oracle[t - 1]);
    REQUIRE(rel <= 1e-12);
  }
}

TEST_CASE("schedule tables satisfy their monotonicity and range invariants") {
  NoiseSchedule s = linear_schedule();
  CHECK(s.alpha_bar(1) == doctest::Approx(1.0 - s.beta(1)).epsilon(1e-15));
  for (int t = 1; t <= s.T; ++t) {
    REQUIRE(s.beta(t) > 0.0);
    REQUIRE(s.beta(t) < 1.0);
    REQUIRE(s.alpha_bar(t) > 0.0);
    REQUIRE(s.alpha_bar(t) < 1.0);
    if (t > 1) {
      REQUIRE(s.beta(t) >= s.beta(t - 1));
      REQUIRE(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
  }
}

TEST_CASE("schedule construction rejects bad parameters") {
  CHECK_THROWS_AS(linear_schedule(0, 0.1, 0.2), ValueError);
  CHECK_THROWS_AS(linear_schedule(10, 0.0, 0.2), ValueError);
  CHECK_THROWS_AS(linear_schedule(10, -0.1, 0.2), ValueError);
  CHECK_THROWS_AS(linear_schedule(10, 0.3, 0.2), ValueError);
  CHECK_THROWS_AS(linear_schedule(10, 0.1, 1.0), ValueError);
}

TEST_CASE("forward noising handles its two degenerate branches") {
  NoiseSchedule s = linear_schedule(10, 0.01, 0.05);
  Rng rng(42);
  Tensor z0 = rand_tensor(rng, {2, 3});
  Tensor eps = rand_tensor(rng, {2, 3});
  Tensor zero = Tensor::zeros({2, 3});

  // Zero noise input leaves only the signal term.
  Tensor zt = q_sample(s, z0, 4, zero);
  const float a = static_cast<float>(s.sqrt_alpha_bar(4));
  for (int64_t i = 0; i < z0.numel(); ++i) CHECK(zt[i] == a * z0[i]);

  // Zero signal leaves only the noise term.
  zt = q_sample(s, zero, 4, eps);
  const float b = static_cast<float>(s.sqrt_one_minus_alpha_bar(4));
  for (int64_t i = 0; i < eps.numel(); ++i) CHECK(zt[i] == b * eps[i]);

  // Vanishing beta approaches the identity map (the t -> 0 limit).
  NoiseSchedule tiny = linear_schedule(1, 1e-12, 1e-12);
  zt = q_sample(tiny, z0, 1, eps);
  for (int64_t i = 0; i < z0.numel(); ++i) CHECK(zt[i] == doctest::Approx(z0[i]).epsilon(1e-5));
}

TEST_CASE("forward noising is linear in signal and noise jointly") {
  NoiseSchedule s = linear_schedule(10, 0.01, 0.05);
  Rng rng(7);
  Tensor za = rand_tensor(rng, {4}), zb = rand_tensor(rng, {4});
  Tensor ea = rand_tensor(rng, {4}), eb = rand_tensor(rng, {4});
  Tensor zs = Tensor::zeros({4}), es = Tensor::zeros({4});
  for (int i = 0; i < 4; ++i) {
    zs[i] = za[i] + zb[i];
    es[i] = ea[i] + eb[i];
  }
  Tensor sum = q_sample(s, zs, 7, es);
  Tensor pa = q_sample(s, za, 7, ea);
  Tensor pb = q_sample(s, zb, 7, eb);
  for (int i = 0; i < 4; ++i) {
    CHECK(sum[i] == doctest::Approx(pa[i] + pb[i]).epsilon(1e-5));
  }
}

TEST_CASE("batched forward noising matches per-sample calls bit for bit") {
  NoiseSchedule s = linear_schedule(20, 0.01, 0.1);
  Rng rng(99);
  Tensor z0 = rand_tensor(rng, {3, 2, 2});
  Tensor eps = rand_tensor(rng, {3, 2, 2});
  std::vector<int> ts = {1, 11, 20};
  Tensor batched = q_sample_batch(s, z0, ts, eps);
  for (int n = 0; n < 3; ++n) {
    Tensor zn = Tensor::zeros({1, 2, 2}), en = Tensor::zeros({1, 2, 2});
    for (int i = 0; i < 4; ++i) {
      zn[i] = z0[n * 4 + i];
      en[i] = eps[n * 4 + i];
    }
    Tensor single = q_sample(s, zn, ts[n], en);
    for (int i = 0; i < 4; ++i) REQUIRE(batched[n * 4 + i] == single[i]);
  }
}

TEST_CASE("forward noising rejects bad timesteps and shapes") {
  NoiseSchedule s = linear_schedule(10, 0.01, 0.05);
  Tensor z0 = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(q_sample(s, z0, 0, z0), ValueError);
  CHECK_THROWS_AS(q_sample(s, z0, 11, z0), ValueError);
  CHECK_THROWS_AS(q_sample(s, z0, 3, Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(q_sample_batch(s, z0, {1, 2, 3}, z0), ShapeError);
}

TEST_CASE("timestep draws cover exactly 1..T") {
  NoiseSchedule s = linear_schedule(8, 0.01, 0.05);
  Rng rng(5);
  std::vector<int> seen(9, 0);
  for (int i = 0; i < 4000; ++i) {
    const int t = sample_timestep(s, rng);
    REQUIRE(t >= 1);
    REQUIRE(t <= 8);
    ++seen[t];
  }
  for (int t = 1; t <= 8; ++t) CHECK(seen[t] > 0);
}

TEST_CASE("noised-sample moments match the closed form over many draws") {
  // Monte-Carlo oracle for the forward process at a mid-schedule timestep:
  // mean(z_t) -> sqrt(alpha_bar) * z0, var(z_t) -> 1 - alpha_bar, and
  // E[z_t^2] -> alpha_bar * z0^2 + (1 - alpha_bar), per element.
  NoiseSchedule s = linear_schedule();
  const int t = 300;
  const double ab = s.alpha_bar(t);
  const double sab = std::sqrt(ab);

  Tensor z0 = Tensor::from_vector({8}, {2.f, -2.f, 3.f, -3.f, 2.5f, -2.5f, 1.5f, -1.5f});
  const int kDraws = 100000;
  std::vector<double> sum(8, 0.0), sumsq(8, 0.0);
  for (int d = 0; d < kDraws; ++d) {
    Rng draw = Rng::derive(0x5eed, 0x40c, static_cast<uint64_t>(d));
    Tensor eps = draw.normal_tensor({8});
    Tensor zt = q_sample(s, z0, t, eps);
    for (int i = 0; i < 8; ++i) {
      sum[i] += zt[i];
      sumsq[i] += static_cast<double>(zt[i]) * zt[i];
    }
  }

  // Mean: compare as vectors (relative norm error), which pools the
  // Monte-Carlo noise across elements.
  double err2 = 0.0, ref2 = 0.0;
  for (int i = 0; i < 8; ++i) {
    const double mean = sum[i] / kDraws;
    const double want = sab * z0[i];
    err2 += (mean - want) * (mean - want);
    ref2 += want * want;
  }
  CHECK(std::sqrt(err2 / ref2) <= 0.01);

  // Per-element variance and raw second moment.
  for (int i = 0; i < 8; ++i) {
    const double mean = sum[i] / kDraws;
    const double raw2 = sumsq[i] / kDraws;
    const double var = raw2 - mean * mean;
    CHECK(std::abs(var - (1.0 - ab)) / (1.0 - ab) <= 0.01);
    const double want2 = ab * z0[i] * z0[i] + (1.0 - ab);
    CHECK(std::abs(raw2 - want2) / want2 <= 0.01);
  }
}
