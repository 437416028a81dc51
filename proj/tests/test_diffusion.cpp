#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dswp/schedule.hpp"

using namespace dswp;

TEST_CASE("make_schedule examples") {
  NoiseSchedule one = make_schedule(1, 0.5, 0.5);
  CHECK(one.alpha_bar_at(1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(one.alpha_bar_at(0) == 1.0);

  NoiseSchedule two = make_schedule(2, 0.1, 0.2);
  CHECK(two.beta_at(1) == doctest::Approx(0.1));
  CHECK(two.beta_at(2) == doctest::Approx(0.2));
  CHECK(two.alpha_bar_at(1) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(two.alpha_bar_at(2) == doctest::Approx(0.72).epsilon(1e-12));
}

TEST_CASE("default schedule matches an independent cumulative product") {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  // Independent oracle: recompute the product in long double.
  long double prod = 1.0L;
  for (int t = 0; t < 1000; ++t) {
    long double beta = 1e-4L + (0.02L - 1e-4L) * t / 999.0L;
    prod *= (1.0L - beta);
    if (t == 499) CHECK(std::abs(double(prod) - s.alpha_bar_at(500)) < 1e-6);
  }
  CHECK(std::abs(double(prod) - s.alpha_bar_at(1000)) < 1e-6);
  CHECK(s.alpha_bar_at(1000) < 0.05);  // near-isotropic terminal state

  // invariants: monotone betas, strictly decreasing alpha_bar, recurrence
  for (int t = 2; t <= s.T; ++t) {
    CHECK(s.beta_at(t) >= s.beta_at(t - 1));
    CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    CHECK(s.alpha_bar_at(t) == doctest::Approx(s.alpha_bar_at(t - 1) * s.alpha_at(t))
                                   .epsilon(1e-15));
  }
  CHECK(s.beta_at(1) > 0.0);
  CHECK(s.beta_at(s.T) < 1.0);
}

TEST_CASE("make_schedule rejects bad arguments") {
  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), Error);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), Error);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), Error);
  CHECK_THROWS_AS(make_schedule(10, 0.3, 1.0), Error);
}

TEST_CASE("forward_sample closed form") {
  NoiseSchedule s = make_schedule(100, 1e-3, 0.05);
  Philox rng(11);
  Tensor z0 = Tensor::randn({2, 4, 4}, rng);
  Tensor zero = Tensor::zeros(z0.shape());

  // noise = 0: z_t = sqrt(abar) z0
  Tensor zt = forward_sample(s, z0, 40, zero);
  double c = std::sqrt(s.alpha_bar_at(40));
  for (int64_t i = 0; i < z0.numel(); ++i)
    CHECK(zt.at(i) == doctest::Approx(c * z0.at(i)).epsilon(1e-6));

  // z0 = 0: z_t = sqrt(1-abar) noise
  Tensor eps = Tensor::randn(z0.shape(), rng);
  Tensor zt2 = forward_sample(s, zero, 40, eps);
  double cn = std::sqrt(1.0 - s.alpha_bar_at(40));
  for (int64_t i = 0; i < z0.numel(); ++i)
    CHECK(zt2.at(i) == doctest::Approx(cn * eps.at(i)).epsilon(1e-6));

  CHECK_THROWS_AS(forward_sample(s, z0, 101, eps), Error);
  CHECK_THROWS_AS(forward_sample(s, z0, -1, eps), Error);
}

TEST_CASE("forward_sample empirical moments match the closed form") {
  NoiseSchedule s = make_schedule(100, 1e-3, 0.05);
  Philox rng(12);
  Tensor z0 = Tensor::randn({4}, rng);
  const int t = 50, n = 10000;
  double ab = s.alpha_bar_at(t);
  std::vector<double> sum(4, 0.0), sq(4, 0.0);
  for (int i = 0; i < n; ++i) {
    Tensor zt = forward_sample(s, z0, t, Tensor::randn(z0.shape(), rng));
    for (int j = 0; j < 4; ++j) {
      sum[j] += zt.at(j);
      sq[j] += double(zt.at(j)) * zt.at(j);
    }
  }
  double want_var = 1.0 - ab;
  double se_mean = std::sqrt(want_var / n);
  double se_var = want_var * std::sqrt(2.0 / n);
  for (int j = 0; j < 4; ++j) {
    double mean = sum[j] / n;
    double var = sq[j] / n - mean * mean;
    CHECK(std::abs(mean - std::sqrt(ab) * z0.at(j)) < 3 * se_mean);
    CHECK(std::abs(var - want_var) < 3 * se_var);
  }
}

TEST_CASE("estimate_z0 inverts forward_sample") {
  NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  Philox rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor z0 = Tensor::randn({3, 4, 4}, rng);
    Tensor eps = Tensor::randn(z0.shape(), rng);
    int t = 1 + static_cast<int>(rng.uniform() * s.T);
    Tensor zt = forward_sample(s, z0, t, eps);
    Tensor back = estimate_z0(s, zt, eps, t);
    for (int64_t i = 0; i < z0.numel(); ++i)
      CHECK(std::abs(back.at(i) - z0.at(i)) < 1e-5);
  }

  // eps = 0 -> z_t / sqrt(abar)
  Tensor zt = Tensor::randn({5}, rng);
  Tensor est = estimate_z0(s, zt, Tensor::zeros({5}), 700);
  for (int i = 0; i < 5; ++i)
    CHECK(est.at(i) == doctest::Approx(zt.at(i) / std::sqrt(s.alpha_bar_at(700))).epsilon(1e-6));

  // round trip the other way: forward_sample(estimate_z0(zt), t, eps) == zt
  for (int trial = 0; trial < 50; ++trial) {
    Tensor z = Tensor::randn({8}, rng);
    Tensor eps = Tensor::randn({8}, rng);
    int t = 1 + static_cast<int>(rng.uniform() * s.T);
    Tensor again = forward_sample(s, estimate_z0(s, z, eps, t), t, eps);
    for (int i = 0; i < 8; ++i) CHECK(std::abs(again.at(i) - z.at(i)) < 1e-5);
  }

  CHECK_THROWS_AS(estimate_z0(s, zt, Tensor::zeros({5}), 0), Error);
  CHECK_THROWS_AS(estimate_z0(s, zt, Tensor::zeros({5}), 1001), Error);
}

TEST_CASE("ddim sigma and step behavior") {
  NoiseSchedule s = make_schedule(100, 1e-3, 0.05);
  // eta=0 is deterministic: sigma 0, repeated calls identical, noise ignored
  CHECK(ddim_sigma(s, 40, 39, 0.0) == 0.0);
  Philox rng(14);
  Tensor zh = Tensor::randn({6}, rng), eps = Tensor::randn({6}, rng);
  Tensor a = ddim_step(s, zh, eps, 40, 0.0, Tensor());
  Tensor b = ddim_step(s, zh, eps, 40, 0.0, Tensor());
  CHECK(a.vec() == b.vec());

  // t=1, eta=0: alpha_bar(0)=1 so output == z_hat, direction coefficient 0
  Tensor at1 = ddim_step(s, zh, eps, 1, 0.0, Tensor());
  for (int i = 0; i < 6; ++i) CHECK(at1.at(i) == doctest::Approx(zh.at(i)).epsilon(1e-7));

  // sigma formula: the DiffusionStepParams invariant
  for (int t = 2; t <= 100; t += 7) {
    double sig = ddim_sigma(s, t, t - 1, 0.7);
    double ab = s.alpha_bar_at(t), abp = s.alpha_bar_at(t - 1);
    double want = 0.7 * std::sqrt((1 - abp) / (1 - ab)) * std::sqrt(1 - ab / abp);
    CHECK(sig == doctest::Approx(want).epsilon(1e-12));
    CHECK(1.0 - abp - sig * sig >= 0.0);
  }

  CHECK_THROWS_AS(ddim_sigma(s, 40, 40, 0.5), Error);
  CHECK_THROWS_AS(ddim_sigma(s, 40, 39, 1.5), Error);
}

TEST_CASE("ddim step at eta=1 has the advertised variance") {
  NoiseSchedule s = make_schedule(100, 1e-3, 0.05);
  Philox rng(15);
  Tensor zh = Tensor::randn({2}, rng), eps = Tensor::randn({2}, rng);
  const int t = 60, n = 10000;
  double sigma = ddim_sigma(s, t, t - 1, 1.0);
  std::vector<double> sum(2, 0.0), sq(2, 0.0);
  for (int i = 0; i < n; ++i) {
    Tensor out = ddim_step(s, zh, eps, t, 1.0, Tensor::randn({2}, rng));
    for (int j = 0; j < 2; ++j) {
      sum[j] += out.at(j);
      sq[j] += double(out.at(j)) * out.at(j);
    }
  }
  for (int j = 0; j < 2; ++j) {
    double mean = sum[j] / n;
    double var = sq[j] / n - mean * mean;
    CHECK(std::abs(var - sigma * sigma) / (sigma * sigma) < 0.05);
  }
}

TEST_CASE("perfect noise predictor reconstructs z0 through the full reverse pass") {
  // With eps == the true noise of z_t given z0, eta=0 DDIM must walk back to
  // z0 for any T <= 50.
  for (int T : {10, 50}) {
    NoiseSchedule s = make_schedule(T, 1e-3, 0.05);
    Philox rng(16 + T);
    Tensor z0 = Tensor::randn({3, 3}, rng);
    Tensor z = forward_sample(s, z0, T, Tensor::randn(z0.shape(), rng));
    for (int t = T; t >= 1; --t) {
      // the oracle noise implied by (z_t, z0)
      double ab = s.alpha_bar_at(t);
      Tensor eps = mul_scalar(axpby(1.0, z, -std::sqrt(ab), z0), 1.0 / std::sqrt(1.0 - ab));
      Tensor zh = estimate_z0(s, z, eps, t);
      z = ddim_step(s, zh, eps, t, 0.0, Tensor());
    }
    for (int64_t i = 0; i < z0.numel(); ++i) CHECK(std::abs(z.at(i) - z0.at(i)) < 1e-3);
  }
}

TEST_CASE("strided timestep subsequences") {
  CHECK(strided_timesteps(500, 100) == std::vector<int>({500, 400, 300, 200, 100}));
  CHECK(strided_timesteps(3, 1) == std::vector<int>({3, 2, 1}));
  CHECK_THROWS_AS(strided_timesteps(500, 300), Error);
  CHECK_THROWS_AS(strided_timesteps(0, 1), Error);
}
