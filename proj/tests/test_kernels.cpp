#include <cmath>

#include "doctest.h"
#include "gausscount/kernels.hpp"
#include "oracles.hpp"

using namespace gausscount;

TEST_CASE("unit gaussian on the 9x9 grid matches dense extended-precision evaluation") {
  KernelSpec spec;
  spec.support_radius = 4;
  const DiscreteKernel kernel = make_gaussian_kernel(spec);
  const auto oracle = testoracle::gaussian_grid(0.0L, 0.0L, 1.0L, 1.0L, 0.0L, 4);

  REQUIRE(kernel.weights.size() == oracle.size());
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    CHECK(std::fabs(static_cast<long double>(kernel.weights[i]) - oracle[i]) <=
          1e-16L);
  }
  // Truncated mass is lost, never renormalized, so the sum sits strictly
  // below one at the value the dense evaluation predicts.
  const double expected_sum = static_cast<double>(testoracle::grid_sum(oracle));
  CHECK(std::fabs(kernel.sum() - expected_sum) <= 1e-13);
  CHECK(kernel.sum() < 1.0);
  CHECK(kernel.sum() > 0.999);
}

TEST_CASE("anisotropic offset gaussian matches dense extended-precision evaluation") {
  KernelSpec spec;
  spec.mean = {0.3, -0.2};
  spec.cov = {2.5, 1.0, 0.8};
  spec.support_radius = 5;
  const DiscreteKernel kernel = make_gaussian_kernel(spec);
  const auto oracle =
      testoracle::gaussian_grid(0.3L, -0.2L, 2.5L, 1.0L, 0.8L, 5);
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    CHECK(std::fabs(static_cast<long double>(kernel.weights[i]) - oracle[i]) <=
          1e-16L);
  }
}

TEST_CASE("kernel construction rejects bad covariances and radii") {
  KernelSpec spec;
  spec.cov = {1.0, 1.0, 1.5};  // |xy| > sqrt(xx * yy)
  spec.support_radius = 2;
  CHECK_THROWS_AS(make_gaussian_kernel(spec), ConfigError);

  spec.cov = {-1.0, 1.0, 0.0};
  CHECK_THROWS_AS(make_gaussian_kernel(spec), ConfigError);

  spec.cov = {1.0, 1.0, 0.0};
  spec.support_radius = 0;
  CHECK_THROWS_AS(make_gaussian_kernel(spec), ConfigError);
}

TEST_CASE("support radius follows the three-sigma rule on the wider axis") {
  CHECK(auto_support_radius({1.0, 1.0, 0.0}) == 3);
  CHECK(auto_support_radius({4.0, 1.0, 0.0}) == 6);
  CHECK(auto_support_radius({1.0, 4.0, 0.0}) == 6);
  // Never below one even for needle-thin kernels.
  CHECK(auto_support_radius({0.0025, 0.0025, 0.0}) == 1);
}

TEST_CASE("kernel inner product equals the direct double-loop sum") {
  KernelSpec spec;
  spec.support_radius = 4;
  const DiscreteKernel a = make_gaussian_kernel(spec);
  spec.cov = {1.6, 0.9, -0.3};
  const DiscreteKernel b = make_gaussian_kernel(spec);

  long double direct = 0.0L;
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    direct += static_cast<long double>(a.weights[i]) *
              static_cast<long double>(b.weights[i]);
  }
  CHECK(std::fabs(static_cast<long double>(kernel_inner_product(a, b)) -
                  direct) <= 1e-18L);
  CHECK(kernel_inner_product(a, b) == kernel_inner_product(b, a));

  DiscreteKernel zero;
  zero.radius = 4;
  zero.weights.assign(81, 0.0);
  CHECK(kernel_inner_product(a, zero) == 0.0);
}

TEST_CASE("sampled banks have the advertised spread, shape and determinism") {
  const KernelBank bank = sample_kernel_bank(100, 1.0, -0.5, 0.5, 2024);
  REQUIRE(bank.specs.size() == 100);
  REQUIRE(bank.kernels.size() == 100);

  // Every kernel sits on the grid of the widest possible draw.
  const int radius = auto_support_radius({1.5 * 1.5, 1.5 * 1.5, 0.0});
  double sigma_sum = 0.0;
  for (std::size_t i = 0; i < bank.specs.size(); ++i) {
    CHECK(bank.kernels[i].radius == radius);
    const Covariance2& cov = bank.specs[i].cov;
    CHECK(cov.spd());
    CHECK(cov.xy == 0.0);
    sigma_sum += std::sqrt(cov.xx) + std::sqrt(cov.yy);
  }
  const double sigma_mean = sigma_sum / (2.0 * bank.specs.size());
  CHECK(sigma_mean > 0.9);
  CHECK(sigma_mean < 1.1);

  // The stored grids are the discretizations of the stored specs.
  for (int i : {0, 37, 99}) {
    const Covariance2& cov = bank.specs[i].cov;
    const auto oracle = testoracle::gaussian_grid(
        0.0L, 0.0L, static_cast<long double>(cov.xx),
        static_cast<long double>(cov.yy), 0.0L, radius);
    for (std::size_t c = 0; c < oracle.size(); ++c) {
      CHECK(std::fabs(static_cast<long double>(bank.kernels[i].weights[c]) -
                      oracle[c]) <= 1e-15L);
    }
  }

  const KernelBank again = sample_kernel_bank(100, 1.0, -0.5, 0.5, 2024);
  CHECK(again.kernels[11].weights == bank.kernels[11].weights);
  const KernelBank other = sample_kernel_bank(100, 1.0, -0.5, 0.5, 2025);
  CHECK(other.kernels[11].weights != bank.kernels[11].weights);
}

TEST_CASE("sigma floor keeps degenerate bank draws alive") {
  // A perturbation range that would push sigma to zero clamps at the floor
  // instead of producing non-SPD covariances.
  const KernelBank bank = sample_kernel_bank(40, 0.02, -0.5, 0.5, 7);
  for (const KernelSpec& spec : bank.specs) {
    CHECK(spec.cov.spd());
    CHECK(std::sqrt(spec.cov.xx) >= kMinSigma - 1e-12);
    CHECK(std::sqrt(spec.cov.yy) >= kMinSigma - 1e-12);
  }
}
