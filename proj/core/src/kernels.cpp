#include "gausscount/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace gausscount {

double DiscreteKernel::sum() const {
  double total = 0.0;
  for (double w : weights) total += w;
  return total;
}

int auto_support_radius(const Covariance2& cov) {
  const double sigma_max = std::sqrt(std::max(cov.xx, cov.yy));
  return std::max(1, static_cast<int>(std::ceil(3.0 * sigma_max)));
}

DiscreteKernel make_gaussian_kernel(const KernelSpec& spec) {
  if (!spec.cov.spd()) {
    throw ConfigError("kernel covariance is not SPD (xx=" +
                      std::to_string(spec.cov.xx) + ", yy=" +
                      std::to_string(spec.cov.yy) + ", xy=" +
                      std::to_string(spec.cov.xy) + ")");
  }
  if (spec.support_radius < 1) {
    throw ConfigError("kernel support radius must be >= 1");
  }

  const double det = spec.cov.det();
  const double norm = 1.0 / (2.0 * std::numbers::pi * std::sqrt(det));
  // Inverse covariance, [i00 i01; i01 i11].
  const double i00 = spec.cov.yy / det;
  const double i11 = spec.cov.xx / det;
  const double i01 = -spec.cov.xy / det;

  DiscreteKernel kernel;
  kernel.radius = spec.support_radius;
  const int n = kernel.size();
  kernel.weights.resize(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    const double d0 = static_cast<double>(i - spec.support_radius) - spec.mean.d0;
    for (int j = 0; j < n; ++j) {
      const double d1 = static_cast<double>(j - spec.support_radius) - spec.mean.d1;
      const double quad = d0 * (i00 * d0 + i01 * d1) + d1 * (i01 * d0 + i11 * d1);
      kernel.at(i, j) = norm * std::exp(-0.5 * quad);
    }
  }
  return kernel;
}

KernelBank sample_kernel_bank(int count, double base_sigma, double perturb_lo,
                              double perturb_hi, std::uint64_t seed) {
  if (count < 1) {
    throw ConfigError("kernel bank needs at least one kernel");
  }
  if (perturb_lo > perturb_hi) {
    throw ConfigError("perturbation range is inverted");
  }

  // One shared radius, wide enough for the largest possible draw.
  const double sigma_hi = std::max(kMinSigma, base_sigma + perturb_hi);
  Covariance2 widest;
  widest.xx = sigma_hi * sigma_hi;
  widest.yy = sigma_hi * sigma_hi;
  const int radius = auto_support_radius(widest);

  Rng rng(seed);
  KernelBank bank;
  bank.specs.reserve(count);
  bank.kernels.reserve(count);
  for (int n = 0; n < count; ++n) {
    const double s0 =
        std::max(kMinSigma, base_sigma + uniform_in(rng, perturb_lo, perturb_hi));
    const double s1 =
        std::max(kMinSigma, base_sigma + uniform_in(rng, perturb_lo, perturb_hi));
    KernelSpec spec;
    spec.cov.xx = s0 * s0;
    spec.cov.yy = s1 * s1;
    spec.cov.xy = 0.0;
    spec.support_radius = radius;
    bank.kernels.push_back(make_gaussian_kernel(spec));
    bank.specs.push_back(spec);
  }
  return bank;
}

double kernel_inner_product(const DiscreteKernel& a, const DiscreteKernel& b) {
  if (a.radius != b.radius || a.weights.size() != b.weights.size()) {
    throw ShapeError("kernel inner product needs equally shaped grids");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < a.weights.size(); ++i) {
    total += a.weights[i] * b.weights[i];
  }
  return total;
}

}  // namespace gausscount
