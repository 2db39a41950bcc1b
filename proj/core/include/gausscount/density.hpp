#pragma once

// Ground-truth density maps from point annotations, plus the behavior of
// those maps under annotation noise: displacement sampling, closed-form
// moments under Gaussian jitter, and a Monte-Carlo estimator of the same
// moments.

#include <cstdint>
#include <vector>

#include "gausscount/common.hpp"

namespace gausscount {

// One annotated object location in pixel units, x along axis 1 (columns) and
// y along axis 0 (rows), matching the CSV column order.
struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct PointAnnotations {
  int height = 0;
  int width = 0;
  std::vector<Point> points;  // every point inside [0, width) x [0, height)
};

struct DensityMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major, height * width

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  double sum() const;
};

struct NoiseMoments {
  DensityMap mean_map;
  DensityMap var_map;
  double gamma = 0.0;  // second-moment normalizer scale, 2 * beta
  double delta = 0.0;  // second-moment variance parameter, beta/2 + eps_std^2
};

// Sum of per-point isotropic Gaussians N(p; point, beta*I) sampled at integer
// pixel centers, each truncated at the 3-sigma support rule. Throws
// ConfigError for beta <= 0 or points outside the image.
DensityMap generate_density_map(const PointAnnotations& ann, double beta);

// Expected kernel mass falling outside the image, from the Gaussian CDF per
// axis. Complements the map sum: sum ~= N - boundary loss - truncation loss.
double analytic_boundary_loss(const PointAnnotations& ann, double beta);

// Displaces every point by a uniformly random direction and a magnitude
// uniform in [0, radius] (Euclidean), then clamps back into the image.
PointAnnotations perturb_annotations(const PointAnnotations& ann, double radius,
                                     std::uint64_t seed);

// Closed-form moments of the density under i.i.d. jitter eps ~ N(0, eps_std^2 I)
// per point. The mean is again a sum of Gaussians, with variance
// beta + eps_std^2; the variance combines the second-moment Gaussian
// (gamma = 2*beta, delta = beta/2 + eps_std^2) with the squared mean, clamped
// at zero. Windows follow the 3-sigma rule at the mean-map scale.
NoiseMoments analytic_noise_moments(const PointAnnotations& ann, double beta,
                                    double eps_std);

// Empirical pointwise mean and variance over `trials` jittered regenerations.
// Per-trial kernels are evaluated on the same windows the analytic moments
// use, anchored at the unperturbed annotations, so the estimator targets the
// closed-form maps without support mismatch.
NoiseMoments monte_carlo_noise_moments(const PointAnnotations& ann, double beta,
                                       double eps_std, int trials,
                                       std::uint64_t seed);

}  // namespace gausscount
