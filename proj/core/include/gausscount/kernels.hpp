#pragma once

// Discrete 2-D Gaussian kernels. Kernels carry the analytic normalizer
// 1 / (2*pi*sqrt(det(cov))) and are truncated at the 3-sigma support rule;
// truncated mass is lost, never renormalized, so kernel sums stay honest
// about discretization.

#include <cstdint>
#include <vector>

#include "gausscount/common.hpp"

namespace gausscount {

// Sigma floor applied when sampling banks and when mapping unconstrained
// parameters to a standard deviation.
inline constexpr double kMinSigma = 0.05;

// Symmetric 2x2 covariance. xx is the variance along axis 0 (rows), yy along
// axis 1 (columns), xy the cross term.
struct Covariance2 {
  double xx = 1.0;
  double yy = 1.0;
  double xy = 0.0;

  double det() const { return xx * yy - xy * xy; }
  bool spd() const { return xx > 0.0 && yy > 0.0 && det() > 0.0; }
};

struct KernelSpec {
  Vec2 mean;                // subpixel offset of the mode from the grid origin
  Covariance2 cov;
  int support_radius = 1;   // weights span [-r, r] per axis
};

// Dense kernel on a (2r+1)^2 grid, row-major, origin at the center cell.
struct DiscreteKernel {
  int radius = 0;
  std::vector<double> weights;

  int size() const { return 2 * radius + 1; }
  // i, j are grid indices in [0, 2r]; the origin sits at (r, r).
  double at(int i, int j) const { return weights[i * size() + j]; }
  double& at(int i, int j) { return weights[i * size() + j]; }
  double sum() const;
};

// Zero-mean covariance samples plus their discretizations, all on one shared
// grid shape so the bank stacks into a matrix.
struct KernelBank {
  std::vector<KernelSpec> specs;
  std::vector<DiscreteKernel> kernels;
};

// 3-sigma truncation of the wider axis, never below 1.
int auto_support_radius(const Covariance2& cov);

// Samples N(mean, cov) at integer grid offsets. Throws ConfigError when cov
// is not SPD or the radius is not positive.
DiscreteKernel make_gaussian_kernel(const KernelSpec& spec);

// `count` zero-mean kernels with per-axis standard deviation
// base_sigma + u, u ~ U[perturb_lo, perturb_hi] drawn independently per axis
// and clamped to kMinSigma. Every kernel gets the support radius of the
// widest possible draw.
KernelBank sample_kernel_bank(int count, double base_sigma, double perturb_lo,
                              double perturb_hi, std::uint64_t seed);

// Elementwise dot product of two equally shaped grids.
double kernel_inner_product(const DiscreteKernel& a, const DiscreteKernel& b);

}  // namespace gausscount
