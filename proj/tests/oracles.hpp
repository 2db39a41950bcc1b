#pragma once

// Reference implementations used only by the tests. Everything here favors
// clarity and extended precision over speed, and deliberately avoids the
// library's numeric helpers so the two sides can disagree.

#include <cstdint>
#include <utility>
#include <vector>

namespace testoracle {

// ============================================================================
// Gaussian grids
// ============================================================================

// Dense bivariate normal on the (2r+1)^2 integer grid: value at offset
// (d0, d1) is N((d0, d1); mean, cov) with the analytic normalizer
// 1 / (2*pi*sqrt(det)). No renormalization. Row-major, origin at the center.
std::vector<long double> gaussian_grid(long double mean0, long double mean1,
                                       long double cxx, long double cyy,
                                       long double cxy, int radius);

// Sum of all grid entries.
long double grid_sum(const std::vector<long double>& grid);

// Kernel placed at a real-valued translation with bilinear corner weights on
// an enlarged grid: placed(v) = sum_ij a_ij * k(v - floor(t) - (i, j)) where
// a_ij are the bilinear weights of the fractional part of t. Entries of k
// that would land outside the enlarged grid are dropped (the caller picks
// out_radius large enough when that matters).
std::vector<long double> place_bilinear(const std::vector<long double>& kernel,
                                        int radius, long double t0,
                                        long double t1, int out_radius);

// ============================================================================
// Convolution
// ============================================================================

// Plain 4-loop same-padding convolution, zero fill outside the image:
// out(y, x) = sum_{u,v in [-r, r]} k(u, v) * im(y - u, x - v).
std::vector<long double> conv_same(const std::vector<long double>& image,
                                   int height, int width,
                                   const std::vector<long double>& kernel,
                                   int radius);

// ============================================================================
// Density
// ============================================================================

// Direct evaluation of the density at one pixel: sum over points of
// N((px, py); point, beta * I), untruncated. Only meaningful at pixels that
// sit inside every point's support window, where truncation changes nothing.
long double density_at(
    const std::vector<std::pair<long double, long double>>& points_xy,
    long double beta, int px, int py);

// ============================================================================
// Symmetric eigenproblems
// ============================================================================

// Leading eigenpairs of a symmetric n x n matrix (row-major) via power
// iteration with deflation, long double throughout. Eigenvalues come out
// descending; iteration stops once the residual |A v - lambda v| is at the
// rounding floor relative to the largest eigenvalue, so even eigenvalues many
// decades below the top stay accurate in absolute terms.
struct EigenOracle {
  std::vector<long double> values;
  std::vector<std::vector<long double>> vectors;  // unit norm, deflation order
};
EigenOracle power_iteration_eigs(const std::vector<long double>& matrix, int n,
                                 int count, std::uint64_t seed);

}  // namespace testoracle
