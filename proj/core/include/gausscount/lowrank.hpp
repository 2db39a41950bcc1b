#pragma once

// Low-rank selection of representative kernels from a sampled bank: PCA over
// the flattened grids, moment matching of each retained component back to a
// Gaussian covariance, and overlap-based initialization of the fusion
// weights. The downstream convolution consumes the matched covariances; the
// raw component grids are kept for inspection but are not persisted.

#include <cstdint>
#include <string>
#include <vector>

#include "gausscount/kernels.hpp"

namespace gausscount {

// Eigenvalues below kEigenTolScale times the largest are treated as zero.
inline constexpr double kEigenTolScale = 1e-10;

struct LowRankBasis {
  int radius = 0;
  // Unit-norm component grids. When mean_component is set, components[0] is
  // the normalized bank mean and the eigenvectors follow.
  std::vector<DiscreteKernel> components;
  // Component energies, descending: the mean's squared norm first (when
  // present), then the retained covariance eigenvalues.
  std::vector<double> eigenvalues;
  std::vector<Covariance2> covariances;  // moment-matched, SPD
  std::vector<double> logits;            // fusion weights before softmax
  bool mean_component = false;

  int k() const { return static_cast<int>(covariances.size()); }
};

// PCA over the flattened bank. The bank mean is subtracted before the
// covariance; if its norm clears the tolerance it is retained as component 0,
// and eigenvectors fill the remaining slots up to k_max. Eigenvector signs
// are fixed by making the largest-magnitude entry positive.
LowRankBasis pca_select(const KernelBank& bank, int k_max);

// logits[k] = <G(cov_k), G(I)>, both discretized at grid_radius. Narrower
// components overlap the unit Gaussian more and start with larger weight.
std::vector<double> init_weights(const LowRankBasis& basis, int grid_radius);

// Max-subtracted softmax. Throws ConfigError on empty or non-finite input.
std::vector<double> softmax_normalize(const std::vector<double>& logits);

// JSON round trip for {radius, eigenvalues, covariances, logits}. Reals are
// hex-encoded bit patterns, so a round trip is bit-faithful. Component grids
// are not serialized; consumers rebuild Gaussians from the covariances.
std::string basis_to_json(const LowRankBasis& basis);
LowRankBasis basis_from_json(const std::string& text);

}  // namespace gausscount
