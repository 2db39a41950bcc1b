#pragma once

// Gaussian convolution layers. Three routes compute the layer response:
//
//   forward_massive_oracle  one direct convolution per kernel spec; the slow
//                           reference for the many-kernel formulation
//   forward_lra_oracle      K x K materialized component kernels (every mean
//                           paired with every covariance), convolved directly
//   forward_fast            K zero-mean convolutions, one summed map, then K
//                           weighted subpixel shifts of that map
//
// The fast route and the K x K oracle compute the same function; the oracles
// exist so tests can certify that. All convolutions use same padding with
// zeros outside the image.

#include <cstdint>
#include <string>
#include <vector>

#include "gausscount/lowrank.hpp"

namespace gausscount {

struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;  // [c][y][x] row-major

  double at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double& at(int c, int y, int x) {
    return values[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::size_t plane_size() const {
    return static_cast<std::size_t>(height) * width;
  }
};

FeatureMap make_feature_map(int channels, int height, int width);

// Spatial filtering is shared across input channels: K isotropic Gaussians
// with sigma_j = kMinSigma + softplus(sigma_params[j]), fused by
// softmax(logits), each fused response translated by means[k]. A learned
// pointwise mix folds input channels into output channels.
struct GaussConvLayer {
  LowRankBasis basis;                 // covariances and logits, K entries
  std::vector<Vec2> means;            // K translations, |mean| <= grid_radius
  std::vector<double> sigma_params;   // K unconstrained reals
  std::vector<double> mix;            // out_channels x in_channels, row-major
  std::vector<double> bias;           // out_channels
  int grid_radius = 2;
  int in_channels = 1;
  int out_channels = 1;
  bool train_means = false;

  int k() const { return static_cast<int>(sigma_params.size()); }
  double sigma(int j) const;           // the positive map applied to params[j]
  double sigma_grad(int j) const;      // d sigma / d sigma_params[j]
};

// Builds a layer from a selected basis: sigma_params invert the positive map
// at each matched covariance's mean-variance sigma, means default to a
// row-major stride grid centered on the origin, the mix is fan-in scaled.
GaussConvLayer make_gauss_layer(const LowRankBasis& basis, int grid_radius,
                                int in_channels, int out_channels,
                                double mean_spacing, std::uint64_t seed);

// The centered row-major grid of k points with the given spacing used for
// default means; ceil(sqrt(k)) cells per side, first k cells taken.
std::vector<Vec2> default_mean_grid(int k, double spacing);

struct LayerGradients {
  FeatureMap d_input;
  std::vector<double> d_logits;
  std::vector<double> d_sigma_params;
  std::vector<Vec2> d_means;           // zero unless train_means
  std::vector<double> d_mix;
  std::vector<double> d_bias;
};

// Direct evaluation of sum_i G(mean_i, cov_i) * X per input channel, then the
// pointwise mix and bias. mix must have bias.size() * input.channels entries.
// Guarded: refuses image sides > 128 or more than 1024 specs.
FeatureMap forward_massive_oracle(const FeatureMap& input,
                                  const std::vector<KernelSpec>& specs,
                                  const std::vector<double>& mix,
                                  const std::vector<double>& bias);

// K x K route: every (mean_k, sigma_j) pair materialized as one discrete
// kernel (the zero-mean kernel placed at the mean with bilinear weights on an
// enlarged grid) and convolved directly. Guarded: K <= 32, sides <= 64.
FeatureMap forward_lra_oracle(const FeatureMap& input,
                              const GaussConvLayer& layer);

// Channel-wise subpixel translation: output[p] = sum_ij a_ij * map[p - floor(mu) - (i,j)]
// with bilinear corner weights a_ij from the fractional part of mu. Out of
// bounds reads are zero.
FeatureMap shift_bilinear(const FeatureMap& map, Vec2 mu);

// Factorized route: K zero-mean convolutions, summed, then K weighted
// bilinear shifts, then mix and bias.
FeatureMap forward_fast(const FeatureMap& input, const GaussConvLayer& layer);

// Exact reverse-mode gradients of forward_fast for the given upstream
// cotangent (same shape as the forward output).
LayerGradients backward(const FeatureMap& input, const GaussConvLayer& layer,
                        const FeatureMap& upstream);

// Input gradients of the two reference routes, so timing can cover a backward
// pass per route. The fast route's full backward() additionally produces
// parameter gradients.
FeatureMap backward_input_massive(const std::vector<KernelSpec>& specs,
                                  const std::vector<double>& mix,
                                  int in_channels, const FeatureMap& upstream);
FeatureMap backward_input_lra(const GaussConvLayer& layer,
                              const FeatureMap& upstream);

// Multiply-accumulate counts for the three routes at the given input shape,
// with kernel side 2 * grid_radius + 1 and n_vanilla direct kernels.
struct ComplexityCount {
  std::uint64_t vanilla = 0;
  std::uint64_t lra = 0;
  std::uint64_t fast = 0;
};
ComplexityCount complexity_count(const GaussConvLayer& layer, int in_channels,
                                 int height, int width, int n_vanilla);

// JSON round trip of all layer parameters; reals are hex-encoded bit
// patterns, so reload reproduces the layer bit for bit.
std::string layer_to_json(const GaussConvLayer& layer);
GaussConvLayer layer_from_json(const std::string& text);

}  // namespace gausscount
