#pragma once

// Shared test-side machinery: random layer construction and an independent
// reference forward that materializes every (translation, width) pair from
// extended-precision grids. The reference shares only the public sigma
// accessor with the library; softmax, placement and convolution are
// reimplemented here on purpose.

#include <algorithm>
#include <cmath>
#include <vector>

#include "gausscount/gconv.hpp"
#include "oracles.hpp"

namespace testhelp {

// Layer with a PCA-selected basis of exactly `k` components and uniformly
// drawn translations. Integer translations span the full [-radius, radius]
// box; fractional ones stay a quarter pixel inside it so finite-difference
// wiggles remain legal.
inline gausscount::GaussConvLayer random_gauss_layer(gausscount::Rng& rng,
                                                     int k, int in_channels,
                                                     int out_channels,
                                                     int radius,
                                                     bool integer_means) {
  using namespace gausscount;
  LowRankBasis basis;
  for (int attempt = 0;; ++attempt) {
    const KernelBank bank = sample_kernel_bank(40 + attempt, 1.0, -0.4, 0.4,
                                               rng());
    basis = pca_select(bank, k);
    if (basis.k() == k) break;
  }
  GaussConvLayer layer =
      make_gauss_layer(basis, radius, in_channels, out_channels, 1.0, rng());
  for (Vec2& mu : layer.means) {
    if (integer_means) {
      const auto draw = [&] {
        const int v =
            static_cast<int>(uniform_in(rng, 0.0, 2.0 * radius + 1.0)) - radius;
        return static_cast<double>(std::clamp(v, -radius, radius));
      };
      mu.d0 = draw();
      mu.d1 = draw();
    } else {
      mu.d0 = uniform_in(rng, -radius + 0.25, radius - 0.25);
      mu.d1 = uniform_in(rng, -radius + 0.25, radius - 0.25);
    }
  }
  return layer;
}

inline gausscount::FeatureMap random_map(gausscount::Rng& rng, int channels,
                                         int height, int width) {
  gausscount::FeatureMap map = gausscount::make_feature_map(channels, height,
                                                            width);
  for (double& v : map.values) v = gausscount::normal_draw(rng);
  return map;
}

// Reference route: softmax the fusion logits in long double, build one
// combined kernel sum_k fused_k * place(G(sigma_j), mu_k) over all j and k,
// convolve each input channel with it directly, then apply the channel mix.
inline gausscount::FeatureMap pre_shifted_reference(
    const gausscount::FeatureMap& input, const gausscount::GaussConvLayer& layer) {
  using namespace gausscount;
  const int k = layer.k();

  std::vector<long double> fused(k);
  long double top = -1e30L;
  for (int j = 0; j < k; ++j) {
    top = std::max(top, static_cast<long double>(layer.basis.logits[j]));
  }
  long double denom = 0.0L;
  for (int j = 0; j < k; ++j) {
    fused[j] = std::exp(static_cast<long double>(layer.basis.logits[j]) - top);
    denom += fused[j];
  }
  for (long double& f : fused) f /= denom;

  double mu_max = 0.0;
  for (const Vec2& mu : layer.means) {
    mu_max = std::max({mu_max, std::abs(mu.d0), std::abs(mu.d1)});
  }
  const int big = layer.grid_radius + static_cast<int>(std::floor(mu_max)) + 2;
  const int side = 2 * big + 1;
  std::vector<long double> total(static_cast<std::size_t>(side) * side, 0.0L);
  for (int j = 0; j < k; ++j) {
    const long double s2 = static_cast<long double>(layer.sigma(j)) *
                           static_cast<long double>(layer.sigma(j));
    const auto base = testoracle::gaussian_grid(0.0L, 0.0L, s2, s2, 0.0L,
                                                layer.grid_radius);
    for (int t = 0; t < k; ++t) {
      const auto placed = testoracle::place_bilinear(
          base, layer.grid_radius, layer.means[t].d0, layer.means[t].d1, big);
      for (std::size_t i = 0; i < total.size(); ++i) {
        total[i] += fused[t] * placed[i];
      }
    }
  }

  std::vector<std::vector<long double>> smoothed(layer.in_channels);
  for (int c = 0; c < layer.in_channels; ++c) {
    std::vector<long double> plane(input.plane_size());
    for (std::size_t i = 0; i < plane.size(); ++i) {
      plane[i] = static_cast<long double>(
          input.values[static_cast<std::size_t>(c) * input.plane_size() + i]);
    }
    smoothed[c] = testoracle::conv_same(plane, input.height, input.width,
                                        total, big);
  }

  FeatureMap out = make_feature_map(layer.out_channels, input.height,
                                    input.width);
  for (int o = 0; o < layer.out_channels; ++o) {
    for (std::size_t p = 0; p < out.plane_size(); ++p) {
      long double acc = static_cast<long double>(layer.bias[o]);
      for (int c = 0; c < layer.in_channels; ++c) {
        acc += static_cast<long double>(
                   layer.mix[static_cast<std::size_t>(o) * layer.in_channels +
                             c]) *
               smoothed[c][p];
      }
      out.values[static_cast<std::size_t>(o) * out.plane_size() + p] =
          static_cast<double>(acc);
    }
  }
  return out;
}

inline double max_abs_diff(const gausscount::FeatureMap& a,
                           const gausscount::FeatureMap& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
  }
  return worst;
}

}  // namespace testhelp
