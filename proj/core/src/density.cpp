#include "gausscount/density.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "gausscount/kernels.hpp"

namespace gausscount {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void check_annotations(const PointAnnotations& ann) {
  if (ann.height < 1 || ann.width < 1) {
    throw ConfigError("annotation image size must be positive");
  }
  for (const Point& p : ann.points) {
    if (!(p.x >= 0.0 && p.x < ann.width && p.y >= 0.0 && p.y < ann.height)) {
      throw ConfigError("annotation point (" + std::to_string(p.x) + ", " +
                        std::to_string(p.y) + ") outside image " +
                        std::to_string(ann.width) + "x" +
                        std::to_string(ann.height));
    }
  }
}

int support_radius_for(double var) {
  Covariance2 cov;
  cov.xx = var;
  cov.yy = var;
  return auto_support_radius(cov);
}

// Adds norm * N(pixel; center, var*I) over the window of half-width `radius`
// anchored at `anchor`, clipped to the map. The separable row/column factors
// keep the exp count linear in the window size.
void splat_gaussian(DensityMap& map, const Point& anchor, const Point& center,
                    int radius, double var, double scale) {
  const int ay = static_cast<int>(std::floor(anchor.y));
  const int ax = static_cast<int>(std::floor(anchor.x));
  const int y_lo = std::max(0, ay - radius);
  const int y_hi = std::min(map.height - 1, ay + radius + 1);
  const int x_lo = std::max(0, ax - radius);
  const int x_hi = std::min(map.width - 1, ax + radius + 1);
  if (y_lo > y_hi || x_lo > x_hi) return;

  const double norm = scale / (kTwoPi * var);
  const double inv2v = 1.0 / (2.0 * var);
  std::vector<double> row_factor(static_cast<std::size_t>(y_hi - y_lo) + 1);
  std::vector<double> col_factor(static_cast<std::size_t>(x_hi - x_lo) + 1);
  for (int y = y_lo; y <= y_hi; ++y) {
    const double dy = static_cast<double>(y) - center.y;
    row_factor[y - y_lo] = std::exp(-dy * dy * inv2v);
  }
  for (int x = x_lo; x <= x_hi; ++x) {
    const double dx = static_cast<double>(x) - center.x;
    col_factor[x - x_lo] = std::exp(-dx * dx * inv2v);
  }
  for (int y = y_lo; y <= y_hi; ++y) {
    const double row = norm * row_factor[y - y_lo];
    double* out = &map.at(y, x_lo);
    for (int x = x_lo; x <= x_hi; ++x) {
      out[x - x_lo] += row * col_factor[x - x_lo];
    }
  }
}

DensityMap zero_map(int height, int width) {
  DensityMap map;
  map.height = height;
  map.width = width;
  map.values.assign(static_cast<std::size_t>(height) * width, 0.0);
  return map;
}

}  // namespace

double DensityMap::sum() const {
  double total = 0.0;
  for (double v : values) total += v;
  return total;
}

DensityMap generate_density_map(const PointAnnotations& ann, double beta) {
  if (!(beta > 0.0)) {
    throw ConfigError("density beta must be positive");
  }
  check_annotations(ann);

  DensityMap map = zero_map(ann.height, ann.width);
  const int radius = support_radius_for(beta);
  for (const Point& p : ann.points) {
    splat_gaussian(map, p, p, radius, beta, 1.0);
  }
  return map;
}

double analytic_boundary_loss(const PointAnnotations& ann, double beta) {
  if (!(beta > 0.0)) {
    throw ConfigError("density beta must be positive");
  }
  check_annotations(ann);

  const double inv_s = 1.0 / std::sqrt(2.0 * beta);
  double loss = 0.0;
  for (const Point& p : ann.points) {
    const double mx = 0.5 * (std::erf((ann.width - 0.5 - p.x) * inv_s) -
                             std::erf((-0.5 - p.x) * inv_s));
    const double my = 0.5 * (std::erf((ann.height - 0.5 - p.y) * inv_s) -
                             std::erf((-0.5 - p.y) * inv_s));
    loss += 1.0 - mx * my;
  }
  return loss;
}

PointAnnotations perturb_annotations(const PointAnnotations& ann, double radius,
                                     std::uint64_t seed) {
  if (radius < 0.0) {
    throw ConfigError("perturbation radius must be >= 0");
  }
  check_annotations(ann);

  PointAnnotations out = ann;
  if (radius == 0.0) return out;

  // Largest representable coordinates still inside the image.
  const double x_max = std::nextafter(static_cast<double>(ann.width), 0.0);
  const double y_max = std::nextafter(static_cast<double>(ann.height), 0.0);
  Rng rng(seed);
  for (Point& p : out.points) {
    const double angle = uniform_in(rng, 0.0, kTwoPi);
    const double magnitude = uniform_in(rng, 0.0, radius);
    p.x = std::clamp(p.x + magnitude * std::cos(angle), 0.0, x_max);
    p.y = std::clamp(p.y + magnitude * std::sin(angle), 0.0, y_max);
  }
  return out;
}

NoiseMoments analytic_noise_moments(const PointAnnotations& ann, double beta,
                                    double eps_std) {
  if (!(beta > 0.0)) {
    throw ConfigError("density beta must be positive");
  }
  if (eps_std < 0.0) {
    throw ConfigError("eps_std must be >= 0");
  }
  check_annotations(ann);

  NoiseMoments moments;
  moments.gamma = 2.0 * beta;
  moments.delta = 0.5 * beta + eps_std * eps_std;
  moments.mean_map = zero_map(ann.height, ann.width);
  moments.var_map = zero_map(ann.height, ann.width);

  const double var_mean = beta + eps_std * eps_std;
  const int radius = support_radius_for(var_mean);
  for (const Point& p : ann.points) {
    splat_gaussian(moments.mean_map, p, p, radius, var_mean, 1.0);
  }

  if (eps_std == 0.0) {
    // Every jitter draw is the zero vector; the map never varies.
    return moments;
  }

  // Var = E[y^2] - E[y]^2 per point, summed over points (independent jitter).
  // E[y^2] is the second-moment Gaussian with normalizer 1/(2*pi*gamma) and
  // variance delta; splat_gaussian supplies delta's own 1/(2*pi*delta).
  const double second_scale = 1.0 / (kTwoPi * moments.gamma);
  for (const Point& p : ann.points) {
    splat_gaussian(moments.var_map, p, p, radius, moments.delta, second_scale);
    // Subtract the squared single-point mean on the same window.
    const int ay = static_cast<int>(std::floor(p.y));
    const int ax = static_cast<int>(std::floor(p.x));
    const int y_lo = std::max(0, ay - radius);
    const int y_hi = std::min(ann.height - 1, ay + radius + 1);
    const int x_lo = std::max(0, ax - radius);
    const int x_hi = std::min(ann.width - 1, ax + radius + 1);
    const double norm = 1.0 / (kTwoPi * var_mean);
    for (int y = y_lo; y <= y_hi; ++y) {
      const double dy = static_cast<double>(y) - p.y;
      for (int x = x_lo; x <= x_hi; ++x) {
        const double dx = static_cast<double>(x) - p.x;
        const double m =
            norm * std::exp(-(dy * dy + dx * dx) / (2.0 * var_mean));
        moments.var_map.at(y, x) -= m * m;
      }
    }
  }
  for (double& v : moments.var_map.values) {
    v = std::max(0.0, v);
  }
  return moments;
}

NoiseMoments monte_carlo_noise_moments(const PointAnnotations& ann, double beta,
                                       double eps_std, int trials,
                                       std::uint64_t seed) {
  if (!(beta > 0.0)) {
    throw ConfigError("density beta must be positive");
  }
  if (eps_std < 0.0) {
    throw ConfigError("eps_std must be >= 0");
  }
  if (trials < 2) {
    throw ConfigError("Monte Carlo moments need at least two trials");
  }
  check_annotations(ann);

  NoiseMoments moments;
  moments.gamma = 2.0 * beta;
  moments.delta = 0.5 * beta + eps_std * eps_std;
  moments.mean_map = zero_map(ann.height, ann.width);
  moments.var_map = zero_map(ann.height, ann.width);

  // Same window rule as the analytic moments so both share a support.
  const int radius = support_radius_for(beta + eps_std * eps_std);
  const std::size_t pixels = moments.mean_map.values.size();

  DensityMap trial = zero_map(ann.height, ann.width);
  Rng rng(seed);
  for (int t = 0; t < trials; ++t) {
    std::fill(trial.values.begin(), trial.values.end(), 0.0);
    for (const Point& p : ann.points) {
      Point center = p;
      center.x += eps_std * normal_draw(rng);
      center.y += eps_std * normal_draw(rng);
      splat_gaussian(trial, p, center, radius, beta, 1.0);
    }
    // Welford update; exact zero variance for constant streams.
    const double inv_n = 1.0 / static_cast<double>(t + 1);
    for (std::size_t i = 0; i < pixels; ++i) {
      const double x = trial.values[i];
      const double d_old = x - moments.mean_map.values[i];
      moments.mean_map.values[i] += d_old * inv_n;
      moments.var_map.values[i] += d_old * (x - moments.mean_map.values[i]);
    }
  }
  const double inv_nm1 = 1.0 / static_cast<double>(trials - 1);
  for (double& v : moments.var_map.values) {
    v *= inv_nm1;
  }
  return moments;
}

}  // namespace gausscount
