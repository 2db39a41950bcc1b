#include <cmath>
#include <cstdint>

#include "doctest.h"
#include "gausscount/common.hpp"
#include "gausscount/density.hpp"
#include "oracles.hpp"

using namespace gausscount;

TEST_CASE("empty annotations produce an all-zero map") {
  PointAnnotations ann;
  ann.height = 12;
  ann.width = 9;
  const DensityMap map = generate_density_map(ann, 4.0);
  CHECK(map.height == 12);
  CHECK(map.width == 9);
  CHECK(map.sum() == 0.0);
  for (double v : map.values) CHECK(v == 0.0);
}

TEST_CASE("two points four pixels apart: midpoint value matches direct evaluation") {
  PointAnnotations ann;
  ann.height = 24;
  ann.width = 24;
  ann.points = {{10.0, 12.0}, {14.0, 12.0}};
  const DensityMap map = generate_density_map(ann, 4.0);

  const long double oracle =
      testoracle::density_at({{10.0L, 12.0L}, {14.0L, 12.0L}}, 4.0L, 12, 12);
  CHECK(std::fabs(static_cast<long double>(map.at(12, 12)) - oracle) <= 1e-15L);
  // Magnitude sanity so the comparison cannot silently agree on nonsense.
  CHECK(map.at(12, 12) > 0.04);
  CHECK(map.at(12, 12) < 0.06);
}

TEST_CASE("map mass stays within truncation plus boundary losses of the count") {
  Rng rng(501);
  for (int t = 0; t < 10; ++t) {
    PointAnnotations ann;
    ann.height = 32 + static_cast<int>(uniform_in(rng, 0, 41));
    ann.width = 32 + static_cast<int>(uniform_in(rng, 0, 41));
    const int n = 1 + static_cast<int>(uniform_in(rng, 0, 120));
    for (int i = 0; i < n; ++i) {
      ann.points.push_back({uniform_in(rng, 0, ann.width),
                            uniform_in(rng, 0, ann.height)});
    }
    const double beta = uniform_in(rng, 2.0, 9.0);
    const DensityMap map = generate_density_map(ann, beta);
    const double slack = 0.01 * n + analytic_boundary_loss(ann, beta);
    CHECK(std::fabs(map.sum() - n) <= slack);
  }
}

TEST_CASE("density generation rejects bad configurations") {
  PointAnnotations ann;
  ann.height = 8;
  ann.width = 8;
  ann.points = {{2.0, 2.0}};
  CHECK_THROWS_AS(generate_density_map(ann, 0.0), ConfigError);
  CHECK_THROWS_AS(generate_density_map(ann, -1.0), ConfigError);

  ann.points = {{9.0, 2.0}};  // outside [0, width)
  CHECK_THROWS_AS(generate_density_map(ann, 4.0), ConfigError);
}

TEST_CASE("displacement sampling: radius zero is the identity") {
  PointAnnotations ann;
  ann.height = 40;
  ann.width = 40;
  ann.points = {{3.25, 8.5}, {20.0, 31.75}, {39.5, 0.25}};
  const PointAnnotations same = perturb_annotations(ann, 0.0, 99);
  REQUIRE(same.points.size() == ann.points.size());
  for (std::size_t i = 0; i < ann.points.size(); ++i) {
    CHECK(same.points[i].x == ann.points[i].x);
    CHECK(same.points[i].y == ann.points[i].y);
  }
}

TEST_CASE("displacement sampling: euclidean magnitude is uniform up to the radius") {
  // Interior points far from every border never clamp, so the sampler's own
  // statistics are visible: magnitude uniform in [0, 8] has mean 4.
  PointAnnotations ann;
  ann.height = 1000;
  ann.width = 1000;
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    ann.points.push_back({uniform_in(rng, 100, 900), uniform_in(rng, 100, 900)});
  }
  const PointAnnotations moved = perturb_annotations(ann, 8.0, 42);
  REQUIRE(moved.points.size() == ann.points.size());

  double mean = 0.0;
  double max = 0.0;
  for (std::size_t i = 0; i < ann.points.size(); ++i) {
    const double dx = moved.points[i].x - ann.points[i].x;
    const double dy = moved.points[i].y - ann.points[i].y;
    const double d = std::sqrt(dx * dx + dy * dy);
    mean += d;
    max = std::max(max, d);
  }
  mean /= ann.points.size();
  CHECK(max <= 8.0 + 1e-9);
  CHECK(std::fabs(mean - 4.0) < 0.1);

  // Deterministic per seed.
  const PointAnnotations again = perturb_annotations(ann, 8.0, 42);
  CHECK(again.points[123].x == moved.points[123].x);
  CHECK(again.points[123].y == moved.points[123].y);
}

TEST_CASE("displaced points stay inside the image") {
  PointAnnotations ann;
  ann.height = 16;
  ann.width = 16;
  ann.points = {{0.0, 0.0}, {15.5, 15.5}, {0.25, 15.0}};
  const PointAnnotations moved = perturb_annotations(ann, 30.0, 5);
  for (const Point& p : moved.points) {
    CHECK(p.x >= 0.0);
    CHECK(p.x < 16.0);
    CHECK(p.y >= 0.0);
    CHECK(p.y < 16.0);
  }
}

TEST_CASE("zero jitter collapses the noise moments onto the plain map") {
  PointAnnotations ann;
  ann.height = 24;
  ann.width = 24;
  ann.points = {{6.5, 7.25}, {15.0, 12.0}, {20.75, 3.5}};
  const DensityMap base = generate_density_map(ann, 4.0);
  const NoiseMoments nm = analytic_noise_moments(ann, 4.0, 0.0);

  REQUIRE(nm.mean_map.values.size() == base.values.size());
  for (std::size_t i = 0; i < base.values.size(); ++i) {
    CHECK(nm.mean_map.values[i] == base.values[i]);
    CHECK(nm.var_map.values[i] == 0.0);
  }
}

TEST_CASE("noise moment parameters follow the closed form") {
  PointAnnotations ann;
  ann.height = 32;
  ann.width = 32;
  ann.points = {{16.0, 16.0}};
  const double beta = 4.0;
  const double eps = 2.0;
  const NoiseMoments nm = analytic_noise_moments(ann, beta, eps);

  CHECK(nm.gamma == 2.0 * beta);
  CHECK(nm.delta == beta / 2.0 + eps * eps);

  // Jittering a Gaussian by Gaussian noise widens it: the mean map is again
  // a Gaussian with variance beta + eps^2, so its peak over the point is the
  // corresponding normalizer.
  const double peak = 1.0 / (2.0 * 3.14159265358979323846 * (beta + eps * eps));
  CHECK(std::fabs(nm.mean_map.at(16, 16) - peak) <= 1e-12);
  // Widening never adds mass.
  CHECK(nm.mean_map.sum() <= 1.0 + 1e-9);
}

TEST_CASE("monte carlo mean tracks the analytic mean within CLT error bars") {
  PointAnnotations ann;
  ann.height = 24;
  ann.width = 24;
  ann.points = {{6.0, 7.0}, {15.0, 11.0}, {18.0, 19.0}};
  const double beta = 4.0;
  const double eps = 2.0;
  const int trials = 2000;

  const NoiseMoments analytic = analytic_noise_moments(ann, beta, eps);
  const NoiseMoments mc = monte_carlo_noise_moments(ann, beta, eps, trials, 87);

  int within = 0;
  int total = 0;
  for (int y = 0; y < 24; ++y) {
    for (int x = 0; x < 24; ++x) {
      ++total;
      const double se =
          std::sqrt(std::max(analytic.var_map.at(y, x), 0.0) / trials);
      if (std::fabs(mc.mean_map.at(y, x) - analytic.mean_map.at(y, x)) <=
          3.0 * se) {
        ++within;
      }
    }
  }
  CHECK(static_cast<double>(within) >= 0.99 * total);
}

TEST_CASE("monte carlo estimate tightens as trials grow") {
  PointAnnotations ann;
  ann.height = 20;
  ann.width = 20;
  ann.points = {{9.0, 10.0}};
  const NoiseMoments analytic = analytic_noise_moments(ann, 4.0, 2.0);

  const auto worst_gap = [&](int trials) {
    const NoiseMoments mc = monte_carlo_noise_moments(ann, 4.0, 2.0, trials, 55);
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.mean_map.values.size(); ++i) {
      worst = std::max(worst, std::fabs(mc.mean_map.values[i] -
                                        analytic.mean_map.values[i]));
    }
    return worst;
  };
  CHECK(worst_gap(8000) < worst_gap(500));
}
