#pragma once

// Wall-clock comparison of the three convolution routes on one layer shape:
// the dense many-kernel reference, the K x K materialized low-rank route and
// the factorized route. Before any timing the factorized and low-rank outputs
// must agree to 1e-8 on a shared random input; a report is only produced once
// that gate holds. Times are medians over repetitions with the interquartile
// range as the spread measure.

#include <cstdint>
#include <string>

#include "gausscount/gconv.hpp"

namespace gausscount {

struct BenchConfig {
  int image_size = 64;
  int in_channels = 4;
  int out_channels = 4;
  int n_vanilla = 256;  // direct kernels in the dense route
  int k = 16;           // low-rank components
  int grid_radius = 4;
  int repetitions = 5;  // timed runs per route and direction
  int warmup = 2;
  std::uint64_t seed = 42;
};

struct RouteTiming {
  double forward_median_ms = 0.0;
  double forward_iqr_ms = 0.0;
  double backward_median_ms = 0.0;
  double backward_iqr_ms = 0.0;
};

struct BenchReport {
  BenchConfig config;
  RouteTiming vanilla;
  RouteTiming lra;
  RouteTiming fast;
  ComplexityCount macs;
  double route_gap = 0.0;  // max |fast - lra| at the agreement gate
  double speedup_fast_over_vanilla = 0.0;  // forward medians
  double speedup_fast_over_lra = 0.0;
};

// Builds the layer and the dense kernel set from the config seed, checks the
// agreement gate, then times every route. Throws Error when the gate fails.
BenchReport run_bench(const BenchConfig& config);

std::string bench_report_to_json(const BenchReport& report);
// One row per route: forward/backward medians and IQRs in milliseconds.
std::string bench_report_to_csv(const BenchReport& report);

}  // namespace gausscount
