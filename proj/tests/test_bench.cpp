#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "gausscount/bench.hpp"
#include "json.hpp"

using namespace gausscount;

namespace {

// Small enough to run inside the unit tier; timings are sanity-checked for
// shape only, never for magnitude.
BenchConfig tiny_config() {
  BenchConfig cfg;
  cfg.image_size = 16;
  cfg.in_channels = 1;
  cfg.out_channels = 1;
  cfg.n_vanilla = 8;
  cfg.k = 4;
  cfg.grid_radius = 2;
  cfg.repetitions = 3;
  cfg.warmup = 1;
  return cfg;
}

}  // namespace

TEST_CASE("a tiny timing run produces a coherent report") {
  const BenchReport report = run_bench(tiny_config());

  CHECK(report.route_gap <= 1e-8);
  CHECK(report.route_gap >= 0.0);

  for (const RouteTiming* t : {&report.vanilla, &report.lra, &report.fast}) {
    CHECK(t->forward_median_ms > 0.0);
    CHECK(t->backward_median_ms > 0.0);
    CHECK(t->forward_iqr_ms >= 0.0);
    CHECK(t->backward_iqr_ms >= 0.0);
  }

  CHECK(report.macs.vanilla > report.macs.lra);
  CHECK(report.macs.lra > report.macs.fast);
  CHECK(report.speedup_fast_over_vanilla ==
        doctest::Approx(report.vanilla.forward_median_ms /
                        report.fast.forward_median_ms));
  CHECK(report.speedup_fast_over_lra ==
        doctest::Approx(report.lra.forward_median_ms /
                        report.fast.forward_median_ms));
  CHECK(report.config.image_size == 16);
}

TEST_CASE("the canonical shape pins the operation-count ratio at 324") {
  // 256 dense kernels against 16 components plus 16 shifts: the factorized
  // route spends K (S^2 + 4) multiplies per pixel against N S^2, which is
  // 324x at N=256, K=16, S=9.
  const BenchConfig cfg;  // defaults are the canonical shape
  GaussConvLayer layer;
  layer.basis.logits.assign(cfg.k, 0.0);
  layer.basis.covariances.assign(cfg.k, Covariance2{1.0, 1.0, 0.0});
  layer.sigma_params.assign(cfg.k, 0.0);
  layer.means = default_mean_grid(cfg.k, 1.0);
  layer.mix.assign(static_cast<std::size_t>(cfg.in_channels) * cfg.out_channels,
                   0.0);
  layer.bias.assign(cfg.out_channels, 0.0);
  layer.grid_radius = cfg.grid_radius;
  layer.in_channels = cfg.in_channels;
  layer.out_channels = cfg.out_channels;

  const ComplexityCount macs = complexity_count(
      layer, cfg.in_channels, cfg.image_size, cfg.image_size, cfg.n_vanilla);
  CHECK(macs.vanilla / macs.fast == 324);
  CHECK(macs.vanilla % macs.fast == 0);
}

TEST_CASE("report serializations carry every route") {
  const BenchReport report = run_bench(tiny_config());

  const std::string csv = bench_report_to_csv(report);
  std::istringstream lines(csv);
  std::vector<std::string> rows;
  for (std::string line; std::getline(lines, line);) {
    if (!line.empty()) rows.push_back(line);
  }
  REQUIRE(rows.size() == 4);  // header plus one row per route
  CHECK(rows[0].find("route") != std::string::npos);
  CHECK(csv.find("vanilla") != std::string::npos);
  CHECK(csv.find("lra") != std::string::npos);
  CHECK(csv.find("fast") != std::string::npos);

  const nlohmann::json j = nlohmann::json::parse(bench_report_to_json(report));
  CHECK(j.at("macs").at("vanilla").get<std::uint64_t>() ==
        report.macs.vanilla);
  CHECK(j.at("fast").at("forward_median_ms").get<double>() ==
        report.fast.forward_median_ms);
  CHECK(j.at("route_gap").get<double>() == report.route_gap);
  CHECK(j.at("config").at("image_size").get<int>() == 16);
}
