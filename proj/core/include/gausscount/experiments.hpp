#pragma once

// Reproducible studies on the synthetic counting task, run for both layer
// kinds so the Gaussian and free-filter networks can be compared directly:
//
//  - spatial variance: several replicas of the same architecture trained from
//    different seeds; reports the across-replica variance of predicted
//    counts, whole-image and split into high/low local-density regions.
//  - annotation robustness: training labels displaced by growing radii while
//    evaluation stays on clean data; reports mean +/- standard error of the
//    count errors over repeated seeds.
//  - effective filters: every Gaussian layer's fused mixture rendered to a
//    grayscale image.

#include <cstdint>
#include <string>
#include <vector>

#include "gausscount/io.hpp"
#include "gausscount/net.hpp"

namespace gausscount {

// ============================================================================
// Across-replica variance
// ============================================================================

struct VarianceStudyConfig {
  int replicas = 5;
  int train_size = 64;
  int test_size = 24;
  int region_box = 16;  // side of the square region tiles
  // Displacement radius applied to the training annotations (0 = clean
  // labels). Evaluation always uses clean data.
  double label_noise_radius = 2.0;
  SyntheticConfig data = {.beta = 9.0};  // same supervision width as the
                                         // robustness study, for the same reason
  TrainConfig train = {.epochs = 12};    // spread is measurable well before
                                         // the replicas converge fully
  std::uint64_t seed = 99;
};

struct VarianceStudyResult {
  ConvKind kind = ConvKind::gaussian;
  int replicas = 0;
  // Mean over test images of the across-replica count variance, and the mean
  // absolute error of the replica-averaged count.
  double image_count_variance = 0.0;
  double image_count_mae = 0.0;
  // Mean across-replica variance of region mass, over all region tiles and
  // over the high / low quartiles of ground-truth region mass.
  double region_variance_all = 0.0;
  double region_variance_high = 0.0;
  double region_variance_low = 0.0;
  double high_threshold = 0.0;  // ground-truth mass quartiles defining the split
  double low_threshold = 0.0;
  std::vector<double> replica_test_mae;
};

struct VarianceStudy {
  VarianceStudyConfig config;
  VarianceStudyResult gaussian;
  VarianceStudyResult standard;
};

VarianceStudy run_variance_study(const VarianceStudyConfig& config);

std::string variance_study_to_json(const VarianceStudy& study);
std::string variance_study_to_csv(const VarianceStudy& study);

// ============================================================================
// Annotation-noise robustness
// ============================================================================

struct RobustnessStudyConfig {
  std::vector<double> radii = {0.0, 1.0, 2.0, 4.0, 8.0};
  int seeds = 3;  // independent data/init repetitions per radius
  int train_size = 64;
  int test_size = 24;
  // Supervision kernels wide enough for the smoothing-constrained variant to
  // express; with needle-thin targets, label blur helps it instead of hurting.
  SyntheticConfig data = {.beta = 9.0};
  TrainConfig train;
  std::uint64_t seed = 7;
};

struct RobustnessCell {
  double radius = 0.0;
  std::vector<double> mae_runs;  // one entry per repetition seed
  std::vector<double> mse_runs;
  double mae_mean = 0.0;
  double mae_stderr = 0.0;
  double mse_mean = 0.0;
  double mse_stderr = 0.0;
};

struct RobustnessStudyResult {
  ConvKind kind = ConvKind::gaussian;
  std::vector<RobustnessCell> cells;  // one per radius, in config order
};

struct RobustnessStudy {
  RobustnessStudyConfig config;
  RobustnessStudyResult gaussian;
  RobustnessStudyResult standard;
};

// Both kinds train on identical perturbed datasets per (radius, seed) and are
// evaluated on the same clean test set.
RobustnessStudy run_robustness_study(const RobustnessStudyConfig& config);

std::string robustness_study_to_json(const RobustnessStudy& study);
std::string robustness_study_to_csv(const RobustnessStudy& study);

// ============================================================================
// Filter visualization
// ============================================================================

struct FilterImage {
  std::string name;  // "col{c}_layer{l}" for each Gaussian layer
  PgmImage image;
};

// Renders sum_k fused_k * N(u; mean_k, sigma_k^2 I) on a supersampled grid
// covering the layer support, normalized to the 8-bit range.
std::vector<FilterImage> export_effective_filters(const Model& model,
                                                  int upsample = 8);

}  // namespace gausscount
