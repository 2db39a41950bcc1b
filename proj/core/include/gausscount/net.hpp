#pragma once

// Desk-scale counting networks: multi-column models built from Gaussian
// convolution layers or their free-filter counterparts, a synthetic dot
// dataset, full-batch-free Adam training on the density regression loss, and
// count evaluation. MAE averages |count error|; MSE is the root mean squared
// count error, so MSE >= MAE always.

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "gausscount/density.hpp"
#include "gausscount/gconv.hpp"

namespace gausscount {

enum class ConvKind { gaussian, standard };

// ============================================================================
// Standard baseline layer
// ============================================================================
//
// Free-filter counterpart of GaussConvLayer under the same mixing scheme: one
// learned grid filter per input channel (depthwise), then the pointwise mix
// and bias.

struct StandardConvLayer {
  std::vector<double> filters;  // in_channels x (2r+1)^2, row-major
  std::vector<double> mix;      // out_channels x in_channels
  std::vector<double> bias;     // out_channels
  int grid_radius = 2;
  int in_channels = 1;
  int out_channels = 1;

  int taps() const { return (2 * grid_radius + 1) * (2 * grid_radius + 1); }
};

FeatureMap forward_standard(const FeatureMap& input,
                            const StandardConvLayer& layer);

struct StandardGradients {
  FeatureMap d_input;
  std::vector<double> d_filters;
  std::vector<double> d_mix;
  std::vector<double> d_bias;
};

StandardGradients backward_standard(const FeatureMap& input,
                                    const StandardConvLayer& layer,
                                    const FeatureMap& upstream);

// ============================================================================
// Configuration
// ============================================================================

struct LayerSpec {
  int k = 4;               // components requested from the bank
  double base_sigma = 1.0;
  double perturb_lo = -0.1;
  double perturb_hi = 0.1;
  int grid_radius = 2;
  int out_channels = 4;
  bool pool_after = false;  // 2x max pool after the activation
};

struct ColumnSpec {
  std::vector<LayerSpec> layers;
};

struct NetworkConfig {
  ConvKind kind = ConvKind::gaussian;
  std::vector<ColumnSpec> columns;
  bool fusion = true;       // concatenate columns into a pointwise head
  int input_channels = 1;
  int bank_size = 100;
  double mean_spacing = 1.0;
  bool train_means = false;
  std::uint64_t seed = 1;
};

// Three columns of descending kernel radius; first two layers of every column
// use K=16 with sigma perturbation range [-0.5, 0.5], later layers K in
// {2, 4} with [-0.1, 0.1].
NetworkConfig default_network_config(ConvKind kind, std::uint64_t seed);

// Single lean column with the same K schedule, sized for repeated-training
// studies.
NetworkConfig compact_network_config(ConvKind kind, std::uint64_t seed);

// ============================================================================
// Model
// ============================================================================

struct LayerNode {
  std::variant<GaussConvLayer, StandardConvLayer> conv;
  bool relu = true;
  bool pool_after = false;
};

struct Model {
  NetworkConfig config;
  std::vector<std::vector<LayerNode>> columns;
  StandardConvLayer head;  // pointwise fusion to one output plane
};

// Deterministic for a fixed config seed: per-layer kernel banks, PCA bases
// and mix draws all derive from it.
Model build_model(const NetworkConfig& config);

// Number of trained parameters (the head's fixed unit filters excluded).
std::size_t parameter_count(const Model& model);

// ============================================================================
// Synthetic data
// ============================================================================

struct SyntheticConfig {
  int image_size = 64;
  int count_min = 5;
  int count_max = 80;
  double beta = 4.0;        // ground-truth density variance
  double blob_sigma = 1.2;  // rendered dot width
  double blob_amp_lo = 0.85;
  double blob_amp_hi = 1.15;
  double pixel_noise = 0.03;
  bool grid_layout = false;  // jittered planted rows instead of uniform spread
};

struct Sample {
  FeatureMap image;      // 1 channel
  PointAnnotations ann;  // the labels the target was rendered from
  DensityMap target;
};
using Dataset = std::vector<Sample>;

Dataset make_synthetic_dataset(const SyntheticConfig& config, int count,
                               std::uint64_t seed);

// Label noise: displaces every sample's annotations (per-sample seed stream)
// and re-renders the targets. Images stay clean; point counts are unchanged.
void perturb_dataset_annotations(Dataset& data, double radius, double beta,
                                 std::uint64_t seed);

// ============================================================================
// Training and evaluation
// ============================================================================

// Mean squared pixel difference at the target resolution.
double mse_density_loss(const DensityMap& pred, const DensityMap& target);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 10;
  double lr = 1e-3;
  double lr_decay = 0.05;  // epoch e runs at lr / (1 + lr_decay * e)
  int warmup_epochs = 0;   // linear ramp to lr over the first epochs
  double clip_norm = 0.0;  // global gradient-norm ceiling; 0 disables
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 7;
};

struct TrainState {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& message, TrainState last)
      : Error(message), state(last) {}
  TrainState state;  // last finite state before divergence
};

struct TrainReport {
  std::vector<double> epoch_median_loss;
  std::vector<double> epoch_mean_loss;
  double final_train_mae = 0.0;
  double final_train_mse = 0.0;
  TrainConfig train_config;
};

TrainReport train(Model& model, const Dataset& data, const TrainConfig& config);

// Predicted density upsampled (nearest neighbor) back to input resolution.
DensityMap predict_density(const Model& model, const FeatureMap& image);
double predict_count(const Model& model, const FeatureMap& image);

struct EvalResult {
  double mae = 0.0;
  double mse = 0.0;
  int samples = 0;
};
EvalResult evaluate(const Model& model, const Dataset& data);

// Checkpoints: full topology plus every parameter as a hex-encoded bit
// pattern, so reload reproduces the model exactly.
std::string model_to_json(const Model& model);
Model model_from_json(const std::string& text);

// Single-plane conversions for DMAP-backed images.
FeatureMap feature_from_density(const DensityMap& map);
DensityMap density_from_feature(const FeatureMap& map, int channel = 0);

}  // namespace gausscount
