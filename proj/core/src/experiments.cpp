#include "gausscount/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <vector>

#include "json.hpp"

#include "gausscount/lowrank.hpp"

namespace gausscount {

namespace {

using nlohmann::ordered_json;

const char* kind_name(ConvKind kind) {
  return kind == ConvKind::gaussian ? "gaussian" : "standard";
}

double mean_of(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

// Unbiased sample variance; zero for fewer than two values.
double variance_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mu = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - mu) * (x - mu);
  return acc / static_cast<double>(v.size() - 1);
}

double stderr_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  return std::sqrt(variance_of(v) / static_cast<double>(v.size()));
}

double quantile_of(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

double region_mass(const DensityMap& map, int box, int by, int bx) {
  double acc = 0.0;
  for (int y = by * box; y < (by + 1) * box; ++y)
    for (int x = bx * box; x < (bx + 1) * box; ++x) acc += map.at(y, x);
  return acc;
}

}  // namespace

// ============================================================================
// Across-replica variance
// ============================================================================

namespace {

VarianceStudyResult variance_for_kind(const VarianceStudyConfig& config,
                                      ConvKind kind, const Dataset& train_set,
                                      const Dataset& test_set) {
  const int box = config.region_box;
  const int tiles = config.data.image_size / box;
  const std::size_t regions =
      static_cast<std::size_t>(test_set.size()) * tiles * tiles;

  // preds[r][i]: predicted count; masses[r][g]: predicted region mass.
  std::vector<std::vector<double>> preds(config.replicas);
  std::vector<std::vector<double>> masses(config.replicas);
  VarianceStudyResult result;
  result.kind = kind;
  result.replicas = config.replicas;

  for (int r = 0; r < config.replicas; ++r) {
    NetworkConfig net =
        compact_network_config(kind, split_seed(config.seed, 1000 + r));
    Model model = build_model(net);
    TrainConfig tc = config.train;
    tc.seed = split_seed(config.seed, 2000 + r);
    train(model, train_set, tc);
    result.replica_test_mae.push_back(evaluate(model, test_set).mae);

    preds[r].reserve(test_set.size());
    masses[r].reserve(regions);
    for (const Sample& sample : test_set) {
      const DensityMap density = predict_density(model, sample.image);
      preds[r].push_back(density.sum());
      for (int by = 0; by < tiles; ++by)
        for (int bx = 0; bx < tiles; ++bx)
          masses[r].push_back(region_mass(density, box, by, bx));
    }
  }

  // Whole-image statistics.
  std::vector<double> image_vars, abs_errors;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    std::vector<double> counts(config.replicas);
    for (int r = 0; r < config.replicas; ++r) counts[r] = preds[r][i];
    image_vars.push_back(variance_of(counts));
    abs_errors.push_back(std::abs(
        mean_of(counts) -
        static_cast<double>(test_set[i].ann.points.size())));
  }
  result.image_count_variance = mean_of(image_vars);
  result.image_count_mae = mean_of(abs_errors);

  // Region split by ground-truth mass quartiles.
  std::vector<double> gt_mass;
  gt_mass.reserve(regions);
  for (const Sample& sample : test_set)
    for (int by = 0; by < tiles; ++by)
      for (int bx = 0; bx < tiles; ++bx)
        gt_mass.push_back(region_mass(sample.target, box, by, bx));
  result.high_threshold = quantile_of(gt_mass, 0.75);
  result.low_threshold = quantile_of(gt_mass, 0.25);

  std::vector<double> var_all, var_high, var_low;
  for (std::size_t g = 0; g < regions; ++g) {
    std::vector<double> vals(config.replicas);
    for (int r = 0; r < config.replicas; ++r) vals[r] = masses[r][g];
    const double var = variance_of(vals);
    var_all.push_back(var);
    if (gt_mass[g] >= result.high_threshold) var_high.push_back(var);
    if (gt_mass[g] <= result.low_threshold) var_low.push_back(var);
  }
  result.region_variance_all = mean_of(var_all);
  result.region_variance_high = mean_of(var_high);
  result.region_variance_low = mean_of(var_low);
  return result;
}

}  // namespace

VarianceStudy run_variance_study(const VarianceStudyConfig& config) {
  if (config.replicas < 2)
    throw ConfigError("variance needs at least two replicas");
  if (config.train_size < 1 || config.test_size < 1)
    throw ConfigError("dataset sizes must be positive");
  if (config.region_box < 1 ||
      config.data.image_size % config.region_box != 0)
    throw ConfigError("region box must tile the image exactly");

  if (config.label_noise_radius < 0.0)
    throw ConfigError("label noise radius must be non-negative");

  // One fixed dataset pair: replicas differ only in their seeds. The training
  // labels optionally carry a fixed displacement field, shared by every
  // replica, so the study measures the spread of what the nets make of the
  // same imperfect supervision.
  Dataset train_set = make_synthetic_dataset(
      config.data, config.train_size, split_seed(config.seed, 0xda7a));
  if (config.label_noise_radius > 0.0) {
    perturb_dataset_annotations(train_set, config.label_noise_radius,
                                config.data.beta,
                                split_seed(config.seed, 0x6e6f));
  }
  const Dataset test_set = make_synthetic_dataset(
      config.data, config.test_size, split_seed(config.seed, 0x7e57));

  VarianceStudy study;
  study.config = config;
  study.gaussian =
      variance_for_kind(config, ConvKind::gaussian, train_set, test_set);
  study.standard =
      variance_for_kind(config, ConvKind::standard, train_set, test_set);
  return study;
}

namespace {

ordered_json variance_result_to_json(const VarianceStudyResult& result) {
  ordered_json j;
  j["kind"] = kind_name(result.kind);
  j["replicas"] = result.replicas;
  j["image_count_variance"] = result.image_count_variance;
  j["image_count_mae"] = result.image_count_mae;
  j["region_variance_all"] = result.region_variance_all;
  j["region_variance_high"] = result.region_variance_high;
  j["region_variance_low"] = result.region_variance_low;
  j["high_threshold"] = result.high_threshold;
  j["low_threshold"] = result.low_threshold;
  j["replica_test_mae"] = result.replica_test_mae;
  return j;
}

}  // namespace

std::string variance_study_to_json(const VarianceStudy& study) {
  ordered_json j;
  ordered_json cfg;
  cfg["replicas"] = study.config.replicas;
  cfg["train_size"] = study.config.train_size;
  cfg["test_size"] = study.config.test_size;
  cfg["region_box"] = study.config.region_box;
  cfg["label_noise_radius"] = study.config.label_noise_radius;
  cfg["image_size"] = study.config.data.image_size;
  cfg["epochs"] = study.config.train.epochs;
  cfg["seed"] = study.config.seed;
  j["config"] = std::move(cfg);
  j["gaussian"] = variance_result_to_json(study.gaussian);
  j["standard"] = variance_result_to_json(study.standard);
  return j.dump(2);
}

std::string variance_study_to_csv(const VarianceStudy& study) {
  std::string out =
      "kind,image_count_variance,image_count_mae,region_variance_all,"
      "region_variance_high,region_variance_low\n";
  const auto row = [&out](const VarianceStudyResult& r) {
    out += kind_name(r.kind);
    out += ',' + format_sig9(r.image_count_variance);
    out += ',' + format_sig9(r.image_count_mae);
    out += ',' + format_sig9(r.region_variance_all);
    out += ',' + format_sig9(r.region_variance_high);
    out += ',' + format_sig9(r.region_variance_low);
    out += '\n';
  };
  row(study.gaussian);
  row(study.standard);
  return out;
}

// ============================================================================
// Annotation-noise robustness
// ============================================================================

RobustnessStudy run_robustness_study(const RobustnessStudyConfig& config) {
  if (config.radii.empty()) throw ConfigError("no displacement radii given");
  if (config.seeds < 1) throw ConfigError("robustness needs at least one seed");
  for (double radius : config.radii)
    if (radius < 0.0) throw ConfigError("negative displacement radius");

  const Dataset test_set = make_synthetic_dataset(
      config.data, config.test_size, split_seed(config.seed, 0x7e57));

  RobustnessStudy study;
  study.config = config;
  study.gaussian.kind = ConvKind::gaussian;
  study.standard.kind = ConvKind::standard;

  for (std::size_t ri = 0; ri < config.radii.size(); ++ri) {
    const double radius = config.radii[ri];
    std::vector<double> mae[2], mse[2];
    for (int s = 0; s < config.seeds; ++s) {
      // Identical training data for both kinds, fresh per (radius, seed).
      const std::uint64_t data_seed =
          split_seed(config.seed, 100 + ri * 1000 + s);
      Dataset train_set =
          make_synthetic_dataset(config.data, config.train_size, data_seed);
      if (radius > 0.0)
        perturb_dataset_annotations(train_set, radius, config.data.beta,
                                    split_seed(data_seed, 5));
      for (int kind_idx = 0; kind_idx < 2; ++kind_idx) {
        const ConvKind kind =
            kind_idx == 0 ? ConvKind::gaussian : ConvKind::standard;
        // Init and batch-order seeds depend on the repetition only, so the
        // radius sweep is paired.
        NetworkConfig net =
            compact_network_config(kind, split_seed(config.seed, 5000 + s));
        Model model = build_model(net);
        TrainConfig tc = config.train;
        tc.seed = split_seed(config.seed, 9000 + s);
        train(model, train_set, tc);
        const EvalResult eval = evaluate(model, test_set);
        mae[kind_idx].push_back(eval.mae);
        mse[kind_idx].push_back(eval.mse);
      }
    }
    for (int kind_idx = 0; kind_idx < 2; ++kind_idx) {
      RobustnessCell cell;
      cell.radius = radius;
      cell.mae_runs = mae[kind_idx];
      cell.mse_runs = mse[kind_idx];
      cell.mae_mean = mean_of(mae[kind_idx]);
      cell.mae_stderr = stderr_of(mae[kind_idx]);
      cell.mse_mean = mean_of(mse[kind_idx]);
      cell.mse_stderr = stderr_of(mse[kind_idx]);
      (kind_idx == 0 ? study.gaussian : study.standard)
          .cells.push_back(std::move(cell));
    }
  }
  return study;
}

namespace {

ordered_json robustness_result_to_json(const RobustnessStudyResult& result) {
  ordered_json j;
  j["kind"] = kind_name(result.kind);
  ordered_json cells = ordered_json::array();
  for (const RobustnessCell& cell : result.cells) {
    ordered_json c;
    c["radius"] = cell.radius;
    c["mae_runs"] = cell.mae_runs;
    c["mse_runs"] = cell.mse_runs;
    c["mae_mean"] = cell.mae_mean;
    c["mae_stderr"] = cell.mae_stderr;
    c["mse_mean"] = cell.mse_mean;
    c["mse_stderr"] = cell.mse_stderr;
    cells.push_back(std::move(c));
  }
  j["cells"] = std::move(cells);
  return j;
}

}  // namespace

std::string robustness_study_to_json(const RobustnessStudy& study) {
  ordered_json j;
  ordered_json cfg;
  cfg["radii"] = study.config.radii;
  cfg["seeds"] = study.config.seeds;
  cfg["train_size"] = study.config.train_size;
  cfg["test_size"] = study.config.test_size;
  cfg["image_size"] = study.config.data.image_size;
  cfg["epochs"] = study.config.train.epochs;
  cfg["seed"] = study.config.seed;
  j["config"] = std::move(cfg);
  j["gaussian"] = robustness_result_to_json(study.gaussian);
  j["standard"] = robustness_result_to_json(study.standard);
  return j.dump(2);
}

// One row per (kind, radius, repetition), so the raw runs stay inspectable.
std::string robustness_study_to_csv(const RobustnessStudy& study) {
  std::string out = "kind,radius,seed_index,mae,mse\n";
  const auto rows = [&out](const RobustnessStudyResult& r) {
    for (const RobustnessCell& cell : r.cells) {
      for (std::size_t s = 0; s < cell.mae_runs.size(); ++s) {
        out += kind_name(r.kind);
        out += ',' + format_sig9(cell.radius);
        out += ',' + std::to_string(s);
        out += ',' + format_sig9(cell.mae_runs[s]);
        out += ',' + format_sig9(cell.mse_runs[s]);
        out += '\n';
      }
    }
  };
  rows(study.gaussian);
  rows(study.standard);
  return out;
}

// ============================================================================
// Filter visualization
// ============================================================================

std::vector<FilterImage> export_effective_filters(const Model& model,
                                                  int upsample) {
  if (upsample < 1) throw ConfigError("upsample factor must be positive");
  std::vector<FilterImage> images;
  for (std::size_t c = 0; c < model.columns.size(); ++c) {
    for (std::size_t l = 0; l < model.columns[c].size(); ++l) {
      const auto* layer =
          std::get_if<GaussConvLayer>(&model.columns[c][l].conv);
      if (!layer) continue;

      const std::vector<double> fused =
          softmax_normalize(layer->basis.logits);
      double reach = 0.0;
      for (const Vec2& mean : layer->means)
        reach = std::max(reach,
                         std::max(std::abs(mean.d0), std::abs(mean.d1)));
      const int radius = layer->grid_radius + static_cast<int>(std::ceil(reach));
      const int side = (2 * radius + 1) * upsample;

      std::vector<double> field(static_cast<std::size_t>(side) * side, 0.0);
      double peak = 0.0;
      for (int py = 0; py < side; ++py) {
        const double u0 =
            (py + 0.5) / static_cast<double>(upsample) - (radius + 0.5);
        for (int px = 0; px < side; ++px) {
          const double u1 =
              (px + 0.5) / static_cast<double>(upsample) - (radius + 0.5);
          double value = 0.0;
          for (int k = 0; k < layer->k(); ++k) {
            const double sigma = layer->sigma(k);
            const double var = sigma * sigma;
            const double dy = u0 - layer->means[k].d0;
            const double dx = u1 - layer->means[k].d1;
            value += fused[k] *
                     std::exp(-(dy * dy + dx * dx) / (2.0 * var)) /
                     (2.0 * std::numbers::pi * var);
          }
          field[static_cast<std::size_t>(py) * side + px] = value;
          peak = std::max(peak, value);
        }
      }

      FilterImage out;
      char name[64];
      std::snprintf(name, sizeof(name), "col%zu_layer%zu", c, l);
      out.name = name;
      out.image.width = side;
      out.image.height = side;
      out.image.pixels.resize(field.size());
      const double scale = peak > 0.0 ? 255.0 / peak : 0.0;
      for (std::size_t p = 0; p < field.size(); ++p)
        out.image.pixels[p] =
            static_cast<std::uint8_t>(std::lround(field[p] * scale));
      images.push_back(std::move(out));
    }
  }
  return images;
}

}  // namespace gausscount
