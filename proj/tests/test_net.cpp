#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "doctest.h"
#include "gausscount/net.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace gausscount;

namespace {

// A one-layer model with no pooling, used where tests need full control over
// the head input resolution.
Model tiny_model(bool pool, std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.kind = ConvKind::gaussian;
  LayerSpec spec;
  spec.k = 2;
  spec.grid_radius = 2;
  spec.out_channels = 2;
  spec.pool_after = pool;
  cfg.columns = {ColumnSpec{{spec}}};
  cfg.seed = seed;
  return build_model(cfg);
}

// Trained-parameter recount straight off the model structure, to pin down
// what parameter_count() promises to include.
std::size_t recount_params(const Model& model) {
  std::size_t n = 0;
  for (const auto& column : model.columns) {
    for (const LayerNode& node : column) {
      if (const auto* g = std::get_if<GaussConvLayer>(&node.conv)) {
        n += 2 * static_cast<std::size_t>(g->k());  // logits + sigma params
        n += g->mix.size() + g->bias.size();
        if (g->train_means) n += 2 * static_cast<std::size_t>(g->k());
      } else {
        const auto& s = std::get<StandardConvLayer>(node.conv);
        n += s.filters.size() + s.mix.size() + s.bias.size();
      }
    }
  }
  // The head's filters are fixed unit impulses; only its mix and bias train.
  n += model.head.mix.size() + model.head.bias.size();
  return n;
}

std::size_t sum_components(const Model& model) {
  std::size_t k = 0;
  for (const auto& column : model.columns) {
    for (const LayerNode& node : column) {
      if (const auto* g = std::get_if<GaussConvLayer>(&node.conv)) k += g->k();
    }
  }
  return k;
}

}  // namespace

TEST_CASE("free-filter layer matches a hand-rolled depthwise convolution") {
  Rng rng(301);
  StandardConvLayer layer;
  layer.grid_radius = 1;
  layer.in_channels = 2;
  layer.out_channels = 2;
  layer.filters.resize(2 * layer.taps());
  for (double& v : layer.filters) v = normal_draw(rng);
  layer.mix = {normal_draw(rng), normal_draw(rng), normal_draw(rng),
               normal_draw(rng)};
  layer.bias = {0.3, -0.7};

  const FeatureMap input = testhelp::random_map(rng, 2, 7, 8);
  const FeatureMap out = forward_standard(input, layer);
  REQUIRE(out.channels == 2);
  REQUIRE(out.height == 7);
  REQUIRE(out.width == 8);

  // Oracle: per-channel direct convolution, then the pointwise mix.
  std::vector<std::vector<long double>> depthwise;
  for (int c = 0; c < 2; ++c) {
    std::vector<long double> plane(input.plane_size());
    for (std::size_t i = 0; i < plane.size(); ++i) {
      plane[i] = input.values[c * input.plane_size() + i];
    }
    std::vector<long double> kernel(layer.taps());
    for (int i = 0; i < layer.taps(); ++i) {
      kernel[i] = layer.filters[c * layer.taps() + i];
    }
    depthwise.push_back(testoracle::conv_same(plane, 7, 8, kernel, 1));
  }
  for (int o = 0; o < 2; ++o) {
    for (std::size_t p = 0; p < out.plane_size(); ++p) {
      const long double want = layer.bias[o] +
                               layer.mix[o * 2 + 0] * depthwise[0][p] +
                               layer.mix[o * 2 + 1] * depthwise[1][p];
      CHECK(std::fabs(out.values[o * out.plane_size() + p] -
                      static_cast<double>(want)) <= 1e-12);
    }
  }

  StandardConvLayer bad = layer;
  bad.filters.pop_back();
  CHECK_THROWS_AS(forward_standard(input, bad), ShapeError);
}

TEST_CASE("free-filter gradients pass central finite differences") {
  Rng rng(302);
  StandardConvLayer layer;
  layer.grid_radius = 1;
  layer.in_channels = 1;
  layer.out_channels = 1;
  layer.filters.resize(layer.taps());
  for (double& v : layer.filters) v = normal_draw(rng);
  layer.mix = {normal_draw(rng)};
  layer.bias = {normal_draw(rng)};
  FeatureMap input = testhelp::random_map(rng, 1, 6, 6);
  const FeatureMap upstream = testhelp::random_map(rng, 1, 6, 6);

  const auto loss = [&] {
    const FeatureMap out = forward_standard(input, layer);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      acc += out.values[i] * upstream.values[i];
    }
    return acc;
  };
  const StandardGradients g = backward_standard(input, layer, upstream);

  const double step = 1e-5;
  const auto probe = [&](double* p, double analytic) {
    const double keep = *p;
    *p = keep + step;
    const double up = loss();
    *p = keep - step;
    const double down = loss();
    *p = keep;
    const double fd = (up - down) / (2.0 * step);
    CHECK(std::fabs(fd - analytic) /
              std::max({std::fabs(fd), std::fabs(analytic), 1e-8}) <=
          1e-6);
  };
  for (std::size_t i = 0; i < layer.filters.size(); ++i) {
    probe(&layer.filters[i], g.d_filters[i]);
  }
  probe(&layer.mix[0], g.d_mix[0]);
  probe(&layer.bias[0], g.d_bias[0]);
  for (std::size_t i = 0; i < input.values.size(); ++i) {
    probe(&input.values[i], g.d_input.values[i]);
  }
}

TEST_CASE("the density loss is the mean squared pixel gap") {
  DensityMap pred;
  pred.height = 4;
  pred.width = 4;
  pred.values.assign(16, 0.0);
  DensityMap target = pred;
  target.values.assign(16, 1.0);

  CHECK(mse_density_loss(pred, target) == 1.0);
  CHECK(mse_density_loss(target, target) == 0.0);

  DensityMap other;
  other.height = 3;
  other.width = 4;
  other.values.assign(12, 0.0);
  CHECK_THROWS_AS(mse_density_loss(pred, other), ShapeError);

  // The per-pixel derivative the optimizer relies on is 2 (p - t) / (H W).
  Rng rng(303);
  for (double& v : pred.values) v = normal_draw(rng);
  for (double& v : target.values) v = normal_draw(rng);
  const double h = 1e-6;
  for (int i : {0, 5, 15}) {
    const double keep = pred.values[i];
    pred.values[i] = keep + h;
    const double up = mse_density_loss(pred, target);
    pred.values[i] = keep - h;
    const double down = mse_density_loss(pred, target);
    pred.values[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double analytic = 2.0 * (pred.values[i] - target.values[i]) / 16.0;
    CHECK(std::fabs(fd - analytic) <= 1e-6);
  }
}

TEST_CASE("network factories fix the column layout") {
  const NetworkConfig compact = compact_network_config(ConvKind::gaussian, 5);
  CHECK(compact.columns.size() == 1);
  CHECK(compact.kind == ConvKind::gaussian);
  CHECK(compact.seed == 5);

  const NetworkConfig full = default_network_config(ConvKind::standard, 9);
  CHECK(full.columns.size() == 3);
  CHECK(full.kind == ConvKind::standard);
  for (const ColumnSpec& col : full.columns) {
    REQUIRE(col.layers.size() >= 2);
    CHECK(col.layers[0].k == 16);
    CHECK(col.layers[1].k == 16);
    for (std::size_t i = 2; i < col.layers.size(); ++i) {
      CHECK((col.layers[i].k == 2 || col.layers[i].k == 4));
    }
  }
}

TEST_CASE("parameter counts match a structural recount") {
  const Model compact_g = build_model(compact_network_config(ConvKind::gaussian, 1));
  CHECK(parameter_count(compact_g) == 113);
  CHECK(parameter_count(compact_g) == recount_params(compact_g));

  const Model compact_s = build_model(compact_network_config(ConvKind::standard, 1));
  CHECK(parameter_count(compact_s) == 290);
  CHECK(parameter_count(compact_s) == recount_params(compact_s));

  const Model full_g = build_model(default_network_config(ConvKind::gaussian, 2));
  CHECK(parameter_count(full_g) == recount_params(full_g));

  // Trainable translations add two parameters per component.
  NetworkConfig cfg = compact_network_config(ConvKind::gaussian, 1);
  cfg.train_means = true;
  const Model moved = build_model(cfg);
  CHECK(parameter_count(moved) == 113 + 2 * sum_components(moved));
}

TEST_CASE("synthetic data honors the count range and the seed") {
  SyntheticConfig sc;
  sc.image_size = 24;
  sc.count_min = 5;
  sc.count_max = 5;
  const Dataset a = make_synthetic_dataset(sc, 6, 42);
  REQUIRE(a.size() == 6);
  for (const Sample& s : a) {
    CHECK(s.ann.points.size() == 5);
    CHECK(s.image.channels == 1);
    CHECK(s.image.height == 24);
    CHECK(s.image.width == 24);
    CHECK(s.target.height == 24);
    CHECK(s.target.width == 24);
    for (const Point& p : s.ann.points) {
      CHECK(p.x >= 0.0);
      CHECK(p.x < 24.0);
      CHECK(p.y >= 0.0);
      CHECK(p.y < 24.0);
    }
  }

  const Dataset b = make_synthetic_dataset(sc, 6, 42);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.values == b[i].image.values);
    CHECK(a[i].target.values == b[i].target.values);
    REQUIRE(a[i].ann.points.size() == b[i].ann.points.size());
    for (std::size_t j = 0; j < a[i].ann.points.size(); ++j) {
      CHECK(a[i].ann.points[j].x == b[i].ann.points[j].x);
      CHECK(a[i].ann.points[j].y == b[i].ann.points[j].y);
    }
  }

  const Dataset c = make_synthetic_dataset(sc, 6, 43);
  CHECK(a[0].image.values != c[0].image.values);
}

TEST_CASE("annotation noise keeps images and counts but re-renders targets") {
  SyntheticConfig sc;
  sc.image_size = 24;
  sc.count_min = 4;
  sc.count_max = 9;
  Dataset data = make_synthetic_dataset(sc, 5, 8);
  const Dataset before = data;

  perturb_dataset_annotations(data, 2.0, sc.beta, 99);

  bool any_point_moved = false;
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(data[i].image.values == before[i].image.values);
    REQUIRE(data[i].ann.points.size() == before[i].ann.points.size());
    for (std::size_t j = 0; j < data[i].ann.points.size(); ++j) {
      if (data[i].ann.points[j].x != before[i].ann.points[j].x ||
          data[i].ann.points[j].y != before[i].ann.points[j].y) {
        any_point_moved = true;
      }
    }
    // The target is exactly the map rendered from the displaced points.
    const DensityMap want = generate_density_map(data[i].ann, sc.beta);
    CHECK(data[i].target.values == want.values);
  }
  CHECK(any_point_moved);
}

TEST_CASE("training reduces the loss and reports the train-set error it ends at") {
  SyntheticConfig sc;
  sc.image_size = 32;
  sc.count_min = 3;
  sc.count_max = 12;
  const Dataset data = make_synthetic_dataset(sc, 20, 5);

  Model model = build_model(compact_network_config(ConvKind::gaussian, 2));
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 10;
  tc.lr = 2e-3;
  tc.seed = 3;
  const TrainReport report = train(model, data, tc);

  REQUIRE(report.epoch_median_loss.size() == 6);
  REQUIRE(report.epoch_mean_loss.size() == 6);
  CHECK(report.epoch_median_loss.back() < report.epoch_median_loss.front());

  const EvalResult ev = evaluate(model, data);
  CHECK(ev.samples == 20);
  CHECK(report.final_train_mae == ev.mae);
  CHECK(report.final_train_mse == ev.mse);
}

TEST_CASE("a zero learning rate leaves the model bit-identical") {
  Model model = tiny_model(false, 21);
  const std::string before = model_to_json(model);

  SyntheticConfig sc;
  sc.image_size = 16;
  sc.count_min = 2;
  sc.count_max = 4;
  const Dataset data = make_synthetic_dataset(sc, 4, 77);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.lr = 0.0;
  train(model, data, tc);

  CHECK(model_to_json(model) == before);
}

TEST_CASE("an absurd learning rate raises the divergence error at once") {
  Model model = tiny_model(false, 22);
  SyntheticConfig sc;
  sc.image_size = 16;
  sc.count_min = 2;
  sc.count_max = 4;
  const Dataset data = make_synthetic_dataset(sc, 4, 78);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.lr = 1e200;

  bool thrown = false;
  try {
    train(model, data, tc);
  } catch (const TrainingDivergedError& e) {
    thrown = true;
    CHECK(e.state.epoch == 0);
  }
  CHECK(thrown);
}

TEST_CASE("count evaluation is exact on fabricated models") {
  Model model = tiny_model(false, 23);
  std::fill(model.head.mix.begin(), model.head.mix.end(), 0.0);
  model.head.bias = {0.0};

  SyntheticConfig sc;
  sc.image_size = 64;
  sc.count_min = 0;
  sc.count_max = 0;
  const Dataset empty = make_synthetic_dataset(sc, 3, 31);

  // A silenced head predicts exactly zero everywhere, which is also the truth.
  EvalResult ev = evaluate(model, empty);
  CHECK(ev.mae == 0.0);
  CHECK(ev.mse == 0.0);
  CHECK(ev.samples == 3);

  // A pure-bias head on a 64 x 64 plane: 4096 pixels of 2^-11 sum to exactly
  // 2, so every sample is off by exactly two counts.
  model.head.bias = {2.0 / 4096.0};
  CHECK(predict_count(model, empty[0].image) == 2.0);
  ev = evaluate(model, empty);
  CHECK(ev.mae == 2.0);
  CHECK(ev.mse == 2.0);
}

TEST_CASE("root mean squared count error dominates the absolute one") {
  SyntheticConfig sc;
  sc.image_size = 32;
  sc.count_min = 2;
  sc.count_max = 15;
  const Dataset data = make_synthetic_dataset(sc, 6, 10);
  const Model model = build_model(compact_network_config(ConvKind::gaussian, 6));
  const EvalResult ev = evaluate(model, data);
  CHECK(ev.mse >= ev.mae - 1e-12);
}

TEST_CASE("checkpoints round trip bit for bit and predict identically") {
  for (const ConvKind kind : {ConvKind::gaussian, ConvKind::standard}) {
    Model model = build_model(compact_network_config(kind, 17));
    const std::string text = model_to_json(model);
    Model back = model_from_json(text);
    CHECK(model_to_json(back) == text);
    CHECK(parameter_count(back) == parameter_count(model));

    Rng rng(404);
    const FeatureMap image = testhelp::random_map(rng, 1, 32, 32);
    const DensityMap a = predict_density(model, image);
    const DensityMap b = predict_density(back, image);
    CHECK(a.values == b.values);
    CHECK(predict_count(model, image) == predict_count(back, image));
  }
}

TEST_CASE("pooling refuses odd map sides") {
  const Model model = tiny_model(true, 24);
  Rng rng(55);
  const FeatureMap image = testhelp::random_map(rng, 1, 9, 9);
  CHECK_THROWS_AS(predict_count(model, image), ShapeError);
}

TEST_CASE("density maps convert to single-plane features and back") {
  Rng rng(66);
  DensityMap map;
  map.height = 5;
  map.width = 7;
  map.values.resize(35);
  for (double& v : map.values) v = normal_draw(rng);

  const FeatureMap as_feature = feature_from_density(map);
  CHECK(as_feature.channels == 1);
  CHECK(as_feature.height == 5);
  CHECK(as_feature.width == 7);
  CHECK(as_feature.values == map.values);

  const DensityMap back = density_from_feature(as_feature, 0);
  CHECK(back.values == map.values);
}
