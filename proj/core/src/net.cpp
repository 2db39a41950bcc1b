#include "gausscount/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "json.hpp"

#include "gausscount/lowrank.hpp"

namespace gausscount {

namespace {

using nlohmann::ordered_json;

static_assert(sizeof(Vec2) == 2 * sizeof(double),
              "mean pairs are flattened into the parameter registry");

// ----------------------------------------------------------------------------
// Plane convolution (same convention as the Gaussian layer: true convolution,
// zero padding, out[p] += w[u] * in[p - u])
// ----------------------------------------------------------------------------

void conv_plane_accum(const double* in, int h, int w, const double* taps,
                      int radius, double* out) {
  const int side = 2 * radius + 1;
  for (int u0 = -radius; u0 <= radius; ++u0) {
    const int y_lo = std::max(0, u0);
    const int y_hi = std::min(h, h + u0);
    for (int u1 = -radius; u1 <= radius; ++u1) {
      const double wgt = taps[(u0 + radius) * side + (u1 + radius)];
      if (wgt == 0.0) continue;
      const int x_lo = std::max(0, u1);
      const int x_hi = std::min(w, w + u1);
      for (int y = y_lo; y < y_hi; ++y) {
        const double* src = in + static_cast<std::size_t>(y - u0) * w - u1;
        double* dst = out + static_cast<std::size_t>(y) * w;
        for (int x = x_lo; x < x_hi; ++x) dst[x] += wgt * src[x];
      }
    }
  }
}

// sum_p a[p] * b[p - u], zeros outside b.
double corr_dot_plane(const double* a, const double* b, int h, int w, int u0,
                      int u1) {
  const int y_lo = std::max(0, u0);
  const int y_hi = std::min(h, h + u0);
  const int x_lo = std::max(0, u1);
  const int x_hi = std::min(w, w + u1);
  double acc = 0.0;
  for (int y = y_lo; y < y_hi; ++y) {
    const double* pa = a + static_cast<std::size_t>(y) * w;
    const double* pb = b + static_cast<std::size_t>(y - u0) * w - u1;
    for (int x = x_lo; x < x_hi; ++x) acc += pa[x] * pb[x];
  }
  return acc;
}

void validate_standard(const StandardConvLayer& layer) {
  if (layer.grid_radius < 0) throw ConfigError("negative filter radius");
  if (layer.in_channels < 1 || layer.out_channels < 1)
    throw ConfigError("standard layer needs at least one channel each way");
  const std::size_t taps = static_cast<std::size_t>(layer.taps());
  if (layer.filters.size() != taps * layer.in_channels)
    throw ShapeError("filter bank does not match channels x taps");
  if (layer.mix.size() !=
      static_cast<std::size_t>(layer.out_channels) * layer.in_channels)
    throw ShapeError("mix matrix does not match channel counts");
  if (layer.bias.size() != static_cast<std::size_t>(layer.out_channels))
    throw ShapeError("bias does not match output channels");
}

FeatureMap depthwise_pre(const FeatureMap& input,
                         const StandardConvLayer& layer) {
  FeatureMap pre = make_feature_map(input.channels, input.height, input.width);
  const std::size_t plane = input.plane_size();
  for (int c = 0; c < input.channels; ++c) {
    conv_plane_accum(input.values.data() + c * plane, input.height, input.width,
                     layer.filters.data() + c * layer.taps(), layer.grid_radius,
                     pre.values.data() + c * plane);
  }
  return pre;
}

}  // namespace

// ============================================================================
// Standard baseline layer
// ============================================================================

FeatureMap forward_standard(const FeatureMap& input,
                            const StandardConvLayer& layer) {
  validate_standard(layer);
  if (input.channels != layer.in_channels)
    throw ShapeError("input channels do not match the layer");
  FeatureMap pre = depthwise_pre(input, layer);
  FeatureMap out =
      make_feature_map(layer.out_channels, input.height, input.width);
  const std::size_t plane = input.plane_size();
  for (int o = 0; o < layer.out_channels; ++o) {
    double* dst = out.values.data() + o * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[p] = layer.bias[o];
    for (int c = 0; c < layer.in_channels; ++c) {
      const double wgt = layer.mix[static_cast<std::size_t>(o) *
                                       layer.in_channels + c];
      if (wgt == 0.0) continue;
      const double* src = pre.values.data() + c * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += wgt * src[p];
    }
  }
  return out;
}

StandardGradients backward_standard(const FeatureMap& input,
                                    const StandardConvLayer& layer,
                                    const FeatureMap& upstream) {
  validate_standard(layer);
  if (input.channels != layer.in_channels)
    throw ShapeError("input channels do not match the layer");
  if (upstream.channels != layer.out_channels ||
      upstream.height != input.height || upstream.width != input.width)
    throw ShapeError("upstream cotangent shape mismatch");

  const int h = input.height;
  const int w = input.width;
  const std::size_t plane = input.plane_size();
  const int r = layer.grid_radius;
  const int side = 2 * r + 1;

  FeatureMap pre = depthwise_pre(input, layer);

  StandardGradients grads;
  grads.d_bias.assign(layer.bias.size(), 0.0);
  grads.d_mix.assign(layer.mix.size(), 0.0);
  grads.d_filters.assign(layer.filters.size(), 0.0);
  grads.d_input = make_feature_map(layer.in_channels, h, w);

  for (int o = 0; o < layer.out_channels; ++o) {
    const double* up = upstream.values.data() + o * plane;
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += up[p];
    grads.d_bias[o] = acc;
    for (int c = 0; c < layer.in_channels; ++c) {
      const double* src = pre.values.data() + c * plane;
      double dot = 0.0;
      for (std::size_t p = 0; p < plane; ++p) dot += up[p] * src[p];
      grads.d_mix[static_cast<std::size_t>(o) * layer.in_channels + c] = dot;
    }
  }

  // Per-channel cotangent of the depthwise responses.
  FeatureMap d_pre = make_feature_map(layer.in_channels, h, w);
  for (int c = 0; c < layer.in_channels; ++c) {
    double* dst = d_pre.values.data() + c * plane;
    for (int o = 0; o < layer.out_channels; ++o) {
      const double wgt =
          layer.mix[static_cast<std::size_t>(o) * layer.in_channels + c];
      if (wgt == 0.0) continue;
      const double* up = upstream.values.data() + o * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += wgt * up[p];
    }
  }

  std::vector<double> flipped(static_cast<std::size_t>(side) * side);
  for (int c = 0; c < layer.in_channels; ++c) {
    const double* dp = d_pre.values.data() + c * plane;
    const double* in = input.values.data() + c * plane;
    double* df = grads.d_filters.data() + c * side * side;
    for (int u0 = -r; u0 <= r; ++u0)
      for (int u1 = -r; u1 <= r; ++u1)
        df[(u0 + r) * side + (u1 + r)] = corr_dot_plane(dp, in, h, w, u0, u1);

    const double* taps = layer.filters.data() + c * side * side;
    for (int i = 0; i < side * side; ++i)
      flipped[i] = taps[side * side - 1 - i];
    conv_plane_accum(dp, h, w, flipped.data(), r,
                     grads.d_input.values.data() + c * plane);
  }
  return grads;
}

// ============================================================================
// Configuration
// ============================================================================

NetworkConfig default_network_config(ConvKind kind, std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.kind = kind;
  cfg.seed = seed;
  cfg.fusion = true;

  ColumnSpec wide;
  wide.layers = {
      {16, 1.2, -0.5, 0.5, 4, 6, true},
      {16, 1.2, -0.5, 0.5, 3, 6, false},
      {4, 1.2, -0.1, 0.1, 2, 3, false},
  };
  ColumnSpec mid;
  mid.layers = {
      {16, 1.0, -0.5, 0.5, 3, 4, true},
      {16, 1.0, -0.5, 0.5, 2, 4, false},
      {4, 1.0, -0.1, 0.1, 2, 2, false},
  };
  ColumnSpec narrow;
  narrow.layers = {
      {16, 0.8, -0.5, 0.5, 2, 4, true},
      {16, 0.8, -0.5, 0.5, 2, 4, false},
      {2, 0.8, -0.1, 0.1, 1, 2, false},
  };
  cfg.columns = {wide, mid, narrow};
  return cfg;
}

NetworkConfig compact_network_config(ConvKind kind, std::uint64_t seed) {
  NetworkConfig cfg;
  cfg.kind = kind;
  cfg.seed = seed;
  cfg.fusion = true;
  ColumnSpec col;
  col.layers = {
      {16, 1.0, -0.5, 0.5, 3, 4, true},
      {16, 1.0, -0.5, 0.5, 2, 4, false},
      {4, 1.0, -0.1, 0.1, 2, 2, false},
  };
  cfg.columns = {col};
  return cfg;
}

// ============================================================================
// Model assembly
// ============================================================================

namespace {

StandardConvLayer make_standard_layer(const LayerSpec& spec, int in_channels,
                                      std::uint64_t seed) {
  StandardConvLayer layer;
  layer.grid_radius = spec.grid_radius;
  layer.in_channels = in_channels;
  layer.out_channels = spec.out_channels;
  const int taps = layer.taps();
  layer.filters.resize(static_cast<std::size_t>(in_channels) * taps);
  layer.mix.resize(static_cast<std::size_t>(spec.out_channels) * in_channels);
  layer.bias.assign(spec.out_channels, 0.0);
  Rng rng(seed);
  for (double& f : layer.filters) f = normal_draw(rng);
  for (double& m : layer.mix) m = normal_draw(rng);
  // Same gain control as the Gaussian layers: fan-in scaling sets the element
  // magnitude, and row normalization pins the per-channel norm so the layer
  // gain does not depend on the luck of the draw.
  for (int c = 0; c < in_channels; ++c) {
    double* f = layer.filters.data() + static_cast<std::size_t>(c) * taps;
    double nrm = 0.0;
    for (int t = 0; t < taps; ++t) nrm += f[t] * f[t];
    const double s = 1.0 / std::max(std::sqrt(nrm), 1e-12);
    for (int t = 0; t < taps; ++t) f[t] *= s;
  }
  for (int o = 0; o < spec.out_channels; ++o) {
    double* row = layer.mix.data() + static_cast<std::size_t>(o) * in_channels;
    double nrm = 0.0;
    for (int c = 0; c < in_channels; ++c) nrm += row[c] * row[c];
    const double s = std::sqrt(2.0) / std::max(std::sqrt(nrm), 1e-12);
    for (int c = 0; c < in_channels; ++c) row[c] *= s;
  }
  return layer;
}

StandardConvLayer make_fusion_head(int in_channels) {
  StandardConvLayer head;
  head.grid_radius = 0;
  head.in_channels = in_channels;
  head.out_channels = 1;
  head.filters.assign(in_channels, 1.0);
  // Zero mix: the network starts from an all-zero density, so the initial
  // loss is the target's own mass regardless of column scale.
  head.mix.assign(in_channels, 0.0);
  head.bias.assign(1, 0.0);
  return head;
}

int pool_count(const ColumnSpec& col) {
  int n = 0;
  for (const LayerSpec& spec : col.layers) n += spec.pool_after ? 1 : 0;
  return n;
}

void validate_config(const NetworkConfig& config) {
  if (config.columns.empty())
    throw ConfigError("network needs at least one column");
  if (!config.fusion && config.columns.size() != 1)
    throw ConfigError("disabling fusion requires a single column");
  if (config.input_channels < 1) throw ConfigError("input channels < 1");
  if (config.bank_size < 2) throw ConfigError("kernel bank too small");
  const int pools = pool_count(config.columns.front());
  for (const ColumnSpec& col : config.columns) {
    if (col.layers.empty()) throw ConfigError("empty column");
    if (pool_count(col) != pools)
      throw ConfigError("columns must downsample by the same factor");
    for (const LayerSpec& spec : col.layers) {
      if (spec.k < 1 || spec.grid_radius < 1 || spec.out_channels < 1)
        throw ConfigError("layer spec values must be positive");
      if (spec.perturb_hi < spec.perturb_lo)
        throw ConfigError("inverted perturbation range");
    }
  }
}

}  // namespace

Model build_model(const NetworkConfig& config) {
  validate_config(config);
  Model model;
  model.config = config;
  int head_in = 0;
  for (std::size_t c = 0; c < config.columns.size(); ++c) {
    const ColumnSpec& col = config.columns[c];
    int ci = config.input_channels;
    std::vector<LayerNode> nodes;
    nodes.reserve(col.layers.size());
    for (std::size_t l = 0; l < col.layers.size(); ++l) {
      const LayerSpec& spec = col.layers[l];
      const std::uint64_t lseed = split_seed(config.seed, (c + 1) * 64 + l);
      LayerNode node;
      node.relu = true;
      node.pool_after = spec.pool_after;
      if (config.kind == ConvKind::gaussian) {
        KernelBank bank =
            sample_kernel_bank(config.bank_size, spec.base_sigma,
                               spec.perturb_lo, spec.perturb_hi,
                               split_seed(lseed, 1));
        LowRankBasis basis = pca_select(bank, spec.k);
        GaussConvLayer layer =
            make_gauss_layer(basis, spec.grid_radius, ci, spec.out_channels,
                             config.mean_spacing, split_seed(lseed, 2));
        layer.train_means = config.train_means;
        node.conv = std::move(layer);
      } else {
        node.conv = make_standard_layer(spec, ci, split_seed(lseed, 2));
      }
      ci = spec.out_channels;
      nodes.push_back(std::move(node));
    }
    head_in += ci;
    model.columns.push_back(std::move(nodes));
  }
  model.head = make_fusion_head(head_in);
  return model;
}

std::size_t parameter_count(const Model& model) {
  std::size_t total = 0;
  for (const auto& col : model.columns) {
    for (const auto& node : col) {
      if (const auto* g = std::get_if<GaussConvLayer>(&node.conv)) {
        total += g->basis.logits.size() + g->sigma_params.size();
        if (g->train_means) total += 2 * g->means.size();
        total += g->mix.size() + g->bias.size();
      } else {
        const auto& s = std::get<StandardConvLayer>(node.conv);
        total += s.filters.size() + s.mix.size() + s.bias.size();
      }
    }
  }
  total += model.head.mix.size() + model.head.bias.size();
  return total;
}

// ============================================================================
// Forward / backward plumbing
// ============================================================================

namespace {

struct NodeTrace {
  FeatureMap input;    // what the convolution saw
  FeatureMap pre_act;  // convolution output, before the activation
  std::vector<std::uint32_t> argmax;  // per pooled cell, index into its plane
};

struct ForwardTrace {
  std::vector<std::vector<NodeTrace>> columns;
  FeatureMap concat;  // head input
};

void relu_inplace(FeatureMap& map) {
  for (double& v : map.values) v = v > 0.0 ? v : 0.0;
}

FeatureMap maxpool2(const FeatureMap& in, std::vector<std::uint32_t>* argmax) {
  if (in.height % 2 != 0 || in.width % 2 != 0)
    throw ShapeError("2x pooling needs even map sides");
  FeatureMap out = make_feature_map(in.channels, in.height / 2, in.width / 2);
  if (argmax)
    argmax->assign(static_cast<std::size_t>(in.channels) * out.plane_size(), 0);
  const std::size_t in_plane = in.plane_size();
  const std::size_t out_plane = out.plane_size();
  for (int c = 0; c < in.channels; ++c) {
    const double* src = in.values.data() + c * in_plane;
    double* dst = out.values.data() + c * out_plane;
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        std::uint32_t best = static_cast<std::uint32_t>(2 * y * in.width + 2 * x);
        double best_v = src[best];
        const std::uint32_t cands[3] = {
            best + 1, best + static_cast<std::uint32_t>(in.width),
            best + static_cast<std::uint32_t>(in.width) + 1};
        for (std::uint32_t cand : cands) {
          if (src[cand] > best_v) {
            best_v = src[cand];
            best = cand;
          }
        }
        dst[static_cast<std::size_t>(y) * out.width + x] = best_v;
        if (argmax)
          (*argmax)[c * out_plane + static_cast<std::size_t>(y) * out.width + x] =
              best;
      }
    }
  }
  return out;
}

FeatureMap maxpool2_backward(const FeatureMap& d_out,
                             const std::vector<std::uint32_t>& argmax,
                             int in_height, int in_width) {
  FeatureMap d_in = make_feature_map(d_out.channels, in_height, in_width);
  const std::size_t out_plane = d_out.plane_size();
  const std::size_t in_plane = d_in.plane_size();
  for (int c = 0; c < d_out.channels; ++c) {
    const double* src = d_out.values.data() + c * out_plane;
    double* dst = d_in.values.data() + c * in_plane;
    for (std::size_t p = 0; p < out_plane; ++p)
      dst[argmax[c * out_plane + p]] += src[p];
  }
  return d_in;
}

FeatureMap forward_node(const FeatureMap& input, const LayerNode& node,
                        NodeTrace* trace) {
  FeatureMap pre;
  if (const auto* g = std::get_if<GaussConvLayer>(&node.conv)) {
    pre = forward_fast(input, *g);
  } else {
    pre = forward_standard(input, std::get<StandardConvLayer>(node.conv));
  }
  FeatureMap act = pre;
  if (node.relu) relu_inplace(act);
  if (trace) {
    trace->input = input;  // copy: the caller keeps moving its running map
    trace->pre_act = std::move(pre);
  }
  if (node.pool_after) {
    return maxpool2(act, trace ? &trace->argmax : nullptr);
  }
  return act;
}

FeatureMap forward_model(const Model& model, const FeatureMap& image,
                         ForwardTrace* trace) {
  if (image.channels != model.config.input_channels)
    throw ShapeError("image channels do not match the model");
  std::vector<FeatureMap> col_out;
  col_out.reserve(model.columns.size());
  if (trace) trace->columns.assign(model.columns.size(), {});
  for (std::size_t c = 0; c < model.columns.size(); ++c) {
    const auto& col = model.columns[c];
    if (trace) trace->columns[c].resize(col.size());
    FeatureMap x = image;
    for (std::size_t l = 0; l < col.size(); ++l) {
      x = forward_node(x, col[l], trace ? &trace->columns[c][l] : nullptr);
    }
    col_out.push_back(std::move(x));
  }
  for (const FeatureMap& m : col_out) {
    if (m.height != col_out.front().height || m.width != col_out.front().width)
      throw ShapeError("column outputs disagree in resolution");
  }
  int channels = 0;
  for (const FeatureMap& m : col_out) channels += m.channels;
  FeatureMap concat =
      make_feature_map(channels, col_out.front().height, col_out.front().width);
  std::size_t off = 0;
  for (const FeatureMap& m : col_out) {
    std::copy(m.values.begin(), m.values.end(), concat.values.begin() + off);
    off += m.values.size();
  }
  FeatureMap out = forward_standard(concat, model.head);
  if (trace) trace->concat = std::move(concat);
  return out;
}

// ----------------------------------------------------------------------------
// Parameter registry: a fixed flattening order shared by the optimizer and
// the gradient gatherer. Vectors never resize during training, so raw
// pointers stay valid.
// ----------------------------------------------------------------------------

struct ParamView {
  double* data;
  std::size_t size;
};

std::vector<ParamView> trainable_params(Model& model) {
  std::vector<ParamView> views;
  auto add = [&views](std::vector<double>& v) {
    views.push_back({v.data(), v.size()});
  };
  for (auto& col : model.columns) {
    for (auto& node : col) {
      if (auto* g = std::get_if<GaussConvLayer>(&node.conv)) {
        add(g->basis.logits);
        add(g->sigma_params);
        if (g->train_means)
          views.push_back({&g->means[0].d0, 2 * g->means.size()});
        add(g->mix);
        add(g->bias);
      } else {
        auto& s = std::get<StandardConvLayer>(node.conv);
        add(s.filters);
        add(s.mix);
        add(s.bias);
      }
    }
  }
  // The head's radius-0 filters are scalar factors redundant with its mix;
  // training both makes a degenerate valley, so only mix and bias learn.
  add(model.head.mix);
  add(model.head.bias);
  return views;
}

// Mirrors trainable_params: the same order, reading from gradient structs.
struct GradSink {
  std::vector<double>& flat;
  std::size_t cursor = 0;
  void push(const double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) flat[cursor + i] += data[i];
    cursor += n;
  }
  void push(const std::vector<double>& v) { push(v.data(), v.size()); }
};

// Runs reverse mode through the whole model and accumulates parameter
// gradients (registry order) into grad_accum.
void backward_model(const Model& model, const ForwardTrace& trace,
                    const FeatureMap& d_output,
                    std::vector<double>& grad_accum) {
  StandardGradients head_grads =
      backward_standard(trace.concat, model.head, d_output);

  // Split the concatenated cotangent back into column slices and walk each
  // column in reverse, collecting per-node gradients.
  std::vector<std::vector<LayerGradients>> gauss_grads(model.columns.size());
  std::vector<std::vector<StandardGradients>> std_grads(model.columns.size());
  std::size_t off = 0;
  for (std::size_t c = 0; c < model.columns.size(); ++c) {
    const auto& col = model.columns[c];
    gauss_grads[c].resize(col.size());
    std_grads[c].resize(col.size());

    int out_ch = 0;
    if (const auto* g = std::get_if<GaussConvLayer>(&col.back().conv))
      out_ch = g->out_channels;
    else
      out_ch = std::get<StandardConvLayer>(col.back().conv).out_channels;

    FeatureMap d = make_feature_map(out_ch, trace.concat.height,
                                    trace.concat.width);
    std::copy(head_grads.d_input.values.begin() + off,
              head_grads.d_input.values.begin() + off + d.values.size(),
              d.values.begin());
    off += d.values.size();

    for (std::size_t l = col.size(); l-- > 0;) {
      const LayerNode& node = col[l];
      const NodeTrace& nt = trace.columns[c][l];
      if (node.pool_after) {
        d = maxpool2_backward(d, nt.argmax, nt.pre_act.height,
                              nt.pre_act.width);
      }
      if (node.relu) {
        for (std::size_t p = 0; p < d.values.size(); ++p)
          if (nt.pre_act.values[p] <= 0.0) d.values[p] = 0.0;
      }
      if (const auto* g = std::get_if<GaussConvLayer>(&node.conv)) {
        gauss_grads[c][l] = backward(nt.input, *g, d);
        d = std::move(gauss_grads[c][l].d_input);
      } else {
        std_grads[c][l] = backward_standard(
            nt.input, std::get<StandardConvLayer>(node.conv), d);
        d = std::move(std_grads[c][l].d_input);
      }
    }
  }

  GradSink sink{grad_accum};
  for (std::size_t c = 0; c < model.columns.size(); ++c) {
    for (std::size_t l = 0; l < model.columns[c].size(); ++l) {
      if (const auto* g =
              std::get_if<GaussConvLayer>(&model.columns[c][l].conv)) {
        const LayerGradients& lg = gauss_grads[c][l];
        sink.push(lg.d_logits);
        sink.push(lg.d_sigma_params);
        if (g->train_means)
          sink.push(&lg.d_means[0].d0, 2 * lg.d_means.size());
        sink.push(lg.d_mix);
        sink.push(lg.d_bias);
      } else {
        const StandardGradients& sg = std_grads[c][l];
        sink.push(sg.d_filters);
        sink.push(sg.d_mix);
        sink.push(sg.d_bias);
      }
    }
  }
  sink.push(head_grads.d_mix);
  sink.push(head_grads.d_bias);
}

double median_of(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? values[n / 2]
                    : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

// ============================================================================
// Synthetic data
// ============================================================================

namespace {

void render_blob(FeatureMap& image, double cy, double cx, double amp,
                 double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  const int fy = static_cast<int>(std::floor(cy));
  const int fx = static_cast<int>(std::floor(cx));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  const int y_lo = std::max(0, fy - r);
  const int y_hi = std::min(image.height - 1, fy + r + 1);
  const int x_lo = std::max(0, fx - r);
  const int x_hi = std::min(image.width - 1, fx + r + 1);
  for (int y = y_lo; y <= y_hi; ++y) {
    const double dy = y - cy;
    for (int x = x_lo; x <= x_hi; ++x) {
      const double dx = x - cx;
      image.at(0, y, x) += amp * std::exp(-(dy * dy + dx * dx) * inv);
    }
  }
}

}  // namespace

Dataset make_synthetic_dataset(const SyntheticConfig& config, int count,
                               std::uint64_t seed) {
  if (count < 1) throw ConfigError("dataset size must be positive");
  if (config.image_size < 8) throw ConfigError("image size too small");
  if (config.count_min < 0 || config.count_max < config.count_min)
    throw ConfigError("invalid count range");
  if (config.beta <= 0.0 || config.blob_sigma <= 0.0)
    throw ConfigError("variances must be positive");

  const int size = config.image_size;
  const double margin = std::min(1.5, size / 4.0);
  Dataset data;
  data.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(i)));
    const int span = config.count_max - config.count_min + 1;
    int n = config.count_min +
            static_cast<int>(uniform_unit(rng) * static_cast<double>(span));
    n = std::min(n, config.count_max);

    Sample sample;
    sample.ann.height = size;
    sample.ann.width = size;
    sample.image = make_feature_map(1, size, size);

    if (config.grid_layout) {
      const double usable = size - 2.0 * margin;
      const double pitch =
          std::max(2.0, usable / std::ceil(std::sqrt(static_cast<double>(n))));
      const int cells = static_cast<int>(std::ceil(usable / pitch));
      for (int cell = 0; cell < cells * cells && n > 0; ++cell, --n) {
        const int row = cell / cells;
        const int col = cell % cells;
        double y = margin + (row + 0.5) * pitch +
                   uniform_in(rng, -0.3, 0.3) * pitch;
        double x = margin + (col + 0.5) * pitch +
                   uniform_in(rng, -0.3, 0.3) * pitch;
        y = std::clamp(y, margin, size - margin);
        x = std::clamp(x, margin, size - margin);
        sample.ann.points.push_back({x, y});
      }
    } else {
      for (int j = 0; j < n; ++j) {
        const double x = uniform_in(rng, margin, size - margin);
        const double y = uniform_in(rng, margin, size - margin);
        sample.ann.points.push_back({x, y});
      }
    }

    for (const Point& p : sample.ann.points) {
      const double amp = uniform_in(rng, config.blob_amp_lo, config.blob_amp_hi);
      render_blob(sample.image, p.y, p.x, amp, config.blob_sigma);
    }
    if (config.pixel_noise > 0.0) {
      for (double& v : sample.image.values)
        v += config.pixel_noise * normal_draw(rng);
    }
    sample.target = generate_density_map(sample.ann, config.beta);
    data.push_back(std::move(sample));
  }
  return data;
}

void perturb_dataset_annotations(Dataset& data, double radius, double beta,
                                 std::uint64_t seed) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i].ann = perturb_annotations(data[i].ann, radius,
                                      split_seed(seed, i));
    data[i].target = generate_density_map(data[i].ann, beta);
  }
}

// ============================================================================
// Training and evaluation
// ============================================================================

double mse_density_loss(const DensityMap& pred, const DensityMap& target) {
  if (pred.height != target.height || pred.width != target.width)
    throw ShapeError("loss needs equally sized maps");
  double acc = 0.0;
  for (std::size_t p = 0; p < pred.values.size(); ++p) {
    const double d = pred.values[p] - target.values[p];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.values.size());
}

namespace {

// Loss of the nearest-neighbor upsampled prediction against the full-size
// target, plus the cotangent at the coarse resolution.
double coarse_loss_and_grad(const FeatureMap& out, const DensityMap& target,
                            FeatureMap& d_out) {
  if (out.channels != 1) throw ShapeError("density head must emit one plane");
  if (target.height % out.height != 0 || target.width % out.width != 0)
    throw ShapeError("target resolution is not a multiple of the output");
  const int fy = target.height / out.height;
  const int fx = target.width / out.width;
  const double inv_n =
      1.0 / (static_cast<double>(target.height) * target.width);
  d_out = make_feature_map(1, out.height, out.width);
  double loss = 0.0;
  for (int y = 0; y < target.height; ++y) {
    for (int x = 0; x < target.width; ++x) {
      const double diff =
          out.at(0, y / fy, x / fx) - target.at(y, x);
      loss += diff * diff * inv_n;
      d_out.at(0, y / fy, x / fx) += 2.0 * diff * inv_n;
    }
  }
  return loss;
}

}  // namespace

TrainReport train(Model& model, const Dataset& data,
                  const TrainConfig& config) {
  if (data.empty()) throw ConfigError("empty training set");
  if (config.epochs < 1 || config.batch_size < 1)
    throw ConfigError("epochs and batch size must be positive");
  if (config.lr <= 0.0) throw ConfigError("learning rate must be positive");

  std::vector<ParamView> views = trainable_params(model);
  std::size_t total = 0;
  for (const ParamView& view : views) total += view.size;

  std::vector<double> m(total, 0.0), v(total, 0.0), grad(total, 0.0);
  Rng shuffle_rng(split_seed(config.seed, 0x73687566));  // batch order stream
  TrainReport report;
  report.train_config = config;
  TrainState last_finite;
  int step = 0;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double lr = config.lr / (1.0 + config.lr_decay * epoch);
    if (epoch < config.warmup_epochs)
      lr *= static_cast<double>(epoch + 1) / (config.warmup_epochs + 1);
    // Fisher-Yates with the project rng, for reproducible batches.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(uniform_unit(shuffle_rng) * i);
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }

    std::vector<double> batch_losses;
    for (std::size_t start = 0; start < order.size();
         start += config.batch_size) {
      const std::size_t stop =
          std::min(order.size(), start + config.batch_size);
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss_sum = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const Sample& sample = data[order[i]];
        ForwardTrace trace;
        FeatureMap out = forward_model(model, sample.image, &trace);
        FeatureMap d_out;
        loss_sum += coarse_loss_and_grad(out, sample.target, d_out);
        for (double& g : d_out.values) g *= inv_b;
        backward_model(model, trace, d_out, grad);
      }
      const double batch_loss = loss_sum * inv_b;
      if (!std::isfinite(batch_loss))
        throw TrainingDivergedError("training loss left the finite range",
                                    last_finite);
      last_finite = TrainState{epoch, step, batch_loss};
      ++step;

      if (config.clip_norm > 0.0) {
        double norm_sq = 0.0;
        for (double g : grad) norm_sq += g * g;
        const double norm = std::sqrt(norm_sq);
        if (norm > config.clip_norm) {
          const double scale = config.clip_norm / norm;
          for (double& g : grad) g *= scale;
        }
      }

      const double c1 = 1.0 - std::pow(config.beta1, step);
      const double c2 = 1.0 - std::pow(config.beta2, step);
      std::size_t cursor = 0;
      for (const ParamView& view : views) {
        for (std::size_t i = 0; i < view.size; ++i) {
          const std::size_t gi = cursor + i;
          m[gi] = config.beta1 * m[gi] + (1.0 - config.beta1) * grad[gi];
          v[gi] =
              config.beta2 * v[gi] + (1.0 - config.beta2) * grad[gi] * grad[gi];
          const double mhat = m[gi] / c1;
          const double vhat = v[gi] / c2;
          view.data[i] -= lr * mhat / (std::sqrt(vhat) + config.adam_eps);
        }
        cursor += view.size;
      }
      batch_losses.push_back(batch_loss);
    }

    double mean = 0.0;
    for (double loss : batch_losses) mean += loss;
    mean /= static_cast<double>(batch_losses.size());
    report.epoch_mean_loss.push_back(mean);
    report.epoch_median_loss.push_back(median_of(batch_losses));
  }

  const EvalResult final_eval = evaluate(model, data);
  report.final_train_mae = final_eval.mae;
  report.final_train_mse = final_eval.mse;
  return report;
}

DensityMap predict_density(const Model& model, const FeatureMap& image) {
  FeatureMap out = forward_model(model, image, nullptr);
  if (image.height % out.height != 0 || image.width % out.width != 0)
    throw ShapeError("output resolution does not divide the input");
  const int fy = image.height / out.height;
  const int fx = image.width / out.width;
  DensityMap density;
  density.height = image.height;
  density.width = image.width;
  density.values.resize(image.plane_size());
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      density.at(y, x) = out.at(0, y / fy, x / fx);
  return density;
}

double predict_count(const Model& model, const FeatureMap& image) {
  return predict_density(model, image).sum();
}

EvalResult evaluate(const Model& model, const Dataset& data) {
  if (data.empty()) throw ConfigError("empty evaluation set");
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  for (const Sample& sample : data) {
    const double err = predict_count(model, sample.image) -
                       static_cast<double>(sample.ann.points.size());
    abs_sum += std::abs(err);
    sq_sum += err * err;
  }
  EvalResult result;
  result.samples = static_cast<int>(data.size());
  result.mae = abs_sum / data.size();
  result.mse = std::sqrt(sq_sum / data.size());
  return result;
}

// ============================================================================
// Serialization
// ============================================================================

namespace {

ordered_json hex_array(const std::vector<double>& values) {
  ordered_json arr = ordered_json::array();
  for (double v : values) arr.push_back(double_to_hex(v));
  return arr;
}

std::vector<double> hex_values(const ordered_json& arr) {
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& item : arr) out.push_back(double_from_hex(item));
  return out;
}

ordered_json standard_to_json(const StandardConvLayer& layer) {
  ordered_json j;
  j["grid_radius"] = layer.grid_radius;
  j["in_channels"] = layer.in_channels;
  j["out_channels"] = layer.out_channels;
  j["filters"] = hex_array(layer.filters);
  j["mix"] = hex_array(layer.mix);
  j["bias"] = hex_array(layer.bias);
  return j;
}

StandardConvLayer standard_from_json(const ordered_json& j) {
  StandardConvLayer layer;
  layer.grid_radius = j.at("grid_radius").get<int>();
  layer.in_channels = j.at("in_channels").get<int>();
  layer.out_channels = j.at("out_channels").get<int>();
  layer.filters = hex_values(j.at("filters"));
  layer.mix = hex_values(j.at("mix"));
  layer.bias = hex_values(j.at("bias"));
  validate_standard(layer);
  return layer;
}

ordered_json config_to_json(const NetworkConfig& config) {
  ordered_json j;
  j["kind"] = config.kind == ConvKind::gaussian ? "gaussian" : "standard";
  ordered_json cols = ordered_json::array();
  for (const ColumnSpec& col : config.columns) {
    ordered_json layers = ordered_json::array();
    for (const LayerSpec& spec : col.layers) {
      ordered_json s;
      s["k"] = spec.k;
      s["base_sigma"] = spec.base_sigma;
      s["perturb_lo"] = spec.perturb_lo;
      s["perturb_hi"] = spec.perturb_hi;
      s["grid_radius"] = spec.grid_radius;
      s["out_channels"] = spec.out_channels;
      s["pool_after"] = spec.pool_after;
      layers.push_back(std::move(s));
    }
    cols.push_back(ordered_json{{"layers", std::move(layers)}});
  }
  j["columns"] = std::move(cols);
  j["fusion"] = config.fusion;
  j["input_channels"] = config.input_channels;
  j["bank_size"] = config.bank_size;
  j["mean_spacing"] = config.mean_spacing;
  j["train_means"] = config.train_means;
  j["seed"] = config.seed;
  return j;
}

NetworkConfig config_from_json(const ordered_json& j) {
  NetworkConfig config;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "gaussian")
    config.kind = ConvKind::gaussian;
  else if (kind == "standard")
    config.kind = ConvKind::standard;
  else
    throw IoError("unknown layer kind: " + kind);
  for (const auto& col : j.at("columns")) {
    ColumnSpec cs;
    for (const auto& s : col.at("layers")) {
      LayerSpec spec;
      spec.k = s.at("k").get<int>();
      spec.base_sigma = s.at("base_sigma").get<double>();
      spec.perturb_lo = s.at("perturb_lo").get<double>();
      spec.perturb_hi = s.at("perturb_hi").get<double>();
      spec.grid_radius = s.at("grid_radius").get<int>();
      spec.out_channels = s.at("out_channels").get<int>();
      spec.pool_after = s.at("pool_after").get<bool>();
      cs.layers.push_back(spec);
    }
    config.columns.push_back(std::move(cs));
  }
  config.fusion = j.at("fusion").get<bool>();
  config.input_channels = j.at("input_channels").get<int>();
  config.bank_size = j.at("bank_size").get<int>();
  config.mean_spacing = j.at("mean_spacing").get<double>();
  config.train_means = j.at("train_means").get<bool>();
  config.seed = j.at("seed").get<std::uint64_t>();
  return config;
}

}  // namespace

std::string model_to_json(const Model& model) {
  ordered_json j;
  j["format"] = "gausscount-model-v1";
  j["config"] = config_to_json(model.config);
  ordered_json cols = ordered_json::array();
  for (const auto& col : model.columns) {
    ordered_json nodes = ordered_json::array();
    for (const auto& node : col) {
      ordered_json n;
      n["relu"] = node.relu;
      n["pool_after"] = node.pool_after;
      if (const auto* g = std::get_if<GaussConvLayer>(&node.conv)) {
        n["kind"] = "gaussian";
        n["layer"] = ordered_json::parse(layer_to_json(*g));
      } else {
        n["kind"] = "standard";
        n["layer"] = standard_to_json(std::get<StandardConvLayer>(node.conv));
      }
      nodes.push_back(std::move(n));
    }
    cols.push_back(std::move(nodes));
  }
  j["columns"] = std::move(cols);
  j["head"] = standard_to_json(model.head);
  return j.dump(2);
}

Model model_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("model checkpoint is not valid JSON: ") +
                  e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "gausscount-model-v1")
      throw IoError("unrecognized checkpoint format tag");
    Model model;
    model.config = config_from_json(j.at("config"));
    for (const auto& col : j.at("columns")) {
      std::vector<LayerNode> nodes;
      for (const auto& n : col) {
        LayerNode node;
        node.relu = n.at("relu").get<bool>();
        node.pool_after = n.at("pool_after").get<bool>();
        const std::string kind = n.at("kind").get<std::string>();
        if (kind == "gaussian") {
          node.conv = layer_from_json(n.at("layer").dump());
        } else if (kind == "standard") {
          node.conv = standard_from_json(n.at("layer"));
        } else {
          throw IoError("unknown layer kind: " + kind);
        }
        nodes.push_back(std::move(node));
      }
      model.columns.push_back(std::move(nodes));
    }
    if (model.columns.size() != model.config.columns.size())
      throw IoError("checkpoint column count disagrees with its config");
    model.head = standard_from_json(j.at("head"));
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("model checkpoint is incomplete: ") + e.what());
  }
}

FeatureMap feature_from_density(const DensityMap& map) {
  FeatureMap out = make_feature_map(1, map.height, map.width);
  out.values = map.values;
  return out;
}

DensityMap density_from_feature(const FeatureMap& map, int channel) {
  if (channel < 0 || channel >= map.channels)
    throw ShapeError("channel out of range");
  DensityMap out;
  out.height = map.height;
  out.width = map.width;
  out.values.assign(
      map.values.begin() + channel * map.plane_size(),
      map.values.begin() + (channel + 1) * map.plane_size());
  return out;
}

}  // namespace gausscount
