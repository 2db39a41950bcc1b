#include "gausscount/gconv.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "json.hpp"

namespace gausscount {

namespace {

// ============================================================================
// Plane primitives
// ============================================================================

// Same-padding convolution, accumulated: out[p] += scale * sum_u k[u] in[p-u].
// Tap-outer loops keep the inner accumulation contiguous.
void conv_same_accum(const double* in, int h, int w, const DiscreteKernel& ker,
                     double scale, double* out) {
  const int r = ker.radius;
  for (int dy = -r; dy <= r; ++dy) {
    const int y0 = std::max(0, dy);
    const int y1 = h - 1 + std::min(0, dy);
    for (int dx = -r; dx <= r; ++dx) {
      const double wgt = scale * ker.at(dy + r, dx + r);
      if (wgt == 0.0) continue;
      const int x0 = std::max(0, dx);
      const int x1 = w - 1 + std::min(0, dx);
      for (int y = y0; y <= y1; ++y) {
        const double* src = in + static_cast<std::size_t>(y - dy) * w + (x0 - dx);
        double* dst = out + static_cast<std::size_t>(y) * w + x0;
        for (int x = 0; x <= x1 - x0; ++x) {
          dst[x] += wgt * src[x];
        }
      }
    }
  }
}

// dst[p] += scale * src[p - off], zero outside.
void int_shift_accum(const double* src, int h, int w, int off0, int off1,
                     double scale, double* dst) {
  if (scale == 0.0) return;
  const int y0 = std::max(0, off0);
  const int y1 = h - 1 + std::min(0, off0);
  const int x0 = std::max(0, off1);
  const int x1 = w - 1 + std::min(0, off1);
  for (int y = y0; y <= y1; ++y) {
    const double* s = src + static_cast<std::size_t>(y - off0) * w + (x0 - off1);
    double* d = dst + static_cast<std::size_t>(y) * w + x0;
    for (int x = 0; x <= x1 - x0; ++x) {
      d[x] += scale * s[x];
    }
  }
}

// ----------------------------------------------------------------------------
// Extended-canvas primitives. The translated reads of the factorized route
// must see true convolution values beyond the image frame — otherwise the
// route could not match a direct convolution with the mean baked into the
// kernel — so the summed map lives on a canvas padded by the placement
// margin, with the input embedded at offset (m, m).

void embed_plane(const double* in, int h, int w, int m, double* out_e,
                 int we) {
  for (int y = 0; y < h; ++y) {
    const double* src = in + static_cast<std::size_t>(y) * w;
    double* dst = out_e + static_cast<std::size_t>(y + m) * we + m;
    for (int x = 0; x < w; ++x) dst[x] = src[x];
  }
}

void crop_plane(const double* in_e, int we, int m, double* out, int h, int w) {
  for (int y = 0; y < h; ++y) {
    const double* src = in_e + static_cast<std::size_t>(y + m) * we + m;
    double* dst = out + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) dst[x] += src[x];
  }
}

// dst[p] += scale * src_e[p + (m,m) - off]; the margin keeps reads in-canvas.
void shift_from_ext_accum(const double* src_e, int we, int m, int off0,
                          int off1, double scale, double* dst, int h, int w) {
  if (scale == 0.0) return;
  for (int y = 0; y < h; ++y) {
    const double* s =
        src_e + static_cast<std::size_t>(y + m - off0) * we + (m - off1);
    double* d = dst + static_cast<std::size_t>(y) * w;
    for (int x = 0; x < w; ++x) d[x] += scale * s[x];
  }
}

// Adjoint of shift_from_ext_accum: dst_e[p + (m,m) - off] += scale * src[p].
void scatter_to_ext_accum(const double* src, int h, int w, int m, int off0,
                          int off1, double scale, double* dst_e, int we) {
  if (scale == 0.0) return;
  for (int y = 0; y < h; ++y) {
    const double* s = src + static_cast<std::size_t>(y) * w;
    double* d =
        dst_e + static_cast<std::size_t>(y + m - off0) * we + (m - off1);
    for (int x = 0; x < w; ++x) d[x] += scale * s[x];
  }
}

// sum_p a[p] * b_e[p + (m,m) - off].
double dot_with_ext(const double* a, int h, int w, const double* b_e, int we,
                    int m, int off0, int off1) {
  double total = 0.0;
  for (int y = 0; y < h; ++y) {
    const double* pa = a + static_cast<std::size_t>(y) * w;
    const double* pb =
        b_e + static_cast<std::size_t>(y + m - off0) * we + (m - off1);
    for (int x = 0; x < w; ++x) total += pa[x] * pb[x];
  }
  return total;
}

// sum_p a[p] * b[p - off], zero outside.
double int_shift_dot(const double* a, const double* b, int h, int w, int off0,
                     int off1) {
  const int y0 = std::max(0, off0);
  const int y1 = h - 1 + std::min(0, off0);
  const int x0 = std::max(0, off1);
  const int x1 = w - 1 + std::min(0, off1);
  double total = 0.0;
  for (int y = y0; y <= y1; ++y) {
    const double* pa = a + static_cast<std::size_t>(y) * w + x0;
    const double* pb = b + static_cast<std::size_t>(y - off0) * w + (x0 - off1);
    for (int x = 0; x <= x1 - x0; ++x) {
      total += pa[x] * pb[x];
    }
  }
  return total;
}

// dK[u] += scale * sum_p dZ[p] * in[p - u] for u on the kernel grid.
void kernel_grad_accum(const double* dz, const double* in, int h, int w, int r,
                       double scale, DiscreteKernel& dk) {
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      dk.at(dy + r, dx + r) += scale * int_shift_dot(dz, in, h, w, dy, dx);
    }
  }
}

DiscreteKernel flipped(const DiscreteKernel& ker) {
  DiscreteKernel out;
  out.radius = ker.radius;
  out.weights.resize(ker.weights.size());
  const int n = ker.size();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      out.at(i, j) = ker.at(n - 1 - i, n - 1 - j);
    }
  }
  return out;
}

struct BilinearSplit {
  int t0 = 0, t1 = 0;      // integer part (floor)
  double f0 = 0.0, f1 = 0.0;  // fractional part in [0, 1)
  // Corner weight for (i, j) in {0, 1}^2.
  double a(int i, int j) const {
    return (i ? f0 : 1.0 - f0) * (j ? f1 : 1.0 - f1);
  }
};

BilinearSplit split_mu(Vec2 mu) {
  BilinearSplit s;
  s.t0 = static_cast<int>(std::floor(mu.d0));
  s.t1 = static_cast<int>(std::floor(mu.d1));
  s.f0 = mu.d0 - s.t0;
  s.f1 = mu.d1 - s.t1;
  return s;
}

// The zero-mean kernel translated by mu with bilinear corner weights, on an
// enlarged grid. Corners with zero weight are skipped, so integer means
// reduce to an exact index shift.
DiscreteKernel place_kernel(const DiscreteKernel& base, Vec2 mu,
                            int radius_ext) {
  DiscreteKernel out;
  out.radius = radius_ext;
  out.weights.assign(static_cast<std::size_t>(out.size()) * out.size(), 0.0);
  const BilinearSplit s = split_mu(mu);
  const int r = base.radius;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double a = s.a(i, j);
      if (a == 0.0) continue;
      const int o0 = s.t0 + i;
      const int o1 = s.t1 + j;
      if (std::abs(o0) + r > radius_ext || std::abs(o1) + r > radius_ext) {
        throw ShapeError("placed kernel does not fit its enlarged grid");
      }
      for (int u0 = -r; u0 <= r; ++u0) {
        for (int u1 = -r; u1 <= r; ++u1) {
          out.at(u0 + o0 + radius_ext, u1 + o1 + radius_ext) +=
              a * base.at(u0 + r, u1 + r);
        }
      }
    }
  }
  return out;
}

// Margin needed so every translated kernel fits its enlarged grid.
int placement_margin(const std::vector<Vec2>& means) {
  int margin = 0;
  for (const Vec2& mu : means) {
    const BilinearSplit s = split_mu(mu);
    // All four corners count, including zero-weight ones: the mean gradient
    // dots the cotangent against every corner translation, and those reads
    // must see real canvas values.
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        margin = std::max(margin, std::abs(s.t0 + i));
        margin = std::max(margin, std::abs(s.t1 + j));
      }
    }
  }
  return margin;
}

void check_finite(const std::vector<double>& values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw ConfigError(std::string(what) + " contains a non-finite value");
    }
  }
}

void validate_layer(const GaussConvLayer& layer) {
  const int k = layer.k();
  if (k < 1) {
    throw ConfigError("layer needs at least one component");
  }
  if (layer.grid_radius < 1) {
    throw ConfigError("layer grid_radius must be >= 1");
  }
  if (static_cast<int>(layer.means.size()) != k ||
      static_cast<int>(layer.basis.logits.size()) != k) {
    throw ShapeError("layer means/logits must have K entries");
  }
  if (layer.in_channels < 1 || layer.out_channels < 1 ||
      layer.mix.size() != static_cast<std::size_t>(layer.out_channels) *
                              layer.in_channels ||
      layer.bias.size() != static_cast<std::size_t>(layer.out_channels)) {
    throw ShapeError("layer mix/bias shapes disagree with channel counts");
  }
  for (const Vec2& mu : layer.means) {
    if (std::abs(mu.d0) > layer.grid_radius ||
        std::abs(mu.d1) > layer.grid_radius) {
      throw ConfigError("layer mean exceeds grid_radius");
    }
  }
  check_finite(layer.sigma_params, "sigma_params");
  check_finite(layer.basis.logits, "logits");
  check_finite(layer.mix, "mix");
  check_finite(layer.bias, "bias");
}

void validate_input(const GaussConvLayer& layer, const FeatureMap& input) {
  if (input.channels != layer.in_channels || input.height < 1 ||
      input.width < 1 ||
      input.values.size() != static_cast<std::size_t>(input.channels) *
                                 input.height * input.width) {
    throw ShapeError("input map disagrees with layer in_channels");
  }
}

DiscreteKernel base_kernel(const GaussConvLayer& layer, int j) {
  KernelSpec spec;
  const double s = layer.sigma(j);
  spec.cov.xx = s * s;
  spec.cov.yy = s * s;
  spec.support_radius = layer.grid_radius;
  return make_gaussian_kernel(spec);
}

// out[o] = bias[o] + sum_c mix[o][c] * pre[c]
FeatureMap apply_mix(const FeatureMap& pre, const std::vector<double>& mix,
                     const std::vector<double>& bias) {
  const int co = static_cast<int>(bias.size());
  const int ci = pre.channels;
  FeatureMap out = make_feature_map(co, pre.height, pre.width);
  const std::size_t plane = pre.plane_size();
  for (int o = 0; o < co; ++o) {
    double* dst = &out.values[o * plane];
    for (std::size_t p = 0; p < plane; ++p) dst[p] = bias[o];
    for (int c = 0; c < ci; ++c) {
      const double m = mix[static_cast<std::size_t>(o) * ci + c];
      if (m == 0.0) continue;
      const double* src = &pre.values[c * plane];
      for (std::size_t p = 0; p < plane; ++p) dst[p] += m * src[p];
    }
  }
  return out;
}

}  // namespace

// ============================================================================
// FeatureMap and layer basics
// ============================================================================

FeatureMap make_feature_map(int channels, int height, int width) {
  FeatureMap map;
  map.channels = channels;
  map.height = height;
  map.width = width;
  map.values.assign(
      static_cast<std::size_t>(channels) * height * width, 0.0);
  return map;
}

double GaussConvLayer::sigma(int j) const {
  const double x = sigma_params[j];
  const double sp = x > 30.0 ? x : std::log1p(std::exp(x));
  return kMinSigma + sp;
}

double GaussConvLayer::sigma_grad(int j) const {
  const double x = sigma_params[j];
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<Vec2> default_mean_grid(int k, double spacing) {
  if (k < 1) {
    throw ConfigError("mean grid needs k >= 1");
  }
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(k))));
  const double center = 0.5 * (side - 1);
  std::vector<Vec2> means;
  means.reserve(k);
  for (int i = 0; i < side && static_cast<int>(means.size()) < k; ++i) {
    for (int j = 0; j < side && static_cast<int>(means.size()) < k; ++j) {
      Vec2 mu;
      mu.d0 = (i - center) * spacing;
      mu.d1 = (j - center) * spacing;
      means.push_back(mu);
    }
  }
  return means;
}

GaussConvLayer make_gauss_layer(const LowRankBasis& basis, int grid_radius,
                                int in_channels, int out_channels,
                                double mean_spacing, std::uint64_t seed) {
  if (basis.k() < 1) {
    throw ConfigError("make_gauss_layer needs a non-empty basis");
  }
  GaussConvLayer layer;
  layer.basis = basis;
  layer.grid_radius = grid_radius;
  layer.in_channels = in_channels;
  layer.out_channels = out_channels;

  const int k = basis.k();
  layer.sigma_params.resize(k);
  for (int j = 0; j < k; ++j) {
    const Covariance2& cov = basis.covariances[j];
    const double sigma =
        std::max(kMinSigma + 1e-9, std::sqrt(0.5 * (cov.xx + cov.yy)));
    // Invert sigma = kMinSigma + softplus(u).
    const double sp = sigma - kMinSigma;
    layer.sigma_params[j] = sp > 30.0 ? sp : std::log(std::expm1(sp));
  }
  if (layer.basis.logits.empty()) {
    layer.basis.logits = init_weights(basis, grid_radius);
  }
  layer.means = default_mean_grid(k, mean_spacing);

  // The shared-smoothing forward sums all K smoothed maps before the weighted
  // translations, so the spatial operator carries a mass close to K (each base
  // kernel integrates to ~1). Fold that gain into the mix scale, and pin each
  // output row's norm: with few input channels a raw Gaussian draw leaves the
  // per-layer gain to luck, and the compounded feature scale can differ by
  // orders of magnitude between seeds.
  double operator_mass = 0.0;
  for (int j = 0; j < k; ++j) {
    const DiscreteKernel kj = base_kernel(layer, j);
    for (double v : kj.weights) operator_mass += v;
  }
  operator_mass = std::max(operator_mass, 1e-12);

  Rng rng(split_seed(seed, 0x6d6978));  // mix stream
  layer.mix.resize(static_cast<std::size_t>(out_channels) * in_channels);
  for (double& m : layer.mix) m = normal_draw(rng);
  for (int o = 0; o < out_channels; ++o) {
    double* row = layer.mix.data() + static_cast<std::size_t>(o) * in_channels;
    double nrm = 0.0;
    for (int c = 0; c < in_channels; ++c) nrm += row[c] * row[c];
    const double s =
        std::sqrt(2.0) / (operator_mass * std::max(std::sqrt(nrm), 1e-12));
    for (int c = 0; c < in_channels; ++c) row[c] *= s;
  }
  layer.bias.assign(out_channels, 0.0);

  validate_layer(layer);
  return layer;
}

// ============================================================================
// Forward routes
// ============================================================================

FeatureMap forward_massive_oracle(const FeatureMap& input,
                                  const std::vector<KernelSpec>& specs,
                                  const std::vector<double>& mix,
                                  const std::vector<double>& bias) {
  if (specs.empty()) {
    throw ConfigError("massive oracle needs at least one kernel spec");
  }
  if (specs.size() > 1024) {
    throw OracleSizeError("massive oracle refuses more than 1024 kernels");
  }
  if (input.height > 128 || input.width > 128) {
    throw OracleSizeError("massive oracle refuses image sides > 128");
  }
  const int ci = input.channels;
  const int co = static_cast<int>(bias.size());
  if (ci < 1 || co < 1 ||
      mix.size() != static_cast<std::size_t>(co) * ci) {
    throw ShapeError("massive oracle mix/bias shapes disagree");
  }

  FeatureMap pre = make_feature_map(ci, input.height, input.width);
  for (const KernelSpec& spec : specs) {
    // Mean baked in: the Gaussian is evaluated at x - mean on a grid extended
    // so the translated support still fits.
    KernelSpec extended = spec;
    extended.support_radius =
        spec.support_radius +
        static_cast<int>(std::ceil(
            std::max(std::abs(spec.mean.d0), std::abs(spec.mean.d1))));
    const DiscreteKernel kernel = make_gaussian_kernel(extended);
    for (int c = 0; c < ci; ++c) {
      conv_same_accum(&input.values[c * input.plane_size()], input.height,
                      input.width, kernel, 1.0,
                      &pre.values[c * pre.plane_size()]);
    }
  }
  return apply_mix(pre, mix, bias);
}

FeatureMap forward_lra_oracle(const FeatureMap& input,
                              const GaussConvLayer& layer) {
  validate_layer(layer);
  validate_input(layer, input);
  if (layer.k() > 32) {
    throw OracleSizeError("lra oracle refuses K > 32");
  }
  if (input.height > 64 || input.width > 64) {
    throw OracleSizeError("lra oracle refuses image sides > 64");
  }

  const int k = layer.k();
  const std::vector<double> fused = softmax_normalize(layer.basis.logits);
  const int radius_ext = layer.grid_radius + placement_margin(layer.means);

  std::vector<DiscreteKernel> bases(k);
  for (int j = 0; j < k; ++j) bases[j] = base_kernel(layer, j);

  FeatureMap pre = make_feature_map(layer.in_channels, input.height, input.width);
  for (int kk = 0; kk < k; ++kk) {
    for (int j = 0; j < k; ++j) {
      const DiscreteKernel placed =
          place_kernel(bases[j], layer.means[kk], radius_ext);
      for (int c = 0; c < layer.in_channels; ++c) {
        conv_same_accum(&input.values[c * input.plane_size()], input.height,
                        input.width, placed, fused[kk],
                        &pre.values[c * pre.plane_size()]);
      }
    }
  }
  return apply_mix(pre, layer.mix, layer.bias);
}

FeatureMap shift_bilinear(const FeatureMap& map, Vec2 mu) {
  FeatureMap out = make_feature_map(map.channels, map.height, map.width);
  const BilinearSplit s = split_mu(mu);
  const std::size_t plane = map.plane_size();
  for (int c = 0; c < map.channels; ++c) {
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        int_shift_accum(&map.values[c * plane], map.height, map.width,
                        s.t0 + i, s.t1 + j, s.a(i, j),
                        &out.values[c * plane]);
      }
    }
  }
  return out;
}

FeatureMap forward_fast(const FeatureMap& input, const GaussConvLayer& layer) {
  validate_layer(layer);
  validate_input(layer, input);

  const int k = layer.k();
  const int h = input.height;
  const int w = input.width;
  const std::size_t plane = input.plane_size();
  const std::vector<double> fused = softmax_normalize(layer.basis.logits);

  const int m = placement_margin(layer.means);
  const int he = h + 2 * m;
  const int we = w + 2 * m;
  const std::size_t plane_e = static_cast<std::size_t>(he) * we;

  // K zero-mean convolutions of the embedded input, accumulated into one
  // summed map per channel on the margin-padded canvas.
  std::vector<double> embedded(
      static_cast<std::size_t>(layer.in_channels) * plane_e, 0.0);
  std::vector<double> summed(embedded.size(), 0.0);
  for (int c = 0; c < layer.in_channels; ++c) {
    embed_plane(&input.values[c * plane], h, w, m, &embedded[c * plane_e], we);
  }
  for (int j = 0; j < k; ++j) {
    const DiscreteKernel kernel = base_kernel(layer, j);
    for (int c = 0; c < layer.in_channels; ++c) {
      conv_same_accum(&embedded[c * plane_e], he, we, kernel, 1.0,
                      &summed[c * plane_e]);
    }
  }

  // K weighted subpixel translations, read back into the frame.
  FeatureMap pre = make_feature_map(layer.in_channels, h, w);
  for (int kk = 0; kk < k; ++kk) {
    const BilinearSplit s = split_mu(layer.means[kk]);
    for (int c = 0; c < layer.in_channels; ++c) {
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          shift_from_ext_accum(&summed[c * plane_e], we, m, s.t0 + i,
                               s.t1 + j, fused[kk] * s.a(i, j),
                               &pre.values[c * plane], h, w);
        }
      }
    }
  }
  return apply_mix(pre, layer.mix, layer.bias);
}

// ============================================================================
// Backward
// ============================================================================

LayerGradients backward(const FeatureMap& input, const GaussConvLayer& layer,
                        const FeatureMap& upstream) {
  validate_layer(layer);
  validate_input(layer, input);
  if (upstream.channels != layer.out_channels ||
      upstream.height != input.height || upstream.width != input.width) {
    throw ShapeError("upstream map disagrees with layer output shape");
  }

  const int k = layer.k();
  const int ci = layer.in_channels;
  const int co = layer.out_channels;
  const int h = input.height;
  const int w = input.width;
  const std::size_t plane = input.plane_size();
  const std::vector<double> fused = softmax_normalize(layer.basis.logits);

  const int m = placement_margin(layer.means);
  const int he = h + 2 * m;
  const int we = w + 2 * m;
  const std::size_t plane_e = static_cast<std::size_t>(he) * we;

  // Recompute the forward intermediates on the padded canvas.
  std::vector<DiscreteKernel> bases(k);
  for (int j = 0; j < k; ++j) bases[j] = base_kernel(layer, j);
  std::vector<double> embedded(static_cast<std::size_t>(ci) * plane_e, 0.0);
  std::vector<double> summed(embedded.size(), 0.0);
  for (int c = 0; c < ci; ++c) {
    embed_plane(&input.values[c * plane], h, w, m, &embedded[c * plane_e], we);
  }
  for (int j = 0; j < k; ++j) {
    for (int c = 0; c < ci; ++c) {
      conv_same_accum(&embedded[c * plane_e], he, we, bases[j], 1.0,
                      &summed[c * plane_e]);
    }
  }
  FeatureMap pre = make_feature_map(ci, h, w);
  for (int kk = 0; kk < k; ++kk) {
    const BilinearSplit s = split_mu(layer.means[kk]);
    for (int c = 0; c < ci; ++c) {
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          shift_from_ext_accum(&summed[c * plane_e], we, m, s.t0 + i,
                               s.t1 + j, fused[kk] * s.a(i, j),
                               &pre.values[c * plane], h, w);
        }
      }
    }
  }

  LayerGradients grads;
  grads.d_bias.assign(co, 0.0);
  grads.d_mix.assign(static_cast<std::size_t>(co) * ci, 0.0);
  grads.d_logits.assign(k, 0.0);
  grads.d_sigma_params.assign(k, 0.0);
  grads.d_means.assign(k, Vec2{});

  // Mix head: d_bias, d_mix, and the cotangent entering the spatial part.
  FeatureMap d_pre = make_feature_map(ci, h, w);
  for (int o = 0; o < co; ++o) {
    const double* u = &upstream.values[o * plane];
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += u[p];
    grads.d_bias[o] = acc;
    for (int c = 0; c < ci; ++c) {
      const double* y = &pre.values[c * plane];
      double dot = 0.0;
      for (std::size_t p = 0; p < plane; ++p) dot += u[p] * y[p];
      grads.d_mix[static_cast<std::size_t>(o) * ci + c] = dot;
      const double m = layer.mix[static_cast<std::size_t>(o) * ci + c];
      if (m != 0.0) {
        double* d = &d_pre.values[c * plane];
        for (std::size_t p = 0; p < plane; ++p) d[p] += m * u[p];
      }
    }
  }

  // Shift stage: fused-weight and mean gradients from the four corner dots,
  // and the cotangent of the summed map via the adjoint scatters.
  std::vector<double> d_fused(k, 0.0);
  std::vector<double> d_summed(embedded.size(), 0.0);
  for (int kk = 0; kk < k; ++kk) {
    const BilinearSplit s = split_mu(layer.means[kk]);
    double corner_dot[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
    for (int c = 0; c < ci; ++c) {
      const double* dp = &d_pre.values[c * plane];
      const double* sm = &summed[c * plane_e];
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
          corner_dot[i][j] +=
              dot_with_ext(dp, h, w, sm, we, m, s.t0 + i, s.t1 + j);
          scatter_to_ext_accum(dp, h, w, m, s.t0 + i, s.t1 + j,
                               fused[kk] * s.a(i, j), &d_summed[c * plane_e],
                               we);
        }
      }
    }
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        d_fused[kk] += s.a(i, j) * corner_dot[i][j];
      }
    }
    if (layer.train_means) {
      const double g1 = 1.0 - s.f1;
      const double g0 = 1.0 - s.f0;
      grads.d_means[kk].d0 =
          fused[kk] * (-g1 * corner_dot[0][0] - s.f1 * corner_dot[0][1] +
                       g1 * corner_dot[1][0] + s.f1 * corner_dot[1][1]);
      grads.d_means[kk].d1 =
          fused[kk] * (-g0 * corner_dot[0][0] + g0 * corner_dot[0][1] -
                       s.f0 * corner_dot[1][0] + s.f0 * corner_dot[1][1]);
    }
  }

  // Softmax pullback: d_logit_m = f_m * (d_fused_m - sum_k f_k d_fused_k).
  double fused_dot = 0.0;
  for (int kk = 0; kk < k; ++kk) fused_dot += fused[kk] * d_fused[kk];
  for (int kk = 0; kk < k; ++kk) {
    grads.d_logits[kk] = fused[kk] * (d_fused[kk] - fused_dot);
  }

  // Convolution stage. Every base kernel sees the same cotangent, so one
  // correlation against the embedded input serves all sigma gradients.
  DiscreteKernel d_kernel;
  d_kernel.radius = layer.grid_radius;
  d_kernel.weights.assign(
      static_cast<std::size_t>(d_kernel.size()) * d_kernel.size(), 0.0);
  for (int c = 0; c < ci; ++c) {
    kernel_grad_accum(&d_summed[c * plane_e], &embedded[c * plane_e], he, we,
                      layer.grid_radius, 1.0, d_kernel);
  }
  for (int j = 0; j < k; ++j) {
    const double sigma = layer.sigma(j);
    const double inv_s3 = 1.0 / (sigma * sigma * sigma);
    double d_sigma = 0.0;
    const int r = layer.grid_radius;
    for (int u0 = -r; u0 <= r; ++u0) {
      for (int u1 = -r; u1 <= r; ++u1) {
        const double g = bases[j].at(u0 + r, u1 + r);
        const double norm2 = static_cast<double>(u0) * u0 +
                             static_cast<double>(u1) * u1;
        // d/d sigma of the discretized weight: g * (|u|^2 - 2 sigma^2) / sigma^3.
        const double dg = g * (norm2 - 2.0 * sigma * sigma) * inv_s3;
        d_sigma += d_kernel.at(u0 + r, u1 + r) * dg;
      }
    }
    grads.d_sigma_params[j] = d_sigma * layer.sigma_grad(j);
  }

  // Input gradient: correlation with the summed base kernel on the canvas,
  // cropped back to the frame.
  DiscreteKernel kernel_sum = bases[0];
  for (int j = 1; j < k; ++j) {
    for (std::size_t i = 0; i < kernel_sum.weights.size(); ++i) {
      kernel_sum.weights[i] += bases[j].weights[i];
    }
  }
  const DiscreteKernel kernel_sum_flipped = flipped(kernel_sum);
  std::vector<double> d_embedded_plane(plane_e);
  grads.d_input = make_feature_map(ci, h, w);
  for (int c = 0; c < ci; ++c) {
    std::fill(d_embedded_plane.begin(), d_embedded_plane.end(), 0.0);
    conv_same_accum(&d_summed[c * plane_e], he, we, kernel_sum_flipped, 1.0,
                    d_embedded_plane.data());
    crop_plane(d_embedded_plane.data(), we, m, &grads.d_input.values[c * plane],
               h, w);
  }
  return grads;
}

// ============================================================================
// Timed-path input gradients (reference routes)
// ============================================================================

FeatureMap backward_input_massive(const std::vector<KernelSpec>& specs,
                                  const std::vector<double>& mix,
                                  int in_channels, const FeatureMap& upstream) {
  const int co = upstream.channels;
  if (mix.size() != static_cast<std::size_t>(co) * in_channels) {
    throw ShapeError("mix shape disagrees with upstream channels");
  }
  const int h = upstream.height;
  const int w = upstream.width;
  const std::size_t plane = upstream.plane_size();

  FeatureMap d_pre = make_feature_map(in_channels, h, w);
  for (int o = 0; o < co; ++o) {
    for (int c = 0; c < in_channels; ++c) {
      const double m = mix[static_cast<std::size_t>(o) * in_channels + c];
      if (m == 0.0) continue;
      const double* u = &upstream.values[o * plane];
      double* d = &d_pre.values[c * plane];
      for (std::size_t p = 0; p < plane; ++p) d[p] += m * u[p];
    }
  }

  FeatureMap d_input = make_feature_map(in_channels, h, w);
  for (const KernelSpec& spec : specs) {
    KernelSpec extended = spec;
    extended.support_radius =
        spec.support_radius +
        static_cast<int>(std::ceil(
            std::max(std::abs(spec.mean.d0), std::abs(spec.mean.d1))));
    const DiscreteKernel kernel = flipped(make_gaussian_kernel(extended));
    for (int c = 0; c < in_channels; ++c) {
      conv_same_accum(&d_pre.values[c * plane], h, w, kernel, 1.0,
                      &d_input.values[c * plane]);
    }
  }
  return d_input;
}

FeatureMap backward_input_lra(const GaussConvLayer& layer,
                              const FeatureMap& upstream) {
  validate_layer(layer);
  const int k = layer.k();
  const int ci = layer.in_channels;
  const int h = upstream.height;
  const int w = upstream.width;
  const std::size_t plane = upstream.plane_size();
  const std::vector<double> fused = softmax_normalize(layer.basis.logits);
  const int radius_ext = layer.grid_radius + placement_margin(layer.means);

  FeatureMap d_pre = make_feature_map(ci, h, w);
  for (int o = 0; o < layer.out_channels; ++o) {
    for (int c = 0; c < ci; ++c) {
      const double m = layer.mix[static_cast<std::size_t>(o) * ci + c];
      if (m == 0.0) continue;
      const double* u = &upstream.values[o * plane];
      double* d = &d_pre.values[c * plane];
      for (std::size_t p = 0; p < plane; ++p) d[p] += m * u[p];
    }
  }

  FeatureMap d_input = make_feature_map(ci, h, w);
  for (int kk = 0; kk < k; ++kk) {
    for (int j = 0; j < k; ++j) {
      const DiscreteKernel placed = flipped(
          place_kernel(base_kernel(layer, j), layer.means[kk], radius_ext));
      for (int c = 0; c < ci; ++c) {
        conv_same_accum(&d_pre.values[c * plane], h, w, placed, fused[kk],
                        &d_input.values[c * plane]);
      }
    }
  }
  return d_input;
}

// ============================================================================
// Complexity and serialization
// ============================================================================

ComplexityCount complexity_count(const GaussConvLayer& layer, int in_channels,
                                 int height, int width, int n_vanilla) {
  if (in_channels < 1 || height < 1 || width < 1 || n_vanilla < 1) {
    throw ConfigError("complexity_count needs positive dimensions");
  }
  const std::uint64_t side = 2ULL * layer.grid_radius + 1ULL;
  const std::uint64_t taps = side * side;
  const std::uint64_t base = static_cast<std::uint64_t>(in_channels) *
                             layer.out_channels * height * width;
  const std::uint64_t k = static_cast<std::uint64_t>(layer.k());
  ComplexityCount count;
  count.vanilla = static_cast<std::uint64_t>(n_vanilla) * base * taps;
  count.lra = k * k * base * taps;
  count.fast = 4ULL * k * base;
  return count;
}

std::string layer_to_json(const GaussConvLayer& layer) {
  nlohmann::ordered_json j;
  j["grid_radius"] = layer.grid_radius;
  j["in_channels"] = layer.in_channels;
  j["out_channels"] = layer.out_channels;
  j["train_means"] = layer.train_means;
  nlohmann::ordered_json means = nlohmann::ordered_json::array();
  for (const Vec2& mu : layer.means) {
    means.push_back({double_to_hex(mu.d0), double_to_hex(mu.d1)});
  }
  j["means"] = means;
  auto hex_array = [](const std::vector<double>& values) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (double v : values) arr.push_back(double_to_hex(v));
    return arr;
  };
  j["sigma_params"] = hex_array(layer.sigma_params);
  j["mix"] = hex_array(layer.mix);
  j["bias"] = hex_array(layer.bias);
  j["basis"] = nlohmann::ordered_json::parse(basis_to_json(layer.basis));
  return j.dump(2);
}

GaussConvLayer layer_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("layer JSON parse failed: ") + e.what());
  }
  GaussConvLayer layer;
  try {
    layer.grid_radius = j.at("grid_radius").get<int>();
    layer.in_channels = j.at("in_channels").get<int>();
    layer.out_channels = j.at("out_channels").get<int>();
    layer.train_means = j.value("train_means", false);
    for (const auto& m : j.at("means")) {
      Vec2 mu;
      mu.d0 = double_from_hex(m.at(0).get<std::string>());
      mu.d1 = double_from_hex(m.at(1).get<std::string>());
      layer.means.push_back(mu);
    }
    for (const auto& v : j.at("sigma_params")) {
      layer.sigma_params.push_back(double_from_hex(v.get<std::string>()));
    }
    for (const auto& v : j.at("mix")) {
      layer.mix.push_back(double_from_hex(v.get<std::string>()));
    }
    for (const auto& v : j.at("bias")) {
      layer.bias.push_back(double_from_hex(v.get<std::string>()));
    }
    layer.basis = basis_from_json(j.at("basis").dump());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("layer JSON missing field: ") + e.what());
  }
  validate_layer(layer);
  return layer;
}

}  // namespace gausscount
