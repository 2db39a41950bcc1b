#include "gausscount/lowrank.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace gausscount {

namespace {

// Second central moments of the grid under its absolute weights. Signed
// component grids (difference-of-Gaussian shapes) are matched through |w|,
// which picks up the spread of their lobes.
Covariance2 moment_match(const DiscreteKernel& grid) {
  const int n = grid.size();
  double total = 0.0;
  double c0 = 0.0, c1 = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double w = std::abs(grid.at(i, j));
      total += w;
      c0 += w * i;
      c1 += w * j;
    }
  }

  constexpr double kFloorVar = kMinSigma * kMinSigma;
  Covariance2 cov;
  if (total <= 0.0) {
    cov.xx = kFloorVar;
    cov.yy = kFloorVar;
    cov.xy = 0.0;
    return cov;
  }
  c0 /= total;
  c1 /= total;

  double m00 = 0.0, m11 = 0.0, m01 = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double w = std::abs(grid.at(i, j));
      const double d0 = i - c0;
      const double d1 = j - c1;
      m00 += w * d0 * d0;
      m11 += w * d1 * d1;
      m01 += w * d0 * d1;
    }
  }
  cov.xx = std::max(m00 / total, kFloorVar);
  cov.yy = std::max(m11 / total, kFloorVar);
  cov.xy = m01 / total;
  // Shrink the cross term if the determinant degenerates.
  const double limit = std::sqrt(cov.xx * cov.yy);
  if (std::abs(cov.xy) >= limit) {
    cov.xy = std::copysign(limit * (1.0 - 1e-9), cov.xy);
  }
  return cov;
}

}  // namespace

LowRankBasis pca_select(const KernelBank& bank, int k_max) {
  const int n = static_cast<int>(bank.kernels.size());
  if (n < 1) {
    throw ConfigError("pca_select needs a non-empty bank");
  }
  if (k_max < 1) {
    throw ConfigError("pca_select needs k_max >= 1");
  }
  const int radius = bank.kernels.front().radius;
  const int g = bank.kernels.front().size() * bank.kernels.front().size();
  for (const DiscreteKernel& k : bank.kernels) {
    if (k.radius != radius || static_cast<int>(k.weights.size()) != g) {
      throw ShapeError("bank kernels must share one grid shape");
    }
  }

  Eigen::MatrixXd data(n, g);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < g; ++c) {
      data(r, c) = bank.kernels[r].weights[c];
    }
  }
  const Eigen::VectorXd mean = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered) / std::max(1, n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) {
    throw Error("eigendecomposition failed");
  }
  const Eigen::VectorXd lambda = solver.eigenvalues();  // ascending
  const double lambda_max = std::max(0.0, lambda(g - 1));
  const double tol = kEigenTolScale * lambda_max;

  LowRankBasis basis;
  basis.radius = radius;

  const double mean_energy = mean.squaredNorm();
  if (mean_energy > tol && mean_energy > 0.0) {
    DiscreteKernel grid;
    grid.radius = radius;
    grid.weights.resize(g);
    const double inv_norm = 1.0 / std::sqrt(mean_energy);
    for (int c = 0; c < g; ++c) {
      grid.weights[c] = mean(c) * inv_norm;
    }
    basis.components.push_back(std::move(grid));
    basis.eigenvalues.push_back(mean_energy);
    basis.mean_component = true;
  }

  for (int idx = g - 1;
       idx >= 0 && static_cast<int>(basis.components.size()) < k_max; --idx) {
    const double value = lambda(idx);
    if (!(value > tol) || !(value > 0.0)) break;
    Eigen::VectorXd vec = solver.eigenvectors().col(idx);
    // Sign convention: largest-magnitude entry positive, first index wins ties.
    int arg = 0;
    double best = -1.0;
    for (int c = 0; c < g; ++c) {
      if (std::abs(vec(c)) > best) {
        best = std::abs(vec(c));
        arg = c;
      }
    }
    if (vec(arg) < 0.0) vec = -vec;

    DiscreteKernel grid;
    grid.radius = radius;
    grid.weights.assign(vec.data(), vec.data() + g);
    basis.components.push_back(std::move(grid));
    basis.eigenvalues.push_back(value);
  }

  basis.covariances.reserve(basis.components.size());
  for (const DiscreteKernel& comp : basis.components) {
    basis.covariances.push_back(moment_match(comp));
  }
  return basis;
}

std::vector<double> init_weights(const LowRankBasis& basis, int grid_radius) {
  if (basis.k() < 1) {
    throw ConfigError("init_weights needs at least one component");
  }
  if (grid_radius < 1) {
    throw ConfigError("init_weights needs grid_radius >= 1");
  }
  KernelSpec unit;
  unit.support_radius = grid_radius;
  const DiscreteKernel reference = make_gaussian_kernel(unit);

  std::vector<double> logits;
  logits.reserve(basis.covariances.size());
  for (const Covariance2& cov : basis.covariances) {
    KernelSpec spec;
    spec.cov = cov;
    spec.support_radius = grid_radius;
    logits.push_back(kernel_inner_product(make_gaussian_kernel(spec), reference));
  }
  return logits;
}

std::vector<double> softmax_normalize(const std::vector<double>& logits) {
  if (logits.empty()) {
    throw ConfigError("softmax of an empty vector");
  }
  double max_logit = logits.front();
  for (double v : logits) {
    if (!std::isfinite(v)) {
      throw ConfigError("softmax input must be finite");
    }
    max_logit = std::max(max_logit, v);
  }
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max_logit);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

std::string basis_to_json(const LowRankBasis& basis) {
  nlohmann::ordered_json j;
  j["radius"] = basis.radius;
  j["mean_component"] = basis.mean_component;
  auto hex_array = [](const std::vector<double>& values) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (double v : values) arr.push_back(double_to_hex(v));
    return arr;
  };
  j["eigenvalues"] = hex_array(basis.eigenvalues);
  nlohmann::ordered_json covs = nlohmann::ordered_json::array();
  for (const Covariance2& cov : basis.covariances) {
    nlohmann::ordered_json c;
    c["xx"] = double_to_hex(cov.xx);
    c["yy"] = double_to_hex(cov.yy);
    c["xy"] = double_to_hex(cov.xy);
    covs.push_back(c);
  }
  j["covariances"] = covs;
  j["logits"] = hex_array(basis.logits);
  return j.dump(2);
}

LowRankBasis basis_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("basis JSON parse failed: ") + e.what());
  }
  LowRankBasis basis;
  try {
    basis.radius = j.at("radius").get<int>();
    basis.mean_component = j.value("mean_component", false);
    for (const auto& v : j.at("eigenvalues")) {
      basis.eigenvalues.push_back(double_from_hex(v.get<std::string>()));
    }
    for (const auto& c : j.at("covariances")) {
      Covariance2 cov;
      cov.xx = double_from_hex(c.at("xx").get<std::string>());
      cov.yy = double_from_hex(c.at("yy").get<std::string>());
      cov.xy = double_from_hex(c.at("xy").get<std::string>());
      basis.covariances.push_back(cov);
    }
    for (const auto& v : j.at("logits")) {
      basis.logits.push_back(double_from_hex(v.get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("basis JSON missing field: ") + e.what());
  }
  return basis;
}

}  // namespace gausscount
