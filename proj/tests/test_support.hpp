#pragma once

#include <Eigen/LU>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "latentq/dataset.hpp"
#include "latentq/likelihood.hpp"

namespace testing {

using latentq::Cell;
using latentq::FieldKind;
using latentq::Matrix;
using latentq::ModelParams;
using latentq::Vector;

inline ModelParams random_params(std::mt19937_64& rng, std::size_t m, std::size_t k, std::size_t d,
                                 double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> sd(0.4, 2.0);
  ModelParams p;
  for (std::size_t j = 0; j < m; ++j) {
    p.field_names.push_back("bin" + std::to_string(j));
    p.field_kinds.push_back(FieldKind::Binary);
  }
  for (std::size_t j = 0; j < k; ++j) {
    p.field_names.push_back("con" + std::to_string(j));
    p.field_kinds.push_back(FieldKind::Continuous);
  }
  const auto rows = static_cast<Eigen::Index>(m + k);
  p.basis.resize(rows, static_cast<Eigen::Index>(d));
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < p.basis.cols(); ++c) p.basis(r, c) = scale * normal(rng);
  p.intercept.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) p.intercept[r] = normal(rng);
  p.sigma.resize(static_cast<Eigen::Index>(k));
  for (Eigen::Index r = 0; r < p.sigma.size(); ++r) p.sigma[r] = sd(rng);
  return p;
}

inline std::vector<Cell> random_row(std::mt19937_64& rng, const ModelParams& p, double missing_rate) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.5);
  std::vector<Cell> row;
  for (std::size_t j = 0; j < p.n_fields(); ++j) {
    if (u(rng) < missing_rate) row.push_back(Cell::missing());
    else if (p.field_kinds[j] == FieldKind::Binary) row.push_back(Cell::binary(u(rng) < 0.5 ? 1 : 0));
    else row.push_back(Cell::real(normal(rng)));
  }
  return row;
}

inline Vector random_vector(std::mt19937_64& rng, std::size_t d, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  return v;
}

// Largest principal angle between the column spaces, in degrees.
inline double principal_angle_deg(const Matrix& a, const Matrix& b) {
  auto basis_of = [](const Matrix& m) -> Matrix {
    Eigen::HouseholderQR<Matrix> qr(m);
    return qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
  };
  Eigen::JacobiSVD<Matrix> svd(basis_of(a).transpose() * basis_of(b));
  const double smallest = std::min(1.0, svd.singularValues().minCoeff());
  return std::acos(smallest) * 180.0 / M_PI;
}

// Relative error with a small floor so entries that are zero analytically
// are judged on absolute error.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("latentq_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Standard error of the mean of a correlated series by non-overlapping batch
// means.
inline double batch_means_se(const std::vector<double>& series, std::size_t batches = 40) {
  const std::size_t len = series.size() / batches;
  std::vector<double> means(batches, 0.0);
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < len; ++i) means[b] += series[b * len + i];
    means[b] /= static_cast<double>(len);
  }
  double grand = 0.0;
  for (double m : means) grand += m;
  grand /= static_cast<double>(batches);
  double ss = 0.0;
  for (double m : means) ss += (m - grand) * (m - grand);
  return std::sqrt(ss / static_cast<double>(batches - 1) / static_cast<double>(batches));
}

// One continuous field z = a x + b + N(0, sigma^2) with prior N(m0, s0^2):
// the posterior of x is Gaussian with these moments.
struct ConjugateCase {
  double a, b, sigma, m0, s0, z;

  double post_var() const { return 1.0 / (1.0 / (s0 * s0) + a * a / (sigma * sigma)); }
  double post_mean() const { return post_var() * (m0 / (s0 * s0) + a * (z - b) / (sigma * sigma)); }

  ModelParams params() const {
    ModelParams p;
    p.field_names = {"z"};
    p.field_kinds = {FieldKind::Continuous};
    p.basis = Matrix::Constant(1, 1, a);
    p.intercept = Vector::Constant(1, b);
    p.sigma = Vector::Constant(1, sigma);
    return p;
  }
  latentq::LatentPrior prior() const {
    return latentq::LatentPrior(Vector::Constant(1, m0), Matrix::Constant(1, 1, s0 * s0));
  }
};

}  // namespace testing
