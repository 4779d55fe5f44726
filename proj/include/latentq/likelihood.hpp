#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentq/dataset.hpp"

namespace latentq {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised for inconsistent or non-finite model parameters.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Observation model. Row j of `basis`/`intercept` belongs to field j; binary
/// fields come first, continuous fields after, matching Dataset field order.
/// Binary rows are in logit units, continuous rows in field units.
struct ModelParams {
  std::vector<std::string> field_names;
  std::vector<FieldKind> field_kinds;
  Matrix basis;      ///< (m+k) x d
  Vector intercept;  ///< m+k
  Vector sigma;      ///< k noise standard deviations, one per continuous field

  std::size_t n_fields() const { return field_kinds.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(basis.cols()); }
  std::size_t n_binary() const;
  std::size_t n_continuous() const { return n_fields() - n_binary(); }

  /// Throws ModelError if shapes disagree, an entry is non-finite, a sigma is
  /// not positive, or the binary-first ordering is broken.
  void validate() const;

  /// Throws ModelError unless the dataset has the same field names and kinds
  /// in the same order.
  void check_compatible(const Dataset& data) const;
};

/// Multivariate normal prior on the latent coordinates.
class LatentPrior {
 public:
  /// mean 0, covariance I
  static LatentPrior standard(std::size_t dim);

  /// Throws ModelError unless cov is symmetric within 1e-12 and has a
  /// Cholesky factorization.
  LatentPrior(Vector mean, Matrix cov);

  std::size_t dim() const { return static_cast<std::size_t>(mean_.size()); }
  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return cov_; }
  /// Lower-triangular L with L L^T = covariance.
  const Matrix& cholesky_factor() const { return chol_l_; }

  double log_density(const Vector& x) const;
  /// -cov^{-1} (x - mean)
  Vector gradient(const Vector& x) const;

 private:
  Vector mean_;
  Matrix cov_;
  Matrix chol_l_;
  Eigen::LLT<Matrix> llt_;
  double log_norm_ = 0.0;
};

/// sigmoid(A_j x + b_j) with the predictor clamped to +-35. Throws
/// std::out_of_range unless j indexes a binary field.
double bernoulli_prob(const ModelParams& params, const Vector& x, std::size_t field);

/// Log-likelihood contribution of one cell, in nats. Missing cells give 0.
double cell_loglik(const ModelParams& params, const Vector& x, const Cell& cell, std::size_t field);

double row_loglik(const ModelParams& params, const Vector& x, std::span<const Cell> row);

double latent_log_prior(const LatentPrior& prior, const Vector& x);

/// Unnormalized log posterior of x given one record.
double row_log_posterior(const ModelParams& params, const LatentPrior& prior, const Vector& x,
                         std::span<const Cell> row);

struct ParamGradient {
  Matrix basis;      ///< d/dA, same shape as A
  Vector intercept;  ///< d/db
  Vector sigma;      ///< d/dsigma, one per continuous field
};

/// Gradient of row_loglik with respect to (A, b, sigma).
ParamGradient grad_params_row(const ModelParams& params, const Vector& x, std::span<const Cell> row);

/// Gradient of row_log_posterior with respect to x.
Vector grad_latent_row(const ModelParams& params, const LatentPrior& prior, const Vector& x,
                       std::span<const Cell> row);

/// One record prepared for repeated evaluation at many latent points, using
/// the vectorized kernels. Not thread-safe (owns scratch buffers); make one
/// per worker.
class RowTarget {
 public:
  RowTarget(const ModelParams& params, const LatentPrior& prior, std::span<const Cell> row);

  double log_likelihood(const Vector& x);
  double log_posterior(const Vector& x) { return log_likelihood(x) + prior_->log_density(x); }
  /// Gradient of log_posterior.
  Vector gradient(const Vector& x);

  bool all_missing() const { return observed_ == 0; }

 private:
  void predict(const Vector& x);

  const ModelParams* params_;
  const LatentPrior* prior_;
  std::size_t n_binary_;
  std::size_t observed_ = 0;
  std::vector<const double*> columns_;
  std::vector<double> target_;   // observed value, 0 where missing
  std::vector<double> weight_;   // 1 observed, 0 missing
  std::vector<double> inv_sd_;   // continuous fields only
  std::vector<double> eta_;
  std::vector<double> resid_;
  double gaussian_const_ = 0.0;
};

}  // namespace latentq
