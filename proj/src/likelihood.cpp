#include "latentq/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "latentq/kernels.hpp"

namespace latentq {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2*pi)

double clamp_logit(double eta) { return std::clamp(eta, -kernels::kLogitClamp, kernels::kLogitClamp); }

double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

// log sigmoid(eta) and log(1 - sigmoid(eta)) without cancellation.
double log_sigmoid(double eta) { return -(std::max(-eta, 0.0) + std::log1p(std::exp(-std::abs(eta)))); }

double predictor(const ModelParams& params, const Vector& x, std::size_t field) {
  return params.basis.row(static_cast<Eigen::Index>(field)).dot(x) + params.intercept[static_cast<Eigen::Index>(field)];
}

void check_row(const ModelParams& params, const Vector& x, std::span<const Cell> row) {
  if (row.size() != params.n_fields()) throw std::out_of_range("row length does not match model fields");
  if (static_cast<std::size_t>(x.size()) != params.dim()) throw std::out_of_range("latent dimension mismatch");
}

}  // namespace

std::size_t ModelParams::n_binary() const {
  return static_cast<std::size_t>(std::count(field_kinds.begin(), field_kinds.end(), FieldKind::Binary));
}

void ModelParams::validate() const {
  const auto p = static_cast<Eigen::Index>(field_kinds.size());
  if (field_names.size() != field_kinds.size()) throw ModelError("field_names and field_kinds differ in length");
  if (p == 0) throw ModelError("model has no fields");
  if (basis.rows() != p) throw ModelError("basis must have one row per field");
  if (basis.cols() < 1) throw ModelError("latent dimension must be at least 1");
  if (intercept.size() != p) throw ModelError("intercept must have one entry per field");
  if (sigma.size() != static_cast<Eigen::Index>(n_continuous())) {
    throw ModelError("sigma must have one entry per continuous field");
  }
  bool seen_continuous = false;
  for (FieldKind k : field_kinds) {
    if (k == FieldKind::Continuous) seen_continuous = true;
    else if (seen_continuous) throw ModelError("binary fields must precede continuous fields");
  }
  if (!basis.allFinite() || !intercept.allFinite() || !sigma.allFinite()) {
    throw ModelError("model parameters must be finite");
  }
  if ((sigma.array() <= 0.0).any()) throw ModelError("sigma must be strictly positive");
}

void ModelParams::check_compatible(const Dataset& data) const {
  if (data.n_fields() != n_fields()) {
    throw ModelError("dataset has " + std::to_string(data.n_fields()) + " fields, model has " +
                     std::to_string(n_fields()));
  }
  for (std::size_t j = 0; j < n_fields(); ++j) {
    const FieldSchema& f = data.fields()[j];
    if (f.name != field_names[j] || f.kind != field_kinds[j]) {
      throw ModelError("dataset field '" + f.name + "' (" + std::string(to_string(f.kind)) +
                       ") does not match model field '" + field_names[j] + "' (" +
                       std::string(to_string(field_kinds[j])) + ")");
    }
  }
}

LatentPrior LatentPrior::standard(std::size_t dim) {
  const auto d = static_cast<Eigen::Index>(dim);
  return LatentPrior(Vector::Zero(d), Matrix::Identity(d, d));
}

LatentPrior::LatentPrior(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
  const auto d = mean_.size();
  if (d < 1) throw ModelError("prior dimension must be at least 1");
  if (cov_.rows() != d || cov_.cols() != d) throw ModelError("prior covariance shape does not match mean");
  if (!mean_.allFinite() || !cov_.allFinite()) throw ModelError("prior must be finite");
  if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw ModelError("prior covariance is not symmetric");
  llt_.compute(cov_);
  if (llt_.info() != Eigen::Success) throw ModelError("prior covariance is not positive definite");
  chol_l_ = llt_.matrixL();
  if ((chol_l_.diagonal().array() <= 0.0).any()) throw ModelError("prior covariance is not positive definite");
  log_norm_ = -static_cast<double>(d) * kHalfLog2Pi - chol_l_.diagonal().array().log().sum();
}

double LatentPrior::log_density(const Vector& x) const {
  const Vector u = llt_.matrixL().solve(x - mean_);
  return log_norm_ - 0.5 * u.squaredNorm();
}

Vector LatentPrior::gradient(const Vector& x) const { return -llt_.solve(x - mean_); }

double bernoulli_prob(const ModelParams& params, const Vector& x, std::size_t field) {
  if (field >= params.n_fields() || params.field_kinds[field] != FieldKind::Binary) {
    throw std::out_of_range("field " + std::to_string(field) + " is not a binary field");
  }
  return sigmoid(clamp_logit(predictor(params, x, field)));
}

double cell_loglik(const ModelParams& params, const Vector& x, const Cell& cell, std::size_t field) {
  if (field >= params.n_fields()) throw std::out_of_range("field index out of range");
  if (cell.is_missing()) return 0.0;
  const double eta = predictor(params, x, field);
  if (params.field_kinds[field] == FieldKind::Binary) {
    const double e = clamp_logit(eta);
    return cell.value() != 0.0 ? log_sigmoid(e) : log_sigmoid(-e);
  }
  const double sd = params.sigma[static_cast<Eigen::Index>(field - params.n_binary())];
  const double r = (cell.value() - eta) / sd;
  return -kHalfLog2Pi - std::log(sd) - 0.5 * r * r;
}

double row_loglik(const ModelParams& params, const Vector& x, std::span<const Cell> row) {
  check_row(params, x, row);
  double total = 0.0;
  for (std::size_t j = 0; j < row.size(); ++j) total += cell_loglik(params, x, row[j], j);
  return total;
}

double latent_log_prior(const LatentPrior& prior, const Vector& x) {
  if (static_cast<std::size_t>(x.size()) != prior.dim()) throw std::out_of_range("latent dimension mismatch");
  return prior.log_density(x);
}

double row_log_posterior(const ModelParams& params, const LatentPrior& prior, const Vector& x,
                         std::span<const Cell> row) {
  return row_loglik(params, x, row) + latent_log_prior(prior, x);
}

ParamGradient grad_params_row(const ModelParams& params, const Vector& x, std::span<const Cell> row) {
  check_row(params, x, row);
  const auto p = static_cast<Eigen::Index>(params.n_fields());
  const std::size_t m = params.n_binary();
  ParamGradient g{Matrix::Zero(p, x.size()), Vector::Zero(p), Vector::Zero(static_cast<Eigen::Index>(params.n_continuous()))};
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (row[j].is_missing()) continue;
    const auto jj = static_cast<Eigen::Index>(j);
    const double eta = predictor(params, x, j);
    double dpred = 0.0;
    if (params.field_kinds[j] == FieldKind::Binary) {
      if (eta >= -kernels::kLogitClamp && eta <= kernels::kLogitClamp) dpred = row[j].value() - sigmoid(eta);
    } else {
      const auto k = static_cast<Eigen::Index>(j - m);
      const double sd = params.sigma[k];
      const double r = row[j].value() - eta;
      dpred = r / (sd * sd);
      g.sigma[k] = -1.0 / sd + r * r / (sd * sd * sd);
    }
    g.intercept[jj] = dpred;
    g.basis.row(jj) = dpred * x.transpose();
  }
  return g;
}

Vector grad_latent_row(const ModelParams& params, const LatentPrior& prior, const Vector& x,
                       std::span<const Cell> row) {
  check_row(params, x, row);
  Vector g = prior.gradient(x);
  const std::size_t m = params.n_binary();
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (row[j].is_missing()) continue;
    const double eta = predictor(params, x, j);
    double dpred = 0.0;
    if (params.field_kinds[j] == FieldKind::Binary) {
      if (eta >= -kernels::kLogitClamp && eta <= kernels::kLogitClamp) dpred = row[j].value() - sigmoid(eta);
    } else {
      const double sd = params.sigma[static_cast<Eigen::Index>(j - m)];
      dpred = (row[j].value() - eta) / (sd * sd);
    }
    g += dpred * params.basis.row(static_cast<Eigen::Index>(j)).transpose();
  }
  return g;
}

RowTarget::RowTarget(const ModelParams& params, const LatentPrior& prior, std::span<const Cell> row)
    : params_(&params), prior_(&prior), n_binary_(params.n_binary()) {
  const std::size_t p = params.n_fields();
  if (row.size() != p) throw std::out_of_range("row length does not match model fields");
  if (prior.dim() != params.dim()) throw std::out_of_range("prior dimension does not match model");
  target_.assign(p, 0.0);
  weight_.assign(p, 0.0);
  inv_sd_.assign(p - n_binary_, 1.0);
  eta_.assign(p, 0.0);
  resid_.assign(p, 0.0);
  for (std::size_t j = 0; j < p; ++j) {
    if (row[j].is_missing()) continue;
    target_[j] = row[j].value();
    weight_[j] = 1.0;
    ++observed_;
  }
  for (std::size_t k = 0; k < inv_sd_.size(); ++k) {
    const double sd = params.sigma[static_cast<Eigen::Index>(k)];
    inv_sd_[k] = 1.0 / sd;
    gaussian_const_ += weight_[n_binary_ + k] * (-kHalfLog2Pi - std::log(sd));
  }
  for (Eigen::Index c = 0; c < params.basis.cols(); ++c) columns_.push_back(params.basis.col(c).data());
}

void RowTarget::predict(const Vector& x) {
  kernels::active().linear_predictor(eta_, std::span<const double>(params_->intercept.data(), eta_.size()), columns_,
                                     std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
}

double RowTarget::log_likelihood(const Vector& x) {
  if (observed_ == 0) return 0.0;
  predict(x);
  const auto& k = kernels::active();
  const std::size_t m = n_binary_;
  const std::span<const double> eta(eta_), y(target_), w(weight_);
  double total = k.bernoulli_fields(eta.first(m), y.first(m), w.first(m), {});
  if (m < eta_.size()) {
    total += gaussian_const_ - 0.5 * k.gaussian_fields(eta.subspan(m), y.subspan(m), w.subspan(m), inv_sd_, {});
  }
  return total;
}

Vector RowTarget::gradient(const Vector& x) {
  Vector g = prior_->gradient(x);
  if (observed_ == 0) return g;
  predict(x);
  const auto& k = kernels::active();
  const std::size_t m = n_binary_;
  const std::span<const double> eta(eta_), y(target_), w(weight_);
  const std::span<double> r(resid_);
  k.bernoulli_fields(eta.first(m), y.first(m), w.first(m), r.first(m));
  if (m < eta_.size()) k.gaussian_fields(eta.subspan(m), y.subspan(m), w.subspan(m), inv_sd_, r.subspan(m));
  g.noalias() += params_->basis.transpose() * Eigen::Map<const Vector>(resid_.data(), static_cast<Eigen::Index>(resid_.size()));
  return g;
}

}  // namespace latentq
