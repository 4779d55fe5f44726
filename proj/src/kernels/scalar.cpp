#include "kernels_internal.hpp"

#include <algorithm>
#include <cmath>

namespace latentq::kernels::detail {

namespace {

void linear_predictor(std::span<double> out, std::span<const double> offset,
                      std::span<const double* const> columns, std::span<const double> coef) {
  std::copy(offset.begin(), offset.end(), out.begin());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const double* col = columns[c];
    const double a = coef[c];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += a * col[i];
  }
}

double bernoulli_fields(std::span<const double> eta, std::span<const double> y,
                        std::span<const double> w, std::span<double> resid) {
  double total = 0.0;
  const bool want_resid = !resid.empty();
  for (std::size_t i = 0; i < eta.size(); ++i) {
    const double e = eta[i];
    const double ec = std::clamp(e, -kLogitClamp, kLogitClamp);
    total += w[i] * bernoulli_term(ec, y[i]);
    if (want_resid) {
      const bool inside = e >= -kLogitClamp && e <= kLogitClamp;
      resid[i] = inside ? w[i] * (y[i] - sigmoid(ec)) : 0.0;
    }
  }
  return total;
}

double gaussian_fields(std::span<const double> mean, std::span<const double> z,
                       std::span<const double> w, std::span<const double> inv_sd,
                       std::span<double> resid) {
  double total = 0.0;
  const bool want_resid = !resid.empty();
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double r = z[i] - mean[i];
    const double s = r * inv_sd[i];
    total += w[i] * s * s;
    if (want_resid) resid[i] = w[i] * s * inv_sd[i];
  }
  return total;
}

double block_eta(const SampleBlock& block, std::size_t i) {
  double eta = block.offset;
  for (std::size_t c = 0; c < block.columns.size(); ++c) eta += block.coef[c] * block.columns[c][i];
  return eta;
}

void bernoulli_block(const SampleBlock& block, double y, BlockSums& out) {
  for (std::size_t i = 0; i < block.len; ++i) {
    const double e = block_eta(block, i);
    const double ec = std::clamp(e, -kLogitClamp, kLogitClamp);
    out.value += bernoulli_term(ec, y);
    if (e < -kLogitClamp || e > kLogitClamp) continue;
    const double r = y - sigmoid(ec);
    out.resid += r;
    for (std::size_t c = 0; c < block.columns.size(); ++c) out.resid_dot[c] += r * block.columns[c][i];
  }
}

void gaussian_block(const SampleBlock& block, double z, BlockSums& out) {
  for (std::size_t i = 0; i < block.len; ++i) {
    const double r = z - block_eta(block, i);
    out.value += r * r;
    out.resid += r;
    for (std::size_t c = 0; c < block.columns.size(); ++c) out.resid_dot[c] += r * block.columns[c][i];
  }
}

}  // namespace

double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

double bernoulli_term(double eta, double y) {
  // y*eta - log(1 + exp(eta)), written to avoid overflow.
  const double softplus = std::max(eta, 0.0) + std::log1p(std::exp(-std::abs(eta)));
  return y * eta - softplus;
}

const KernelTable kScalarTable{
    "scalar", &linear_predictor, &bernoulli_fields, &gaussian_fields, &bernoulli_block, &gaussian_block,
};

}  // namespace latentq::kernels::detail
