#pragma once

// Inner-loop arithmetic for the likelihood terms. Every routine exists as a
// scalar reference implementation and, on x86-64, an AVX2+FMA variant chosen
// at runtime. The two are equivalence-tested in tests/test_kernels.cpp.

#include <cstddef>
#include <span>
#include <string_view>

namespace latentq::kernels {

/// Linear predictors are clamped to [-kLogitClamp, kLogitClamp] before the
/// Bernoulli terms are evaluated, so log-likelihoods stay finite.
inline constexpr double kLogitClamp = 35.0;

/// Widest latent dimension handled by the vectorized block kernels; wider
/// inputs fall back to the scalar path.
inline constexpr std::size_t kMaxSimdDim = 16;

/// A block of `len` samples stored column-wise (one pointer per latent
/// coordinate), together with the affine map `offset + coef . x` that turns
/// each sample into a linear predictor for one field.
struct SampleBlock {
  std::span<const double* const> columns;
  std::size_t len = 0;
  std::span<const double> coef;
  double offset = 0.0;
};

/// Accumulators filled by the block kernels. `value` receives the summed
/// Bernoulli log-likelihood (bernoulli_block) or the summed squared residual
/// (gaussian_block); `resid` the summed residual; `resid_dot[c]` the summed
/// residual times column c. All fields are added to, never overwritten.
struct BlockSums {
  double value = 0.0;
  double resid = 0.0;
  std::span<double> resid_dot;
};

struct KernelTable {
  std::string_view name;

  /// out[i] = offset[i] + sum_c coef[c] * columns[c][i]
  void (*linear_predictor)(std::span<double> out, std::span<const double> offset,
                           std::span<const double* const> columns, std::span<const double> coef);

  /// Returns sum_i w[i] * (y[i]*eta'[i] - softplus(eta'[i])) with eta' the
  /// clamped predictor. When `resid` is non-empty it receives
  /// w[i] * (y[i] - sigmoid(eta'[i])), or 0 where eta lies outside the clamp.
  double (*bernoulli_fields)(std::span<const double> eta, std::span<const double> y,
                             std::span<const double> w, std::span<double> resid);

  /// Returns sum_i w[i] * ((z[i]-mean[i]) * inv_sd[i])^2. When `resid` is
  /// non-empty it receives w[i] * (z[i]-mean[i]) * inv_sd[i]^2.
  double (*gaussian_fields)(std::span<const double> mean, std::span<const double> z,
                            std::span<const double> w, std::span<const double> inv_sd,
                            std::span<double> resid);

  /// One Bernoulli field with observed value y over a block of samples.
  /// Residual is y - sigmoid(eta'), zero outside the clamp.
  void (*bernoulli_block)(const SampleBlock& block, double y, BlockSums& out);

  /// One Gaussian field with observed value z over a block of samples.
  /// Residual is z - eta (no scaling by the noise level).
  void (*gaussian_block)(const SampleBlock& block, double z, BlockSums& out);
};

enum class Backend { Auto, Scalar, Avx2 };

const KernelTable& scalar_table();

/// Null when the AVX2 variant was not compiled in or the CPU lacks AVX2/FMA.
const KernelTable* avx2_table();

/// The table used by the library. Chosen on first use from the
/// LATENTQ_KERNELS environment variable ("scalar", "avx2", "auto"), falling
/// back to the widest supported variant.
const KernelTable& active();

/// Overrides the selection. Selecting an unavailable backend throws
/// std::runtime_error. Not thread-safe against concurrent kernel calls.
void select(Backend backend);

}  // namespace latentq::kernels
