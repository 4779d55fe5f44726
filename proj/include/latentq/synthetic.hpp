#pragma once

#include <cstdint>
#include <filesystem>

#include "latentq/dataset.hpp"
#include "latentq/likelihood.hpp"

namespace latentq {

/// Ground truth for the generative process. `truth` must have
/// column-orthonormal A; `missing_rate` is the per-cell MCAR masking rate.
struct GeneratorSpec {
  std::size_t n = 500;
  ModelParams truth;
  LatentPrior prior = LatentPrior::standard(2);
  double missing_rate = 0.0;
  std::uint64_t seed = 0;

  std::size_t n_binary() const { return truth.n_binary(); }
  std::size_t n_continuous() const { return truth.n_continuous(); }
  std::size_t dim() const { return truth.dim(); }
  void validate() const;
};

struct GeneratedData {
  Dataset data;      ///< after masking
  Dataset complete;  ///< the same draws before masking
  Matrix latents;    ///< n x d true latent coordinates
};

/// Per record: x ~ N(mu0, Sigma0); binary cells ~ Bernoulli(sigmoid(A_j x + b_j));
/// continuous cells ~ N(A_j x + b_j, sigma_j^2); each cell then masked
/// independently with probability missing_rate. A mask that would hide a
/// whole record is redrawn. Record i draws from its own seeded stream.
GeneratedData generate(const GeneratorSpec& spec);

/// QR of a seeded Gaussian matrix: rows x d with orthonormal columns.
Matrix random_orthonormal_basis(std::size_t rows, std::size_t dim, std::uint64_t seed);

/// Truth with m binary fields named b01.., k continuous fields named c01..,
/// random orthonormal A, b uniform in [-intercept_range, intercept_range],
/// sigma uniform in [0.5, 1.5].
ModelParams random_truth(std::size_t m, std::size_t k, std::size_t dim, std::uint64_t seed,
                         double intercept_range = 2.0);

/// N(0, scale^2 I) in `dim` dimensions.
LatentPrior isotropic_prior(std::size_t dim, double scale);

/// The recovery setup used throughout the test suite: 500 records, 19
/// binary fields, d = 2, 10% MCAR masking, latent scale 5.
GeneratorSpec desk_scale_spec(std::uint64_t seed);

/// Params (model JSON layout), prior, latents and generator settings.
void write_truth_json(const GeneratorSpec& spec, const GeneratedData& generated, const std::filesystem::path& path);

}  // namespace latentq
