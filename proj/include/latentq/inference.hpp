#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "latentq/likelihood.hpp"

namespace latentq {

/// Random-walk Metropolis settings. A proposal_scale of 0 means 2.4/sqrt(d).
struct SamplerConfig {
  std::size_t n_samples = 500;
  std::size_t burn_in = 200;
  double proposal_scale = 0.0;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  ///< 0 = all hardware threads

  double scale_for(std::size_t dim) const;
  void validate() const;
};

/// Raised when a chain meets a non-finite log posterior, which only happens
/// when the parameters themselves are corrupt.
class SamplingError : public ModelError {
 public:
  using ModelError::ModelError;
};

struct LatentPosterior {
  Matrix samples;     ///< S x d, one retained draw per row
  Vector mean;        ///< empirical mean of the samples
  Matrix covariance;  ///< empirical covariance (divisor S-1; zero when S = 1)
  double acceptance_rate = 0.0;
};

/// Draws from p(x | row) by random-walk Metropolis with isotropic Gaussian
/// proposals, started at the prior mean. The first burn_in draws are
/// discarded and every later state is kept. `config.seed` seeds this chain.
LatentPosterior sample_latent_posterior(const ModelParams& params, const LatentPrior& prior,
                                        std::span<const Cell> row, const SamplerConfig& config);

struct ModeConfig {
  std::size_t max_iters = 1000;
  double tol = 1e-8;
};

struct ModeResult {
  Vector x;
  double log_posterior = 0.0;
  double grad_norm = 0.0;
  std::size_t iterations = 0;
  bool converged = false;  ///< false: best iterate returned after max_iters or a stalled line search
};

/// Maximizes row_log_posterior by gradient ascent with Armijo backtracking,
/// starting from the prior mean.
ModeResult posterior_mode(const ModelParams& params, const LatentPrior& prior, std::span<const Cell> row,
                          const ModeConfig& config = {});

/// One posterior per record. Record i's chain is seeded from
/// record_seed(config.seed, record id), so results do not depend on record
/// order or thread count.
std::vector<LatentPosterior> e_step(const ModelParams& params, const LatentPrior& prior, const Dataset& data,
                                    const SamplerConfig& config);

std::vector<ModeResult> posterior_modes(const ModelParams& params, const LatentPrior& prior, const Dataset& data,
                                        const ModeConfig& config = {}, std::size_t threads = 0);

/// n x d matrix of posterior means.
Matrix posterior_means(std::span<const LatentPosterior> posteriors);

/// record_id,x_1..x_d
void write_latents_csv(const std::filesystem::path& path, std::span<const std::string> record_ids, const Matrix& latents);

/// record_id,sample_index,x_1..x_d
void write_samples_csv(const std::filesystem::path& path, std::span<const std::string> record_ids,
                       std::span<const LatentPosterior> posteriors);

struct LatentTable {
  std::vector<std::string> record_ids;
  Matrix values;  ///< n x d, NaN where a cell was missing
};

LatentTable read_latents_csv(const std::filesystem::path& path);

}  // namespace latentq
