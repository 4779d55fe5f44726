#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentq/inference.hpp"
#include "latentq/likelihood.hpp"

namespace latentq {

/// ||A^T A - I||_F^2
double orthonormality_penalty(const Matrix& basis);

/// Thin Q factor of a Householder QR: same column space, exactly orthonormal
/// columns up to rounding. Requires cols <= rows.
Matrix orthonormalize_columns(const Matrix& m);

struct MStepConfig {
  double penalty_weight = 0.0;
  std::size_t max_iters = 50;
  double tol = 1e-6;      ///< stop when max |gradient| <= tol * max(1, records)
  std::size_t memory = 8; ///< L-BFGS history length
  std::size_t threads = 0;
};

struct ObjectiveEstimate {
  double value = 0.0;      ///< Monte-Carlo expected complete-data log posterior minus penalty
  double std_error = 0.0;  ///< batch-means Monte-Carlo standard error of `value`
  double penalty = 0.0;    ///< ||A^T A - I||_F^2
};

/// The M-step objective for a fixed set of posterior samples:
///   Q(A, b, sigma) = sum_n mean_s row_loglik(row_n | x_ns)
/// Records may be empty, in which case Q is identically 0.
class MStepProblem {
 public:
  MStepProblem(const Dataset& data, std::span<const LatentPosterior> posteriors);
  MStepProblem(std::vector<FieldKind> kinds, std::vector<std::vector<Cell>> rows,
               std::span<const LatentPosterior> posteriors);

  std::size_t n_records() const { return samples_.size(); }

  /// Q at `params` (no penalty).
  double expected_loglik(const ModelParams& params, std::size_t threads = 0) const;

  /// Q - penalty_weight * penalty, with its gradient packed as
  /// [A_0, b_0, A_1, b_1, ..., log sigma_0, ...] (per-field blocks of d+1,
  /// then one entry per continuous field, sigma in log space).
  double value_and_gradient(const ModelParams& params, double penalty_weight, Vector* gradient,
                            std::size_t threads = 0) const;

  /// Adds the latent prior term and a Monte-Carlo standard error.
  ObjectiveEstimate estimate(const ModelParams& params, const LatentPrior& prior, double penalty_weight) const;

 private:
  void init(std::span<const LatentPosterior> posteriors);

  struct Observation {
    std::size_t record;
    double value;
  };
  std::vector<FieldKind> kinds_;
  std::vector<std::vector<Observation>> by_field_;
  std::vector<const Matrix*> samples_;
  std::vector<std::vector<const double*>> columns_;
};

struct MStepResult {
  ModelParams params;
  double objective_before = 0.0;
  double objective_after = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  bool line_search_failed = false;
};

/// Maximizes Q - penalty_weight * penalty over (A, b, log sigma) with
/// Armijo-backtracking ascent (factor 0.5, slope 1e-4) along L-BFGS
/// directions. The returned objective is never below the entering one.
MStepResult m_step(const MStepProblem& problem, const ModelParams& current, const MStepConfig& config);

MStepResult m_step(const Dataset& data, std::span<const LatentPosterior> posteriors, const ModelParams& current,
                   const MStepConfig& config);

/// Starting point: b from empirical logits (binary, clamped to +-4) or means
/// (continuous); sigma from empirical standard deviations (floor 1e-3); A
/// from a seeded Gaussian matrix scaled by 0.1, then column-orthonormalized.
ModelParams initialize_params(const Dataset& data, std::size_t dim, std::uint64_t seed);

struct FitConfig {
  std::size_t dims = 2;
  std::size_t max_em_iters = 200;
  double em_tol = 1e-4;         ///< nats per record
  double gamma = 1e-2;          ///< budget for ||A^T A - I||_F^2
  double penalty_weight = 0.0;  ///< 0 = 10 * records
  std::size_t mstep_max_iters = 20;
  double mstep_tol = 1e-6;
  SamplerConfig sampler;        ///< sampler.seed is replaced by `seed`
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::optional<LatentPrior> prior;  ///< default N(0, I)

  void validate() const;
};

struct IterationRecord {
  std::size_t iteration = 0;
  double objective = 0.0;
  double mc_std_error = 0.0;
  double penalty = 0.0;
  double acceptance_rate = 0.0;  ///< mean over records
  std::size_t mstep_iterations = 0;
  double mstep_gain = 0.0;  ///< objective increase of the M-step on its own samples
  bool mstep_warning = false;
  double wall_time_s = 0.0;
};

struct FitReport {
  std::vector<IterationRecord> iterations;
  bool converged = false;
  std::size_t iterations_run = 0;
  double penalty_weight = 0.0;
  double final_penalty = 0.0;
  bool penalty_within_gamma = false;
  std::vector<std::string> constant_fields;
  std::vector<std::string> warnings;
};

struct FitResult {
  ModelParams params;
  LatentPrior prior;
  Matrix latent_means;  ///< from an E-step at the final parameters
  std::vector<LatentPosterior> posteriors;
  FitReport report;
};

/// Thrown when the objective turns non-finite. `state` holds a JSON dump of
/// the parameters entering the failed iteration.
class DivergenceError : public ModelError {
 public:
  DivergenceError(const std::string& what, std::string state) : ModelError(what), state_(std::move(state)) {}
  const std::string& state() const { return state_; }

 private:
  std::string state_;
};

/// Monte-Carlo EM. Alternates e_step and m_step until the per-record change
/// in the objective estimate stays below em_tol for 3 consecutive iterations, or
/// max_em_iters is reached. A change smaller than the Monte-Carlo standard
/// error of the objective estimate also counts as below em_tol.
FitResult fit(const Dataset& data, const FitConfig& config);

/// One JSON object per line, one line per EM iteration.
void write_report_jsonl(const FitReport& report, const std::filesystem::path& path);

}  // namespace latentq
