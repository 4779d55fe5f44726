#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "latentq/inference.hpp"

namespace latentq {

enum class ImputationMethod {
  PosteriorAveraged,  ///< average the prediction over posterior samples
  PosteriorMean,      ///< evaluate the prediction at the posterior mean
};

std::string_view to_string(ImputationMethod method);

struct ImputationConfig {
  SamplerConfig sampler;
  ImputationMethod method = ImputationMethod::PosteriorAveraged;
};

struct ImputationResult {
  std::string record_id;
  std::string field;
  FieldKind kind = FieldKind::Binary;
  double estimate = 0.0;                ///< probability of 1 (binary) or expected value (continuous)
  std::optional<double> predictive_sd;  ///< continuous fields only; never below sigma_j
  ImputationMethod method = ImputationMethod::PosteriorAveraged;
};

/// Estimates for every missing cell of one record. `config.sampler.seed`
/// seeds the chain directly.
std::vector<ImputationResult> impute_record(const ModelParams& params, const LatentPrior& prior,
                                            std::span<const Cell> row, const std::string& record_id,
                                            const ImputationConfig& config);

/// impute_record over all records, each chain seeded from
/// record_seed(config.sampler.seed, record id). Output is grouped by record
/// in dataset order, fields in model order.
std::vector<ImputationResult> impute_dataset(const ModelParams& params, const LatentPrior& prior, const Dataset& data,
                                             const ImputationConfig& config);

/// record_id,field,kind,estimate,predictive_sd,method
void write_imputations_csv(std::span<const ImputationResult> results, const std::filesystem::path& path);

}  // namespace latentq
