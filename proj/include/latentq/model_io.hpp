#pragma once

#include <filesystem>
#include <json.hpp>

#include "latentq/likelihood.hpp"

namespace latentq {

/// A fitted model as stored on disk: parameters, the latent prior and any
/// free-form metadata written alongside (sampler settings, fit summary).
struct StoredModel {
  ModelParams params;
  LatentPrior prior;
  nlohmann::json metadata = nlohmann::json::object();
};

/// JSON object with keys d, field_names, field_kinds, A (row-major, flat),
/// b, sigma, mu0, Sigma0 (row-major, flat), metadata. Numbers are written in
/// shortest round-trip form, so reloading reproduces every value exactly.
nlohmann::json model_to_json(const StoredModel& model);
StoredModel model_from_json(const nlohmann::json& j);

void save_model(const StoredModel& model, const std::filesystem::path& path);
StoredModel load_model(const std::filesystem::path& path);

}  // namespace latentq
