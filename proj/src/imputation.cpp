#include "latentq/imputation.hpp"

#include <cmath>
#include <fstream>

#include "latentq/csv.hpp"
#include "latentq/parallel.hpp"
#include "latentq/seeding.hpp"

namespace latentq {

std::string_view to_string(ImputationMethod method) {
  return method == ImputationMethod::PosteriorAveraged ? "posterior_averaged" : "posterior_mean";
}

std::vector<ImputationResult> impute_record(const ModelParams& params, const LatentPrior& prior,
                                            std::span<const Cell> row, const std::string& record_id,
                                            const ImputationConfig& config) {
  if (row.size() != params.n_fields()) throw std::out_of_range("row length does not match model fields");
  std::vector<ImputationResult> out;
  bool any_missing = false;
  for (const Cell& c : row) any_missing = any_missing || c.is_missing();
  if (!any_missing) return out;

  const LatentPosterior post = sample_latent_posterior(params, prior, row, config.sampler);
  const std::size_t m = params.n_binary();
  const auto S = static_cast<double>(post.samples.rows());

  for (std::size_t j = 0; j < row.size(); ++j) {
    if (!row[j].is_missing()) continue;
    const auto jj = static_cast<Eigen::Index>(j);
    ImputationResult r{record_id, params.field_names[j], params.field_kinds[j], 0.0, std::nullopt, config.method};
    const Vector a = params.basis.row(jj).transpose();

    if (params.field_kinds[j] == FieldKind::Binary) {
      if (config.method == ImputationMethod::PosteriorMean) {
        r.estimate = bernoulli_prob(params, post.mean, j);
      } else {
        double acc = 0.0;
        for (Eigen::Index s = 0; s < post.samples.rows(); ++s)
          acc += bernoulli_prob(params, post.samples.row(s).transpose(), j);
        r.estimate = acc / S;
      }
    } else {
      const double sd = params.sigma[static_cast<Eigen::Index>(j - m)];
      if (config.method == ImputationMethod::PosteriorMean) {
        r.estimate = a.dot(post.mean) + params.intercept[jj];
        r.predictive_sd = sd;
      } else {
        const Vector proj = post.samples * a;
        const double mean = proj.mean();
        const double var = (proj.array() - mean).square().sum() / S;
        r.estimate = mean + params.intercept[jj];
        r.predictive_sd = std::sqrt(sd * sd + var);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ImputationResult> impute_dataset(const ModelParams& params, const LatentPrior& prior, const Dataset& data,
                                             const ImputationConfig& config) {
  params.check_compatible(data);
  std::vector<std::vector<ImputationResult>> per_record(data.n_records());
  parallel_for(data.n_records(), config.sampler.threads, [&](std::size_t i) {
    ImputationConfig local = config;
    local.sampler.seed = record_seed(config.sampler.seed, data.record_ids()[i]);
    per_record[i] = impute_record(params, prior, data.row(i), data.record_ids()[i], local);
  });
  std::vector<ImputationResult> out;
  for (auto& v : per_record)
    for (auto& r : v) out.push_back(std::move(r));
  return out;
}

void write_imputations_csv(std::span<const ImputationResult> results, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write " + path.string());
  out << "record_id,field,kind,estimate,predictive_sd,method\n";
  for (const auto& r : results) {
    out << csv::escape(r.record_id) << ',' << csv::escape(r.field) << ',' << to_string(r.kind) << ','
        << csv::format_double(r.estimate) << ',' << (r.predictive_sd ? csv::format_double(*r.predictive_sd) : "")
        << ',' << to_string(r.method) << '\n';
  }
}

}  // namespace latentq
