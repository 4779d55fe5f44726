#include <CLI11.hpp>
#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "latentq/analysis.hpp"
#include "latentq/csv.hpp"
#include "latentq/dataset.hpp"
#include "latentq/imputation.hpp"
#include "latentq/inference.hpp"
#include "latentq/model_io.hpp"
#include "latentq/optimizer.hpp"
#include "latentq/seeding.hpp"
#include "latentq/synthetic.hpp"

namespace fs = std::filesystem;
using namespace latentq;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitMaxIters = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SamplerFlags {
  std::optional<std::size_t> n_samples;
  std::optional<std::size_t> burn_in;
  std::optional<double> proposal_scale;

  void add(CLI::App* cmd) {
    cmd->add_option("--mc-samples", n_samples, "Posterior samples kept per record")->check(CLI::PositiveNumber);
    cmd->add_option("--burn-in", burn_in, "Discarded Metropolis steps per record")->check(CLI::NonNegativeNumber);
    cmd->add_option("--proposal-scale", proposal_scale, "Random-walk step size (default 2.4/sqrt(d))")
        ->check(CLI::PositiveNumber);
  }

  // Flags override whatever the model file recorded, which overrides the built-in defaults.
  SamplerConfig resolve(const nlohmann::json& metadata) const {
    SamplerConfig s;
    if (metadata.contains("sampler")) {
      const auto& m = metadata.at("sampler");
      s.n_samples = m.value("n_samples", s.n_samples);
      s.burn_in = m.value("burn_in", s.burn_in);
      s.proposal_scale = m.value("proposal_scale", s.proposal_scale);
    }
    if (n_samples) s.n_samples = *n_samples;
    if (burn_in) s.burn_in = *burn_in;
    if (proposal_scale) s.proposal_scale = *proposal_scale;
    return s;
  }
};

nlohmann::json sampler_json(const SamplerConfig& s) {
  return {{"n_samples", s.n_samples}, {"burn_in", s.burn_in}, {"proposal_scale", s.proposal_scale}};
}

void ensure_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".latentq_write_probe";
  {
    std::ofstream out(probe);
    if (!out) throw UsageError("output directory " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

// Reorders the loaded columns into the model's field order. Field names must
// match exactly; kinds must agree.
Dataset load_for_model(const fs::path& data_path, const fs::path& schema_path, const ModelParams& params) {
  Dataset data = load_csv(data_path, schema_path, EmptyRows::Allow);
  if (data.n_fields() != params.n_fields()) {
    for (const auto& f : data.fields()) {
      if (std::find(params.field_names.begin(), params.field_names.end(), f.name) == params.field_names.end()) {
        throw ModelError("field '" + f.name + "' is not part of the model");
      }
    }
    throw ModelError("data has " + std::to_string(data.n_fields()) + " fields, model expects " +
                     std::to_string(params.n_fields()));
  }
  std::vector<std::size_t> pos(params.n_fields());
  for (std::size_t j = 0; j < params.n_fields(); ++j) {
    const auto& names = data.field_names();
    auto it = std::find(names.begin(), names.end(), params.field_names[j]);
    if (it == names.end()) throw ModelError("model field '" + params.field_names[j] + "' is missing from the data");
    pos[j] = static_cast<std::size_t>(it - names.begin());
    if (data.fields()[pos[j]].kind != params.field_kinds[j]) {
      throw ModelError("field '" + params.field_names[j] + "' is " + std::string(to_string(data.fields()[pos[j]].kind)) +
                       " in the schema but " + std::string(to_string(params.field_kinds[j])) + " in the model");
    }
  }
  std::vector<FieldSchema> schema;
  for (std::size_t j : pos) schema.push_back(data.fields()[j]);
  std::vector<Cell> cells;
  cells.reserve(data.n_records() * schema.size());
  for (std::size_t i = 0; i < data.n_records(); ++i)
    for (std::size_t j : pos) cells.push_back(data.at(i, j));
  Dataset ordered(std::move(schema), data.record_ids(), std::move(cells), EmptyRows::Allow);
  params.check_compatible(ordered);
  return ordered;
}

bool row_is_empty(std::span<const Cell> row) {
  return std::all_of(row.begin(), row.end(), [](const Cell& c) { return c.is_missing(); });
}

void write_basis_plot(const ModelParams& params, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write " + path.string());
  out << "field";
  for (std::size_t c = 0; c < params.dim(); ++c) out << ",A" << (c + 1);
  out << ",b\n";
  for (std::size_t j = 0; j < params.n_fields(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    out << csv::escape(params.field_names[j]);
    for (Eigen::Index c = 0; c < params.basis.cols(); ++c) out << ',' << csv::format_double(params.basis(r, c));
    out << ',' << csv::format_double(params.intercept[r]) << '\n';
  }
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

struct FitArgs {
  fs::path data, schema, out;
  FitConfig config;
  SamplerFlags sampler;
  double prior_scale = 1.0;
  std::uint64_t seed = 0;
};

int run_fit(const FitArgs& a) {
  ensure_out_dir(a.out);
  const Dataset data = load_csv(a.data, a.schema);
  FitConfig config = a.config;
  config.seed = a.seed;
  config.sampler = a.sampler.resolve(nlohmann::json::object());
  if (a.prior_scale != 1.0) config.prior = isotropic_prior(config.dims, a.prior_scale);

  FitResult result = [&] {
    try {
      return fit(data, config);
    } catch (const DivergenceError& e) {
      std::ofstream dump(a.out / "divergence.json", std::ios::binary);
      dump << e.state() << '\n';
      throw;
    }
  }();

  const FitReport& rep = result.report;
  nlohmann::json summary{
      {"seed", a.seed},
      {"dims", config.dims},
      {"converged", rep.converged},
      {"iterations", rep.iterations_run},
      {"em_tol", config.em_tol},
      {"gamma", config.gamma},
      {"penalty_weight", rep.penalty_weight},
      {"final_penalty", rep.final_penalty},
      {"penalty_within_gamma", rep.penalty_within_gamma},
      {"final_objective", rep.iterations.empty() ? 0.0 : rep.iterations.back().objective},
      {"constant_fields", rep.constant_fields},
      {"warnings", rep.warnings},
  };
  nlohmann::json metadata{{"sampler", sampler_json(config.sampler)}, {"seed", a.seed}, {"fit", summary}};
  save_model(StoredModel{result.params, result.prior, metadata}, a.out / "model.json");
  write_latents_csv(a.out / "latents.csv", data.record_ids(), result.latent_means);
  write_report_jsonl(rep, a.out / "report.jsonl");
  write_basis_plot(result.params, a.out / "basis_plot.csv");

  for (const auto& f : rep.constant_fields) std::cerr << "warning: field '" << f << "' is constant\n";
  print_warnings(rep.warnings);
  std::cerr << (rep.converged ? "converged" : "stopped at the iteration limit") << " after " << rep.iterations_run
            << " iterations; penalty " << rep.final_penalty << '\n';
  return rep.converged ? kExitOk : kExitMaxIters;
}

struct TransformArgs {
  fs::path model, data, schema, out;
  std::string mode = "mean";
  SamplerFlags sampler;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  bool write_samples = false;
};

int run_transform(const TransformArgs& a) {
  ensure_out_dir(a.out);
  const StoredModel model = load_model(a.model);
  const Dataset data = load_for_model(a.data, a.schema, model.params);
  const std::size_t n = data.n_records();
  Matrix latents(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(model.params.dim()));

  if (a.mode == "mean") {
    SamplerConfig s = a.sampler.resolve(model.metadata);
    s.seed = a.seed;
    s.threads = a.threads;
    const auto posts = e_step(model.params, model.prior, data, s);
    latents = posterior_means(posts);
    if (a.write_samples) write_samples_csv(a.out / "samples.csv", data.record_ids(), posts);
  } else {
    const auto modes = posterior_modes(model.params, model.prior, data, ModeConfig{}, a.threads);
    std::size_t stalled = 0;
    for (std::size_t i = 0; i < n; ++i) {
      latents.row(static_cast<Eigen::Index>(i)) = modes[i].x.transpose();
      if (!modes[i].converged) ++stalled;
    }
    if (stalled > 0) std::cerr << "warning: mode search did not converge for " << stalled << " records\n";
  }
  // Posterior equals the prior for a record with nothing observed.
  std::size_t empty = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (row_is_empty(data.row(i))) {
      latents.row(static_cast<Eigen::Index>(i)) = model.prior.mean().transpose();
      ++empty;
    }
  }
  if (empty > 0) std::cerr << "warning: " << empty << " records have no observed cells; reported at the prior mean\n";
  write_latents_csv(a.out / "latents.csv", data.record_ids(), latents);
  return kExitOk;
}

struct ImputeArgs {
  fs::path model, data, schema, out;
  std::string method = "posterior_averaged";
  SamplerFlags sampler;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

int run_impute(const ImputeArgs& a) {
  ensure_out_dir(a.out);
  const StoredModel model = load_model(a.model);
  const Dataset data = load_for_model(a.data, a.schema, model.params);
  ImputationConfig config;
  config.sampler = a.sampler.resolve(model.metadata);
  config.sampler.seed = a.seed;
  config.sampler.threads = a.threads;
  config.method = a.method == "posterior_mean" ? ImputationMethod::PosteriorMean : ImputationMethod::PosteriorAveraged;
  const auto results = impute_dataset(model.params, model.prior, data, config);
  write_imputations_csv(results, a.out / "imputations.csv");
  std::cerr << results.size() << " missing cells imputed\n";
  return kExitOk;
}

struct AnalyzeArgs {
  fs::path latents, metrics, out;
  std::optional<fs::path> baseline_latents, baseline_metrics;
  std::string mode = "correlate";
};

int run_analyze(const AnalyzeArgs& a) {
  ensure_out_dir(a.out);
  LatentTable latents = read_latents_csv(a.latents);
  MetricTable metrics = read_metrics_csv(a.metrics);
  if (a.baseline_latents) latents = difference(latents, read_latents_csv(*a.baseline_latents));
  if (a.baseline_metrics) metrics = difference(metrics, read_metrics_csv(*a.baseline_metrics));

  std::vector<std::string> unmatched, warnings;
  if (a.mode == "correlate") {
    const CorrelationTable t = correlation_table(latents, metrics);
    write_correlation_table_csv(t, a.out / "table.csv");
    write_correlation_detail_csv(t, a.out / "table_detail.csv");
    unmatched = t.unmatched;
    warnings = t.warnings;
  } else {
    const RegressionTable t = regression_table(latents, metrics);
    write_regressions_json(t, a.out / "regression.json");
    unmatched = t.unmatched;
    warnings = t.warnings;
  }
  if (!unmatched.empty()) {
    std::cerr << "warning: " << unmatched.size() << " record ids appear in only one input and were dropped\n";
  }
  print_warnings(warnings);
  return kExitOk;
}

struct GenerateArgs {
  fs::path out;
  std::size_t n = 500, m = 19, k = 0, dims = 2;
  double missing_rate = 0.10;
  double latent_scale = 5.0;
  double intercept_range = 2.0;
  std::uint64_t seed = 0;
};

int run_generate(const GenerateArgs& a) {
  if (a.m + a.k < a.dims) throw UsageError("--dims cannot exceed the number of fields");
  ensure_out_dir(a.out);
  GeneratorSpec spec;
  spec.n = a.n;
  spec.truth = random_truth(a.m, a.k, a.dims, derive_seed(a.seed, 100), a.intercept_range);
  spec.prior = isotropic_prior(a.dims, a.latent_scale);
  spec.missing_rate = a.missing_rate;
  spec.seed = derive_seed(a.seed, 101);
  const GeneratedData g = generate(spec);
  write_csv(g.data, a.out / "data.csv");
  write_schema(g.data, a.out / "schema.csv");
  write_truth_json(spec, g, a.out / "truth.json");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent factor model for mixed binary/continuous questionnaire data with missing entries"};
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a model by Monte-Carlo EM");
  fit_cmd->add_option("--data", fa.data, "Data CSV (record_id first)")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--schema", fa.schema, "Schema sidecar (name,kind per line)")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--out", fa.out, "Output directory")->required();
  fit_cmd->add_option("--dims", fa.config.dims, "Latent dimension")->capture_default_str()->check(CLI::PositiveNumber);
  fit_cmd->add_option("--max-iters", fa.config.max_em_iters, "EM iteration limit")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--tol", fa.config.em_tol, "Convergence threshold on the per-record objective change")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--gamma", fa.config.gamma, "Budget for the orthonormality penalty")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  fit_cmd->add_option("--penalty-weight", fa.config.penalty_weight, "Penalty weight (0 = 10 x records)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--prior-scale", fa.prior_scale, "Latent prior N(0, s^2 I)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  fa.sampler.add(fit_cmd);
  fit_cmd->add_option("--seed", fa.seed, "Random seed")->required();
  fit_cmd->add_option("--threads", fa.config.threads, "Worker threads (0 = all)")->capture_default_str();

  TransformArgs ta;
  auto* tr_cmd = app.add_subcommand("transform", "Project records onto a fitted model");
  tr_cmd->add_option("--model", ta.model, "model.json from fit")->required()->check(CLI::ExistingFile);
  tr_cmd->add_option("--data", ta.data, "Data CSV")->required()->check(CLI::ExistingFile);
  tr_cmd->add_option("--schema", ta.schema, "Schema sidecar")->required()->check(CLI::ExistingFile);
  tr_cmd->add_option("--out", ta.out, "Output directory")->required();
  tr_cmd->add_option("--mode", ta.mode, "Posterior summary")
      ->capture_default_str()
      ->check(CLI::IsMember({"mean", "mode"}));
  ta.sampler.add(tr_cmd);
  tr_cmd->add_option("--seed", ta.seed, "Random seed")->required();
  tr_cmd->add_option("--threads", ta.threads, "Worker threads (0 = all)")->capture_default_str();
  tr_cmd->add_flag("--write-samples", ta.write_samples, "Also write every posterior draw (mean mode)");

  ImputeArgs ia;
  auto* im_cmd = app.add_subcommand("impute", "Estimate missing cells");
  im_cmd->add_option("--model", ia.model, "model.json from fit")->required()->check(CLI::ExistingFile);
  im_cmd->add_option("--data", ia.data, "Data CSV")->required()->check(CLI::ExistingFile);
  im_cmd->add_option("--schema", ia.schema, "Schema sidecar")->required()->check(CLI::ExistingFile);
  im_cmd->add_option("--out", ia.out, "Output directory")->required();
  im_cmd->add_option("--method", ia.method, "Imputation rule")
      ->capture_default_str()
      ->check(CLI::IsMember({"posterior_averaged", "posterior_mean"}));
  ia.sampler.add(im_cmd);
  im_cmd->add_option("--seed", ia.seed, "Random seed")->required();
  im_cmd->add_option("--threads", ia.threads, "Worker threads (0 = all)")->capture_default_str();

  AnalyzeArgs aa;
  auto* an_cmd = app.add_subcommand("analyze", "Correlate or regress external metrics on latent coordinates");
  an_cmd->add_option("--latents", aa.latents, "latents.csv")->required()->check(CLI::ExistingFile);
  an_cmd->add_option("--metrics", aa.metrics, "Metrics CSV (record_id, then one column per metric)")
      ->required()
      ->check(CLI::ExistingFile);
  an_cmd->add_option("--baseline-latents", aa.baseline_latents, "Baseline latents; analyze follow-up minus baseline")
      ->check(CLI::ExistingFile);
  an_cmd->add_option("--baseline-metrics", aa.baseline_metrics, "Baseline metrics; analyze follow-up minus baseline")
      ->check(CLI::ExistingFile);
  an_cmd->add_option("--mode", aa.mode, "Analysis")
      ->capture_default_str()
      ->check(CLI::IsMember({"correlate", "regress"}));
  an_cmd->add_option("--out", aa.out, "Output directory")->required();

  GenerateArgs ga;
  auto* ge_cmd = app.add_subcommand("generate", "Draw a synthetic dataset from a random orthonormal truth");
  ge_cmd->add_option("--n", ga.n, "Records")->capture_default_str()->check(CLI::PositiveNumber);
  ge_cmd->add_option("--m", ga.m, "Binary fields")->capture_default_str();
  ge_cmd->add_option("--k", ga.k, "Continuous fields")->capture_default_str();
  ge_cmd->add_option("--dims", ga.dims, "Latent dimension")->capture_default_str()->check(CLI::PositiveNumber);
  ge_cmd->add_option("--missing-rate", ga.missing_rate, "MCAR masking rate in [0, 1)")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 0.999999));
  ge_cmd->add_option("--latent-scale", ga.latent_scale, "Standard deviation of the true latent coordinates")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  ge_cmd->add_option("--intercept-range", ga.intercept_range, "True intercepts drawn uniformly in [-r, r]")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  ge_cmd->add_option("--seed", ga.seed, "Random seed")->required();
  ge_cmd->add_option("--out", ga.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitError;
  }

  try {
    if (fit_cmd->parsed()) return run_fit(fa);
    if (tr_cmd->parsed()) return run_transform(ta);
    if (im_cmd->parsed()) return run_impute(ia);
    if (an_cmd->parsed()) return run_analyze(aa);
    if (ge_cmd->parsed()) return run_generate(ga);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
