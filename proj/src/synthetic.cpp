#include "latentq/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "latentq/model_io.hpp"
#include "latentq/optimizer.hpp"
#include "latentq/seeding.hpp"

namespace latentq {

namespace {

std::string numbered(char prefix, std::size_t i, std::size_t count) {
  const int width = count < 100 ? 2 : static_cast<int>(std::to_string(count).size());
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%0*zu", prefix, width, i + 1);
  return buf;
}

double sigmoid(double eta) {
  if (eta >= 0.0) return 1.0 / (1.0 + std::exp(-eta));
  const double e = std::exp(eta);
  return e / (1.0 + e);
}

}  // namespace

void GeneratorSpec::validate() const {
  truth.validate();
  if (n < 1) throw ModelError("generator needs at least one record");
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw ModelError("missing_rate must lie in [0, 1)");
  if (prior.dim() != truth.dim()) throw ModelError("prior dimension does not match the truth");
  if (orthonormality_penalty(truth.basis) > 1e-12) throw ModelError("true basis must have orthonormal columns");
}

Matrix random_orthonormal_basis(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  if (dim < 1 || dim > rows) throw ModelError("need 1 <= d <= rows for an orthonormal basis");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  for (Eigen::Index c = 0; c < g.cols(); ++c)
    for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, c) = normal(rng);
  return orthonormalize_columns(g);
}

ModelParams random_truth(std::size_t m, std::size_t k, std::size_t dim, std::uint64_t seed, double intercept_range) {
  ModelParams p;
  for (std::size_t j = 0; j < m; ++j) {
    p.field_names.push_back(numbered('b', j, m));
    p.field_kinds.push_back(FieldKind::Binary);
  }
  for (std::size_t j = 0; j < k; ++j) {
    p.field_names.push_back(numbered('c', j, k));
    p.field_kinds.push_back(FieldKind::Continuous);
  }
  p.basis = random_orthonormal_basis(m + k, dim, derive_seed(seed, 0));
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::uniform_real_distribution<double> icpt(-intercept_range, intercept_range);
  std::uniform_real_distribution<double> noise(0.5, 1.5);
  p.intercept.resize(static_cast<Eigen::Index>(m + k));
  for (Eigen::Index j = 0; j < p.intercept.size(); ++j) p.intercept[j] = icpt(rng);
  p.sigma.resize(static_cast<Eigen::Index>(k));
  for (Eigen::Index j = 0; j < p.sigma.size(); ++j) p.sigma[j] = noise(rng);
  return p;
}

LatentPrior isotropic_prior(std::size_t dim, double scale) {
  const auto d = static_cast<Eigen::Index>(dim);
  return LatentPrior(Vector::Zero(d), scale * scale * Matrix::Identity(d, d));
}

GeneratorSpec desk_scale_spec(std::uint64_t seed) {
  GeneratorSpec spec;
  spec.n = 500;
  spec.truth = random_truth(19, 0, 2, derive_seed(seed, 100));
  spec.prior = isotropic_prior(2, 5.0);
  spec.missing_rate = 0.10;
  spec.seed = derive_seed(seed, 101);
  return spec;
}

GeneratedData generate(const GeneratorSpec& spec) {
  spec.validate();
  const ModelParams& t = spec.truth;
  const std::size_t p = t.n_fields();
  const std::size_t m = t.n_binary();
  const auto d = static_cast<Eigen::Index>(t.dim());

  std::vector<FieldSchema> schema;
  for (std::size_t j = 0; j < p; ++j) schema.push_back({t.field_names[j], t.field_kinds[j], j});

  std::vector<std::string> ids;
  std::vector<Cell> complete, masked;
  complete.reserve(spec.n * p);
  masked.reserve(spec.n * p);
  Matrix latents(static_cast<Eigen::Index>(spec.n), d);

  std::vector<bool> hide(p);
  for (std::size_t i = 0; i < spec.n; ++i) {
    ids.push_back(numbered('r', i, std::max<std::size_t>(spec.n, 1000)));
    std::mt19937_64 rng(derive_seed(spec.seed, i));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    Vector z(d);
    for (Eigen::Index c = 0; c < d; ++c) z[c] = normal(rng);
    const Vector x = spec.prior.mean() + spec.prior.cholesky_factor() * z;
    latents.row(static_cast<Eigen::Index>(i)) = x.transpose();

    const std::size_t row_start = complete.size();
    for (std::size_t j = 0; j < p; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      const double eta = t.basis.row(jj).dot(x) + t.intercept[jj];
      if (j < m) {
        complete.push_back(Cell::binary(uniform(rng) < sigmoid(eta) ? 1 : 0));
      } else {
        complete.push_back(Cell::real(eta + t.sigma[static_cast<Eigen::Index>(j - m)] * normal(rng)));
      }
    }
    bool any_visible = false;
    while (!any_visible) {
      for (std::size_t j = 0; j < p; ++j) {
        hide[j] = uniform(rng) < spec.missing_rate;
        any_visible = any_visible || !hide[j];
      }
    }
    for (std::size_t j = 0; j < p; ++j) masked.push_back(hide[j] ? Cell::missing() : complete[row_start + j]);
  }

  std::vector<std::string> ids_copy = ids;
  return GeneratedData{Dataset(schema, std::move(ids), std::move(masked)),
                       Dataset(schema, std::move(ids_copy), std::move(complete)), std::move(latents)};
}

void write_truth_json(const GeneratorSpec& spec, const GeneratedData& generated, const std::filesystem::path& path) {
  nlohmann::json j = model_to_json(StoredModel{spec.truth, spec.prior, nlohmann::json::object()});
  j.erase("metadata");
  j["generator"] = {{"n", spec.n},
                    {"m", spec.n_binary()},
                    {"k", spec.n_continuous()},
                    {"missing_rate", spec.missing_rate},
                    {"seed", spec.seed}};
  nlohmann::json latents = nlohmann::json::object();
  const auto& ids = generated.data.record_ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < generated.latents.cols(); ++c) row.push_back(generated.latents(static_cast<Eigen::Index>(i), c));
    latents[ids[i]] = row;
  }
  j["latents"] = latents;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace latentq
