#include <doctest.h>

#include <json.hpp>
#include <random>

#include "latentq/optimizer.hpp"
#include "latentq/seeding.hpp"
#include "latentq/synthetic.hpp"
#include "test_support.hpp"

using namespace latentq;
using testing::principal_angle_deg;

namespace {

LatentPosterior fixed_samples(const Matrix& samples) {
  LatentPosterior p;
  p.samples = samples;
  p.mean = samples.colwise().mean().transpose();
  p.covariance = Matrix::Zero(samples.cols(), samples.cols());
  return p;
}

ModelParams continuous_params(std::size_t d) {
  ModelParams p;
  p.field_names = {"z"};
  p.field_kinds = {FieldKind::Continuous};
  p.basis = Matrix::Constant(1, static_cast<Eigen::Index>(d), 0.1);
  p.intercept = Vector::Zero(1);
  p.sigma = Vector::Ones(1);
  return p;
}

Dataset add_constant_field(const Dataset& data) {
  std::vector<FieldSchema> schema = data.fields();
  schema.insert(schema.begin(), {"always", FieldKind::Binary, 0});
  for (std::size_t j = 1; j < schema.size(); ++j) schema[j].column_index = j;
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < data.n_records(); ++i) {
    cells.push_back(Cell::binary(1));
    for (const Cell& c : data.row(i)) cells.push_back(c);
  }
  return Dataset(schema, data.record_ids(), cells);
}

FitConfig matched_config(const GeneratorSpec& spec, std::uint64_t seed) {
  FitConfig cfg;
  cfg.dims = spec.dim();
  cfg.seed = seed;
  cfg.prior = spec.prior;
  return cfg;
}

}  // namespace

TEST_CASE("orthonormality_penalty examples") {
  const Matrix q = random_orthonormal_basis(6, 2, 3);
  CHECK(orthonormality_penalty(q) < 1e-25);
  CHECK(orthonormality_penalty(2.0 * q) == doctest::Approx(18.0).epsilon(1e-12));
  Vector u = Vector::Random(5);
  u.normalize();
  CHECK(orthonormality_penalty(u) < 1e-28);
  Matrix a(2, 2);
  a << 1.0, 1.0, 0.0, 1.0;
  // A^T A - I = [[0, 1], [1, 1]]
  CHECK(orthonormality_penalty(a) == doctest::Approx(3.0).epsilon(1e-15));
  const Matrix r = orthonormalize_columns(a);
  CHECK(orthonormality_penalty(r) < 1e-28);
  CHECK(principal_angle_deg(r, a) < 1e-6);
}

TEST_CASE("m_step without penalty never decreases the objective") {
  GeneratorSpec spec = desk_scale_spec(2);
  spec.n = 80;
  const auto g = generate(spec);
  SamplerConfig sc;
  sc.seed = 3;
  sc.n_samples = 100;
  const auto post = e_step(spec.truth, spec.prior, g.data, sc);
  const MStepProblem problem(g.data, post);
  ModelParams current = initialize_params(g.data, 2, 4);
  MStepConfig mc;
  mc.max_iters = 1;
  double previous = problem.value_and_gradient(current, 0.0, nullptr);
  for (int step = 0; step < 25; ++step) {
    const auto res = m_step(problem, current, mc);
    CHECK(res.objective_before == doctest::Approx(previous).epsilon(1e-12));
    CHECK(res.objective_after >= res.objective_before);
    previous = res.objective_after;
    current = res.params;
  }
  CHECK(previous > problem.value_and_gradient(initialize_params(g.data, 2, 4), 0.0, nullptr));
}

TEST_CASE("m_step gradient matches central differences") {
  GeneratorSpec spec = desk_scale_spec(5);
  spec.n = 30;
  spec.truth = random_truth(4, 2, 2, 7);
  spec.prior = LatentPrior::standard(2);
  const auto g = generate(spec);
  SamplerConfig sc;
  sc.seed = 1;
  sc.n_samples = 20;
  const auto post = e_step(spec.truth, spec.prior, g.data, sc);
  const MStepProblem problem(g.data, post);
  ModelParams p = spec.truth;
  p.basis *= 1.3;
  Vector grad;
  problem.value_and_gradient(p, 2.0, &grad);
  const double h = 1e-5;
  Eigen::Index k = 0;
  for (Eigen::Index j = 0; j < p.basis.rows(); ++j) {
    for (Eigen::Index c = 0; c <= p.basis.cols(); ++c, ++k) {
      auto up = p, down = p;
      double& u = c < p.basis.cols() ? up.basis(j, c) : up.intercept[j];
      double& dn = c < p.basis.cols() ? down.basis(j, c) : down.intercept[j];
      u += h;
      dn -= h;
      const double fd = (problem.value_and_gradient(up, 2.0, nullptr) - problem.value_and_gradient(down, 2.0, nullptr)) / (2 * h);
      CHECK(testing::relative_error(grad[k], fd) < 1e-5);
    }
  }
  for (Eigen::Index s = 0; s < p.sigma.size(); ++s, ++k) {
    auto up = p, down = p;
    up.sigma[s] *= std::exp(h);
    down.sigma[s] *= std::exp(-h);
    const double fd = (problem.value_and_gradient(up, 2.0, nullptr) - problem.value_and_gradient(down, 2.0, nullptr)) / (2 * h);
    CHECK(testing::relative_error(grad[k], fd) < 1e-5);
  }
  CHECK(k == grad.size());
}

TEST_CASE("m_step on one continuous field solves the normal equations") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t d : {1u, 2u}) {
    const std::size_t n = 5, S = 4;
    std::vector<std::vector<Cell>> rows;
    std::vector<LatentPosterior> post;
    Matrix design(static_cast<Eigen::Index>(n * S), static_cast<Eigen::Index>(d + 1));
    Vector target(design.rows());
    for (std::size_t i = 0; i < n; ++i) {
      const double z = 2.0 + 1.5 * normal(rng);
      rows.push_back({Cell::real(z)});
      Matrix samples(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(d));
      for (Eigen::Index s = 0; s < samples.rows(); ++s) {
        for (Eigen::Index c = 0; c < samples.cols(); ++c) samples(s, c) = normal(rng);
        const auto r = static_cast<Eigen::Index>(i * S) + s;
        design.row(r).head(static_cast<Eigen::Index>(d)) = samples.row(s);
        design(r, static_cast<Eigen::Index>(d)) = 1.0;
        target[r] = z;
      }
      post.push_back(fixed_samples(samples));
    }
    const MStepProblem problem({FieldKind::Continuous}, rows, post);
    MStepConfig mc;
    mc.max_iters = 2000;
    mc.tol = 1e-11;
    const auto res = m_step(problem, continuous_params(d), mc);

    const Vector coef = (design.transpose() * design).ldlt().solve(design.transpose() * target);
    const Vector resid = target - design * coef;
    const double sigma = std::sqrt(resid.squaredNorm() / static_cast<double>(design.rows()));
    for (std::size_t c = 0; c < d; ++c)
      CHECK(res.params.basis(0, static_cast<Eigen::Index>(c)) == doctest::Approx(coef[static_cast<Eigen::Index>(c)]).epsilon(1e-6));
    CHECK(res.params.intercept[0] == doctest::Approx(coef[static_cast<Eigen::Index>(d)]).epsilon(1e-6));
    CHECK(res.params.sigma[0] == doctest::Approx(sigma).epsilon(1e-6));
    const double mean_resid = (target - design.leftCols(static_cast<Eigen::Index>(d)) * res.params.basis.row(0).transpose()).mean();
    CHECK(res.params.intercept[0] == doctest::Approx(mean_resid).epsilon(1e-6));
  }
}

TEST_CASE("penalty alone shrinks an inflated basis") {
  const MStepProblem empty({FieldKind::Binary, FieldKind::Binary, FieldKind::Binary}, {}, {});
  CHECK(empty.n_records() == 0);
  ModelParams p;
  p.field_names = {"a", "b", "c"};
  p.field_kinds = {FieldKind::Binary, FieldKind::Binary, FieldKind::Binary};
  p.basis = 2.0 * random_orthonormal_basis(3, 2, 9);
  p.intercept = Vector::Zero(3);
  p.sigma = Vector(0);
  CHECK(empty.expected_loglik(p) == 0.0);
  MStepConfig mc;
  mc.penalty_weight = 5.0;
  const auto res = m_step(empty, p, mc);
  CHECK(orthonormality_penalty(res.params.basis) < orthonormality_penalty(p.basis));
  CHECK(orthonormality_penalty(res.params.basis) < 1e-6);
  CHECK(principal_angle_deg(res.params.basis, p.basis) < 1e-6);
}

TEST_CASE("initialize_params") {
  std::vector<FieldSchema> schema{{"half", FieldKind::Binary, 0},
                                  {"ones", FieldKind::Binary, 1},
                                  {"quarter", FieldKind::Binary, 2},
                                  {"z", FieldKind::Continuous, 3}};
  std::vector<Cell> cells;
  const double zs[] = {1.0, 2.0, 4.0, 5.0};
  for (int i = 0; i < 4; ++i) {
    cells.push_back(Cell::binary(i % 2));
    cells.push_back(Cell::binary(1));
    cells.push_back(Cell::binary(i == 0 ? 1 : 0));
    cells.push_back(Cell::real(zs[i]));
  }
  const Dataset data(schema, {"a", "b", "c", "d"}, cells);
  const auto p = initialize_params(data, 2, 11);
  CHECK(p.intercept[0] == 0.0);
  CHECK(p.intercept[1] == 4.0);
  CHECK(p.intercept[2] == doctest::Approx(std::log(0.25 / 0.75)).epsilon(1e-14));
  CHECK(p.intercept[3] == doctest::Approx(3.0).epsilon(1e-14));
  // sample standard deviation of {1, 2, 4, 5}
  CHECK(p.sigma[0] == doctest::Approx(std::sqrt(10.0 / 3.0)).epsilon(1e-14));
  CHECK(orthonormality_penalty(p.basis) < 1e-20);
  CHECK(p.basis == initialize_params(data, 2, 11).basis);
  CHECK(p.basis != initialize_params(data, 2, 12).basis);

  std::vector<Cell> flat;
  for (int i = 0; i < 4; ++i) {
    flat.push_back(Cell::binary(0));
    flat.push_back(Cell::binary(1));
    flat.push_back(Cell::binary(1));
    flat.push_back(Cell::real(7.0));
  }
  const auto q = initialize_params(Dataset(schema, {"a", "b", "c", "d"}, flat), 1, 1);
  CHECK(q.intercept[0] == -4.0);
  CHECK(q.sigma[0] == 1e-3);
}

TEST_CASE("fit rejects unusable data") {
  std::vector<FieldSchema> schema{{"a", FieldKind::Binary, 0}, {"b", FieldKind::Binary, 1}};
  const Dataset with_empty(schema, {"r1", "r2"}, {Cell::binary(1), Cell::binary(0), Cell::missing(), Cell::missing()},
                           EmptyRows::Allow);
  FitConfig cfg;
  cfg.dims = 1;
  CHECK_THROWS_AS(fit(with_empty, cfg), DataError);

  const Dataset unobserved(schema, {"r1", "r2"}, {Cell::binary(1), Cell::missing(), Cell::binary(0), Cell::missing()});
  CHECK_THROWS_AS(fit(unobserved, cfg), DataError);

  const Dataset ok(schema, {"r1", "r2"}, {Cell::binary(1), Cell::binary(0), Cell::binary(0), Cell::binary(1)});
  cfg.dims = 3;
  CHECK_THROWS(fit(ok, cfg));
  cfg.dims = 0;
  CHECK_THROWS(fit(ok, cfg));
  cfg.dims = 1;
  cfg.gamma = 0.0;
  CHECK_THROWS(fit(ok, cfg));
}

TEST_CASE("fit is deterministic for a seed") {
  GeneratorSpec spec = desk_scale_spec(6);
  spec.n = 150;
  const auto g = generate(spec);
  FitConfig cfg = matched_config(spec, 21);
  cfg.max_em_iters = 6;
  const auto a = fit(g.data, cfg);
  cfg.threads = 1;
  const auto b = fit(g.data, cfg);
  CHECK(a.params.basis == b.params.basis);
  CHECK(a.params.intercept == b.params.intercept);
  CHECK(a.latent_means == b.latent_means);
  REQUIRE(a.report.iterations.size() == b.report.iterations.size());
  for (std::size_t i = 0; i < a.report.iterations.size(); ++i) {
    CHECK(a.report.iterations[i].objective == b.report.iterations[i].objective);
    CHECK(a.report.iterations[i].mc_std_error == b.report.iterations[i].mc_std_error);
    CHECK(a.report.iterations[i].penalty == b.report.iterations[i].penalty);
  }
  CHECK(a.report.converged == b.report.converged);
  CHECK(a.report.iterations_run <= cfg.max_em_iters);
  for (const auto& it : a.report.iterations) CHECK(it.penalty >= 0.0);

  cfg.seed = 22;
  CHECK(fit(g.data, cfg).params.basis != a.params.basis);
}

TEST_CASE("a constant binary field is absorbed by its intercept") {
  const GeneratorSpec spec = desk_scale_spec(7);
  const auto g = generate(spec);
  const Dataset data = add_constant_field(g.data);
  FitConfig cfg = matched_config(spec, 5);
  const auto res = fit(data, cfg);
  REQUIRE(res.params.field_names[0] == "always");
  CHECK(res.params.intercept[0] >= 3.0);
  CHECK(res.params.basis.row(0).norm() < 0.5);
  CHECK(res.report.constant_fields == std::vector<std::string>{"always"});
  CHECK(res.report.final_penalty < cfg.gamma);
  CHECK(res.report.penalty_within_gamma);
}

TEST_CASE("refitting with 10% extra masking keeps the column space") {
  const GeneratorSpec spec = desk_scale_spec(8);
  const auto g = generate(spec);
  const FitConfig cfg = matched_config(spec, 9);
  const auto full = fit(g.data, cfg);

  std::mt19937_64 rng(derive_seed(8, 77));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto cells = g.data.cells();
  const std::size_t p = g.data.n_fields();
  for (std::size_t i = 0; i < g.data.n_records(); ++i) {
    std::vector<std::size_t> observed;
    for (std::size_t j = 0; j < p; ++j)
      if (!cells[i * p + j].is_missing()) observed.push_back(j);
    std::size_t left = observed.size();
    for (std::size_t j : observed) {
      if (left > 1 && u(rng) < 0.1) {
        cells[i * p + j] = Cell::missing();
        --left;
      }
    }
  }
  const auto masked = fit(g.data.with_cells(cells), cfg);
  const double angle = principal_angle_deg(full.params.basis, masked.params.basis);
  MESSAGE("column-space angle after extra masking: " << angle << " deg");
  CHECK(angle < 25.0);
}

TEST_CASE("report export writes one line per iteration") {
  GeneratorSpec spec = desk_scale_spec(10);
  spec.n = 60;
  const auto g = generate(spec);
  FitConfig cfg = matched_config(spec, 1);
  cfg.max_em_iters = 3;
  const auto res = fit(g.data, cfg);
  testing::TempDir dir;
  write_report_jsonl(res.report, dir / "r.jsonl");
  const auto text = testing::read_text(dir / "r.jsonl");
  CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == res.report.iterations.size());
  const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
  CHECK(first.contains("objective"));
  CHECK(first.contains("mc_std_error"));
  CHECK(first.contains("penalty"));
  CHECK(first.contains("wall_time_s"));
}
