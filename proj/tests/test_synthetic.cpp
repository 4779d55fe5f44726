#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <json.hpp>

#include "latentq/model_io.hpp"
#include "latentq/optimizer.hpp"
#include "latentq/synthetic.hpp"
#include "test_support.hpp"

using namespace latentq;

namespace {

// Pearson chi-square statistic of a 2x2 table.
double chi_square_2x2(double a, double b, double c, double d) {
  const double n = a + b + c + d;
  const double num = n * (a * d - b * c) * (a * d - b * c);
  const double den = (a + b) * (c + d) * (a + c) * (b + d);
  return den > 0.0 ? num / den : 0.0;
}

}  // namespace

TEST_CASE("random_orthonormal_basis") {
  for (std::size_t rows : {1u, 2u, 3u, 7u}) {
    const Matrix q = random_orthonormal_basis(rows, rows, 5);
    CHECK(std::abs(std::abs(q.determinant()) - 1.0) < 1e-10);
    CHECK(orthonormality_penalty(q) < 1e-20);
  }
  const Matrix a = random_orthonormal_basis(19, 2, 1), b = random_orthonormal_basis(19, 2, 2);
  CHECK(orthonormality_penalty(a) < 1e-20);
  CHECK((a - b).norm() > 0.0);
  CHECK(a == random_orthonormal_basis(19, 2, 1));
  CHECK_THROWS(random_orthonormal_basis(2, 3, 1));
}

TEST_CASE("random_truth and desk_scale_spec") {
  const auto t = random_truth(5, 3, 2, 9, 2.0);
  CHECK(t.n_binary() == 5);
  CHECK(t.n_continuous() == 3);
  CHECK(t.field_names.front() == "b01");
  CHECK(t.field_names.back() == "c03");
  CHECK(orthonormality_penalty(t.basis) < 1e-20);
  CHECK(t.intercept.cwiseAbs().maxCoeff() <= 2.0);
  CHECK(t.sigma.minCoeff() >= 0.5);
  CHECK(t.sigma.maxCoeff() <= 1.5);

  const auto spec = desk_scale_spec(4);
  CHECK(spec.n == 500);
  CHECK(spec.n_binary() == 19);
  CHECK(spec.n_continuous() == 0);
  CHECK(spec.dim() == 2);
  CHECK(spec.missing_rate == 0.1);
  CHECK(spec.prior.covariance().isApprox(25.0 * Matrix::Identity(2, 2)));
  CHECK(spec.truth.basis != desk_scale_spec(5).truth.basis);
}

TEST_CASE("generate is deterministic and masks only when asked") {
  GeneratorSpec spec = desk_scale_spec(3);
  spec.n = 200;
  const auto a = generate(spec);
  const auto b = generate(spec);
  CHECK(a.data == b.data);
  CHECK(a.latents == b.latents);
  CHECK(a.latents.rows() == 200);

  spec.missing_rate = 0.0;
  const auto full = generate(spec);
  for (const Cell& c : full.data.cells()) CHECK_FALSE(c.is_missing());
  CHECK(full.data == full.complete);
  // masking does not change the underlying draws
  CHECK(full.complete == a.complete);

  GeneratorSpec bad = spec;
  bad.missing_rate = 1.0;
  CHECK_THROWS(generate(bad));
  bad = spec;
  bad.truth.basis *= 2.0;
  CHECK_THROWS(generate(bad));
}

TEST_CASE("a pure-intercept binary field has prevalence one half") {
  GeneratorSpec spec;
  spec.n = 2000;
  spec.truth = random_truth(3, 0, 1, 8);
  spec.truth.basis.setZero();
  spec.truth.basis(1, 0) = 1.0;
  spec.truth.intercept.setZero();
  spec.prior = LatentPrior::standard(1);
  spec.seed = 10;
  const auto g = generate(spec);
  double ones = 0.0;
  for (std::size_t i = 0; i < g.data.n_records(); ++i) ones += g.data.at(i, 0).value();
  const double prevalence = ones / 2000.0;
  CHECK(std::abs(prevalence - 0.5) < 4.0 * std::sqrt(0.25 / 2000.0));
}

TEST_CASE("continuous fields have the population covariance") {
  GeneratorSpec spec;
  spec.n = 20000;
  spec.truth = random_truth(0, 4, 2, 12);
  Matrix cov0(2, 2);
  cov0 << 2.0, 0.6, 0.6, 1.0;
  spec.prior = LatentPrior(Vector::Zero(2), cov0);
  spec.seed = 13;
  const auto g = generate(spec);
  const Matrix& A = spec.truth.basis;
  Matrix expected = A * cov0 * A.transpose();
  for (Eigen::Index j = 0; j < 4; ++j) expected(j, j) += spec.truth.sigma[j] * spec.truth.sigma[j];

  Matrix z(20000, 4);
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < 4; ++j) z(i, j) = g.data.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)).value();
  const Matrix centered = z.rowwise() - z.colwise().mean();
  const Matrix empirical = centered.transpose() * centered / 19999.0;
  for (Eigen::Index j = 0; j < 4; ++j) {
    for (Eigen::Index k = 0; k < 4; ++k) {
      CAPTURE(j);
      CAPTURE(k);
      // 5% on the scale of the entry's own variances
      CHECK(std::abs(empirical(j, k) - expected(j, k)) < 0.05 * std::sqrt(expected(j, j) * expected(k, k)));
    }
  }
  const Vector means = z.colwise().mean().transpose();
  for (Eigen::Index j = 0; j < 4; ++j) CHECK(std::abs(means[j] - spec.truth.intercept[j]) < 4.0 * std::sqrt(expected(j, j) / 20000.0));
}

TEST_CASE("masking is independent of the values") {
  GeneratorSpec spec = desk_scale_spec(14);
  spec.n = 20000;
  spec.missing_rate = 0.2;
  const auto g = generate(spec);
  double statistic = 0.0;
  for (std::size_t j = 0; j < g.data.n_fields(); ++j) {
    double t[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t i = 0; i < g.data.n_records(); ++i) {
      const int value = static_cast<int>(g.complete.at(i, j).value());
      const int masked = g.data.at(i, j).is_missing() ? 1 : 0;
      t[value][masked] += 1.0;
    }
    statistic += chi_square_2x2(t[0][0], t[0][1], t[1][0], t[1][1]);
  }
  const boost::math::chi_squared dist(static_cast<double>(g.data.n_fields()));
  const double p = boost::math::cdf(boost::math::complement(dist, statistic));
  MESSAGE("pooled chi-square " << statistic << " on " << g.data.n_fields() << " df, p = " << p);
  CHECK(p > 0.01);
}

TEST_CASE("truth JSON holds what an oracle needs") {
  GeneratorSpec spec = desk_scale_spec(15);
  spec.n = 20;
  const auto g = generate(spec);
  testing::TempDir dir;
  write_truth_json(spec, g, dir / "truth.json");
  const auto j = nlohmann::json::parse(testing::read_text(dir / "truth.json"));
  const StoredModel m = model_from_json(j);
  CHECK(m.params.basis == spec.truth.basis);
  CHECK(m.params.intercept == spec.truth.intercept);
  CHECK(m.prior.covariance() == spec.prior.covariance());
  REQUIRE(j.contains("latents"));
  CHECK(j["latents"].size() == 20);
}
