#include <doctest.h>

#include <random>
#include <vector>

#include "latentq/kernels.hpp"
#include "latentq/likelihood.hpp"
#include "test_support.hpp"

namespace kn = latentq::kernels;
using latentq::Vector;

namespace {

// Predictors spread over the clamp so both branches of every kernel run.
std::vector<double> wide_values(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-45.0, 45.0);
  std::normal_distribution<double> normal(0.0, 2.0);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (i % 3 == 0) ? u(rng) : normal(rng);
  return v;
}

bool close(double a, double b, double tol = 1e-12) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

struct BackendGuard {
  ~BackendGuard() { kn::select(kn::Backend::Auto); }
};

}  // namespace

TEST_CASE("avx2 kernels match the scalar reference") {
  const kn::KernelTable* simd = kn::avx2_table();
  if (simd == nullptr) {
    MESSAGE("AVX2 not available on this machine; only the scalar table is exercised");
    return;
  }
  const kn::KernelTable& ref = kn::scalar_table();
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  for (std::size_t n : {0u, 1u, 3u, 4u, 5u, 7u, 8u, 13u, 19u, 64u, 101u}) {
    CAPTURE(n);
    const auto eta = wide_values(rng, n);
    const auto z = wide_values(rng, n);
    std::vector<double> y(n), w(n), inv_sd(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = u(rng) < 0.5 ? 1.0 : 0.0;
      w[i] = u(rng) < 0.2 ? 0.0 : 1.0;
      inv_sd[i] = 0.3 + u(rng);
    }

    std::vector<double> r1(n), r2(n);
    const double b1 = ref.bernoulli_fields(eta, y, w, r1);
    const double b2 = simd->bernoulli_fields(eta, y, w, r2);
    CHECK(close(b1, b2));
    for (std::size_t i = 0; i < n; ++i) CHECK(close(r1[i], r2[i]));
    CHECK(close(simd->bernoulli_fields(eta, y, w, {}), b1));

    const double g1 = ref.gaussian_fields(eta, z, w, inv_sd, r1);
    const double g2 = simd->gaussian_fields(eta, z, w, inv_sd, r2);
    CHECK(close(g1, g2));
    for (std::size_t i = 0; i < n; ++i) CHECK(close(r1[i], r2[i]));

    for (std::size_t d : {1u, 2u, 3u, 5u}) {
      std::vector<std::vector<double>> cols(d, std::vector<double>(n));
      std::vector<const double*> ptrs;
      for (auto& c : cols) {
        for (auto& v : c) v = 4.0 * (u(rng) - 0.5);
        ptrs.push_back(c.data());
      }
      std::vector<double> coef(d), offset(n);
      for (auto& c : coef) c = 3.0 * (u(rng) - 0.5);
      for (auto& o : offset) o = u(rng) - 0.5;
      std::vector<double> out1(n), out2(n);
      ref.linear_predictor(out1, offset, ptrs, coef);
      simd->linear_predictor(out2, offset, ptrs, coef);
      for (std::size_t i = 0; i < n; ++i) CHECK(close(out1[i], out2[i]));
    }
  }
}

TEST_CASE("avx2 block kernels match the scalar reference, including the wide-dimension fallback") {
  const kn::KernelTable* simd = kn::avx2_table();
  if (simd == nullptr) return;
  const kn::KernelTable& ref = kn::scalar_table();
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal(0.0, 1.0);

  for (std::size_t d : {1u, 2u, 3u, 16u, 17u}) {
    for (std::size_t len : {1u, 2u, 5u, 8u, 33u, 500u}) {
      CAPTURE(d);
      CAPTURE(len);
      std::vector<std::vector<double>> cols(d, std::vector<double>(len));
      std::vector<const double*> ptrs;
      for (auto& c : cols) {
        for (auto& v : c) v = 3.0 * normal(rng);
        ptrs.push_back(c.data());
      }
      std::vector<double> coef(d);
      // Large coefficients push some predictors past the clamp.
      for (auto& c : coef) c = 6.0 * normal(rng);
      const kn::SampleBlock block{ptrs, len, coef, normal(rng)};

      for (double y : {0.0, 1.0}) {
        std::vector<double> dot1(d, 0.5), dot2(d, 0.5);
        kn::BlockSums s1{1.0, 2.0, dot1}, s2{1.0, 2.0, dot2};
        ref.bernoulli_block(block, y, s1);
        simd->bernoulli_block(block, y, s2);
        CHECK(close(s1.value, s2.value));
        CHECK(close(s1.resid, s2.resid));
        for (std::size_t c = 0; c < d; ++c) CHECK(close(dot1[c], dot2[c]));
      }
      const double zv = 2.0 * normal(rng);
      std::vector<double> dot1(d, 0.0), dot2(d, 0.0);
      kn::BlockSums s1{0.0, 0.0, dot1}, s2{0.0, 0.0, dot2};
      ref.gaussian_block(block, zv, s1);
      simd->gaussian_block(block, zv, s2);
      CHECK(close(s1.value, s2.value));
      CHECK(close(s1.resid, s2.resid, 1e-11));
      for (std::size_t c = 0; c < d; ++c) CHECK(close(dot1[c], dot2[c], 1e-11));
    }
  }
}

TEST_CASE("scalar bernoulli kernel agrees with an independent log-sigmoid evaluation") {
  const kn::KernelTable& ref = kn::scalar_table();
  const std::vector<double> eta{-50.0, -35.0, -3.0, -0.5, 0.0, 0.25, 4.0, 35.0, 60.0};
  for (double e : eta) {
    const double c = std::clamp(e, -35.0, 35.0);
    for (double y : {0.0, 1.0}) {
      const double expected = y == 1.0 ? -std::log1p(std::exp(-c)) : -std::log1p(std::exp(c));
      const std::vector<double> ev{e}, yv{y}, wv{1.0};
      CHECK(ref.bernoulli_fields(ev, yv, wv, {}) == doctest::Approx(expected).epsilon(1e-14));
    }
  }
}

TEST_CASE("RowTarget gives the same answers under either backend") {
  BackendGuard guard;
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t d = 1 + trial % 3;
    const auto params = testing::random_params(rng, 4, 3, d, 2.0);
    const auto prior = latentq::LatentPrior::standard(d);
    const auto row = testing::random_row(rng, params, 0.3);
    const Vector x = testing::random_vector(rng, d, 2.0);
    const double reference = latentq::row_log_posterior(params, prior, x, row);
    const Vector ref_grad = latentq::grad_latent_row(params, prior, x, row);

    std::vector<kn::Backend> backends{kn::Backend::Scalar};
    if (kn::avx2_table() != nullptr) backends.push_back(kn::Backend::Avx2);
    for (auto b : backends) {
      kn::select(b);
      latentq::RowTarget target(params, prior, row);
      CHECK(target.log_posterior(x) == doctest::Approx(reference).epsilon(1e-12));
      const Vector g = target.gradient(x);
      for (Eigen::Index c = 0; c < g.size(); ++c) CHECK(g[c] == doctest::Approx(ref_grad[c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("backend selection honours the request") {
  BackendGuard guard;
  kn::select(kn::Backend::Scalar);
  CHECK(kn::active().name == kn::scalar_table().name);
  if (kn::avx2_table() != nullptr) {
    kn::select(kn::Backend::Avx2);
    CHECK(kn::active().name == kn::avx2_table()->name);
  } else {
    CHECK_THROWS_AS(kn::select(kn::Backend::Avx2), std::runtime_error);
  }
}
