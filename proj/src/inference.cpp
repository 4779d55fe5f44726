#include "latentq/inference.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <random>

#include "latentq/csv.hpp"
#include "latentq/parallel.hpp"
#include "latentq/seeding.hpp"

namespace latentq {

double SamplerConfig::scale_for(std::size_t dim) const {
  return proposal_scale > 0.0 ? proposal_scale : 2.4 / std::sqrt(static_cast<double>(dim));
}

void SamplerConfig::validate() const {
  if (n_samples < 1) throw ModelError("n_samples must be at least 1");
  if (!(proposal_scale >= 0.0) || !std::isfinite(proposal_scale)) throw ModelError("proposal_scale must be positive");
}

LatentPosterior sample_latent_posterior(const ModelParams& params, const LatentPrior& prior,
                                        std::span<const Cell> row, const SamplerConfig& config) {
  config.validate();
  const auto d = static_cast<Eigen::Index>(params.dim());
  const auto S = static_cast<Eigen::Index>(config.n_samples);
  const double scale = config.scale_for(params.dim());

  RowTarget target(params, prior, row);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  Vector x = prior.mean();
  double lp = target.log_posterior(x);
  if (!std::isfinite(lp)) throw SamplingError("non-finite log posterior at the prior mean");

  LatentPosterior post;
  post.samples.resize(S, d);
  Vector proposal(d);
  std::size_t accepted = 0;
  const std::size_t total = config.burn_in + config.n_samples;
  for (std::size_t t = 0; t < total; ++t) {
    for (Eigen::Index c = 0; c < d; ++c) proposal[c] = x[c] + scale * normal(rng);
    const double lp_new = target.log_posterior(proposal);
    if (!std::isfinite(lp_new)) throw SamplingError("non-finite log posterior during sampling");
    const double u = uniform(rng);
    const bool accept = std::log(u) < lp_new - lp;
    if (accept) {
      x = proposal;
      lp = lp_new;
    }
    if (t >= config.burn_in) {
      if (accept) ++accepted;
      post.samples.row(static_cast<Eigen::Index>(t - config.burn_in)) = x.transpose();
    }
  }

  post.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(config.n_samples);
  post.mean = post.samples.colwise().mean().transpose();
  if (S > 1) {
    const Matrix centered = post.samples.rowwise() - post.mean.transpose();
    post.covariance = (centered.transpose() * centered) / static_cast<double>(S - 1);
  } else {
    post.covariance = Matrix::Zero(d, d);
  }
  return post;
}

ModeResult posterior_mode(const ModelParams& params, const LatentPrior& prior, std::span<const Cell> row,
                          const ModeConfig& config) {
  RowTarget target(params, prior, row);
  ModeResult res;
  res.x = prior.mean();
  res.log_posterior = target.log_posterior(res.x);
  Vector g = target.gradient(res.x);
  res.grad_norm = g.norm();
  constexpr double kArmijo = 1e-4;

  // Barzilai-Borwein steps with a non-monotone Armijo test against the best
  // of the last few objective values. Once the required gain is below the
  // rounding of the objective, a step is judged by whether it shrinks the
  // gradient instead.
  constexpr std::size_t kWindow = 10;
  const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(res.log_posterior));
  std::deque<double> recent{res.log_posterior};
  ModeResult best = res;
  double initial_step = 1.0;
  while (res.grad_norm >= config.tol && res.iterations < config.max_iters) {
    ++res.iterations;
    const double reference = *std::max_element(recent.begin(), recent.end());
    const double slope = g.squaredNorm();
    bool moved = false;
    Vector trial, g_new;
    double lp = 0.0;
    for (double step = initial_step; step > 1e-20; step *= 0.5) {
      trial = res.x + step * g;
      lp = target.log_posterior(trial);
      if (!std::isfinite(lp)) continue;
      const double required = kArmijo * step * slope;
      if (required > noise) {
        if (lp >= reference + required) {
          g_new = target.gradient(trial);
          moved = true;
          break;
        }
      } else if (lp >= res.log_posterior - noise) {
        g_new = target.gradient(trial);
        if (g_new.norm() < res.grad_norm) {
          moved = true;
          break;
        }
      }
    }
    if (!moved) break;
    const Vector s = trial - res.x;
    const double sy = -s.dot(g_new - g);
    initial_step = sy > 0.0 ? s.squaredNorm() / sy : 1.0;
    res.x = trial;
    res.log_posterior = lp;
    g = g_new;
    res.grad_norm = g.norm();
    recent.push_back(lp);
    if (recent.size() > kWindow) recent.pop_front();
    if (lp > best.log_posterior) best = res;
  }
  res.converged = res.grad_norm < config.tol;
  if (!res.converged && best.log_posterior > res.log_posterior) {
    best.iterations = res.iterations;
    return best;
  }
  return res;
}

std::vector<LatentPosterior> e_step(const ModelParams& params, const LatentPrior& prior, const Dataset& data,
                                    const SamplerConfig& config) {
  params.check_compatible(data);
  config.validate();
  std::vector<LatentPosterior> out(data.n_records());
  parallel_for(data.n_records(), config.threads, [&](std::size_t i) {
    SamplerConfig chain = config;
    chain.seed = record_seed(config.seed, data.record_ids()[i]);
    out[i] = sample_latent_posterior(params, prior, data.row(i), chain);
  });
  return out;
}

std::vector<ModeResult> posterior_modes(const ModelParams& params, const LatentPrior& prior, const Dataset& data,
                                        const ModeConfig& config, std::size_t threads) {
  params.check_compatible(data);
  std::vector<ModeResult> out(data.n_records());
  parallel_for(data.n_records(), threads, [&](std::size_t i) { out[i] = posterior_mode(params, prior, data.row(i), config); });
  return out;
}

Matrix posterior_means(std::span<const LatentPosterior> posteriors) {
  if (posteriors.empty()) return Matrix();
  Matrix m(static_cast<Eigen::Index>(posteriors.size()), posteriors.front().mean.size());
  for (std::size_t i = 0; i < posteriors.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = posteriors[i].mean.transpose();
  return m;
}

namespace {

void write_header(std::ostream& out, bool with_index, Eigen::Index d) {
  out << "record_id";
  if (with_index) out << ",sample_index";
  for (Eigen::Index c = 0; c < d; ++c) out << ",x_" << (c + 1);
  out << '\n';
}

}  // namespace

void write_latents_csv(const std::filesystem::path& path, std::span<const std::string> record_ids, const Matrix& latents) {
  if (static_cast<std::size_t>(latents.rows()) != record_ids.size()) throw ModelError("latents/record id count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write " + path.string());
  write_header(out, false, latents.cols());
  for (Eigen::Index i = 0; i < latents.rows(); ++i) {
    out << csv::escape(record_ids[static_cast<std::size_t>(i)]);
    for (Eigen::Index c = 0; c < latents.cols(); ++c) {
      const double v = latents(i, c);
      out << ',' << (std::isnan(v) ? std::string("NA") : csv::format_double(v));
    }
    out << '\n';
  }
}

void write_samples_csv(const std::filesystem::path& path, std::span<const std::string> record_ids,
                       std::span<const LatentPosterior> posteriors) {
  if (posteriors.size() != record_ids.size()) throw ModelError("posterior/record id count mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write " + path.string());
  write_header(out, true, posteriors.empty() ? 0 : posteriors.front().samples.cols());
  for (std::size_t i = 0; i < posteriors.size(); ++i) {
    const Matrix& s = posteriors[i].samples;
    const std::string id = csv::escape(record_ids[i]);
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      out << id << ',' << r;
      for (Eigen::Index c = 0; c < s.cols(); ++c) out << ',' << csv::format_double(s(r, c));
      out << '\n';
    }
  }
}

LatentTable read_latents_csv(const std::filesystem::path& path) {
  auto rows = csv::read_file(path);
  if (rows.empty() || rows.front().size() < 2) throw DataError(path.string() + ": expected header record_id,x_1,...");
  const std::size_t d = rows.front().size() - 1;
  LatentTable t;
  t.values.resize(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(d));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != d + 1) throw DataError(path.string() + ": row " + std::to_string(r) + " has the wrong width");
    t.record_ids.push_back(rows[r][0]);
    for (std::size_t c = 0; c < d; ++c) {
      double v = std::nan("");
      const std::string& text = rows[r][c + 1];
      if (!csv::is_missing_token(text) && !csv::parse_double(text, v)) {
        throw DataError(path.string() + ": row " + std::to_string(r) + ": cannot parse '" + text + "'");
      }
      t.values(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c)) = v;
    }
  }
  return t;
}

}  // namespace latentq
