#include "latentq/optimizer.hpp"

#include <Eigen/QR>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <json.hpp>
#include <random>

#include "latentq/kernels.hpp"
#include "latentq/model_io.hpp"
#include "latentq/parallel.hpp"
#include "latentq/seeding.hpp"

namespace latentq {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kArmijoSlope = 1e-4;
constexpr double kBacktrack = 0.5;
constexpr std::size_t kMaxHalvings = 60;

std::size_t block_width(const ModelParams& p) { return p.dim() + 1; }

Vector pack(const ModelParams& p) {
  const std::size_t d = p.dim();
  const std::size_t w = block_width(p);
  Vector theta(static_cast<Eigen::Index>(p.n_fields() * w + p.n_continuous()));
  for (std::size_t j = 0; j < p.n_fields(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    for (std::size_t c = 0; c < d; ++c) theta[static_cast<Eigen::Index>(j * w + c)] = p.basis(jj, static_cast<Eigen::Index>(c));
    theta[static_cast<Eigen::Index>(j * w + d)] = p.intercept[jj];
  }
  const auto base = static_cast<Eigen::Index>(p.n_fields() * w);
  for (Eigen::Index k = 0; k < p.sigma.size(); ++k) theta[base + k] = std::log(p.sigma[k]);
  return theta;
}

void unpack(const Vector& theta, ModelParams& p) {
  const std::size_t d = p.dim();
  const std::size_t w = block_width(p);
  for (std::size_t j = 0; j < p.n_fields(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    for (std::size_t c = 0; c < d; ++c) p.basis(jj, static_cast<Eigen::Index>(c)) = theta[static_cast<Eigen::Index>(j * w + c)];
    p.intercept[jj] = theta[static_cast<Eigen::Index>(j * w + d)];
  }
  const auto base = static_cast<Eigen::Index>(p.n_fields() * w);
  for (Eigen::Index k = 0; k < p.sigma.size(); ++k) p.sigma[k] = std::exp(theta[base + k]);
}

std::vector<const double*> columns_of(const Matrix& samples) {
  std::vector<const double*> cols;
  for (Eigen::Index c = 0; c < samples.cols(); ++c) cols.push_back(samples.col(c).data());
  return cols;
}

struct FieldTerms {
  double value = 0.0;
  std::vector<double> grad;  // d entries for A_j, then b_j, then (continuous) log sigma_j
};

}  // namespace

double orthonormality_penalty(const Matrix& basis) {
  const auto d = basis.cols();
  return (basis.transpose() * basis - Matrix::Identity(d, d)).squaredNorm();
}

Matrix orthonormalize_columns(const Matrix& m) {
  if (m.cols() > m.rows()) throw ModelError("cannot orthonormalize more columns than rows");
  Eigen::HouseholderQR<Matrix> qr(m);
  Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
  // Fix signs so the result does not depend on Householder conventions.
  const Matrix r = qr.matrixQR().topRows(m.cols()).triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    if (r(c, c) < 0.0) q.col(c) *= -1.0;
  return q;
}

MStepProblem::MStepProblem(const Dataset& data, std::span<const LatentPosterior> posteriors) {
  if (posteriors.size() != data.n_records()) throw ModelError("one posterior per record is required");
  kinds_.reserve(data.n_fields());
  for (const auto& f : data.fields()) kinds_.push_back(f.kind);
  by_field_.resize(data.n_fields());
  for (std::size_t i = 0; i < data.n_records(); ++i)
    for (std::size_t j = 0; j < data.n_fields(); ++j)
      if (!data.at(i, j).is_missing()) by_field_[j].push_back({i, data.at(i, j).value()});
  init(posteriors);
}

MStepProblem::MStepProblem(std::vector<FieldKind> kinds, std::vector<std::vector<Cell>> rows,
                           std::span<const LatentPosterior> posteriors)
    : kinds_(std::move(kinds)) {
  if (posteriors.size() != rows.size()) throw ModelError("one posterior per record is required");
  by_field_.resize(kinds_.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != kinds_.size()) throw ModelError("row length does not match field count");
    for (std::size_t j = 0; j < kinds_.size(); ++j)
      if (!rows[i][j].is_missing()) by_field_[j].push_back({i, rows[i][j].value()});
  }
  init(posteriors);
}

void MStepProblem::init(std::span<const LatentPosterior> posteriors) {
  for (const auto& post : posteriors) {
    if (post.samples.rows() < 1) throw ModelError("posterior has no samples");
    samples_.push_back(&post.samples);
    columns_.push_back(columns_of(post.samples));
  }
}

double MStepProblem::expected_loglik(const ModelParams& params, std::size_t threads) const {
  return value_and_gradient(params, 0.0, nullptr, threads);
}

double MStepProblem::value_and_gradient(const ModelParams& params, double penalty_weight, Vector* gradient,
                                        std::size_t threads) const {
  if (params.n_fields() != kinds_.size()) throw ModelError("model and problem disagree on field count");
  const std::size_t d = params.dim();
  const std::size_t m = params.n_binary();
  const auto& k = kernels::active();

  std::vector<FieldTerms> terms(kinds_.size());
  parallel_for(kinds_.size(), threads, [&](std::size_t j) {
    FieldTerms& t = terms[j];
    t.grad.assign(d + 2, 0.0);
    const auto jj = static_cast<Eigen::Index>(j);
    std::vector<double> coef(d);
    for (std::size_t c = 0; c < d; ++c) coef[c] = params.basis(jj, static_cast<Eigen::Index>(c));
    const bool binary = kinds_[j] == FieldKind::Binary;
    const double sd = binary ? 1.0 : params.sigma[static_cast<Eigen::Index>(j - m)];

    double value = 0.0, dresid = 0.0, sq = 0.0;
    std::vector<double> dot(d, 0.0), block_dot(d);
    for (const auto& obs : by_field_[j]) {
      const Matrix& s = *samples_[obs.record];
      const kernels::SampleBlock block{columns_[obs.record], static_cast<std::size_t>(s.rows()), coef,
                                       params.intercept[jj]};
      std::fill(block_dot.begin(), block_dot.end(), 0.0);
      kernels::BlockSums sums{0.0, 0.0, block_dot};
      if (binary) k.bernoulli_block(block, obs.value, sums);
      else k.gaussian_block(block, obs.value, sums);
      const double inv_s = 1.0 / static_cast<double>(s.rows());
      value += sums.value * inv_s;
      dresid += sums.resid * inv_s;
      for (std::size_t c = 0; c < d; ++c) dot[c] += block_dot[c] * inv_s;
    }
    if (binary) {
      t.value = value;
      for (std::size_t c = 0; c < d; ++c) t.grad[c] = dot[c];
      t.grad[d] = dresid;
    } else {
      sq = value;
      const double nobs = static_cast<double>(by_field_[j].size());
      const double inv_var = 1.0 / (sd * sd);
      t.value = -nobs * (kHalfLog2Pi + std::log(sd)) - 0.5 * sq * inv_var;
      for (std::size_t c = 0; c < d; ++c) t.grad[c] = dot[c] * inv_var;
      t.grad[d] = dresid * inv_var;
      t.grad[d + 1] = -nobs + sq * inv_var;
    }
  });

  double total = 0.0;
  for (const auto& t : terms) total += t.value;

  Matrix gram_excess;
  if (penalty_weight != 0.0) {
    gram_excess = params.basis.transpose() * params.basis - Matrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    total -= penalty_weight * gram_excess.squaredNorm();
  }

  if (gradient != nullptr) {
    const std::size_t w = d + 1;
    gradient->setZero(static_cast<Eigen::Index>(kinds_.size() * w + params.n_continuous()));
    for (std::size_t j = 0; j < kinds_.size(); ++j) {
      for (std::size_t c = 0; c <= d; ++c) (*gradient)[static_cast<Eigen::Index>(j * w + c)] = terms[j].grad[c];
      if (kinds_[j] == FieldKind::Continuous)
        (*gradient)[static_cast<Eigen::Index>(kinds_.size() * w + (j - m))] = terms[j].grad[d + 1];
    }
    if (penalty_weight != 0.0) {
      const Matrix dpen = 4.0 * params.basis * gram_excess;
      for (std::size_t j = 0; j < kinds_.size(); ++j)
        for (std::size_t c = 0; c < d; ++c)
          (*gradient)[static_cast<Eigen::Index>(j * w + c)] -=
              penalty_weight * dpen(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
    }
  }
  return total;
}

ObjectiveEstimate MStepProblem::estimate(const ModelParams& params, const LatentPrior& prior, double penalty_weight) const {
  const std::size_t n = samples_.size();
  const std::size_t d = params.dim();
  const std::size_t m = params.n_binary();
  const auto& k = kernels::active();

  // Per-record, per-sample-batch sums of the complete-data log density.
  std::vector<std::vector<double>> batch_sum(n);
  std::vector<std::vector<std::size_t>> bounds(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix& s = *samples_[i];
    const std::size_t S = static_cast<std::size_t>(s.rows());
    const std::size_t B = std::min<std::size_t>(20, S);
    bounds[i].resize(B + 1);
    for (std::size_t b = 0; b <= B; ++b) bounds[i][b] = b * S / B;
    batch_sum[i].assign(B, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = bounds[i][b]; r < bounds[i][b + 1]; ++r)
        batch_sum[i][b] += prior.log_density(s.row(static_cast<Eigen::Index>(r)).transpose());
  }

  std::vector<double> coef(d), dot(d);
  for (std::size_t j = 0; j < kinds_.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    for (std::size_t c = 0; c < d; ++c) coef[c] = params.basis(jj, static_cast<Eigen::Index>(c));
    const bool binary = kinds_[j] == FieldKind::Binary;
    const double sd = binary ? 1.0 : params.sigma[static_cast<Eigen::Index>(j - m)];
    for (const auto& obs : by_field_[j]) {
      const Matrix& s = *samples_[obs.record];
      const auto& bd = bounds[obs.record];
      for (std::size_t b = 0; b + 1 < bd.size(); ++b) {
        std::vector<const double*> cols;
        for (std::size_t c = 0; c < d; ++c) cols.push_back(s.col(static_cast<Eigen::Index>(c)).data() + bd[b]);
        const std::size_t len = bd[b + 1] - bd[b];
        const kernels::SampleBlock block{cols, len, coef, params.intercept[jj]};
        kernels::BlockSums sums{0.0, 0.0, dot};
        if (binary) {
          k.bernoulli_block(block, obs.value, sums);
          batch_sum[obs.record][b] += sums.value;
        } else {
          k.gaussian_block(block, obs.value, sums);
          batch_sum[obs.record][b] +=
              -static_cast<double>(len) * (kHalfLog2Pi + std::log(sd)) - 0.5 * sums.value / (sd * sd);
        }
      }
    }
  }

  ObjectiveEstimate est;
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& bd = bounds[i];
    const std::size_t B = batch_sum[i].size();
    double total = 0.0;
    for (double v : batch_sum[i]) total += v;
    const double mean = total / static_cast<double>(bd.back());
    est.value += mean;
    if (B > 1) {
      double ss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double bm = batch_sum[i][b] / static_cast<double>(bd[b + 1] - bd[b]);
        ss += (bm - mean) * (bm - mean);
      }
      var += ss / static_cast<double>(B * (B - 1));
    }
  }
  est.penalty = orthonormality_penalty(params.basis);
  est.value -= penalty_weight * est.penalty;
  est.std_error = std::sqrt(var);
  return est;
}

MStepResult m_step(const MStepProblem& problem, const ModelParams& current, const MStepConfig& config) {
  current.validate();
  MStepResult res{current};
  ModelParams trial = current;
  const double lambda = config.penalty_weight;

  Vector theta = pack(current);
  Vector grad;
  double f = problem.value_and_gradient(current, lambda, &grad, config.threads);
  res.objective_before = f;
  if (!std::isfinite(f)) throw ModelError("M-step objective is not finite at the entering parameters");

  const double gtol = config.tol * std::max<double>(1.0, static_cast<double>(problem.n_records()));
  std::deque<std::pair<Vector, Vector>> history;  // (s, y) with y = g_old - g_new

  auto evaluate = [&](const Vector& th, Vector* g) {
    unpack(th, trial);
    return problem.value_and_gradient(trial, lambda, g, config.threads);
  };

  for (std::size_t it = 0; it < config.max_iters; ++it) {
    if (grad.lpNorm<Eigen::Infinity>() <= gtol) {
      res.converged = true;
      break;
    }

    // Two-loop recursion: direction = H * grad, H approximating the inverse
    // Hessian of -objective.
    Vector dir = grad;
    std::vector<double> alpha(history.size());
    for (std::size_t h = history.size(); h-- > 0;) {
      const auto& [s, y] = history[h];
      alpha[h] = s.dot(dir) / y.dot(s);
      dir -= alpha[h] * y;
    }
    if (!history.empty()) {
      const auto& [s, y] = history.back();
      dir *= s.dot(y) / y.squaredNorm();
    } else {
      dir /= std::max(1.0, grad.norm());
    }
    for (std::size_t h = 0; h < history.size(); ++h) {
      const auto& [s, y] = history[h];
      const double beta = y.dot(dir) / y.dot(s);
      dir += (alpha[h] - beta) * s;
    }

    double slope = grad.dot(dir);
    if (!(slope > 0.0)) {
      history.clear();
      dir = grad / std::max(1.0, grad.norm());
      slope = grad.dot(dir);
    }

    bool accepted = false;
    Vector theta_new, grad_new;
    double f_new = f;
    for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
      double step = 1.0;
      for (std::size_t h = 0; h < kMaxHalvings; ++h) {
        theta_new = theta + step * dir;
        f_new = evaluate(theta_new, &grad_new);
        if (std::isfinite(f_new) && f_new >= f + kArmijoSlope * step * slope) {
          accepted = true;
          break;
        }
        step *= kBacktrack;
      }
      if (!accepted && !history.empty()) {
        // Retry once along the plain gradient.
        history.clear();
        dir = grad / std::max(1.0, grad.norm());
        slope = grad.dot(dir);
      } else {
        break;
      }
    }
    if (!accepted) {
      res.line_search_failed = true;
      break;
    }

    ++res.iterations;
    Vector s = theta_new - theta;
    Vector y = grad - grad_new;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      history.emplace_back(std::move(s), std::move(y));
      if (history.size() > config.memory) history.pop_front();
    }
    const double gain = f_new - f;
    theta = std::move(theta_new);
    grad = std::move(grad_new);
    f = f_new;
    if (gain <= 1e-14 * std::max(1.0, std::abs(f))) {
      res.converged = grad.lpNorm<Eigen::Infinity>() <= gtol;
      break;
    }
  }

  unpack(theta, res.params);
  res.objective_after = f;
  return res;
}

MStepResult m_step(const Dataset& data, std::span<const LatentPosterior> posteriors, const ModelParams& current,
                   const MStepConfig& config) {
  current.check_compatible(data);
  return m_step(MStepProblem(data, posteriors), current, config);
}

ModelParams initialize_params(const Dataset& data, std::size_t dim, std::uint64_t seed) {
  const std::size_t p = data.n_fields();
  if (dim < 1 || dim > p) throw ModelError("latent dimension must be between 1 and the number of fields");
  ModelParams params;
  params.field_names = data.field_names();
  for (const auto& f : data.fields()) params.field_kinds.push_back(f.kind);
  params.intercept = Vector::Zero(static_cast<Eigen::Index>(p));
  params.sigma = Vector::Ones(static_cast<Eigen::Index>(data.n_continuous()));

  for (std::size_t j = 0; j < p; ++j) {
    double sum = 0.0, sumsq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.n_records(); ++i) {
      const Cell& c = data.at(i, j);
      if (c.is_missing()) continue;
      sum += c.value();
      sumsq += c.value() * c.value();
      ++count;
    }
    if (count == 0) throw DataError("field '" + data.fields()[j].name + "' has no observed cells");
    const double mean = sum / static_cast<double>(count);
    const auto jj = static_cast<Eigen::Index>(j);
    if (data.fields()[j].kind == FieldKind::Binary) {
      double logit = 0.0;
      if (mean <= 0.0) logit = -4.0;
      else if (mean >= 1.0) logit = 4.0;
      else logit = std::clamp(std::log(mean / (1.0 - mean)), -4.0, 4.0);
      params.intercept[jj] = logit;
    } else {
      params.intercept[jj] = mean;
      const double var = count > 1 ? (sumsq - static_cast<double>(count) * mean * mean) / static_cast<double>(count - 1) : 0.0;
      params.sigma[static_cast<Eigen::Index>(j - data.n_binary())] = std::max(1e-3, std::sqrt(std::max(0.0, var)));
    }
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix raw(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(dim));
  for (Eigen::Index c = 0; c < raw.cols(); ++c)
    for (Eigen::Index r = 0; r < raw.rows(); ++r) raw(r, c) = 0.1 * normal(rng);
  params.basis = orthonormalize_columns(raw);
  return params;
}

void FitConfig::validate() const {
  if (dims < 1) throw ModelError("dims must be at least 1");
  if (max_em_iters < 1) throw ModelError("max_em_iters must be at least 1");
  if (!(em_tol > 0.0)) throw ModelError("em_tol must be positive");
  if (!(gamma > 0.0)) throw ModelError("gamma must be positive");
  if (!(penalty_weight >= 0.0)) throw ModelError("penalty_weight must be nonnegative (0 selects the default)");
  if (!(mstep_tol > 0.0)) throw ModelError("mstep_tol must be positive");
  sampler.validate();
  if (prior && prior->dim() != dims) throw ModelError("prior dimension does not match dims");
}

FitResult fit(const Dataset& data, const FitConfig& config) {
  using Clock = std::chrono::steady_clock;
  config.validate();
  if (config.dims > data.n_fields()) throw ModelError("dims exceeds the number of fields");

  const LatentPrior prior = config.prior ? *config.prior : LatentPrior::standard(config.dims);
  FitReport report;
  report.penalty_weight = config.penalty_weight > 0.0 ? config.penalty_weight : 10.0 * static_cast<double>(data.n_records());

  for (std::size_t i = 0; i < data.n_records(); ++i) {
    const auto row = data.row(i);
    if (std::all_of(row.begin(), row.end(), [](const Cell& c) { return c.is_missing(); })) {
      throw DataError("record '" + data.record_ids()[i] + "' has every field missing");
    }
  }
  for (std::size_t j = 0; j < data.n_fields(); ++j) {
    bool any = false, constant = true;
    double first = 0.0;
    for (std::size_t i = 0; i < data.n_records(); ++i) {
      const Cell& c = data.at(i, j);
      if (c.is_missing()) continue;
      if (!any) first = c.value();
      else if (c.value() != first) constant = false;
      any = true;
    }
    if (!any) throw DataError("field '" + data.fields()[j].name + "' has no observed cells");
    if (constant) report.constant_fields.push_back(data.fields()[j].name);
  }

  SamplerConfig sampler = config.sampler;
  sampler.seed = config.seed;
  sampler.threads = config.threads;
  MStepConfig mconf{report.penalty_weight, config.mstep_max_iters, config.mstep_tol, 8, config.threads};

  ModelParams params = initialize_params(data, config.dims, derive_seed(config.seed, 0));
  const double n = static_cast<double>(data.n_records());
  std::size_t calm = 0;

  for (std::size_t t = 1; t <= config.max_em_iters; ++t) {
    const auto start = Clock::now();
    const ModelParams entering = params;
    auto posts = e_step(params, prior, data, sampler);
    const MStepProblem problem(data, posts);
    const MStepResult ms = m_step(problem, params, mconf);
    params = ms.params;
    const ObjectiveEstimate est = problem.estimate(params, prior, report.penalty_weight);
    if (!std::isfinite(est.value)) {
      nlohmann::json dump = model_to_json(StoredModel{entering, prior, {{"iteration", t}}});
      throw DivergenceError("objective became non-finite at EM iteration " + std::to_string(t), dump.dump(2));
    }

    IterationRecord rec;
    rec.iteration = t;
    rec.objective = est.value;
    rec.mc_std_error = est.std_error;
    rec.penalty = est.penalty;
    double acc = 0.0;
    for (const auto& p : posts) acc += p.acceptance_rate;
    rec.acceptance_rate = acc / n;
    rec.mstep_iterations = ms.iterations;
    rec.mstep_gain = ms.objective_after - ms.objective_before;
    rec.mstep_warning = ms.line_search_failed;
    rec.wall_time_s = std::chrono::duration<double>(Clock::now() - start).count();
    if (ms.line_search_failed) {
      report.warnings.push_back("M-step line search failed at iteration " + std::to_string(t));
    }

    // A change the Monte-Carlo estimate cannot resolve counts as no change.
    if (!report.iterations.empty()) {
      const double change = std::abs(est.value - report.iterations.back().objective);
      calm = change < std::max(config.em_tol * n, est.std_error) ? calm + 1 : 0;
    }
    report.iterations.push_back(rec);
    report.iterations_run = t;
    if (calm >= 3) {
      report.converged = true;
      break;
    }
  }

  FitResult result{params, prior, Matrix(), {}, std::move(report)};
  result.posteriors = e_step(params, prior, data, sampler);
  result.latent_means = posterior_means(result.posteriors);
  result.report.final_penalty = orthonormality_penalty(params.basis);
  result.report.penalty_within_gamma = result.report.final_penalty < config.gamma;
  if (!result.report.penalty_within_gamma) {
    result.report.warnings.push_back("final orthonormality penalty exceeds gamma");
  }
  return result;
}

void write_report_jsonl(const FitReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelError("cannot write " + path.string());
  for (const auto& r : report.iterations) {
    nlohmann::json j;
    j["iteration"] = r.iteration;
    j["objective"] = r.objective;
    j["mc_std_error"] = r.mc_std_error;
    j["penalty"] = r.penalty;
    j["acceptance_rate"] = r.acceptance_rate;
    j["mstep_iterations"] = r.mstep_iterations;
    j["mstep_gain"] = r.mstep_gain;
    j["mstep_warning"] = r.mstep_warning;
    j["wall_time_s"] = r.wall_time_s;
    out << j.dump() << '\n';
  }
}

}  // namespace latentq
