#include "latentq/analysis.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include "latentq/csv.hpp"

namespace latentq {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Modified Lentz evaluation of the incomplete beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

struct PairMoments {
  std::size_t n = 0;
  double mean_x = 0.0, mean_y = 0.0;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
};

PairMoments complete_pairs(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw AnalysisError("paired series differ in length");
  PairMoments pm;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || std::isnan(y[i])) continue;
    ++pm.n;
    pm.mean_x += x[i];
    pm.mean_y += y[i];
  }
  if (pm.n < 3) throw AnalysisError("fewer than 3 complete pairs");
  pm.mean_x /= static_cast<double>(pm.n);
  pm.mean_y /= static_cast<double>(pm.n);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::isnan(x[i]) || std::isnan(y[i])) continue;
    const double dx = x[i] - pm.mean_x, dy = y[i] - pm.mean_y;
    pm.sxx += dx * dx;
    pm.syy += dy * dy;
    pm.sxy += dx * dy;
  }
  return pm;
}

double correlation_p_value(double r, std::size_t n) {
  const double df = static_cast<double>(n - 2);
  const double one_minus = 1.0 - r * r;
  if (one_minus <= 0.0) return 0.0;
  return student_t_two_sided(r * std::sqrt(df / one_minus), df);
}

}  // namespace

Stars stars_for(double p_value) {
  if (p_value < 0.001) return Stars::Three;
  if (p_value < 0.01) return Stars::Two;
  if (p_value < 0.05) return Stars::One;
  return Stars::None;
}

std::string_view to_string(Stars stars) {
  switch (stars) {
    case Stars::Three: return "***";
    case Stars::Two: return "**";
    case Stars::One: return "*";
    case Stars::None: break;
  }
  return "";
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw AnalysisError("incomplete beta needs positive shape parameters");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw AnalysisError("degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

CorrelationResult pearson(std::span<const double> x, std::span<const double> y) {
  const PairMoments pm = complete_pairs(x, y);
  if (pm.sxx <= 0.0 || pm.syy <= 0.0) throw AnalysisError("a series has zero variance");
  CorrelationResult res;
  res.n_pairs = pm.n;
  res.r = std::clamp(pm.sxy / std::sqrt(pm.sxx * pm.syy), -1.0, 1.0);
  res.p_value = correlation_p_value(res.r, pm.n);
  res.stars = stars_for(res.p_value);
  return res;
}

RegressionResult ols_delta_regression(std::span<const double> dx, std::span<const double> dy) {
  const PairMoments pm = complete_pairs(dx, dy);
  if (pm.sxx <= 0.0) throw AnalysisError("predictor has zero variance");
  RegressionResult res;
  res.n = pm.n;
  res.slope = pm.sxy / pm.sxx;
  res.intercept = pm.mean_y - res.slope * pm.mean_x;
  res.r_squared = pm.syy > 0.0 ? std::clamp(pm.sxy * pm.sxy / (pm.sxx * pm.syy), 0.0, 1.0) : 1.0;
  const double df = static_cast<double>(pm.n - 2);
  const double sse = std::max(0.0, pm.syy - res.slope * pm.sxy);
  res.slope_std_error = std::sqrt(sse / df / pm.sxx);
  if (res.slope_std_error > 0.0) {
    res.p_value = student_t_two_sided(res.slope / res.slope_std_error, df);
  } else {
    res.p_value = res.slope != 0.0 ? 0.0 : 1.0;
  }
  return res;
}

MetricTable read_metrics_csv(const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> rows;
  try {
    rows = csv::read_file(path);
  } catch (const std::runtime_error& e) {
    throw AnalysisError(e.what());
  }
  if (rows.empty() || rows.front().size() < 2) throw AnalysisError(path.string() + ": expected header record_id,metric,...");
  MetricTable t;
  t.names.assign(rows.front().begin() + 1, rows.front().end());
  const std::size_t w = t.names.size();
  t.values.resize(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(w));
  std::unordered_set<std::string> seen;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != w + 1) throw AnalysisError(path.string() + ": row " + std::to_string(r) + " has the wrong width");
    if (!seen.insert(rows[r][0]).second) throw AnalysisError(path.string() + ": duplicate record id '" + rows[r][0] + "'");
    t.record_ids.push_back(rows[r][0]);
    for (std::size_t c = 0; c < w; ++c) {
      double v = kNaN;
      const std::string& text = rows[r][c + 1];
      if (!csv::is_missing_token(text) && (!csv::parse_double(text, v) || !std::isfinite(v))) {
        throw AnalysisError(path.string() + ": row " + std::to_string(r) + ", column '" + t.names[c] +
                            "': cannot parse '" + text + "'");
      }
      t.values(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c)) = v;
    }
  }
  return t;
}

AlignedTables align(const LatentTable& latents, const MetricTable& metrics) {
  std::unordered_map<std::string, Eigen::Index> metric_row;
  for (std::size_t i = 0; i < metrics.record_ids.size(); ++i) metric_row.emplace(metrics.record_ids[i], static_cast<Eigen::Index>(i));
  std::unordered_set<std::string> latent_ids(latents.record_ids.begin(), latents.record_ids.end());

  AlignedTables out;
  std::vector<Eigen::Index> lrows, mrows;
  for (std::size_t i = 0; i < latents.record_ids.size(); ++i) {
    auto it = metric_row.find(latents.record_ids[i]);
    if (it == metric_row.end()) {
      out.unmatched.push_back(latents.record_ids[i]);
      continue;
    }
    out.record_ids.push_back(latents.record_ids[i]);
    lrows.push_back(static_cast<Eigen::Index>(i));
    mrows.push_back(it->second);
  }
  for (const auto& id : metrics.record_ids)
    if (!latent_ids.count(id)) out.unmatched.push_back(id);
  if (out.record_ids.empty()) throw AnalysisError("latents and metrics share no record ids");

  out.latents.resize(static_cast<Eigen::Index>(lrows.size()), latents.values.cols());
  out.metrics.resize(static_cast<Eigen::Index>(mrows.size()), metrics.values.cols());
  for (std::size_t i = 0; i < lrows.size(); ++i) {
    out.latents.row(static_cast<Eigen::Index>(i)) = latents.values.row(lrows[i]);
    out.metrics.row(static_cast<Eigen::Index>(i)) = metrics.values.row(mrows[i]);
  }
  return out;
}

namespace {

template <typename Table>
Table difference_impl(const Table& follow_up, const Table& baseline, Eigen::Index width) {
  if (baseline.values.cols() != width) throw AnalysisError("baseline and follow-up tables differ in width");
  std::unordered_map<std::string, Eigen::Index> base_row;
  for (std::size_t i = 0; i < baseline.record_ids.size(); ++i) base_row.emplace(baseline.record_ids[i], static_cast<Eigen::Index>(i));
  Table out = follow_up;
  for (std::size_t i = 0; i < follow_up.record_ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    auto it = base_row.find(follow_up.record_ids[i]);
    if (it == base_row.end()) out.values.row(r).setConstant(kNaN);
    else out.values.row(r) = follow_up.values.row(r) - baseline.values.row(it->second);
  }
  return out;
}

std::vector<double> column(const Matrix& m, Eigen::Index c) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) v[static_cast<std::size_t>(r)] = m(r, c);
  return v;
}

}  // namespace

LatentTable difference(const LatentTable& follow_up, const LatentTable& baseline) {
  return difference_impl(follow_up, baseline, follow_up.values.cols());
}

MetricTable difference(const MetricTable& follow_up, const MetricTable& baseline) {
  if (follow_up.names != baseline.names) throw AnalysisError("baseline and follow-up metrics have different columns");
  return difference_impl(follow_up, baseline, follow_up.values.cols());
}

CorrelationTable correlation_table(const LatentTable& latents, const MetricTable& metrics) {
  const AlignedTables a = align(latents, metrics);
  CorrelationTable t;
  t.metrics = metrics.names;
  t.n_axes = static_cast<std::size_t>(a.latents.cols());
  t.unmatched = a.unmatched;
  for (std::size_t mi = 0; mi < t.metrics.size(); ++mi) {
    const auto y = column(a.metrics, static_cast<Eigen::Index>(mi));
    for (std::size_t ax = 0; ax < t.n_axes; ++ax) {
      const auto x = column(a.latents, static_cast<Eigen::Index>(ax));
      try {
        CorrelationResult r = pearson(x, y);
        r.metric = t.metrics[mi];
        r.axis = ax;
        t.cells.emplace_back(std::move(r));
      } catch (const AnalysisError& e) {
        t.cells.emplace_back(std::nullopt);
        t.warnings.push_back(t.metrics[mi] + " vs X" + std::to_string(ax + 1) + ": " + e.what());
      }
    }
  }
  return t;
}

RegressionTable regression_table(const LatentTable& latents, const MetricTable& metrics) {
  const AlignedTables a = align(latents, metrics);
  RegressionTable t;
  t.unmatched = a.unmatched;
  for (std::size_t mi = 0; mi < metrics.names.size(); ++mi) {
    const auto y = column(a.metrics, static_cast<Eigen::Index>(mi));
    for (Eigen::Index ax = 0; ax < a.latents.cols(); ++ax) {
      RegressionEntry e{metrics.names[mi], static_cast<std::size_t>(ax), std::nullopt};
      try {
        e.result = ols_delta_regression(column(a.latents, ax), y);
      } catch (const AnalysisError& err) {
        t.warnings.push_back(metrics.names[mi] + " vs X" + std::to_string(ax + 1) + ": " + err.what());
      }
      t.entries.push_back(std::move(e));
    }
  }
  return t;
}

void write_correlation_table_csv(const CorrelationTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AnalysisError("cannot write " + path.string());
  out << "metric";
  for (std::size_t ax = 0; ax < table.n_axes; ++ax) out << ",X" << (ax + 1);
  out << '\n';
  for (std::size_t mi = 0; mi < table.metrics.size(); ++mi) {
    out << csv::escape(table.metrics[mi]);
    for (std::size_t ax = 0; ax < table.n_axes; ++ax) {
      const auto& cell = table.at(mi, ax);
      out << ',';
      if (cell) out << csv::format_fixed(cell->r, 3) << to_string(cell->stars);
      else out << "NA";
    }
    out << '\n';
  }
}

void write_correlation_detail_csv(const CorrelationTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AnalysisError("cannot write " + path.string());
  out << "metric,axis,r,p_value,n_pairs,stars\n";
  for (std::size_t mi = 0; mi < table.metrics.size(); ++mi) {
    for (std::size_t ax = 0; ax < table.n_axes; ++ax) {
      const auto& cell = table.at(mi, ax);
      out << csv::escape(table.metrics[mi]) << ",X" << (ax + 1) << ',';
      if (cell) {
        out << csv::format_double(cell->r) << ',' << csv::format_double(cell->p_value) << ',' << cell->n_pairs << ','
            << to_string(cell->stars) << '\n';
      } else {
        out << "NA,NA,0,\n";
      }
    }
  }
}

void write_regressions_json(const RegressionTable& table, const std::filesystem::path& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : table.entries) {
    nlohmann::json j{{"metric", e.metric}, {"axis", "X" + std::to_string(e.axis + 1)}};
    if (e.result) {
      j["slope"] = e.result->slope;
      j["intercept"] = e.result->intercept;
      j["slope_std_error"] = e.result->slope_std_error;
      j["p_value"] = e.result->p_value;
      j["r_squared"] = e.result->r_squared;
      j["n"] = e.result->n;
    } else {
      j["slope"] = nullptr;
    }
    arr.push_back(std::move(j));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw AnalysisError("cannot write " + path.string());
  out << arr.dump(2) << '\n';
}

}  // namespace latentq
