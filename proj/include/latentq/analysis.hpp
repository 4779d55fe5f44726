#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentq/inference.hpp"

namespace latentq {

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Significance marks: * p<0.05, ** p<0.01, *** p<0.001.
enum class Stars { None, One, Two, Three };

Stars stars_for(double p_value);
std::string_view to_string(Stars stars);

struct CorrelationResult {
  std::string metric;
  std::size_t axis = 0;  ///< 0-based latent coordinate
  double r = 0.0;
  double p_value = 1.0;  ///< two-sided, t distribution with n-2 degrees of freedom
  std::size_t n_pairs = 0;
  Stars stars = Stars::None;
};

struct RegressionResult {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_std_error = 0.0;
  double p_value = 1.0;  ///< two-sided t test on the slope
  double r_squared = 0.0;
  std::size_t n = 0;
};

/// Regularized incomplete beta I_x(a, b), by continued fraction.
double incomplete_beta(double a, double b, double x);

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom.
double student_t_two_sided(double t, double df);

/// Pearson correlation over complete pairs; NaN marks a missing value.
/// Throws AnalysisError with fewer than 3 complete pairs or a constant series.
CorrelationResult pearson(std::span<const double> x, std::span<const double> y);

/// Least-squares fit dy = slope * dx + intercept over complete pairs.
RegressionResult ols_delta_regression(std::span<const double> dx, std::span<const double> dy);

/// Named numeric columns keyed by record id; NaN where missing.
struct MetricTable {
  std::vector<std::string> record_ids;
  std::vector<std::string> names;
  Matrix values;  ///< records x metrics
};

MetricTable read_metrics_csv(const std::filesystem::path& path);

/// Rows of `b` reordered to follow the record ids of `a`; ids present in only
/// one table are listed in `unmatched` and dropped.
struct AlignedTables {
  std::vector<std::string> record_ids;
  Matrix latents;
  Matrix metrics;
  std::vector<std::string> unmatched;
};

AlignedTables align(const LatentTable& latents, const MetricTable& metrics);

/// Element-wise follow-up minus baseline, matched by record id (records
/// absent from the baseline become NaN).
LatentTable difference(const LatentTable& follow_up, const LatentTable& baseline);
MetricTable difference(const MetricTable& follow_up, const MetricTable& baseline);

struct CorrelationTable {
  std::vector<std::string> metrics;
  std::size_t n_axes = 0;
  /// metrics.size() x n_axes cells, metric-major; empty where a comparison
  /// lacked enough complete pairs or variance.
  std::vector<std::optional<CorrelationResult>> cells;
  std::vector<std::string> unmatched;
  std::vector<std::string> warnings;

  const std::optional<CorrelationResult>& at(std::size_t metric, std::size_t axis) const {
    return cells[metric * n_axes + axis];
  }
};

/// One Pearson correlation per (metric, latent axis).
CorrelationTable correlation_table(const LatentTable& latents, const MetricTable& metrics);

struct RegressionEntry {
  std::string metric;
  std::size_t axis = 0;
  std::optional<RegressionResult> result;
};

struct RegressionTable {
  std::vector<RegressionEntry> entries;
  std::vector<std::string> unmatched;
  std::vector<std::string> warnings;
};

/// One regression of each metric on each latent axis (metric = slope * axis + intercept).
RegressionTable regression_table(const LatentTable& latents, const MetricTable& metrics);

/// metric,X1,X2,... with cells like "-0.321**", or NA.
void write_correlation_table_csv(const CorrelationTable& table, const std::filesystem::path& path);

/// metric,axis,r,p_value,n_pairs,stars, full precision.
void write_correlation_detail_csv(const CorrelationTable& table, const std::filesystem::path& path);

void write_regressions_json(const RegressionTable& table, const std::filesystem::path& path);

}  // namespace latentq
