#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace sbridge::metrics {

/// Linear interpolation between order statistics of `sorted` at position (n - 1) q.
double empirical_quantile(const std::vector<double>& sorted, double q);

/// Per-entry quantile of an ensemble of K x L samples.
Eigen::MatrixXd sample_quantile(const std::vector<Eigen::MatrixXd>& samples, double q);
inline Eigen::MatrixXd sample_median(const std::vector<Eigen::MatrixXd>& samples) { return sample_quantile(samples, 0.5); }

struct PointMetrics {
  double rmse;
  double mae;
};

/// Over entries with m_target = 1. Throws ValidationError on an empty mask.
PointMetrics rmse_mae(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& m_target);

/// Levels 0.05, 0.10, ..., 0.95.
std::vector<double> crps_levels();

struct CrpsValue {
  double normalized;    ///< divided by mean |truth| over targets (equals unnormalized on fallback)
  double unnormalized;
  bool fallback;        ///< mean |truth| was zero
};

/// Quantile-loss CRPS: mean over levels and target entries of 2 (y - yq)(q - 1[y < yq]).
/// Needs at least two samples.
CrpsValue crps(const std::vector<Eigen::MatrixXd>& samples, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& m_target);

struct MetricReport {
  double rmse = 0.0;
  double mae = 0.0;
  double crps = 0.0;
  double crps_unnormalized = 0.0;
  bool crps_fallback = false;
  long n_target_entries = 0;
  int n_samples = 0;

  static const char* convention();
  std::string to_json() const;
};

/// Pools target entries across windows: samples[w] is the ensemble for window w. The point
/// estimate is the per-entry sample median.
MetricReport evaluate(const std::vector<std::vector<Eigen::MatrixXd>>& samples, const std::vector<Eigen::MatrixXd>& truth,
                      const std::vector<Eigen::MatrixXd>& m_target);

}  // namespace sbridge::metrics
