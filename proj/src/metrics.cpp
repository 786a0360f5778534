#include "sbridge/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "sbridge/errors.hpp"

namespace sbridge::metrics {
namespace {

void check_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* where) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError(std::string(where) + ": shapes differ");
}

struct Sums {
  double sq = 0.0, abs = 0.0, quantile_loss = 0.0, abs_truth = 0.0;
  long n = 0;
};

// Accumulates one window's target entries into `s`.
void accumulate(const std::vector<Eigen::MatrixXd>& samples, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& m_target,
                Sums& s, bool with_crps) {
  const std::vector<double> levels = crps_levels();
  std::vector<double> column(samples.size());
  for (Eigen::Index l = 0; l < truth.cols(); ++l) {
    for (Eigen::Index k = 0; k < truth.rows(); ++k) {
      if (m_target(k, l) == 0.0) continue;
      for (std::size_t i = 0; i < samples.size(); ++i) column[i] = samples[i](k, l);
      std::stable_sort(column.begin(), column.end());
      const double y = truth(k, l);
      const double med = empirical_quantile(column, 0.5);
      s.sq += (med - y) * (med - y);
      s.abs += std::abs(med - y);
      s.abs_truth += std::abs(y);
      s.n += 1;
      if (with_crps) {
        double loss = 0.0;
        for (double q : levels) {
          const double yq = empirical_quantile(column, q);
          loss += 2.0 * (y - yq) * (q - (y < yq ? 1.0 : 0.0));
        }
        s.quantile_loss += loss / static_cast<double>(levels.size());
      }
    }
  }
}

void check_ensemble(const std::vector<Eigen::MatrixXd>& samples, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& m_target) {
  check_same_shape(truth, m_target, "metrics");
  if (samples.empty()) throw ValidationError("metrics: empty ensemble");
  for (const auto& s : samples) check_same_shape(s, truth, "metrics");
}

}  // namespace

double empirical_quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ValidationError("empirical_quantile: no samples");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("empirical_quantile: q must be in [0, 1]");
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  return frac == 0.0 ? sorted[lo] : sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Eigen::MatrixXd sample_quantile(const std::vector<Eigen::MatrixXd>& samples, double q) {
  if (samples.empty()) throw ValidationError("sample_quantile: no samples");
  const Eigen::Index K = samples.front().rows(), L = samples.front().cols();
  Eigen::MatrixXd out(K, L);
  std::vector<double> column(samples.size());
  for (Eigen::Index l = 0; l < L; ++l) {
    for (Eigen::Index k = 0; k < K; ++k) {
      for (std::size_t i = 0; i < samples.size(); ++i) column[i] = samples[i](k, l);
      std::stable_sort(column.begin(), column.end());
      out(k, l) = empirical_quantile(column, q);
    }
  }
  return out;
}

PointMetrics rmse_mae(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& m_target) {
  check_same_shape(estimate, truth, "rmse_mae");
  check_same_shape(truth, m_target, "rmse_mae");
  Sums s;
  accumulate({estimate}, truth, m_target, s, false);
  if (s.n == 0) throw ValidationError("rmse_mae: empty target mask");
  return {std::sqrt(s.sq / static_cast<double>(s.n)), s.abs / static_cast<double>(s.n)};
}

std::vector<double> crps_levels() {
  std::vector<double> q;
  for (int i = 1; i <= 19; ++i) q.push_back(0.05 * i);
  return q;
}

CrpsValue crps(const std::vector<Eigen::MatrixXd>& samples, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& m_target) {
  check_ensemble(samples, truth, m_target);
  if (samples.size() < 2) throw ValidationError("crps: needs at least two samples");
  Sums s;
  accumulate(samples, truth, m_target, s, true);
  if (s.n == 0) throw ValidationError("crps: empty target mask");
  const double raw = s.quantile_loss / static_cast<double>(s.n);
  const double scale = s.abs_truth / static_cast<double>(s.n);
  if (scale == 0.0) return {raw, raw, true};
  return {raw / scale, raw, false};
}

const char* MetricReport::convention() {
  return "point=per-entry sample median; crps=mean quantile loss 2(y-q_hat)(q-1[y<q_hat]) over levels 0.05..0.95, "
         "linear-interpolated empirical quantiles, normalized by mean |truth| over targets";
}

std::string MetricReport::to_json() const {
  const nlohmann::json j = {{"rmse", rmse},
                            {"mae", mae},
                            {"crps", crps},
                            {"crps_unnormalized", crps_unnormalized},
                            {"crps_fallback_unnormalized", crps_fallback},
                            {"n_target_entries", n_target_entries},
                            {"n_samples", n_samples},
                            {"convention", convention()}};
  return j.dump(2);
}

MetricReport evaluate(const std::vector<std::vector<Eigen::MatrixXd>>& samples, const std::vector<Eigen::MatrixXd>& truth,
                      const std::vector<Eigen::MatrixXd>& m_target) {
  if (samples.size() != truth.size() || truth.size() != m_target.size()) throw ValidationError("evaluate: window counts differ");
  if (samples.empty()) throw ValidationError("evaluate: no windows");
  Sums s;
  const std::size_t n_samples = samples.front().size();
  if (n_samples < 2) throw ValidationError("evaluate: needs at least two samples per window");
  for (std::size_t w = 0; w < samples.size(); ++w) {
    check_ensemble(samples[w], truth[w], m_target[w]);
    if (samples[w].size() != n_samples) throw ValidationError("evaluate: ensembles differ in size");
    accumulate(samples[w], truth[w], m_target[w], s, true);
  }
  if (s.n == 0) throw ValidationError("evaluate: no target entries");
  MetricReport r;
  const double n = static_cast<double>(s.n);
  r.rmse = std::sqrt(s.sq / n);
  r.mae = s.abs / n;
  r.crps_unnormalized = s.quantile_loss / n;
  r.crps_fallback = s.abs_truth == 0.0;
  r.crps = r.crps_fallback ? r.crps_unnormalized : r.crps_unnormalized / (s.abs_truth / n);
  r.n_target_entries = s.n;
  r.n_samples = static_cast<int>(n_samples);
  return r;
}

}  // namespace sbridge::metrics
