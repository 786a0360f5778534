#pragma once

#include <Eigen/Dense>
#include <functional>
#include <span>
#include <vector>

#include "sbridge/rng.hpp"

namespace sbridge::sde {

enum class SdeKind { kVE, kVP };

/// Reference diffusion: variance exploding (f = 0) or variance preserving (f = -beta(t) x / 2).
struct SdeSpec {
  SdeKind kind = SdeKind::kVE;
  double sigma_min = 0.001;
  double sigma_max = 20.0;
  double beta_min = 0.1;
  double beta_max = 20.0;
  double horizon = 1.0;
  int n_steps = 100;
  /// Mean-reversion rate gamma of the constant-diffusion OU kernel (VP); unused by the schedule form.
  double ou_rate = 1.0;

  static SdeSpec ve(double sigma_min, double sigma_max, int n_steps, double horizon = 1.0);
  static SdeSpec vp(double beta_min, double beta_max, int n_steps, double horizon = 1.0);

  /// Throws ValidationError when an invariant is violated.
  void validate() const;
  double step() const { return horizon / n_steps; }
  double time_at(int i) const { return horizon * static_cast<double>(i) / n_steps; }
};

/// g(t).
double diffusion_coefficient(const SdeSpec& spec, double t);
/// a(t) with f(x, t) = a(t) x. Zero for VE.
double drift_rate(const SdeSpec& spec, double t);
/// VE marginal scale sigma(t) = sigma_min (sigma_max / sigma_min)^(t / T).
double ve_sigma(const SdeSpec& spec, double t);
/// Integral of beta over [s, t] (VP).
double vp_beta_integral(const SdeSpec& spec, double s, double t);

/// Gaussian transition kernel N(mean, diag(var)).
struct GaussianKernel {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
};

/// Constant-diffusion kernel of dx = f dx + sqrt(2 eps) dw with g = 1, used for EOT costs.
/// VE: N(x_s, 2 eps (t - s)); VP: N(e^{-gamma (t - s)} x_s, eps (1 - e^{-2 gamma (t - s)})).
GaussianKernel kernel_constant_diffusion(const SdeSpec& spec, double eps, double s, double t,
                                         const Eigen::VectorXd& x_s);

/// Kernel of the scheduled SDE dx = f dt + g(t) dw.
/// VE: N(x_s, sigma^2(t) - sigma^2(s)); VP: N(e^{-B/2} x_s, 1 - e^{-B}) with B = int_s^t beta.
GaussianKernel kernel_schedule(const SdeSpec& spec, double s, double t, const Eigen::VectorXd& x_s);

/// Scalar (mean factor, variance) of kernel_schedule; the mean is factor * x_s.
std::pair<double, double> schedule_moments(const SdeSpec& spec, double s, double t);

/// Prior at the horizon: N(0, sigma_max^2 I) for VE and N(0, I) for VP.
double prior_std(const SdeSpec& spec);

/// Trajectory on the uniform grid t_0 = 0 < ... < t_N = T.
struct PathSample {
  Eigen::VectorXd times;
  Eigen::MatrixXd states;  ///< (n_steps + 1) x d, row i is x(t_i)
};

/// Ensemble of trajectories stored per time index: states[i] is d x P.
struct PathBatch {
  Eigen::VectorXd times;
  std::vector<Eigen::MatrixXd> states;

  int paths() const { return states.empty() ? 0 : static_cast<int>(states.front().cols()); }
  PathSample path(int p) const;
};

/// Policy drift z(x, t) for a single point.
using DriftFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, double t)>;
/// Policy drift evaluated on a block of columns (d x P -> d x P).
using BatchDriftFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, double t)>;

struct SamplerOptions {
  int threads = 1;
  /// Columns per work unit; fixed so results do not depend on the thread count.
  int chunk = 64;
};

/// Euler-Maruyama for dx = [f + g z] dt + g dw, t = 0 -> T. Path p draws its noise from rngs[p].
/// An empty policy means z = 0. Throws DivergenceError on the first non-finite state.
PathBatch em_forward_batch(const SdeSpec& spec, const Eigen::MatrixXd& x0, const BatchDriftFn& policy,
                           std::span<Rng> rngs, const SamplerOptions& opts = {});

/// Euler-Maruyama for dx = [f - g z] dt + g dw-bar, t = T -> 0:
/// x_{i-1} = x_i - (f(x_i, t_i) - g(t_i) z(x_i, t_i)) dt + g(t_i) sqrt(dt) xi.
/// The returned batch is indexed by forward time (states[0] is the terminal x_0).
PathBatch em_backward_batch(const SdeSpec& spec, const Eigen::MatrixXd& xT, const BatchDriftFn& policy,
                            std::span<Rng> rngs, const SamplerOptions& opts = {});

PathSample em_forward(const SdeSpec& spec, const Eigen::VectorXd& x0, const DriftFn& policy, Rng& rng);
PathSample em_backward(const SdeSpec& spec, const Eigen::VectorXd& xT, const DriftFn& policy, Rng& rng);

/// c_eps(x, y) = -log Ker_eps(0, x, T, y) for every pair of rows of xs (n x d) and ys (m x d).
Eigen::MatrixXd eot_cost(const SdeSpec& spec, double eps, const Eigen::MatrixXd& xs, const Eigen::MatrixXd& ys);

/// Runs fn(chunk_begin, chunk_end) over [0, n) in fixed-size chunks on up to `threads` threads.
void parallel_chunks(int n, int chunk, int threads, const std::function<void(int, int)>& fn);

}  // namespace sbridge::sde
