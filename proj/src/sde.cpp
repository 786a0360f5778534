#include "sbridge/sde.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <string>
#include <thread>

#include "sbridge/errors.hpp"

namespace sbridge::sde {

SdeSpec SdeSpec::ve(double sigma_min, double sigma_max, int n_steps, double horizon) {
  SdeSpec s;
  s.kind = SdeKind::kVE;
  s.sigma_min = sigma_min;
  s.sigma_max = sigma_max;
  s.n_steps = n_steps;
  s.horizon = horizon;
  s.validate();
  return s;
}

SdeSpec SdeSpec::vp(double beta_min, double beta_max, int n_steps, double horizon) {
  SdeSpec s;
  s.kind = SdeKind::kVP;
  s.beta_min = beta_min;
  s.beta_max = beta_max;
  s.n_steps = n_steps;
  s.horizon = horizon;
  s.validate();
  return s;
}

void SdeSpec::validate() const {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ValidationError("sde: horizon must be positive");
  if (n_steps < 1) throw ValidationError("sde: n_steps must be >= 1");
  if (kind == SdeKind::kVE) {
    if (!(sigma_min > 0.0) || !(sigma_min < sigma_max) || !std::isfinite(sigma_max))
      throw ValidationError("sde: VE requires 0 < sigma_min < sigma_max");
  } else {
    if (!(beta_min >= 0.0) || !(beta_min <= beta_max) || !std::isfinite(beta_max))
      throw ValidationError("sde: VP requires 0 <= beta_min <= beta_max");
  }
  if (!(ou_rate > 0.0)) throw ValidationError("sde: ou_rate must be positive");
}

namespace {

void check_time(const SdeSpec& spec, double t) {
  if (!(t >= 0.0 && t <= spec.horizon)) {
    throw DomainError("sde: time " + std::to_string(t) + " outside [0, " + std::to_string(spec.horizon) + "]");
  }
}

double vp_beta(const SdeSpec& spec, double t) {
  return spec.beta_min + (t / spec.horizon) * (spec.beta_max - spec.beta_min);
}

}  // namespace

double ve_sigma(const SdeSpec& spec, double t) {
  return spec.sigma_min * std::pow(spec.sigma_max / spec.sigma_min, t / spec.horizon);
}

double vp_beta_integral(const SdeSpec& spec, double s, double t) {
  const double slope = (spec.beta_max - spec.beta_min) / spec.horizon;
  return spec.beta_min * (t - s) + 0.5 * slope * (t * t - s * s);
}

double diffusion_coefficient(const SdeSpec& spec, double t) {
  check_time(spec, t);
  if (spec.kind == SdeKind::kVE) {
    const double log_ratio = std::log(spec.sigma_max / spec.sigma_min);
    return ve_sigma(spec, t) * std::sqrt(2.0 * log_ratio / spec.horizon);
  }
  return std::sqrt(vp_beta(spec, t));
}

double drift_rate(const SdeSpec& spec, double t) {
  check_time(spec, t);
  return spec.kind == SdeKind::kVE ? 0.0 : -0.5 * vp_beta(spec, t);
}

double prior_std(const SdeSpec& spec) { return spec.kind == SdeKind::kVE ? spec.sigma_max : 1.0; }

GaussianKernel kernel_constant_diffusion(const SdeSpec& spec, double eps, double s, double t,
                                         const Eigen::VectorXd& x_s) {
  if (!(eps > 0.0)) throw DomainError("kernel: eps must be positive");
  if (!(s < t)) throw DomainError("kernel: requires s < t");
  const double dt = t - s;
  GaussianKernel k;
  if (spec.kind == SdeKind::kVE) {
    k.mean = x_s;
    k.var = Eigen::VectorXd::Constant(x_s.size(), 2.0 * eps * dt);
  } else {
    const double gamma = spec.ou_rate;
    k.mean = std::exp(-gamma * dt) * x_s;
    k.var = Eigen::VectorXd::Constant(x_s.size(), -eps * std::expm1(-2.0 * gamma * dt));
  }
  return k;
}

std::pair<double, double> schedule_moments(const SdeSpec& spec, double s, double t) {
  if (!(s < t)) throw DomainError("kernel: requires s < t");
  check_time(spec, s);
  check_time(spec, t);
  if (spec.kind == SdeKind::kVE) {
    const double ss = ve_sigma(spec, s), st = ve_sigma(spec, t);
    return {1.0, st * st - ss * ss};
  }
  const double b = vp_beta_integral(spec, s, t);
  return {std::exp(-0.5 * b), -std::expm1(-b)};
}

GaussianKernel kernel_schedule(const SdeSpec& spec, double s, double t, const Eigen::VectorXd& x_s) {
  const auto [factor, var] = schedule_moments(spec, s, t);
  return {factor * x_s, Eigen::VectorXd::Constant(x_s.size(), var)};
}

PathSample PathBatch::path(int p) const {
  PathSample out;
  out.times = times;
  const auto d = states.empty() ? 0 : states.front().rows();
  out.states.resize(static_cast<Eigen::Index>(states.size()), d);
  for (std::size_t i = 0; i < states.size(); ++i) out.states.row(static_cast<Eigen::Index>(i)) = states[i].col(p).transpose();
  return out;
}

void parallel_chunks(int n, int chunk, int threads, const std::function<void(int, int)>& fn) {
  if (n <= 0) return;
  chunk = std::max(chunk, 1);
  const int n_chunks = (n + chunk - 1) / chunk;
  const int workers = std::clamp(threads, 1, n_chunks);
  if (workers == 1) {
    for (int c = 0; c < n_chunks; ++c) fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int c = next++; c < n_chunks && !failed; c = next++) {
        try {
          fn(c * chunk, std::min(n, (c + 1) * chunk));
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

enum class Direction { kForward, kBackward };

PathBatch integrate(const SdeSpec& spec, const Eigen::MatrixXd& start, const BatchDriftFn& policy,
                    std::span<Rng> rngs, const SamplerOptions& opts, Direction dir) {
  spec.validate();
  const int n = spec.n_steps;
  const auto d = start.rows();
  const int paths = static_cast<int>(start.cols());
  if (static_cast<int>(rngs.size()) != paths) throw ValidationError("sampler: one rng stream per path required");
  if (!start.allFinite()) throw DivergenceError("sampler: non-finite initial state", 0);

  PathBatch out;
  out.times.resize(n + 1);
  for (int i = 0; i <= n; ++i) out.times[i] = spec.time_at(i);
  out.states.assign(static_cast<std::size_t>(n + 1), Eigen::MatrixXd(d, paths));
  const int first = dir == Direction::kForward ? 0 : n;
  out.states[static_cast<std::size_t>(first)] = start;

  const double dt = spec.step();
  const double sqrt_dt = std::sqrt(dt);

  parallel_chunks(paths, opts.chunk, opts.threads, [&](int begin, int end) {
    const int width = end - begin;
    Eigen::MatrixXd x = start.middleCols(begin, width);
    Eigen::MatrixXd noise(d, width);
    for (int step = 0; step < n; ++step) {
      // Forward moves t_i -> t_{i+1}; backward moves t_i -> t_{i-1}, coefficients taken at t_i.
      const int i = dir == Direction::kForward ? step : n - step;
      const int next = dir == Direction::kForward ? i + 1 : i - 1;
      const double t = out.times[i];
      const double g = diffusion_coefficient(spec, t);
      const double a = drift_rate(spec, t);
      for (int c = 0; c < width; ++c) {
        Rng& rng = rngs[static_cast<std::size_t>(begin + c)];
        for (Eigen::Index r = 0; r < d; ++r) noise(r, c) = rng.normal();
      }
      Eigen::MatrixXd drift = a * x;
      if (policy) {
        const Eigen::MatrixXd z = policy(x, t);
        if (z.rows() != d || z.cols() != width) throw ValidationError("sampler: policy output has wrong shape");
        if (dir == Direction::kForward) {
          drift += g * z;
        } else {
          drift -= g * z;
        }
      }
      if (dir == Direction::kForward) {
        x += drift * dt + (g * sqrt_dt) * noise;
      } else {
        x += -drift * dt + (g * sqrt_dt) * noise;
      }
      if (!x.allFinite()) throw DivergenceError("sampler: non-finite state", step + 1);
      out.states[static_cast<std::size_t>(next)].middleCols(begin, width) = x;
    }
  });
  return out;
}

BatchDriftFn lift(const DriftFn& policy) {
  if (!policy) return {};
  return [policy](const Eigen::MatrixXd& x, double t) {
    Eigen::MatrixXd z(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const Eigen::VectorXd col = x.col(c);
      z.col(c) = policy(col, t);
    }
    return z;
  };
}

}  // namespace

PathBatch em_forward_batch(const SdeSpec& spec, const Eigen::MatrixXd& x0, const BatchDriftFn& policy,
                           std::span<Rng> rngs, const SamplerOptions& opts) {
  return integrate(spec, x0, policy, rngs, opts, Direction::kForward);
}

PathBatch em_backward_batch(const SdeSpec& spec, const Eigen::MatrixXd& xT, const BatchDriftFn& policy,
                            std::span<Rng> rngs, const SamplerOptions& opts) {
  return integrate(spec, xT, policy, rngs, opts, Direction::kBackward);
}

PathSample em_forward(const SdeSpec& spec, const Eigen::VectorXd& x0, const DriftFn& policy, Rng& rng) {
  return em_forward_batch(spec, x0, lift(policy), std::span<Rng>(&rng, 1)).path(0);
}

PathSample em_backward(const SdeSpec& spec, const Eigen::VectorXd& xT, const DriftFn& policy, Rng& rng) {
  return em_backward_batch(spec, xT, lift(policy), std::span<Rng>(&rng, 1)).path(0);
}

Eigen::MatrixXd eot_cost(const SdeSpec& spec, double eps, const Eigen::MatrixXd& xs, const Eigen::MatrixXd& ys) {
  if (!(eps > 0.0)) throw DomainError("eot_cost: eps must be positive");
  if (xs.cols() != ys.cols()) throw ValidationError("eot_cost: points must share dimension");
  spec.validate();
  const auto d = static_cast<double>(xs.cols());
  const double horizon = spec.horizon;
  double mean_factor = 1.0;
  double var = 2.0 * eps * horizon;
  if (spec.kind == SdeKind::kVP) {
    mean_factor = std::exp(-spec.ou_rate * horizon);
    var = -eps * std::expm1(-2.0 * spec.ou_rate * horizon);
  }
  const double log_norm = 0.5 * d * std::log(2.0 * std::numbers::pi * var);
  Eigen::MatrixXd cost(xs.rows(), ys.rows());
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    const Eigen::RowVectorXd mx = mean_factor * xs.row(i);
    for (Eigen::Index j = 0; j < ys.rows(); ++j) {
      cost(i, j) = (ys.row(j) - mx).squaredNorm() / (2.0 * var) + log_norm;
    }
  }
  return cost;
}

}  // namespace sbridge::sde
