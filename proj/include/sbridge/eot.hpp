#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <span>
#include <vector>

#include "sbridge/rng.hpp"
#include "sbridge/sde.hpp"

namespace sbridge::eot {

/// Weighted point cloud. Zero-weight atoms are dropped; weights are renormalized to sum exactly to 1.
class DiscreteMarginal {
 public:
  /// `support` is n x d. Throws ValidationError on negative weights, positive weights below 1e-300,
  /// shape mismatch, or a weight sum further than 1e-12 from one.
  DiscreteMarginal(Eigen::MatrixXd support, Eigen::VectorXd weights);
  /// Same as the constructor but accepts any positive total mass.
  static DiscreteMarginal from_unnormalized(Eigen::MatrixXd support, Eigen::VectorXd weights);

  Eigen::Index size() const { return weights_.size(); }
  Eigen::Index dim() const { return support_.cols(); }
  const Eigen::MatrixXd& support() const { return support_; }
  const Eigen::VectorXd& weights() const { return weights_; }
  Eigen::VectorXd log_weights() const { return weights_.array().log().matrix(); }

 private:
  Eigen::MatrixXd support_;
  Eigen::VectorXd weights_;
};

/// Schrodinger potentials (phi on the first marginal, psi on the second).
struct PotentialPair {
  Eigen::VectorXd phi;
  Eigen::VectorXd psi;
};

/// n x m nonnegative mass. Couplings built from potentials are not renormalized.
struct CouplingMatrix {
  Eigen::MatrixXd mass;

  double total() const { return mass.sum(); }
  Eigen::VectorXd first_marginal() const { return mass.rowwise().sum(); }
  Eigen::VectorXd second_marginal() const { return mass.colwise().sum().transpose(); }
};

struct GibbsMeasure {
  CouplingMatrix coupling;  ///< G_ij = e^{-c_ij} mu_i nu_j / Z
  double log_normalizer;    ///< log Z
};

/// log sum_i exp(v_i); -inf entries are allowed, an all -inf input returns -inf.
double logsumexp(std::span<const double> v);

GibbsMeasure gibbs_coupling(const Eigen::MatrixXd& cost, const DiscreteMarginal& mu, const DiscreteMarginal& nu);

/// psi_j = -log sum_i exp(phi_i - c_ij + log mu_i).
Eigen::VectorXd ipf_psi_step(const Eigen::VectorXd& phi, const Eigen::MatrixXd& cost, const DiscreteMarginal& mu);
/// phi_i = -log sum_j exp(psi_j - c_ij + log nu_j).
Eigen::VectorXd ipf_phi_step(const Eigen::VectorXd& psi, const Eigen::MatrixXd& cost, const DiscreteMarginal& nu);

/// Tilts log-weights by eps * sin(<a, x> + b) with a uniform on the unit sphere, b uniform on
/// [0, 2 pi), then renormalizes. The tilt has unit-bounded gradient, so the score error is at most eps.
DiscreteMarginal perturb_marginal(const DiscreteMarginal& m, double eps, Rng& rng);

/// pi_ij = exp(phi_i + psi_j - c_ij) mu_i nu_j.
CouplingMatrix coupling_from_potentials(const PotentialPair& pp, const Eigen::MatrixXd& cost,
                                        const DiscreteMarginal& mu, const DiscreteMarginal& nu);

struct Residuals {
  double r1;  ///< max_j |sum_i e^{phi_i + psi_j - c_ij} mu_i - 1|
  double r2;  ///< max_i |sum_j e^{phi_i + psi_j - c_ij} nu_j - 1|
  double max() const { return std::max(r1, r2); }
};

Residuals schrodinger_residuals(const PotentialPair& pp, const Eigen::MatrixXd& cost, const DiscreteMarginal& mu,
                                const DiscreteMarginal& nu);

/// KL(p | q) between probability vectors, summed as p log(p/q) - p + q so that every term is
/// nonnegative. Throws AbsoluteContinuityError if q_i = 0 < p_i, ValidationError if either input
/// is not a probability vector (mass within 1e-9 of one).
double kl(std::span<const double> p, std::span<const double> q);
double kl(const CouplingMatrix& p, const CouplingMatrix& q);
double kl(const DiscreteMarginal& p, const DiscreteMarginal& q);
double kl(const Eigen::VectorXd& p, const Eigen::VectorXd& q);

struct EotObjective {
  double transport;    ///< sum c_ij pi_ij
  double entropy_reg;  ///< KL(pi | mu x nu)
  double total() const { return transport + entropy_reg; }
};

EotObjective eot_objective(const CouplingMatrix& pi, const Eigen::MatrixXd& cost, const DiscreteMarginal& mu,
                           const DiscreteMarginal& nu);

/// Plain log-domain Sinkhorn, used as the reference solution.
struct SinkhornSolution {
  PotentialPair potentials;
  CouplingMatrix coupling;
  Residuals residuals;
  int iterations;
};

SinkhornSolution solve_exact(const DiscreteMarginal& mu, const DiscreteMarginal& nu, const Eigen::MatrixXd& cost,
                             int n_iters);

struct TraceRecord {
  int k;
  double kl_mu;      ///< KL(mu_2k | mu*)
  double kl_nu;      ///< KL(nu* | nu_{2k-1})
  double objective;  ///< KL(pi_2k | G)
  double r1;
  double r2;
  double step_kl;    ///< KL(pi_{2k-1} | pi_{2k-2}) + KL(pi_2k | pi_{2k-1})
};

struct ConvergenceTrace {
  std::vector<TraceRecord> records;
  double eps = 0.0;
  double kl_star_gibbs = 0.0;    ///< KL(pi* | G) from the reference solve
  double kl_initial_gibbs = 0.0; ///< KL(pi_0 | G)
  PotentialPair final_potentials;

  /// KL(pi* | G) - KL(pi_0 | G), the leading constant of the sublinear envelope.
  double envelope_constant() const { return kl_star_gibbs - kl_initial_gibbs; }
};

struct AipfOptions {
  /// Sinkhorn iterations for the reference pi*. Zero skips the reference solve.
  int oracle_iters = 2000;
  /// Constant added to the initial phi; traces are invariant to it.
  double initial_shift = 0.0;
};

/// Approximate IPF. Before each half-step the target marginal is replaced by a fresh
/// perturb_marginal(., eps) draw; eps = 0 is exact IPF.
///
/// Indexing: phi_0 = shift, psi_0 = psi_step(phi_0). Iteration k computes
/// phi_k = phi_step(psi_{k-1}, nu*_{k-1}) and psi_k = psi_step(phi_k, mu*_k), with
/// pi_{2k-1} = pi(phi_k, psi_{k-1}) on mu*_k x nu*_{k-1} and pi_2k = pi(phi_k, psi_k) on mu*_k x nu*_k.
ConvergenceTrace run_aipf(const DiscreteMarginal& mu_star, const DiscreteMarginal& nu_star, const Eigen::MatrixXd& cost,
                          double eps, int n_iters, Rng& rng, const AipfOptions& opts = {});

struct RateFit {
  double a;  ///< coefficient of 1/k
  double b;  ///< floor
};

struct TraceDiagnostics {
  std::vector<double> partial_sums;  ///< running sum of step_kl over k
  double bound;                      ///< KL(pi* | G) - KL(pi_0 | G)
  bool bound_check;                  ///< partial_sums[k] <= bound + slack * 2k * eps + 1e-8 for all k
  int monotonicity_violations;       ///< k with kl_mu[k+1] > kl_mu[k] + slack * eps + 1e-15
  double slack;
  RateFit fit;
};

/// Fits y_k ~ a / k + b, a, b >= 0, by least squares on the bounded relative residual
/// (m - y) / (m + y); y_k spans many decades and the transient is often faster than 1/k.
RateFit fit_rate(std::span<const double> y);

TraceDiagnostics diagnose_trace(const ConvergenceTrace& trace, double eps, double slack = 10.0);

/// CSV with header `k,kl_mu,kl_nu,objective,r1,r2`, 17 significant digits.
void write_trace_csv(std::ostream& os, const ConvergenceTrace& trace);
ConvergenceTrace read_trace_csv(std::istream& is);

/// Seeded test instance: mu on N(0, I_d) points, nu on N(1, I_d) points, weights uniform(0.5, 1.5)
/// normalized, cost from sde::eot_cost.
struct EotInstance {
  DiscreteMarginal mu;
  DiscreteMarginal nu;
  Eigen::MatrixXd cost;
};

EotInstance make_instance(int n, int m, int d, std::uint64_t seed, const sde::SdeSpec& spec, double eps);

}  // namespace sbridge::eot
