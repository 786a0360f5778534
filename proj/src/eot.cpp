#include "sbridge/eot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

#include "sbridge/errors.hpp"

namespace sbridge::eot {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMinWeight = 1e-300;

void check_shapes(const Eigen::MatrixXd& cost, Eigen::Index n, Eigen::Index m, const char* where) {
  if (cost.rows() != n || cost.cols() != m) {
    throw ValidationError(std::string(where) + ": cost is " + std::to_string(cost.rows()) + "x" +
                          std::to_string(cost.cols()) + ", expected " + std::to_string(n) + "x" + std::to_string(m));
  }
  if (cost.array().isNaN().any()) throw DomainError(std::string(where) + ": NaN cost");
}

void check_no_nan(const Eigen::VectorXd& v, const char* where) {
  if (v.array().isNaN().any()) throw DomainError(std::string(where) + ": NaN potential");
}

// (1 + r) log1p(r) - r, accurate for small |r|.
double relative_entropy_term(double r) {
  if (std::abs(r) < 1e-3) {
    const double r2 = r * r;
    return r2 * (0.5 - r / 6.0 + r2 / 12.0 - r2 * r / 20.0);
  }
  return (1.0 + r) * std::log1p(r) - r;
}

void check_probability(std::span<const double> p, const char* which) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(std::string("kl: ") + which + " has a negative or non-finite entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError(std::string("kl: ") + which + " is not normalized (mass " + std::to_string(total) + ")");
  }
}

std::span<const double> as_span(const Eigen::MatrixXd& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
std::span<const double> as_span(const Eigen::VectorXd& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace

DiscreteMarginal::DiscreteMarginal(Eigen::MatrixXd support, Eigen::VectorXd weights) {
  if (support.rows() != weights.size()) throw ValidationError("marginal: support and weights differ in length");
  std::vector<Eigen::Index> keep;
  double total = 0.0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    const double w = weights[i];
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("marginal: weights must be finite and nonnegative");
    if (w == 0.0) continue;
    if (w < kMinWeight) throw ValidationError("marginal: atom weight below 1e-300");
    keep.push_back(i);
    total += w;
  }
  if (keep.empty()) throw ValidationError("marginal: no atoms with positive weight");
  if (std::abs(total - 1.0) > 1e-12) throw ValidationError("marginal: weights must sum to 1 within 1e-12");
  support_.resize(static_cast<Eigen::Index>(keep.size()), support.cols());
  weights_.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    support_.row(static_cast<Eigen::Index>(r)) = support.row(keep[r]);
    weights_[static_cast<Eigen::Index>(r)] = weights[keep[r]] / total;
  }
}

DiscreteMarginal DiscreteMarginal::from_unnormalized(Eigen::MatrixXd support, Eigen::VectorXd weights) {
  const double total = weights.sum();
  if (!(total > 0.0) || !std::isfinite(total)) throw ValidationError("marginal: total mass must be positive");
  return DiscreteMarginal(std::move(support), weights / total);
}

double logsumexp(std::span<const double> v) {
  double hi = -kInf;
  for (double x : v) {
    if (std::isnan(x)) throw DomainError("logsumexp: NaN input");
    hi = std::max(hi, x);
  }
  if (hi == -kInf) return -kInf;
  if (hi == kInf) return kInf;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

GibbsMeasure gibbs_coupling(const Eigen::MatrixXd& cost, const DiscreteMarginal& mu, const DiscreteMarginal& nu) {
  check_shapes(cost, mu.size(), nu.size(), "gibbs_coupling");
  const Eigen::VectorXd lmu = mu.log_weights(), lnu = nu.log_weights();
  Eigen::MatrixXd logits(cost.rows(), cost.cols());
  for (Eigen::Index j = 0; j < cost.cols(); ++j) logits.col(j) = -cost.col(j) + lmu + Eigen::VectorXd::Constant(cost.rows(), lnu[j]);
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    if ((logits.row(i).array() == -kInf).all()) throw DomainError("gibbs_coupling: degenerate cost, row " + std::to_string(i) + " is forbidden everywhere");
  }
  for (Eigen::Index j = 0; j < cost.cols(); ++j) {
    if ((logits.col(j).array() == -kInf).all()) throw DomainError("gibbs_coupling: degenerate cost, column " + std::to_string(j) + " is forbidden everywhere");
  }
  const double log_z = logsumexp(as_span(logits));
  GibbsMeasure g{{(logits.array() - log_z).exp().matrix()}, log_z};
  return g;
}

Eigen::VectorXd ipf_psi_step(const Eigen::VectorXd& phi, const Eigen::MatrixXd& cost, const DiscreteMarginal& mu) {
  check_shapes(cost, mu.size(), cost.cols(), "ipf_psi_step");
  if (phi.size() != mu.size()) throw ValidationError("ipf_psi_step: phi length differs from mu");
  check_no_nan(phi, "ipf_psi_step");
  const Eigen::VectorXd base = phi + mu.log_weights();
  Eigen::VectorXd psi(cost.cols());
  Eigen::VectorXd column(cost.rows());
  for (Eigen::Index j = 0; j < cost.cols(); ++j) {
    column = base - cost.col(j);
    const double l = logsumexp(as_span(column));
    if (!std::isfinite(l)) throw DomainError("ipf_psi_step: column " + std::to_string(j) + " has no finite mass");
    psi[j] = -l;
  }
  return psi;
}

Eigen::VectorXd ipf_phi_step(const Eigen::VectorXd& psi, const Eigen::MatrixXd& cost, const DiscreteMarginal& nu) {
  check_shapes(cost, cost.rows(), nu.size(), "ipf_phi_step");
  if (psi.size() != nu.size()) throw ValidationError("ipf_phi_step: psi length differs from nu");
  check_no_nan(psi, "ipf_phi_step");
  const Eigen::RowVectorXd base = (psi + nu.log_weights()).transpose();
  Eigen::VectorXd phi(cost.rows());
  Eigen::VectorXd row(cost.cols());
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    row = (base - cost.row(i)).transpose();
    const double l = logsumexp(as_span(row));
    if (!std::isfinite(l)) throw DomainError("ipf_phi_step: row " + std::to_string(i) + " has no finite mass");
    phi[i] = -l;
  }
  return phi;
}

DiscreteMarginal perturb_marginal(const DiscreteMarginal& m, double eps, Rng& rng) {
  if (!(eps >= 0.0)) throw ValidationError("perturb_marginal: eps must be nonnegative");
  if (eps == 0.0) return m;
  Eigen::VectorXd a(m.dim());
  double norm = 0.0;
  while (m.dim() > 0 && norm < 1e-12) {
    for (Eigen::Index r = 0; r < a.size(); ++r) a[r] = rng.normal();
    norm = a.norm();
  }
  if (m.dim() > 0) a /= norm;
  const double b = rng.uniform(0.0, 2.0 * std::numbers::pi);
  Eigen::VectorXd logw = m.log_weights();
  for (Eigen::Index i = 0; i < m.size(); ++i) logw[i] += eps * std::sin(m.support().row(i).dot(a) + b);
  const double lz = logsumexp(as_span(logw));
  return DiscreteMarginal(m.support(), (logw.array() - lz).exp().matrix() / (logw.array() - lz).exp().sum());
}

CouplingMatrix coupling_from_potentials(const PotentialPair& pp, const Eigen::MatrixXd& cost,
                                        const DiscreteMarginal& mu, const DiscreteMarginal& nu) {
  check_shapes(cost, mu.size(), nu.size(), "coupling_from_potentials");
  if (pp.phi.size() != mu.size() || pp.psi.size() != nu.size()) throw ValidationError("coupling_from_potentials: potential lengths");
  const Eigen::VectorXd a = pp.phi + mu.log_weights();
  const Eigen::VectorXd b = pp.psi + nu.log_weights();
  CouplingMatrix pi{Eigen::MatrixXd(cost.rows(), cost.cols())};
  for (Eigen::Index j = 0; j < cost.cols(); ++j) {
    for (Eigen::Index i = 0; i < cost.rows(); ++i) pi.mass(i, j) = std::exp(a[i] + b[j] - cost(i, j));
  }
  return pi;
}

Residuals schrodinger_residuals(const PotentialPair& pp, const Eigen::MatrixXd& cost, const DiscreteMarginal& mu,
                                const DiscreteMarginal& nu) {
  check_shapes(cost, mu.size(), nu.size(), "schrodinger_residuals");
  Eigen::MatrixXd kernel(cost.rows(), cost.cols());
  for (Eigen::Index j = 0; j < cost.cols(); ++j) {
    for (Eigen::Index i = 0; i < cost.rows(); ++i) kernel(i, j) = std::exp(pp.phi[i] + pp.psi[j] - cost(i, j));
  }
  const Eigen::VectorXd col = kernel.transpose() * mu.weights();
  const Eigen::VectorXd row = kernel * nu.weights();
  return {(col.array() - 1.0).abs().maxCoeff(), (row.array() - 1.0).abs().maxCoeff()};
}

double kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ValidationError("kl: shapes differ");
  check_probability(p, "p");
  check_probability(q, "q");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (q[i] == 0.0) {
      if (p[i] > 0.0) throw AbsoluteContinuityError("kl: p is not absolutely continuous w.r.t. q at index " + std::to_string(i));
      continue;
    }
    if (p[i] == 0.0) {
      acc += q[i];
      continue;
    }
    acc += q[i] * relative_entropy_term((p[i] - q[i]) / q[i]);
  }
  return acc;
}

double kl(const CouplingMatrix& p, const CouplingMatrix& q) {
  if (p.mass.rows() != q.mass.rows() || p.mass.cols() != q.mass.cols()) throw ValidationError("kl: coupling shapes differ");
  return kl(as_span(p.mass), as_span(q.mass));
}

double kl(const DiscreteMarginal& p, const DiscreteMarginal& q) { return kl(p.weights(), q.weights()); }

double kl(const Eigen::VectorXd& p, const Eigen::VectorXd& q) { return kl(as_span(p), as_span(q)); }

EotObjective eot_objective(const CouplingMatrix& pi, const Eigen::MatrixXd& cost, const DiscreteMarginal& mu,
                           const DiscreteMarginal& nu) {
  check_shapes(cost, mu.size(), nu.size(), "eot_objective");
  if (pi.mass.rows() != cost.rows() || pi.mass.cols() != cost.cols()) throw ValidationError("eot_objective: coupling shape");
  const CouplingMatrix product{mu.weights() * nu.weights().transpose()};
  double transport = 0.0;
  for (Eigen::Index j = 0; j < cost.cols(); ++j) {
    for (Eigen::Index i = 0; i < cost.rows(); ++i) {
      if (pi.mass(i, j) > 0.0) transport += cost(i, j) * pi.mass(i, j);
    }
  }
  return {transport, kl(pi, product)};
}

SinkhornSolution solve_exact(const DiscreteMarginal& mu, const DiscreteMarginal& nu, const Eigen::MatrixXd& cost,
                             int n_iters) {
  if (n_iters < 1) throw ValidationError("solve_exact: n_iters must be >= 1");
  PotentialPair pp{Eigen::VectorXd::Zero(mu.size()), Eigen::VectorXd::Zero(nu.size())};
  for (int k = 0; k < n_iters; ++k) {
    pp.psi = ipf_psi_step(pp.phi, cost, mu);
    pp.phi = ipf_phi_step(pp.psi, cost, nu);
  }
  return {pp, coupling_from_potentials(pp, cost, mu, nu), schrodinger_residuals(pp, cost, mu, nu), n_iters};
}

ConvergenceTrace run_aipf(const DiscreteMarginal& mu_star, const DiscreteMarginal& nu_star, const Eigen::MatrixXd& cost,
                          double eps, int n_iters, Rng& rng, const AipfOptions& opts) {
  if (n_iters < 1) throw ValidationError("run_aipf: n_iters must be >= 1");
  if (!(eps >= 0.0)) throw ValidationError("run_aipf: eps must be nonnegative");
  check_shapes(cost, mu_star.size(), nu_star.size(), "run_aipf");

  const GibbsMeasure gibbs = gibbs_coupling(cost, mu_star, nu_star);
  ConvergenceTrace trace;
  trace.eps = eps;
  trace.records.reserve(static_cast<std::size_t>(n_iters));

  DiscreteMarginal mu_k = perturb_marginal(mu_star, eps, rng);
  DiscreteMarginal nu_prev = perturb_marginal(nu_star, eps, rng);
  PotentialPair pp{Eigen::VectorXd::Constant(mu_star.size(), opts.initial_shift), Eigen::VectorXd()};
  pp.psi = ipf_psi_step(pp.phi, cost, mu_k);
  CouplingMatrix pi_even = coupling_from_potentials(pp, cost, mu_k, nu_prev);
  trace.kl_initial_gibbs = kl(pi_even, gibbs.coupling);

  for (int k = 1; k <= n_iters; ++k) {
    pp.phi = ipf_phi_step(pp.psi, cost, nu_prev);
    mu_k = perturb_marginal(mu_star, eps, rng);
    const CouplingMatrix pi_odd = coupling_from_potentials(pp, cost, mu_k, nu_prev);
    pp.psi = ipf_psi_step(pp.phi, cost, mu_k);
    DiscreteMarginal nu_k = perturb_marginal(nu_star, eps, rng);
    CouplingMatrix pi_next = coupling_from_potentials(pp, cost, mu_k, nu_k);

    const Residuals res = schrodinger_residuals(pp, cost, mu_star, nu_star);
    TraceRecord rec;
    rec.k = k;
    rec.kl_mu = kl(pi_next.first_marginal(), mu_star.weights());
    rec.kl_nu = kl(nu_star.weights(), pi_odd.second_marginal());
    rec.objective = kl(pi_next, gibbs.coupling);
    rec.r1 = res.r1;
    rec.r2 = res.r2;
    rec.step_kl = kl(pi_odd, pi_even) + kl(pi_next, pi_odd);
    trace.records.push_back(rec);

    pi_even = std::move(pi_next);
    nu_prev = std::move(nu_k);
  }
  trace.final_potentials = pp;

  if (opts.oracle_iters > 0) {
    const SinkhornSolution star = solve_exact(mu_star, nu_star, cost, opts.oracle_iters);
    CouplingMatrix pi_star = star.coupling;
    pi_star.mass /= pi_star.total();
    trace.kl_star_gibbs = kl(pi_star, gibbs.coupling);
  }
  return trace;
}

RateFit fit_rate(std::span<const double> y) {
  const std::size_t n = y.size();
  if (n == 0) return {0.0, 0.0};
  // Residual (m - y) / (m + y) is tanh of half the log ratio: scale-free across decades and
  // bounded, so a geometric transient that no a / k can follow does not swamp the plateau.
  constexpr double kLo = -690.0, kHi = 690.0;
  std::vector<double> yy(n);
  for (std::size_t i = 0; i < n; ++i) yy[i] = std::max(std::abs(y[i]), 1e-300);

  auto cost = [&](double uu, double vv) {
    const double a = uu <= kLo ? 0.0 : std::exp(uu), b = vv <= kLo ? 0.0 : std::exp(vv);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double m = a / static_cast<double>(i + 1) + b;
      const double r = (m - yy[i]) / (m + yy[i]);
      acc += r * r;
    }
    return acc;
  };
  // The objective is not convex; seed from a log grid that includes the a = 0 and b = 0 edges.
  const auto [lo_it, hi_it] = std::minmax_element(yy.begin(), yy.end());
  // Floors far below every y still matter to the relative residual, so the grid reaches e^-30 below the minimum.
  const double g_lo = std::log(*lo_it) - 30.0, g_hi = std::log(*hi_it * static_cast<double>(n)) + 2.0;
  constexpr int kGrid = 240;
  std::vector<double> axis{kLo};
  for (int g = 0; g <= kGrid; ++g) axis.push_back(g_lo + (g_hi - g_lo) * g / kGrid);
  // Best grid point overall (possibly on an edge) and best strictly interior one.
  double eu = axis[1], ev = axis[1], ef = cost(eu, ev);
  double iu = eu, iv = ev, inf = ef;
  for (double gu : axis) {
    for (double gv : axis) {
      const double c = cost(gu, gv);
      if (c < ef) ef = c, eu = gu, ev = gv;
      if (gu > kLo && gv > kLo && c < inf) inf = c, iu = gu, iv = gv;
    }
  }

  // Levenberg-Marquardt in log-parameters; parameters sitting on an edge stay there.
  auto polish = [&](double u, double v, double f) {
    const bool fix_u = u <= kLo, fix_v = v <= kLo;
    double lambda = 1e-3;
    for (int iter = 0; iter < 1000; ++iter) {
      const double a = fix_u ? 0.0 : std::exp(u), b = fix_v ? 0.0 : std::exp(v);
      double jtj00 = 0, jtj01 = 0, jtj11 = 0, g0 = 0, g1 = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double ak = a / static_cast<double>(i + 1);
        const double m = ak + b, s = m + yy[i];
        const double r = (m - yy[i]) / s;
        const double dr = 2.0 * yy[i] / (s * s);
        const double j0 = dr * ak, j1 = dr * b;
        jtj00 += j0 * j0;
        jtj01 += j0 * j1;
        jtj11 += j1 * j1;
        g0 += j0 * r;
        g1 += j1 * r;
      }
      bool improved = false;
      while (lambda < 1e12) {
        const double d00 = jtj00 * (1.0 + lambda) + 1e-300, d11 = jtj11 * (1.0 + lambda) + 1e-300;
        const double det = d00 * d11 - jtj01 * jtj01;
        double du = -(d11 * g0 - jtj01 * g1) / det;
        double dv = -(d00 * g1 - jtj01 * g0) / det;
        if (fix_u) du = 0.0, dv = fix_v ? 0.0 : -g1 / d11;
        if (fix_v) dv = 0.0, du = fix_u ? 0.0 : -g0 / d00;
        const double nu = fix_u ? u : std::clamp(u + std::clamp(du, -20.0, 20.0), kLo + 1.0, kHi);
        const double nv = fix_v ? v : std::clamp(v + std::clamp(dv, -20.0, 20.0), kLo + 1.0, kHi);
        const double nf = cost(nu, nv);
        if (nf < f) {
          improved = f - nf > 1e-12 * f;
          u = nu;
          v = nv;
          f = nf;
          lambda = std::max(lambda / 10.0, 1e-12);
          break;
        }
        lambda *= 10.0;
      }
      if (!improved) break;
    }
    return std::array<double, 3>{u, v, f};
  };
  std::array<double, 3> best = polish(eu, ev, ef);
  if (eu <= kLo || ev <= kLo) {
    const std::array<double, 3> interior = polish(iu, iv, inf);
    if (interior[2] < best[2]) best = interior;
  }
  return {best[0] <= kLo ? 0.0 : std::exp(best[0]), best[1] <= kLo ? 0.0 : std::exp(best[1])};
}

TraceDiagnostics diagnose_trace(const ConvergenceTrace& trace, double eps, double slack) {
  if (trace.records.empty()) throw ValidationError("diagnose_trace: empty trace");
  TraceDiagnostics d;
  d.slack = slack;
  d.bound = trace.envelope_constant();
  d.bound_check = true;
  double running = 0.0;
  for (const auto& r : trace.records) {
    running += r.step_kl;
    d.partial_sums.push_back(running);
    if (running > d.bound + slack * 2.0 * r.k * eps + 1e-8) d.bound_check = false;
  }
  d.monotonicity_violations = 0;
  for (std::size_t i = 1; i < trace.records.size(); ++i) {
    if (trace.records[i].kl_mu > trace.records[i - 1].kl_mu + slack * eps + 1e-15) ++d.monotonicity_violations;
  }
  std::vector<double> y;
  y.reserve(trace.records.size());
  for (const auto& r : trace.records) y.push_back(r.kl_mu);
  d.fit = fit_rate(y);
  return d;
}

void write_trace_csv(std::ostream& os, const ConvergenceTrace& trace) {
  os << "k,kl_mu,kl_nu,objective,r1,r2\n";
  os << std::setprecision(17);
  for (const auto& r : trace.records) {
    os << r.k << ',' << r.kl_mu << ',' << r.kl_nu << ',' << r.objective << ',' << r.r1 << ',' << r.r2 << '\n';
  }
}

ConvergenceTrace read_trace_csv(std::istream& is) {
  std::string line;
  long line_no = 1;
  if (!std::getline(is, line)) throw ParseError("empty trace file", line_no);
  if (line != "k,kl_mu,kl_nu,objective,r1,r2") throw ParseError("unexpected header '" + line + "'", line_no);
  ConvergenceTrace trace;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    TraceRecord r{};
    if (!(row >> r.k >> r.kl_mu >> r.kl_nu >> r.objective >> r.r1 >> r.r2)) throw ParseError("expected 6 fields", line_no);
    std::string extra;
    if (row >> extra) throw ParseError("trailing fields", line_no);
    r.step_kl = 0.0;
    trace.records.push_back(r);
  }
  return trace;
}

EotInstance make_instance(int n, int m, int d, std::uint64_t seed, const sde::SdeSpec& spec, double eps) {
  if (n < 1 || m < 1 || d < 1) throw ValidationError("make_instance: sizes must be positive");
  Rng rng(seed, 0xE07);
  Eigen::MatrixXd xs(n, d), ys(m, d);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < d; ++r) xs(i, r) = rng.normal();
  for (int j = 0; j < m; ++j)
    for (int r = 0; r < d; ++r) ys(j, r) = rng.normal() + 1.0;
  Eigen::VectorXd wx(n), wy(m);
  for (int i = 0; i < n; ++i) wx[i] = rng.uniform(0.5, 1.5);
  for (int j = 0; j < m; ++j) wy[j] = rng.uniform(0.5, 1.5);
  Eigen::MatrixXd cost = sde::eot_cost(spec, eps, xs, ys);
  return {DiscreteMarginal::from_unnormalized(xs, wx), DiscreteMarginal::from_unnormalized(ys, wy), std::move(cost)};
}

}  // namespace sbridge::eot
