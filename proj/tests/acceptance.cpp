// Acceptance checks. Each criterion prints one line: "criterion N: PASS|FAIL <measurements>".
// Usage: acceptance [--criterion N]; without arguments every criterion runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <string>

#include "sbridge/csbi.hpp"
#include "sbridge/data.hpp"
#include "sbridge/eot.hpp"
#include "sbridge/metrics.hpp"
#include "sbridge/neural.hpp"
#include "sbridge/sde.hpp"

using namespace sbridge;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

bool report(int n, bool pass, const std::string& detail) {
  std::printf("criterion %d: %s %s\n", n, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  return pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

eot::EotInstance desk_instance() { return eot::make_instance(16, 16, 2, 7, sde::SdeSpec::ve(0.001, 20.0, 100), 0.5); }

bool exact_fixed_point() {
  const eot::EotInstance inst = desk_instance();
  Rng rng(1);
  const auto t0 = Clock::now();
  const eot::ConvergenceTrace tr = run_aipf(inst.mu, inst.nu, inst.cost, 0.0, 500, rng, {0, 0.0});
  const double secs = seconds_since(t0);
  const eot::TraceRecord& last = tr.records.back();
  const double res = std::max(last.r1, last.r2);
  const bool pass = res < 1e-10 && last.kl_mu < 1e-12 && last.kl_nu < 1e-12 && secs < 1.0;
  return report(1, pass, fmt("residual=%.3e kl_mu=%.3e kl_nu=%.3e time=%.3fs", res, last.kl_mu, last.kl_nu, secs));
}

bool envelope() {
  const eot::EotInstance inst = desk_instance();
  Rng rng(1);
  const eot::ConvergenceTrace tr = run_aipf(inst.mu, inst.nu, inst.cost, 0.0, 200, rng, {2000, 0.0});
  const double c = tr.envelope_constant();
  double worst = -INFINITY;
  for (const auto& r : tr.records) worst = std::max(worst, r.k * r.kl_mu - c);
  return report(2, worst <= 1e-8, fmt("max_k(k KL(mu_2k|mu*) - C)=%.3e C=%.6e", worst, c));
}

bool floor_ordering() {
  const eot::EotInstance inst = desk_instance();
  const auto t0 = Clock::now();
  bool ordered = true;
  double worst_ratio = 0.0;
  std::string floors;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    double b[3];
    const double eps[3] = {1e-4, 1e-3, 1e-2};
    for (int e = 0; e < 3; ++e) {
      Rng rng(seed, 0x51 + static_cast<std::uint64_t>(e));
      const eot::ConvergenceTrace tr = run_aipf(inst.mu, inst.nu, inst.cost, eps[e], 200, rng, {2000, 0.0});
      b[e] = eot::diagnose_trace(tr, eps[e]).fit.b;
    }
    ordered = ordered && b[0] < b[1] && b[1] < b[2];
    worst_ratio = std::max(worst_ratio, b[2] / b[0]);
    floors += fmt(" seed%d=[%.2e,%.2e,%.2e]", static_cast<int>(seed), b[0], b[1], b[2]);
  }
  const double secs = seconds_since(t0);
  const bool pass = ordered && worst_ratio <= 100.0 && secs < 30.0;
  return report(3, pass, fmt("ordered=%d max B(1e-2)/B(1e-4)=%.1f time=%.1fs", ordered, worst_ratio, secs) + floors);
}

bool approximate_monotonicity() {
  const eot::EotInstance inst = desk_instance();
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, 0x4D);
    const eot::ConvergenceTrace tr = run_aipf(inst.mu, inst.nu, inst.cost, 1e-3, 200, rng, {0, 0.0});
    violations += eot::diagnose_trace(tr, 1e-3, 10.0).monotonicity_violations;
  }
  return report(4, violations == 0, fmt("violations=%d over 10 seeds", violations));
}

bool gibbs_identity() {
  const eot::EotInstance inst = desk_instance();
  const eot::GibbsMeasure g = gibbs_coupling(inst.cost, inst.mu, inst.nu);
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::MatrixXd p = inst.mu.weights() * inst.nu.weights().transpose();
    for (int rep = 0; rep < 40; ++rep) {
      const auto i = static_cast<Eigen::Index>(rng.below(16)), k = static_cast<Eigen::Index>(rng.below(16));
      const auto j = static_cast<Eigen::Index>(rng.below(16)), l = static_cast<Eigen::Index>(rng.below(16));
      if (i == k || j == l) continue;
      const double t = rng.uniform(0.0, 0.9) * std::min(p(i, l), p(k, j));
      p(i, j) += t;
      p(k, l) += t;
      p(i, l) -= t;
      p(k, j) -= t;
    }
    const eot::CouplingMatrix pi{p};
    const eot::EotObjective o = eot_objective(pi, inst.cost, inst.mu, inst.nu);
    worst = std::max(worst, std::abs(kl(pi, g.coupling) - (o.transport + o.entropy_reg + g.log_normalizer)));
  }
  return report(5, worst < 1e-10, fmt("max |KL(pi|G) - (<c,pi> + KL(pi|mu x nu) + log Z)|=%.3e", worst));
}

bool kernel_moments() {
  const sde::SdeSpec spec = sde::SdeSpec::ve(0.001, 20.0, 100);
  const int P = 10000;
  const double x0 = 0.5;
  std::vector<Rng> rngs;
  for (int p = 0; p < P; ++p) rngs.push_back(Rng(6).split(static_cast<std::uint64_t>(p)));
  const sde::PathBatch pb = sde::em_forward_batch(spec, Eigen::MatrixXd::Constant(1, P, x0), {}, rngs);
  const Eigen::ArrayXd xt = pb.states.back().row(0).transpose().array();
  const double mean = xt.mean(), var = (xt - mean).square().sum() / (P - 1);
  const auto [factor, kvar] = sde::schedule_moments(spec, 0.0, spec.horizon);
  const double kmean = factor * x0;
  const double se_mean = std::sqrt(kvar / P), se_var = kvar * std::sqrt(2.0 / (P - 1));
  const double zm = (mean - kmean) / se_mean, zv = (var - kvar) / se_var;
  double em_var = 0.0;
  for (int i = 0; i < spec.n_steps; ++i) em_var += std::pow(sde::diffusion_coefficient(spec, spec.time_at(i)), 2) * spec.step();
  const bool pass = std::abs(zm) <= 3.0 && std::abs(zv) <= 3.0;
  return report(6, pass,
                fmt("mean=%.4f (kernel %.4f, z=%.2f) var=%.2f (kernel %.2f, z=%.2f; Euler-Maruyama sum %.2f)", mean, kmean,
                    zm, var, kvar, zv, em_var));
}

csbi::PolicyNet small_net(int K, int L, bool conditional, std::uint64_t seed) {
  csbi::PolicyNet n;
  n.K = K;
  n.L = L;
  n.conditional = conditional;
  n.embedding.time_width = 4;
  Rng rng(seed);
  n.mlp = nn::MlpParams::glorot({n.input_width(), 8, n.dim()}, rng);
  for (auto& layer : n.mlp.layers)
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = 0.2 * rng.normal();
  return n;
}

csbi::LossBatch loss_batch(const csbi::PolicyNet& net, const sde::SdeSpec& spec, int B, Rng& rng) {
  const int D = net.dim();
  csbi::LossBatch lb;
  lb.x.resize(D, B);
  lb.z_other.resize(D, B);
  lb.t.resize(B);
  lb.g.resize(B);
  lb.x_cond = Eigen::MatrixXd::Zero(D, B);
  lb.m_cond = Eigen::MatrixXd::Zero(D, B);
  lb.m_target = Eigen::MatrixXd::Ones(D, B);
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < D; ++i) {
      lb.x(i, b) = rng.normal();
      lb.z_other(i, b) = 0.5 * rng.normal();
    }
    lb.t[b] = spec.time_at(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_steps))));
    lb.g[b] = sde::diffusion_coefficient(spec, lb.t[b]);
    if (net.conditional) {
      const data::MaskSet m = data::make_masks(data::Mask::Ones(net.K, net.L), data::TargetStrategy::random_ratio(0.5), rng);
      lb.m_cond.col(b) = m.cond.reshaped();
      lb.m_target.col(b) = m.target.reshaped();
      lb.x_cond.col(b) = Eigen::VectorXd::Random(D).cwiseProduct(lb.m_cond.col(b));
    }
  }
  return lb;
}

double fd_rel_error(const std::function<double(const nn::MlpParams&)>& f, const nn::MlpParams& p, const nn::MlpParams& grad) {
  const Eigen::VectorXd flat = p.flatten();
  Eigen::VectorXd fd(flat.size());
  nn::MlpParams q = p;
  for (Eigen::Index k = 0; k < flat.size(); ++k) {
    Eigen::VectorXd v = flat;
    v[k] += 1e-5;
    q.assign(v);
    const double a = f(q);
    v[k] -= 2e-5;
    q.assign(v);
    fd[k] = (a - f(q)) / 2e-5;
  }
  return (grad.flatten() - fd).norm() / fd.norm();
}

bool divergence_and_gradients() {
  // Diagonal linear field: every Rademacher probe gives the trace exactly.
  nn::MlpParams diag = nn::MlpParams::zeros({3, 3});
  diag.layers[0].weight.diagonal() << 1.5, -2.0, 4.0;
  Rng rng(7);
  double probe_err = 0.0;
  for (int i = 0; i < 100; ++i)
    probe_err = std::max(probe_err, std::abs(nn::divergence_hutchinson(diag, Eigen::VectorXd::Random(3), 1, rng) - 3.5));

  // Every sign pattern averages to the trace, for d = 1..8.
  double full_err = 0.0;
  for (int d = 1; d <= 8; ++d) {
    const nn::MlpParams p = nn::MlpParams::glorot({d, 16, d}, rng);
    const Eigen::VectorXd x = Eigen::VectorXd::Random(d);
    double sum = 0.0;
    for (int mask = 0; mask < (1 << d); ++mask) {
      Eigen::VectorXd v(d);
      for (int i = 0; i < d; ++i) v[i] = (mask >> i) & 1 ? 1.0 : -1.0;
      sum += v.dot(nn::mlp_jvp(p, x, v).tangent);
    }
    full_err = std::max(full_err, std::abs(sum / (1 << d) - nn::divergence_exact(p, x)));
  }
  const csbi::PolicyNet wide = small_net(2, 4, true, 8);
  const sde::SdeSpec spec = sde::SdeSpec::ve(0.01, 2.0, 10);
  {
    Rng r1(1), r2(2);
    const csbi::LossBatch lb = loss_batch(wide, spec, 6, rng);
    full_err = std::max(full_err, std::abs(likelihood_loss(wide, lb, csbi::DivergenceMode::exact(), r1).divergence -
                                           likelihood_loss(wide, lb, csbi::DivergenceMode::complete(), r2).divergence));
  }

  // Gradients of every training loss on d = 4.
  double grad_err = 0.0;
  const csbi::PolicyNet back = small_net(2, 2, true, 9), fwd = small_net(2, 2, false, 10);
  for (const auto* net : {&back, &fwd}) {
    const csbi::LossBatch lb = loss_batch(*net, spec, 5, rng);
    for (const csbi::DivergenceMode& mode :
         {csbi::DivergenceMode::exact(), csbi::DivergenceMode::complete(), csbi::DivergenceMode::hutchinson(2)}) {
      const Rng probe(11);
      auto f = [&](const nn::MlpParams& q) {
        csbi::PolicyNet n = *net;
        n.mlp = q;
        Rng r = probe;
        return likelihood_loss(n, lb, mode, r).total();
      };
      nn::MlpParams g = net->mlp.zeros_like();
      Rng r = probe;
      likelihood_loss(*net, lb, mode, r, &g);
      grad_err = std::max(grad_err, fd_rel_error(f, net->mlp, g));
    }
  }
  for (const sde::SdeSpec& s : {spec, sde::SdeSpec::vp(0.1, 20.0, 10)}) {
    csbi::DsmBatch db{Eigen::MatrixXd::Random(4, 6), Eigen::MatrixXd(4, 6), Eigen::VectorXd(6), Eigen::MatrixXd::Zero(4, 6),
                      Eigen::MatrixXd::Ones(4, 6)};
    for (int b = 0; b < 6; ++b) {
      for (int i = 0; i < 4; ++i) db.noise(i, b) = rng.normal();
      db.t[b] = s.time_at(1 + b);
    }
    db.m_cond(1, 2) = 1.0;
    db.m_target(1, 2) = 0.0;
    auto f = [&](const nn::MlpParams& q) {
      csbi::PolicyNet n = back;
      n.mlp = q;
      return dsm_loss(n, db, s);
    };
    nn::MlpParams g = back.mlp.zeros_like();
    dsm_loss(back, db, s, &g);
    grad_err = std::max(grad_err, fd_rel_error(f, back.mlp, g));
  }
  const bool pass = probe_err == 0.0 && full_err < 1e-10 && grad_err < 1e-4;
  return report(7, pass, fmt("diag probe err=%.1e full-set err=%.2e max grad rel err=%.2e", probe_err, full_err, grad_err));
}

bool metric_identities() {
  Rng rng(12);
  double point_err = 0.0;
  bool iff = true;
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::MatrixXd truth = Eigen::MatrixXd::Random(3, 6);
    Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(3, 6);
    for (int i = 0; i < mask.size(); ++i) mask.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    mask(0, 0) = 1.0;
    Eigen::MatrixXd point = truth;
    for (int i = 0; i < point.size(); ++i) point.data()[i] += rng.normal();
    const int n = 2 + static_cast<int>(rng.below(19));
    point_err = std::max(point_err, std::abs(metrics::crps(std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(n), point), truth, mask).unnormalized -
                                             metrics::rmse_mae(point, truth, mask).mae));
    std::vector<Eigen::MatrixXd> ens(static_cast<std::size_t>(n), truth);
    iff = iff && metrics::crps(ens, truth, mask).unnormalized == 0.0;
    ens[rng.below(static_cast<std::uint64_t>(n))](0, 0) += 1e-3 + rng.uniform();
    iff = iff && metrics::crps(ens, truth, mask).unnormalized > 0.0;
  }

  std::vector<std::vector<Eigen::MatrixXd>> s;
  std::vector<Eigen::MatrixXd> t, m;
  for (int w = 0; w < 4; ++w) {
    t.push_back(Eigen::MatrixXd::Random(2, 5));
    Eigen::MatrixXd mk = Eigen::MatrixXd::Zero(2, 5);
    mk.col(w).setOnes();
    m.push_back(mk);
    std::vector<Eigen::MatrixXd> e;
    for (int k = 0; k < 10; ++k) e.push_back(t.back() + 0.3 * Eigen::MatrixXd::Random(2, 5));
    s.push_back(e);
  }
  const std::string base = metrics::evaluate(s, t, m).to_json();
  for (int w = 0; w < 4; ++w)
    for (Eigen::Index i = 0; i < t[w].size(); ++i)
      if (m[w].data()[i] == 0.0) {
        t[w].data()[i] = 1e6 * rng.normal();
        for (auto& e : s[w]) e.data()[i] = -1e6 * rng.normal();
      }
  const bool inert = metrics::evaluate(s, t, m).to_json() == base;
  const bool pass = point_err < 1e-12 && iff && inert;
  return report(8, pass, fmt("point CRPS-MAE err=%.2e zero-iff-perfect=%d masked-inert=%d", point_err, iff, inert));
}

struct ImputeScore {
  metrics::MetricReport report;
  bool cond_exact = true;
};

ImputeScore score_imputation(const csbi::PolicyNet& backward, const std::vector<data::TimeSeriesWindow>& test,
                             const sde::SdeSpec& spec, int n_samples, std::uint64_t seed) {
  csbi::ImputeOptions io;
  io.sde = spec;
  std::vector<std::vector<Eigen::MatrixXd>> samples;
  std::vector<Eigen::MatrixXd> truth, target;
  ImputeScore out;
  const Rng root(seed, 99);
  for (std::size_t w = 0; w < test.size(); ++w) {
    const auto& win = test[w];
    const Eigen::MatrixXd xc = win.values.cwiseProduct(win.masks.cond);
    samples.push_back(csbi::impute(backward, xc, win.masks, n_samples, io, root.split(w)));
    for (const auto& s : samples.back())
      for (Eigen::Index i = 0; i < s.size(); ++i)
        if (win.masks.cond.data()[i] == 1.0 && s.data()[i] != xc.data()[i]) out.cond_exact = false;
    truth.push_back(win.values);
    target.push_back(win.masks.target);
  }
  out.report = metrics::evaluate(samples, truth, target);
  return out;
}

bool desk_end_to_end() {
  const data::Dataset ds = data::make_dataset(data::SignalConfig::desk(), 0);
  const csbi::TrainConfig cfg;
  const auto t0 = Clock::now();
  const csbi::TrainResult res = csbi::train(cfg, ds.train(), ds.config.strategy);
  const double secs = seconds_since(t0);
  csbi::PolicyNet zero = res.pair.backward;
  zero.mlp = zero.mlp.zeros_like();
  const ImputeScore trained = score_imputation(res.pair.backward, ds.test(), cfg.sde, 50, 0);
  const ImputeScore base = score_imputation(zero, ds.test(), cfg.sde, 50, 0);
  const double ratio = trained.report.rmse / base.report.rmse;
  const bool pass = secs < 600.0 && ratio <= 0.5 && trained.cond_exact;
  return report(9, pass,
                fmt("train=%.1fs rmse=%.4f zero-policy rmse=%.4f ratio=%.3f cond-bitwise=%d", secs, trained.report.rmse,
                    base.report.rmse, ratio, trained.cond_exact));
}

bool ablation() {
  bool pass = true;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    data::SignalConfig sc = data::SignalConfig::desk();
    sc.n_samples = 900;
    sc.n_train = 800;
    const data::Dataset ds = data::make_dataset(sc, seed);
    csbi::TrainConfig full;
    full.seed = seed;
    full.sde = sde::SdeSpec::ve(0.001, 0.3, 20);
    csbi::TrainConfig zero = full;
    zero.stages = 0;
    const auto a = score_imputation(csbi::train(full, ds.train(), sc.strategy).pair.backward, ds.test(), full.sde, 50, seed).report;
    const auto b = score_imputation(csbi::train(zero, ds.train(), sc.strategy).pair.backward, ds.test(), full.sde, 50, seed).report;
    const bool ok = a.rmse <= b.rmse && a.mae <= b.mae && a.crps <= b.crps;
    pass = pass && ok;
    detail += fmt(" seed%d[rmse %.4f/%.4f mae %.4f/%.4f crps %.4f/%.4f]", static_cast<int>(seed), a.rmse, b.rmse, a.mae,
                  b.mae, a.crps, b.crps);
  }
  return report(10, pass, "CSBI/CSBI0" + detail);
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::function<bool()>> criteria{
      {1, exact_fixed_point},     {2, envelope},          {3, floor_ordering},
      {4, approximate_monotonicity}, {5, gibbs_identity}, {6, kernel_moments},
      {7, divergence_and_gradients}, {8, metric_identities}, {9, desk_end_to_end},
      {10, ablation}};
  std::vector<int> which;
  if (argc == 3 && std::string(argv[1]) == "--criterion") {
    which.push_back(std::atoi(argv[2]));
  } else if (argc == 1) {
    for (const auto& [n, fn] : criteria) which.push_back(n);
  } else {
    std::fprintf(stderr, "usage: acceptance [--criterion N]\n");
    return 2;
  }
  bool all = true;
  for (int n : which) {
    const auto it = criteria.find(n);
    if (it == criteria.end()) {
      std::fprintf(stderr, "unknown criterion %d\n", n);
      return 2;
    }
    try {
      all = it->second() && all;
    } catch (const std::exception& e) {
      all = report(n, false, std::string("exception: ") + e.what()) && all;
    }
  }
  return all ? 0 : 1;
}
