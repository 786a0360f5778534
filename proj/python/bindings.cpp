#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sbridge/checkpoint.hpp"
#include "sbridge/csbi.hpp"
#include "sbridge/data.hpp"
#include "sbridge/eot.hpp"
#include "sbridge/errors.hpp"
#include "sbridge/metrics.hpp"
#include "sbridge/sde.hpp"

namespace py = pybind11;
using namespace sbridge;

namespace {

// (n, K, L) array from a list of K x L matrices.
py::array_t<double> stack(const std::vector<Eigen::MatrixXd>& ms) {
  const py::ssize_t n = static_cast<py::ssize_t>(ms.size());
  const py::ssize_t K = n ? ms[0].rows() : 0, L = n ? ms[0].cols() : 0;
  py::array_t<double> out({n, K, L});
  auto a = out.mutable_unchecked<3>();
  for (py::ssize_t s = 0; s < n; ++s)
    for (py::ssize_t k = 0; k < K; ++k)
      for (py::ssize_t l = 0; l < L; ++l) a(s, k, l) = ms[static_cast<std::size_t>(s)](k, l);
  return out;
}

std::vector<Eigen::MatrixXd> unstack(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 3) throw ValidationError("expected an (n, K, L) array");
  auto a = arr.unchecked<3>();
  std::vector<Eigen::MatrixXd> out;
  for (py::ssize_t s = 0; s < a.shape(0); ++s) {
    Eigen::MatrixXd m(a.shape(1), a.shape(2));
    for (py::ssize_t k = 0; k < a.shape(1); ++k)
      for (py::ssize_t l = 0; l < a.shape(2); ++l) m(k, l) = a(s, k, l);
    out.push_back(std::move(m));
  }
  return out;
}

py::dict trace_dict(const eot::ConvergenceTrace& tr) {
  std::vector<int> k;
  std::vector<double> kl_mu, kl_nu, objective, r1, r2, step_kl;
  for (const auto& r : tr.records) {
    k.push_back(r.k);
    kl_mu.push_back(r.kl_mu);
    kl_nu.push_back(r.kl_nu);
    objective.push_back(r.objective);
    r1.push_back(r.r1);
    r2.push_back(r.r2);
    step_kl.push_back(r.step_kl);
  }
  py::dict d;
  d["k"] = py::array(py::cast(k));
  d["kl_mu"] = py::array(py::cast(kl_mu));
  d["kl_nu"] = py::array(py::cast(kl_nu));
  d["objective"] = py::array(py::cast(objective));
  d["r1"] = py::array(py::cast(r1));
  d["r2"] = py::array(py::cast(r2));
  d["step_kl"] = py::array(py::cast(step_kl));
  d["eps"] = tr.eps;
  d["kl_star_gibbs"] = tr.kl_star_gibbs;
  d["envelope_constant"] = tr.envelope_constant();
  return d;
}

}  // namespace

PYBIND11_MODULE(_sbridge, m) {
  m.doc() = "Conditional Schrodinger bridge imputation and approximate IPF diagnostics";
  m.attr("__version__") = SBRIDGE_VERSION;

  auto validation = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<AbsoluteContinuityError>(m, "AbsoluteContinuityError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_RuntimeError);
  auto io_error = py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<ParseError>(m, "ParseError", io_error.ptr());
  (void)validation;

  py::enum_<sde::SdeKind>(m, "SdeKind").value("VE", sde::SdeKind::kVE).value("VP", sde::SdeKind::kVP);

  py::class_<sde::SdeSpec>(m, "SdeSpec")
      .def_static("ve", &sde::SdeSpec::ve, py::arg("sigma_min") = 0.001, py::arg("sigma_max") = 20.0,
                  py::arg("n_steps") = 100, py::arg("horizon") = 1.0)
      .def_static("vp", &sde::SdeSpec::vp, py::arg("beta_min") = 0.1, py::arg("beta_max") = 20.0,
                  py::arg("n_steps") = 100, py::arg("horizon") = 1.0)
      .def_readwrite("kind", &sde::SdeSpec::kind)
      .def_readwrite("sigma_min", &sde::SdeSpec::sigma_min)
      .def_readwrite("sigma_max", &sde::SdeSpec::sigma_max)
      .def_readwrite("beta_min", &sde::SdeSpec::beta_min)
      .def_readwrite("beta_max", &sde::SdeSpec::beta_max)
      .def_readwrite("horizon", &sde::SdeSpec::horizon)
      .def_readwrite("n_steps", &sde::SdeSpec::n_steps)
      .def_readwrite("ou_rate", &sde::SdeSpec::ou_rate)
      .def("validate", &sde::SdeSpec::validate)
      .def("time_at", &sde::SdeSpec::time_at);

  m.def("diffusion_coefficient", &sde::diffusion_coefficient, py::arg("spec"), py::arg("t"));
  m.def("schedule_moments", &sde::schedule_moments, py::arg("spec"), py::arg("s"), py::arg("t"),
        "(mean factor, variance) of the scheduled transition kernel");
  m.def(
      "em_forward",
      [](const sde::SdeSpec& spec, const Eigen::MatrixXd& x0, std::uint64_t seed) {
        std::vector<Rng> rngs;
        for (Eigen::Index p = 0; p < x0.cols(); ++p) rngs.push_back(Rng(seed).split(static_cast<std::uint64_t>(p)));
        return sde::em_forward_batch(spec, x0, {}, rngs).states.back();
      },
      py::arg("spec"), py::arg("x0"), py::arg("seed") = 0,
      "Terminal states of the driftless-policy forward SDE; x0 is d x P.");

  py::class_<eot::ConvergenceTrace>(m, "ConvergenceTrace")
      .def("to_dict", &trace_dict)
      .def_readonly("eps", &eot::ConvergenceTrace::eps)
      .def_readonly("kl_star_gibbs", &eot::ConvergenceTrace::kl_star_gibbs)
      .def("envelope_constant", &eot::ConvergenceTrace::envelope_constant);

  m.def(
      "run_aipf",
      [](int n, int m_, int d, double eps, int iters, std::uint64_t instance_seed, std::uint64_t seed, double cost_eps,
         int oracle_iters) {
        const eot::EotInstance inst = eot::make_instance(n, m_, d, instance_seed, sde::SdeSpec::ve(0.001, 20.0, 100), cost_eps);
        Rng rng(seed);
        return eot::run_aipf(inst.mu, inst.nu, inst.cost, eps, iters, rng, {oracle_iters, 0.0});
      },
      py::arg("n") = 16, py::arg("m") = 16, py::arg("d") = 2, py::arg("eps") = 0.0, py::arg("iters") = 200,
      py::arg("instance_seed") = 7, py::arg("seed") = 0, py::arg("cost_eps") = 0.5, py::arg("oracle_iters") = 2000,
      "Approximate IPF on a seeded Gaussian point-cloud instance with a VE bridge cost.");
  m.def(
      "diagnose_trace",
      [](const eot::ConvergenceTrace& tr, double eps, double slack) {
        const eot::TraceDiagnostics d = eot::diagnose_trace(tr, eps, slack);
        py::dict out;
        out["A"] = d.fit.a;
        out["B"] = d.fit.b;
        out["bound"] = d.bound;
        out["bound_check"] = d.bound_check;
        out["violations"] = d.monotonicity_violations;
        return out;
      },
      py::arg("trace"), py::arg("eps"), py::arg("slack") = 10.0);

  py::class_<data::SignalConfig>(m, "SignalConfig")
      .def(py::init<>())
      .def_static("desk", &data::SignalConfig::desk)
      .def_readwrite("K", &data::SignalConfig::K)
      .def_readwrite("L", &data::SignalConfig::L)
      .def_readwrite("sigma", &data::SignalConfig::sigma)
      .def_readwrite("n_samples", &data::SignalConfig::n_samples)
      .def_readwrite("n_train", &data::SignalConfig::n_train)
      .def_readwrite("drop_ratio", &data::SignalConfig::drop_ratio)
      .def_property(
          "strategy", [](const data::SignalConfig& c) { return c.strategy.name(); },
          [](data::SignalConfig& c, const std::string& s) { c.strategy = data::TargetStrategy::parse(s); })
      .def("validate", &data::SignalConfig::validate);

  py::class_<data::TimeSeriesWindow>(m, "Window")
      .def_readonly("values", &data::TimeSeriesWindow::values)
      .def_property_readonly("obs", [](const data::TimeSeriesWindow& w) { return w.masks.obs; })
      .def_property_readonly("cond", [](const data::TimeSeriesWindow& w) { return w.masks.cond; })
      .def_property_readonly("target", [](const data::TimeSeriesWindow& w) { return w.masks.target; });

  py::class_<data::Dataset>(m, "Dataset")
      .def_readonly("config", &data::Dataset::config)
      .def_readonly("seed", &data::Dataset::seed)
      .def_readonly("windows", &data::Dataset::windows)
      .def("train", &data::Dataset::train)
      .def("test", &data::Dataset::test)
      .def("save", [](const data::Dataset& ds, const std::string& path) { data::save_dataset(ds, path); })
      .def_static("load", &data::load_dataset);

  m.def("make_dataset", &data::make_dataset, py::arg("config"), py::arg("seed") = 0);

  py::class_<csbi::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("warmup_iters", &csbi::TrainConfig::warmup_iters)
      .def_readwrite("stages", &csbi::TrainConfig::stages)
      .def_readwrite("iters_per_stage", &csbi::TrainConfig::iters_per_stage)
      .def_readwrite("refresh_period", &csbi::TrainConfig::refresh_period)
      .def_readwrite("batch_size", &csbi::TrainConfig::batch_size)
      .def_readwrite("cache_paths", &csbi::TrainConfig::cache_paths)
      .def_readwrite("lr_warmup", &csbi::TrainConfig::lr_warmup)
      .def_readwrite("lr_forward", &csbi::TrainConfig::lr_forward)
      .def_readwrite("lr_backward", &csbi::TrainConfig::lr_backward)
      .def_readwrite("decay", &csbi::TrainConfig::decay)
      .def_readwrite("weight_decay", &csbi::TrainConfig::weight_decay)
      .def_readwrite("sde", &csbi::TrainConfig::sde)
      .def_readwrite("hidden", &csbi::TrainConfig::hidden)
      .def_readwrite("uncond_prob", &csbi::TrainConfig::uncond_prob)
      .def_readwrite("seed", &csbi::TrainConfig::seed)
      .def_readwrite("threads", &csbi::TrainConfig::threads)
      .def_property(
          "divergence", [](const csbi::TrainConfig& c) { return c.divergence.name(); },
          [](csbi::TrainConfig& c, const std::string& s) { c.divergence = csbi::DivergenceMode::parse(s); })
      .def_property(
          "time_embedding", [](const csbi::TrainConfig& c) { return c.embedding.time_width; },
          [](csbi::TrainConfig& c, int w) { c.embedding.time_width = w; })
      .def("validate", &csbi::TrainConfig::validate);

  py::class_<csbi::PolicyPair>(m, "PolicyPair")
      .def(
          "impute",
          [](const csbi::PolicyPair& pair, const Eigen::MatrixXd& values, const Eigen::MatrixXd& cond,
             const Eigen::MatrixXd& target, int n_samples, const sde::SdeSpec& spec, std::uint64_t seed, int threads) {
            const data::MaskSet masks{cond + target, cond, target};
            csbi::ImputeOptions io;
            io.sde = spec;
            io.threads = threads;
            std::vector<Eigen::MatrixXd> out;
            {
              py::gil_scoped_release nogil;
              out = csbi::impute(pair.backward, values.cwiseProduct(cond), masks, n_samples, io, Rng(seed));
            }
            return stack(out);
          },
          py::arg("values"), py::arg("cond"), py::arg("target"), py::arg("n_samples"), py::arg("sde"), py::arg("seed") = 0,
          py::arg("threads") = 1, "Conditional samples as an (n_samples, K, L) array.")
      .def("save", [](const csbi::PolicyPair& p, const std::string& dir, std::uint64_t seed) { io::save_pair(p, seed, dir); },
           py::arg("dir"), py::arg("seed") = 0)
      .def_static("load", &io::load_pair)
      .def_property_readonly("n_parameters", [](const csbi::PolicyPair& p) {
        return p.forward.mlp.parameter_count() + p.backward.mlp.parameter_count();
      });

  m.def(
      "train",
      [](const csbi::TrainConfig& cfg, const data::Dataset& ds) {
        csbi::TrainResult r;
        {
          py::gil_scoped_release nogil;
          r = csbi::train(cfg, ds.train(), ds.config.strategy);
        }
        py::list log;
        for (const auto& rec : r.log.records) {
          if (rec.event) continue;
          log.append(py::make_tuple(rec.stage, rec.iter, rec.direction, rec.loss));
        }
        return py::make_tuple(std::move(r.pair), log);
      },
      py::arg("config"), py::arg("dataset"), "Returns (PolicyPair, [(stage, iter, direction, loss), ...]).");

  m.def(
      "crps",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& samples, const Eigen::MatrixXd& truth,
         const Eigen::MatrixXd& target) {
        const metrics::CrpsValue c = metrics::crps(unstack(samples), truth, target);
        return py::make_tuple(c.normalized, c.unnormalized);
      },
      py::arg("samples"), py::arg("truth"), py::arg("target"), "(normalized, unnormalized) quantile-loss CRPS.");
  m.def(
      "rmse_mae",
      [](const Eigen::MatrixXd& est, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& target) {
        const metrics::PointMetrics p = metrics::rmse_mae(est, truth, target);
        return py::make_tuple(p.rmse, p.mae);
      },
      py::arg("estimate"), py::arg("truth"), py::arg("target"));
}
