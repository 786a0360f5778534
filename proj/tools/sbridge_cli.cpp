// Experiment driver: gen-data, sinkhorn, train, impute, eval.
#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "sbridge/checkpoint.hpp"
#include "sbridge/csbi.hpp"
#include "sbridge/data.hpp"
#include "sbridge/eot.hpp"
#include "sbridge/errors.hpp"
#include "sbridge/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sbridge;

namespace {

constexpr int kExitValidation = 2, kExitDivergence = 3, kExitIo = 4;

json sde_defaults() {
  return {{"sde", "ve"},           {"sigma_min", 0.001}, {"sigma_max", 20.0}, {"beta_min", 0.1},
          {"beta_max", 20.0},      {"steps", 100},       {"ou_rate", 1.0}};
}

json defaults_for(const std::string& cmd) {
  json d = {{"seed", 0}, {"threads", 1}};
  if (cmd == "gen-data") {
    d.update({{"preset", "paper"}, {"samples", 1000}, {"K", 8}, {"L", 50}, {"sigma", 0.1}, {"drop", 0.0}, {"strategy", "block:20"}, {"train", -1}});
  } else if (cmd == "sinkhorn") {
    d.update({{"n", 16}, {"m", 16}, {"d", 2}, {"eps_list", {0.0, 1e-4, 1e-3, 1e-2}}, {"iters", 200}, {"cost_eps", 0.5},
              {"slack", 10.0}, {"oracle_iters", 2000}, {"instance_seed", 7}});
    d.update(sde_defaults());
  } else if (cmd == "train") {
    const csbi::TrainConfig t;
    d.update({{"data", ""},
              {"warmup", t.warmup_iters},
              {"stages", t.stages},
              {"iters_per_stage", t.iters_per_stage},
              {"refresh", t.refresh_period},
              {"batch", t.batch_size},
              {"cache_paths", t.cache_paths},
              {"lr_warmup", t.lr_warmup},
              {"lr_forward", t.lr_forward},
              {"lr_backward", t.lr_backward},
              {"decay", t.decay},
              {"weight_decay", t.weight_decay},
              {"divergence", t.divergence.name()},
              {"hidden", t.hidden},
              {"time_embedding", t.embedding.time_width},
              {"uncond_prob", t.uncond_prob},
              {"strategy", ""}});
    d.update(sde_defaults());
  } else if (cmd == "impute") {
    d.update({{"data", ""},
              {"checkpoint", ""},
              {"samples", 100},
              {"split", "test"},
              {"max_windows", 0},
              {"zero_policy", false},
              {"strategy", ""},
              {"langevin_steps", 0},
              {"snr", 0.16},
              {"time_embedding", nn::EmbeddingSpec{}.time_width}});
    d.update(sde_defaults());
  } else if (cmd == "eval") {
    d.update({{"impute", ""}});
  }
  return d;
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  for (auto& c : f)
    if (c == '_') c = '-';
  return "--" + f;
}

// Interprets a flag value against the type of its default.
json parse_flag(const json& def, const std::string& text, const std::string& key) {
  try {
    if (def.is_string()) return text;
    if (def.is_array()) {
      if (!text.empty() && text.front() == '[') return json::parse(text);
      json arr = json::array();
      std::stringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        arr.push_back(json::parse(item));
      }
      return arr;
    }
    return json::parse(text);
  } catch (const json::exception&) {
    throw ValidationError("option " + flag_name(key) + ": cannot parse '" + text + "'");
  }
}

json load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ParseError("config '" + path + "': " + e.what(), 1);
  }
  if (j.contains("config") && j.contains("command")) j = j["config"];
  if (!j.is_object()) throw ValidationError("config '" + path + "' must be a JSON object");
  return j;
}

// Layers file values onto defaults; unknown keys and type changes are rejected.
void merge_into(json& base, const json& overlay, const std::string& origin) {
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (!base.contains(it.key())) throw ValidationError(origin + ": unknown setting '" + it.key() + "'");
    const json& def = base[it.key()];
    const bool same = (def.is_number() && it->is_number()) || def.type() == it->type();
    if (!same) throw ValidationError(origin + ": setting '" + it.key() + "' has the wrong type");
    base[it.key()] = *it;
  }
}

sde::SdeSpec sde_from(const json& c) {
  const std::string kind = c.at("sde").get<std::string>();
  sde::SdeSpec s;
  if (kind == "ve") {
    s = sde::SdeSpec::ve(c.at("sigma_min").get<double>(), c.at("sigma_max").get<double>(), c.at("steps").get<int>());
  } else if (kind == "vp") {
    s = sde::SdeSpec::vp(c.at("beta_min").get<double>(), c.at("beta_max").get<double>(), c.at("steps").get<int>());
  } else {
    throw ValidationError("sde must be 've' or 'vp'");
  }
  s.sigma_min = c.at("sigma_min").get<double>();
  s.sigma_max = c.at("sigma_max").get<double>();
  s.beta_min = c.at("beta_min").get<double>();
  s.beta_max = c.at("beta_max").get<double>();
  s.ou_rate = c.at("ou_rate").get<double>();
  s.validate();
  return s;
}

json sde_to_json(const sde::SdeSpec& s) {
  return {{"sde", s.kind == sde::SdeKind::kVE ? "ve" : "vp"},
          {"sigma_min", s.sigma_min},
          {"sigma_max", s.sigma_max},
          {"beta_min", s.beta_min},
          {"beta_max", s.beta_max},
          {"steps", s.n_steps},
          {"ou_rate", s.ou_rate}};
}

void prepare_out(const std::string& out, const std::string& cmd, const json& cfg) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory '" + out + "': " + ec.message());
  std::ofstream f(out + "/config.json");
  if (!f) throw IoError("cannot write to output directory '" + out + "'");
  f << json{{"command", cmd}, {"version", SBRIDGE_VERSION}, {"config", cfg}}.dump(2) << '\n';
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path + "' failed");
}

std::string fmt_eps(double eps) {
  std::ostringstream os;
  os << eps;
  return os.str();
}

int cmd_gen_data(const json& c, const std::string& out) {
  data::SignalConfig sc;
  sc.n_samples = c.at("samples").get<int>();
  sc.K = c.at("K").get<int>();
  sc.L = c.at("L").get<int>();
  sc.sigma = c.at("sigma").get<double>();
  sc.drop_ratio = c.at("drop").get<double>();
  sc.strategy = data::TargetStrategy::parse(c.at("strategy").get<std::string>());
  const int train = c.at("train").get<int>();
  sc.n_train = train >= 0 ? train : static_cast<int>(std::lround(0.8 * std::max(sc.n_samples, 0)));
  sc.validate();
  const data::Dataset ds = data::make_dataset(sc, c.at("seed").get<std::uint64_t>());
  prepare_out(out, "gen-data", c);
  data::save_dataset(ds, out + "/dataset.jsonl");
  for (std::size_t i = 0; i < std::min<std::size_t>(4, ds.windows.size()); ++i) {
    std::ostringstream os;
    data::write_window_csv(os, ds.windows[i]);
    write_text(out + "/preview_" + std::to_string(i) + ".csv", os.str());
  }
  std::cout << "wrote " << ds.windows.size() << " windows (K=" << sc.K << ", L=" << sc.L << ") to " << out << "/dataset.jsonl\n";
  return 0;
}

int cmd_sinkhorn(const json& c, const std::string& out) {
  const auto eps_list = c.at("eps_list").get<std::vector<double>>();
  if (eps_list.empty()) throw ValidationError("eps_list is empty");
  for (double e : eps_list)
    if (!(e >= 0.0)) throw ValidationError("eps values must be >= 0");
  const int iters = c.at("iters").get<int>();
  if (iters < 1) throw ValidationError("iters must be >= 1");
  const double cost_eps = c.at("cost_eps").get<double>();
  const sde::SdeSpec spec = sde_from(c);
  const eot::EotInstance inst = eot::make_instance(c.at("n").get<int>(), c.at("m").get<int>(), c.at("d").get<int>(),
                                                   c.at("instance_seed").get<std::uint64_t>(), spec, cost_eps);
  prepare_out(out, "sinkhorn", c);
  eot::AipfOptions opts;
  opts.oracle_iters = c.at("oracle_iters").get<int>();
  json summary = json::object();
  const Rng root(c.at("seed").get<std::uint64_t>(), 0x51);
  for (std::size_t e = 0; e < eps_list.size(); ++e) {
    const double eps = eps_list[e];
    Rng rng = root.split(e);
    const eot::ConvergenceTrace trace = eot::run_aipf(inst.mu, inst.nu, inst.cost, eps, iters, rng, opts);
    const eot::TraceDiagnostics d = eot::diagnose_trace(trace, eps, c.at("slack").get<double>());
    std::ostringstream os;
    eot::write_trace_csv(os, trace);
    write_text(out + "/trace_eps_" + fmt_eps(eps) + ".csv", os.str());
    summary[fmt_eps(eps)] = {{"A", d.fit.a},
                             {"B", d.fit.b},
                             {"violations", d.monotonicity_violations},
                             {"bound_check", d.bound_check},
                             {"bound", d.bound},
                             {"final_kl_mu", trace.records.back().kl_mu}};
    std::cout << "eps=" << fmt_eps(eps) << "  A=" << d.fit.a << "  B=" << d.fit.b << "  violations=" << d.monotonicity_violations
              << "  bound_check=" << (d.bound_check ? "pass" : "fail") << '\n';
  }
  write_text(out + "/summary.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_train(const json& c, const std::string& out) {
  const std::string path = c.at("data").get<std::string>();
  if (path.empty()) throw ValidationError("train needs --data");
  csbi::TrainConfig t;
  t.seed = c.at("seed").get<std::uint64_t>();
  t.threads = c.at("threads").get<int>();
  t.warmup_iters = c.at("warmup").get<int>();
  t.stages = c.at("stages").get<int>();
  t.iters_per_stage = c.at("iters_per_stage").get<int>();
  t.refresh_period = c.at("refresh").get<int>();
  t.batch_size = c.at("batch").get<int>();
  t.cache_paths = c.at("cache_paths").get<int>();
  t.lr_warmup = c.at("lr_warmup").get<double>();
  t.lr_forward = c.at("lr_forward").get<double>();
  t.lr_backward = c.at("lr_backward").get<double>();
  t.decay = c.at("decay").get<double>();
  t.weight_decay = c.at("weight_decay").get<double>();
  t.divergence = csbi::DivergenceMode::parse(c.at("divergence").get<std::string>());
  t.hidden = c.at("hidden").get<std::vector<int>>();
  t.embedding.time_width = c.at("time_embedding").get<int>();
  t.uncond_prob = c.at("uncond_prob").get<double>();
  t.sde = sde_from(c);
  t.validate();
  const data::Dataset ds = data::load_dataset(path);
  const std::string strat = c.at("strategy").get<std::string>();
  const data::TargetStrategy strategy = strat.empty() ? ds.config.strategy : data::TargetStrategy::parse(strat);
  const auto windows = ds.train();
  if (windows.empty()) throw ValidationError("dataset has no training windows");
  prepare_out(out, "train", c);
  const csbi::TrainResult res = csbi::train(t, windows, strategy);
  io::save_pair(res.pair, t.seed, out + "/checkpoint");
  write_text(out + "/checkpoint/sde.json", sde_to_json(t.sde).dump(2) + "\n");
  write_text(out + "/train_log.jsonl", res.log.to_jsonl());
  std::cout << "trained " << t.stages << " stages on " << windows.size() << " windows; checkpoint in " << out << "/checkpoint\n";
  return 0;
}

int cmd_impute(const json& c, const std::string& out) {
  const std::string path = c.at("data").get<std::string>();
  if (path.empty()) throw ValidationError("impute needs --data");
  const int n_samples = c.at("samples").get<int>();
  if (n_samples < 2) throw ValidationError("samples must be >= 2");
  const bool zero = c.at("zero_policy").get<bool>();
  const std::string ckpt = c.at("checkpoint").get<std::string>();
  if (!zero && ckpt.empty()) throw ValidationError("impute needs --checkpoint or --zero-policy");
  const std::string split = c.at("split").get<std::string>();
  if (split != "test" && split != "train" && split != "all") throw ValidationError("split must be test, train or all");

  csbi::ImputeOptions opts;
  opts.sde = sde_from(c);
  opts.threads = c.at("threads").get<int>();
  opts.langevin.steps = c.at("langevin_steps").get<int>();
  opts.langevin.snr = c.at("snr").get<double>();

  const data::Dataset ds = data::load_dataset(path);
  csbi::PolicyNet net;
  if (zero) {
    net.K = ds.config.K;
    net.L = ds.config.L;
    net.conditional = true;
    net.embedding.time_width = c.at("time_embedding").get<int>();
    net.mlp = nn::MlpParams::zeros({net.input_width(), net.dim()});
  } else {
    net = io::load_policy(ckpt + "/backward");
    if (net.K != ds.config.K || net.L != ds.config.L) throw ValidationError("checkpoint shape differs from the dataset");
  }
  std::vector<data::TimeSeriesWindow> windows = split == "test" ? ds.test() : split == "train" ? ds.train() : ds.windows;
  const int max_w = c.at("max_windows").get<int>();
  if (max_w > 0 && static_cast<int>(windows.size()) > max_w) windows.resize(static_cast<std::size_t>(max_w));
  if (windows.empty()) throw ValidationError("no windows selected");
  const Rng root(c.at("seed").get<std::uint64_t>(), 0x1A);
  const std::string strat = c.at("strategy").get<std::string>();
  if (!strat.empty()) {
    const data::TargetStrategy s = data::TargetStrategy::parse(strat);
    Rng mrng = root.split(1u << 20);
    for (auto& w : windows) w.masks = data::make_masks(w.masks.obs, s, mrng);
  }
  prepare_out(out, "impute", c);

  const int K = ds.config.K, L = ds.config.L;
  std::vector<double> flat;
  flat.reserve(windows.size() * static_cast<std::size_t>(n_samples * K * L));
  std::ostringstream csv;
  csv << "window,feature,time,median,q10,q90,truth,cond,target\n" << std::setprecision(17);
  const Eigen::VectorXd grid = data::time_grid(L);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& win = windows[w];
    const auto samples = csbi::impute(net, win.values.cwiseProduct(win.masks.cond), win.masks, n_samples, opts, root.split(w));
    for (const auto& s : samples)
      for (int k = 0; k < K; ++k)
        for (int l = 0; l < L; ++l) flat.push_back(s(k, l));
    const Eigen::MatrixXd med = metrics::sample_median(samples), q10 = metrics::sample_quantile(samples, 0.1),
                          q90 = metrics::sample_quantile(samples, 0.9);
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < L; ++l)
        csv << w << ',' << k << ',' << grid[l] << ',' << med(k, l) << ',' << q10(k, l) << ',' << q90(k, l) << ','
            << win.values(k, l) << ',' << win.masks.cond(k, l) << ',' << win.masks.target(k, l) << '\n';
  }
  io::write_f64(out + "/samples.bin", flat);
  const json meta = {{"n_samples", n_samples},
                     {"n_windows", windows.size()},
                     {"K", K},
                     {"L", L},
                     {"layout", "window,sample,feature,time"},
                     {"dtype", "float64-le"},
                     {"zero_policy", zero}};
  write_text(out + "/samples.json", meta.dump(2) + "\n");
  write_text(out + "/quantiles.csv", csv.str());
  data::Dataset used{ds.config, ds.seed, windows};
  used.config.n_samples = static_cast<int>(windows.size());
  used.config.n_train = 0;
  data::save_dataset(used, out + "/windows.jsonl");
  std::cout << "imputed " << windows.size() << " windows x " << n_samples << " samples into " << out << '\n';
  return 0;
}

int cmd_eval(const json& c, const std::string& out) {
  const std::string dir = c.at("impute").get<std::string>();
  if (dir.empty()) throw ValidationError("eval needs --impute DIR");
  std::ifstream mf(dir + "/samples.json");
  if (!mf) throw IoError("cannot open '" + dir + "/samples.json'");
  json meta;
  try {
    meta = json::parse(mf);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("samples.json: ") + e.what(), 1);
  }
  const int S = meta.at("n_samples").get<int>(), W = meta.at("n_windows").get<int>(), K = meta.at("K").get<int>(),
            L = meta.at("L").get<int>();
  const std::vector<double> flat = io::read_f64(dir + "/samples.bin");
  if (flat.size() != static_cast<std::size_t>(W) * S * K * L) throw IoError("samples.bin size disagrees with samples.json");
  const data::Dataset ds = data::load_dataset(dir + "/windows.jsonl");
  if (static_cast<int>(ds.windows.size()) != W) throw IoError("windows.jsonl holds a different number of windows");
  prepare_out(out, "eval", c);
  std::vector<std::vector<Eigen::MatrixXd>> samples(static_cast<std::size_t>(W));
  std::vector<Eigen::MatrixXd> truth, target;
  std::size_t o = 0;
  for (int w = 0; w < W; ++w) {
    for (int s = 0; s < S; ++s) {
      Eigen::MatrixXd m(K, L);
      for (int k = 0; k < K; ++k)
        for (int l = 0; l < L; ++l) m(k, l) = flat[o++];
      samples[static_cast<std::size_t>(w)].push_back(std::move(m));
    }
    truth.push_back(ds.windows[static_cast<std::size_t>(w)].values);
    target.push_back(ds.windows[static_cast<std::size_t>(w)].masks.target);
  }
  const metrics::MetricReport r = metrics::evaluate(samples, truth, target);
  write_text(out + "/metrics.json", r.to_json() + "\n");
  std::cout << std::setprecision(6) << "rmse=" << r.rmse << "  mae=" << r.mae << "  crps=" << r.crps << "  (" << r.n_target_entries
            << " target entries, " << r.n_samples << " samples)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Schrodinger-bridge toolkit: entropic OT convergence studies and conditional time-series imputation"};
  app.set_version_flag("--version", std::string(SBRIDGE_VERSION));
  app.require_subcommand(1);

  struct Sub {
    CLI::App* app;
    json defaults;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> opts;
    std::string config;
    std::string out;
  };
  std::map<std::string, Sub> subs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate the synthetic sinusoid dataset"},
      {"sinkhorn", "approximate-IPF convergence study on a seeded entropic OT instance"},
      {"train", "train the conditional bridge (warmup, then alternating stages)"},
      {"impute", "sample imputations for dataset windows"},
      {"eval", "RMSE, MAE and CRPS of an imputation run"}};
  for (const auto& [name, help] : commands) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    s.defaults = defaults_for(name);
    s.app->add_option("--config", s.config, "JSON config; flags override its values");
    s.app->add_option("--out", s.out, "output directory")->required();
    for (auto it = s.defaults.begin(); it != s.defaults.end(); ++it) {
      const std::string key = it.key();
      const std::string help_text = "default " + it->dump();
      if (it->is_boolean()) {
        s.opts[key] = s.app->add_flag(flag_name(key), help_text);
      } else {
        s.opts[key] = s.app->add_option(flag_name(key), s.values[key], help_text);
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      json cfg = s.defaults;
      const json file = s.config.empty() ? json::object() : load_config_file(s.config);
      if (name == "gen-data") {
        const std::string preset = s.opts["preset"]->count() ? s.values["preset"] : file.value("preset", std::string("paper"));
        if (preset == "desk") {
          const data::SignalConfig desk = data::SignalConfig::desk();
          cfg.update({{"K", desk.K}, {"L", desk.L}, {"strategy", desk.strategy.name()}});
        } else if (preset != "paper") {
          throw ValidationError("preset must be 'paper' or 'desk'");
        }
      }
      merge_into(cfg, file, "config '" + s.config + "'");
      if (name == "impute") {
        const std::string ckpt = s.opts["checkpoint"]->count() ? s.values["checkpoint"] : cfg["checkpoint"].get<std::string>();
        const bool sde_given = std::any_of(s.opts.begin(), s.opts.end(), [&](const auto& kv) {
          return sde_defaults().contains(kv.first) && kv.second->count() > 0;
        });
        if (!ckpt.empty() && !sde_given && fs::exists(ckpt + "/sde.json")) {
          std::ifstream f(ckpt + "/sde.json");
          merge_into(cfg, json::parse(f), "checkpoint sde.json");
        }
      }
      for (auto& [key, opt] : s.opts) {
        if (opt->count() == 0) continue;
        cfg[key] = s.defaults[key].is_boolean() ? json(true) : parse_flag(s.defaults[key], s.values[key], key);
      }
      if (cfg["threads"].get<int>() < 1) throw ValidationError("threads must be >= 1");
      if (name == "gen-data") return cmd_gen_data(cfg, s.out);
      if (name == "sinkhorn") return cmd_sinkhorn(cfg, s.out);
      if (name == "train") return cmd_train(cfg, s.out);
      if (name == "impute") return cmd_impute(cfg, s.out);
      if (name == "eval") return cmd_eval(cfg, s.out);
    }
  } catch (const DivergenceError& e) {
    std::cerr << "error: numeric divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad setting: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
