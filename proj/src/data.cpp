#include "sbridge/data.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include "json.hpp"
#include <numbers>
#include <ostream>
#include <sstream>

#include "sbridge/errors.hpp"

namespace sbridge::data {
namespace {

using nlohmann::json;
constexpr int kFormatVersion = 1;

bool is_binary(const Mask& m) { return ((m.array() == 0.0) || (m.array() == 1.0)).all(); }

json grid_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index k = 0; k < m.rows(); ++k) {
    json row = json::array();
    for (Eigen::Index l = 0; l < m.cols(); ++l) row.push_back(m(k, l));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd grid_from_json(const json& j, int K, int L, const char* field) {
  if (!j.is_array() || static_cast<int>(j.size()) != K) throw ValidationError(std::string(field) + ": expected " + std::to_string(K) + " rows");
  Eigen::MatrixXd m(K, L);
  for (int k = 0; k < K; ++k) {
    const json& row = j[static_cast<std::size_t>(k)];
    if (!row.is_array() || static_cast<int>(row.size()) != L) throw ValidationError(std::string(field) + ": expected " + std::to_string(L) + " columns");
    for (int l = 0; l < L; ++l) m(k, l) = row[static_cast<std::size_t>(l)].get<double>();
  }
  return m;
}

json strategy_to_json(const TargetStrategy& s) {
  switch (s.kind) {
    case TargetKind::kConsecutiveBlock: return {{"kind", "consecutive_block"}, {"length", s.length}};
    case TargetKind::kRandomRatio: return {{"kind", "random_ratio"}, {"ratio", s.ratio}};
    case TargetKind::kForecast: return {{"kind", "forecast"}, {"context", s.context}};
  }
  return {};
}

TargetStrategy strategy_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "consecutive_block") return TargetStrategy::consecutive_block(j.at("length").get<int>());
  if (kind == "random_ratio") return TargetStrategy::random_ratio(j.at("ratio").get<double>());
  if (kind == "forecast") return TargetStrategy::forecast(j.at("context").get<int>());
  throw ValidationError("unknown target strategy '" + kind + "'");
}

json config_to_json(const SignalConfig& c) {
  return {{"K", c.K},         {"L", c.L},
          {"sigma", c.sigma}, {"n_samples", c.n_samples},
          {"drop_ratio", c.drop_ratio}, {"strategy", strategy_to_json(c.strategy)},
          {"n_train", c.n_train}};
}

SignalConfig config_from_json(const json& j) {
  SignalConfig c;
  c.K = j.at("K").get<int>();
  c.L = j.at("L").get<int>();
  c.sigma = j.at("sigma").get<double>();
  c.n_samples = j.at("n_samples").get<int>();
  c.drop_ratio = j.at("drop_ratio").get<double>();
  c.strategy = strategy_from_json(j.at("strategy"));
  c.n_train = j.at("n_train").get<int>();
  return c;
}

}  // namespace

void MaskSet::validate(bool evaluation) const {
  if (obs.rows() != cond.rows() || obs.cols() != cond.cols() || obs.rows() != target.rows() || obs.cols() != target.cols()) {
    throw ValidationError("masks: shapes differ");
  }
  if (!is_binary(obs) || !is_binary(cond) || !is_binary(target)) throw ValidationError("masks: entries must be 0 or 1");
  if ((cond.array() * target.array()).any()) throw ValidationError("masks: cond and target overlap");
  if ((cond.array() * (1.0 - obs.array())).any()) throw ValidationError("masks: cond includes unobserved entries");
  if (evaluation && (target.array() * (1.0 - obs.array())).any()) throw ValidationError("masks: target includes unobserved entries");
}

std::string TargetStrategy::name() const {
  std::ostringstream os;
  switch (kind) {
    case TargetKind::kConsecutiveBlock: os << "block:" << length; break;
    case TargetKind::kRandomRatio: os << "ratio:" << ratio; break;
    case TargetKind::kForecast: os << "forecast:" << context; break;
  }
  return os.str();
}

TargetStrategy TargetStrategy::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw ValidationError("strategy '" + text + "': expected kind:value");
  const std::string kind = text.substr(0, colon), value = text.substr(colon + 1);
  try {
    if (kind == "block") return consecutive_block(std::stoi(value));
    if (kind == "ratio") return random_ratio(std::stod(value));
    if (kind == "forecast") return forecast(std::stoi(value));
  } catch (const std::logic_error&) {
    throw ValidationError("strategy '" + text + "': bad value");
  }
  throw ValidationError("strategy '" + text + "': unknown kind (block, ratio, forecast)");
}

void SignalConfig::validate() const {
  if (K < 1 || K > 8) throw ValidationError("signal config: K must be in [1, 8]");
  if (L < 2) throw ValidationError("signal config: L must be >= 2");
  if (!(sigma >= 0.0)) throw ValidationError("signal config: sigma must be >= 0");
  if (n_samples < 1) throw ValidationError("signal config: n_samples must be >= 1");
  if (!(drop_ratio >= 0.0 && drop_ratio < 1.0)) throw ValidationError("signal config: drop ratio must be in [0, 1)");
  if (n_train < 0 || n_train > n_samples) throw ValidationError("signal config: n_train must be in [0, n_samples]");
  switch (strategy.kind) {
    case TargetKind::kConsecutiveBlock:
      if (strategy.length < 1 || strategy.length > L) throw ValidationError("signal config: block length must be in [1, L]");
      break;
    case TargetKind::kRandomRatio:
      if (!(strategy.ratio >= 0.0 && strategy.ratio < 1.0)) throw ValidationError("signal config: target ratio must be in [0, 1)");
      break;
    case TargetKind::kForecast:
      if (strategy.context < 0 || strategy.context > L) throw ValidationError("signal config: context must be in [0, L]");
      break;
  }
}

SignalConfig SignalConfig::desk() {
  SignalConfig c;
  c.K = 2;
  c.L = 20;
  c.sigma = 0.1;
  c.n_samples = 1000;
  c.n_train = 800;
  c.strategy = TargetStrategy::consecutive_block(8);
  return c;
}

double signal(int k, double t) {
  const double w = 2.0 * std::numbers::pi * t;
  const double s = std::sin(w), c = std::cos(w);
  switch (k) {
    case 1: return s;
    case 2: return c;
    case 3: return s * s;
    case 4: return 2.0 * s * s * c;
    case 5: return s * s * c + 0.3 * t;
    case 6: return s * s * s - 0.3 * t;
    case 7: return c * c * std::exp(-0.1 * t) - 0.2 * t;
    case 8: return c * c * s * std::exp(0.4 * t) + 0.2 * t;
    default: throw DomainError("signal: k must be in 1..8, got " + std::to_string(k));
  }
}

Eigen::VectorXd time_grid(int L) {
  if (L < 2) throw ValidationError("time_grid: L must be >= 2");
  return Eigen::VectorXd::LinSpaced(L, 0.0, 1.0);
}

MaskSet make_masks(const Mask& obs, const TargetStrategy& strategy, Rng& rng) {
  if (!is_binary(obs)) throw ValidationError("make_masks: observation mask must be binary");
  const Eigen::Index K = obs.rows(), L = obs.cols();
  Mask target = Mask::Zero(K, L);
  switch (strategy.kind) {
    case TargetKind::kConsecutiveBlock: {
      if (strategy.length < 1 || strategy.length > L) throw ValidationError("make_masks: block length must be in [1, L]");
      for (Eigen::Index k = 0; k < K; ++k) {
        const auto start = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(L - strategy.length + 1)));
        target.row(k).segment(start, strategy.length).setOnes();
      }
      break;
    }
    case TargetKind::kRandomRatio:
      if (!(strategy.ratio >= 0.0 && strategy.ratio < 1.0)) throw ValidationError("make_masks: ratio must be in [0, 1)");
      for (Eigen::Index l = 0; l < L; ++l)
        for (Eigen::Index k = 0; k < K; ++k) target(k, l) = rng.bernoulli(strategy.ratio) ? 1.0 : 0.0;
      break;
    case TargetKind::kForecast:
      if (strategy.context < 0 || strategy.context > L) throw ValidationError("make_masks: context must be in [0, L]");
      target.rightCols(L - strategy.context).setOnes();
      break;
  }
  MaskSet m;
  m.obs = obs;
  m.target = target.cwiseProduct(obs);
  m.cond = obs - m.target;
  return m;
}

std::vector<TimeSeriesWindow> generate(const SignalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Eigen::VectorXd grid = time_grid(cfg.L);
  const Rng root(seed, 0xDA7A);
  std::vector<TimeSeriesWindow> out;
  out.reserve(static_cast<std::size_t>(cfg.n_samples));
  for (int i = 0; i < cfg.n_samples; ++i) {
    Rng rng = root.split(static_cast<std::uint64_t>(i));
    const double shift = rng.uniform();
    TimeSeriesWindow w;
    w.values.resize(cfg.K, cfg.L);
    for (int k = 0; k < cfg.K; ++k)
      for (int l = 0; l < cfg.L; ++l) w.values(k, l) = signal(k + 1, grid[l] + shift) + cfg.sigma * rng.normal();
    Mask obs(cfg.K, cfg.L);
    for (int l = 0; l < cfg.L; ++l)
      for (int k = 0; k < cfg.K; ++k) obs(k, l) = rng.bernoulli(cfg.drop_ratio) ? 0.0 : 1.0;
    w.values = w.values.cwiseProduct(obs);
    w.masks = make_masks(obs, cfg.strategy, rng);
    out.push_back(std::move(w));
  }
  return out;
}

Dataset make_dataset(const SignalConfig& cfg, std::uint64_t seed) { return {cfg, seed, generate(cfg, seed)}; }

std::vector<TimeSeriesWindow> Dataset::train() const {
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(config.n_train), windows.size());
  return {windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<TimeSeriesWindow> Dataset::test() const {
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(config.n_train), windows.size());
  return {windows.begin() + static_cast<std::ptrdiff_t>(n), windows.end()};
}

void write_dataset(std::ostream& os, const Dataset& ds) {
  const json header = {{"version", kFormatVersion},
                       {"K", ds.config.K},
                       {"L", ds.config.L},
                       {"seed", ds.seed},
                       {"config", config_to_json(ds.config)},
                       {"n_records", ds.windows.size()}};
  os << header.dump() << '\n';
  for (const auto& w : ds.windows) {
    const json rec = {{"values", grid_to_json(w.values)},
                      {"m_obs", grid_to_json(w.masks.obs)},
                      {"m_cond", grid_to_json(w.masks.cond)},
                      {"m_target", grid_to_json(w.masks.target)}};
    os << rec.dump() << '\n';
  }
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  write_dataset(f, ds);
  if (!f) throw IoError("write to '" + path + "' failed");
}

Dataset read_dataset(std::istream& is) {
  std::string line;
  long line_no = 1;
  if (!std::getline(is, line)) throw ParseError("missing header", line_no);
  Dataset ds;
  std::size_t n_records = 0;
  try {
    const json h = json::parse(line);
    if (h.at("version").get<int>() != kFormatVersion) throw ParseError("unsupported dataset version", line_no);
    ds.config = config_from_json(h.at("config"));
    ds.seed = h.at("seed").get<std::uint64_t>();
    n_records = h.at("n_records").get<std::size_t>();
    if (h.at("K").get<int>() != ds.config.K || h.at("L").get<int>() != ds.config.L) throw ParseError("header K/L disagree with config", line_no);
    ds.config.validate();
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(std::string("bad header: ") + e.what(), line_no);
  }
  const int K = ds.config.K, L = ds.config.L;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json r = json::parse(line);
      TimeSeriesWindow w;
      w.values = grid_from_json(r.at("values"), K, L, "values");
      w.masks.obs = grid_from_json(r.at("m_obs"), K, L, "m_obs");
      w.masks.cond = grid_from_json(r.at("m_cond"), K, L, "m_cond");
      w.masks.target = grid_from_json(r.at("m_target"), K, L, "m_target");
      w.masks.validate(false);
      ds.windows.push_back(std::move(w));
    } catch (const std::exception& e) {
      throw ParseError(std::string("bad record: ") + e.what(), line_no);
    }
  }
  if (ds.windows.size() != n_records) {
    throw ParseError("truncated dataset: header declares " + std::to_string(n_records) + " records, found " +
                         std::to_string(ds.windows.size()),
                     line_no);
  }
  return ds;
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return read_dataset(f);
}

void write_window_csv(std::ostream& os, const TimeSeriesWindow& w) {
  const Eigen::VectorXd grid = time_grid(static_cast<int>(w.values.cols()));
  os << "feature,time,value,obs,cond,target\n" << std::setprecision(17);
  for (Eigen::Index k = 0; k < w.values.rows(); ++k) {
    for (Eigen::Index l = 0; l < w.values.cols(); ++l) {
      os << k << ',' << grid[l] << ',' << w.values(k, l) << ',' << w.masks.obs(k, l) << ',' << w.masks.cond(k, l) << ','
         << w.masks.target(k, l) << '\n';
    }
  }
}

}  // namespace sbridge::data
