#include "sbridge/csbi.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "sbridge/errors.hpp"

namespace sbridge::csbi {
namespace {

constexpr std::uint64_t kInitBackward = 11, kInitForward = 12, kWarmup = 21, kCache = 22, kBatch = 23, kProbe = 24;

void check_batch_shapes(const PolicyNet& net, const Eigen::MatrixXd& x, std::span<const double> t) {
  if (x.rows() != net.dim()) throw ValidationError("policy: state width " + std::to_string(x.rows()) + ", expected " + std::to_string(net.dim()));
  if (static_cast<Eigen::Index>(t.size()) != x.cols()) throw ValidationError("policy: one time per column required");
}

std::vector<double> constant_times(Eigen::Index n, double t) { return std::vector<double>(static_cast<std::size_t>(n), t); }

data::MaskSet draw_masks(const data::Mask& obs, const data::TargetStrategy& strategy, double uncond_prob, Rng& rng) {
  if (rng.bernoulli(uncond_prob)) return {obs, data::Mask::Zero(obs.rows(), obs.cols()), obs};
  return data::make_masks(obs, strategy, rng);
}

// Probe directions for one sample, restricted to target coordinates.
void append_probes(const DivergenceMode& mode, const Eigen::VectorXd& target, Rng& rng, std::vector<Eigen::VectorXd>& probes,
                   std::vector<double>& weights) {
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < target.size(); ++i)
    if (target[i] != 0.0) idx.push_back(i);
  if (idx.empty()) return;
  const Eigen::Index D = target.size();
  switch (mode.kind) {
    case DivergenceKind::kExact:
      for (Eigen::Index i : idx) {
        probes.push_back(Eigen::VectorXd::Unit(D, i));
        weights.push_back(1.0);
      }
      break;
    case DivergenceKind::kHutchinson:
      for (int p = 0; p < mode.n_probes; ++p) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(D);
        for (Eigen::Index i : idx) v[i] = rng.rademacher();
        probes.push_back(std::move(v));
        weights.push_back(1.0 / mode.n_probes);
      }
      break;
    case DivergenceKind::kComplete: {
      if (idx.size() > 20) throw ValidationError("complete probe set: more than 20 target coordinates");
      const std::uint64_t n = std::uint64_t{1} << idx.size();
      for (std::uint64_t pattern = 0; pattern < n; ++pattern) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(D);
        for (std::size_t j = 0; j < idx.size(); ++j) v[idx[j]] = ((pattern >> j) & 1U) ? -1.0 : 1.0;
        probes.push_back(std::move(v));
        weights.push_back(1.0 / static_cast<double>(n));
      }
      break;
    }
  }
}

Rng derive(Rng& parent) { return Rng(parent.next_u64(), parent.next_u64()); }

}  // namespace

std::string DivergenceMode::name() const {
  switch (kind) {
    case DivergenceKind::kExact: return "exact";
    case DivergenceKind::kComplete: return "complete";
    case DivergenceKind::kHutchinson: return "hutchinson:" + std::to_string(n_probes);
  }
  return {};
}

DivergenceMode DivergenceMode::parse(const std::string& text) {
  if (text == "exact") return exact();
  if (text == "complete") return complete();
  if (text.rfind("hutchinson:", 0) == 0) {
    int n = 0;
    try {
      n = std::stoi(text.substr(11));
    } catch (const std::logic_error&) {
      throw ValidationError("divergence mode '" + text + "': bad probe count");
    }
    if (n < 1) throw ValidationError("divergence mode: probe count must be >= 1");
    return hutchinson(n);
  }
  throw ValidationError("divergence mode '" + text + "': expected exact, complete or hutchinson:N");
}

Eigen::MatrixXd PolicyNet::assemble(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_cond, const Eigen::MatrixXd& m_cond,
                                    std::span<const double> t) const {
  check_batch_shapes(*this, x, t);
  const Eigen::Index D = dim(), B = x.cols();
  const int E = embedding.width(K, L);
  Eigen::MatrixXd in(input_width(), B);
  if (conditional) {
    if (x_cond.rows() != D || x_cond.cols() != B || m_cond.rows() != D || m_cond.cols() != B) {
      throw ValidationError("policy: condition shapes differ from the state batch");
    }
    in.topRows(D) = x.cwiseProduct((1.0 - m_cond.array()).matrix()) + x_cond.cwiseProduct(m_cond);
    in.middleRows(D, D) = m_cond;
  } else {
    in.topRows(D) = x;
  }
  if (E > 0) {
    const Eigen::Index off = (conditional ? 2 : 1) * D;
    double last_t = std::numeric_limits<double>::quiet_NaN();
    Eigen::VectorXd e;
    for (Eigen::Index b = 0; b < B; ++b) {
      if (!(t[static_cast<std::size_t>(b)] == last_t)) {
        last_t = t[static_cast<std::size_t>(b)];
        e = nn::embed(embedding, last_t, K, L);
      }
      in.col(b).segment(off, E) = e;
    }
  }
  return in;
}

Eigen::MatrixXd PolicyNet::eval(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_cond, const Eigen::MatrixXd& m_cond,
                                std::span<const double> t) const {
  return nn::mlp_forward(mlp, assemble(x, x_cond, m_cond, t));
}

void TrainConfig::validate() const {
  if (warmup_iters < 0 || stages < 0) throw ValidationError("train config: warmup and stages must be >= 0");
  if (iters_per_stage < 1 || refresh_period < 1 || batch_size < 1 || cache_paths < 1) {
    throw ValidationError("train config: iteration, refresh, batch and cache counts must be >= 1");
  }
  if (!(lr_forward > 0.0) || !(lr_backward > 0.0) || !(lr_warmup > 0.0)) throw ValidationError("train config: learning rates must be > 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw ValidationError("train config: decay must be in (0, 1]");
  if (!(weight_decay >= 0.0)) throw ValidationError("train config: weight decay must be >= 0");
  if (divergence.kind == DivergenceKind::kHutchinson && divergence.n_probes < 1) throw ValidationError("train config: probes must be >= 1");
  if (!(uncond_prob >= 0.0 && uncond_prob <= 1.0)) throw ValidationError("train config: uncond_prob must be in [0, 1]");
  if (threads < 1) throw ValidationError("train config: threads must be >= 1");
  for (int h : hidden)
    if (h < 1) throw ValidationError("train config: hidden widths must be >= 1");
  embedding.validate();
  sde.validate();
}

PolicyPair make_policy_pair(int K, int L, const TrainConfig& cfg) {
  cfg.validate();
  if (K < 1 || L < 1) throw ValidationError("make_policy_pair: K and L must be positive");
  const Rng root(cfg.seed, 0xC5B1);
  PolicyPair pair;
  for (bool conditional : {false, true}) {
    PolicyNet& net = conditional ? pair.backward : pair.forward;
    net.embedding = cfg.embedding;
    net.K = K;
    net.L = L;
    net.conditional = conditional;
    std::vector<int> widths{net.input_width()};
    widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
    widths.push_back(net.dim());
    Rng init = root.split(conditional ? kInitBackward : kInitForward);
    net.mlp = nn::MlpParams::glorot(widths, init);
  }
  pair.forward.mlp.layers.back().weight.setZero();
  pair.forward.mlp.layers.back().bias.setZero();
  nn::AdamWConfig fwd{cfg.lr_forward, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.decay};
  nn::AdamWConfig bwd{cfg.lr_warmup, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.decay};
  pair.forward_opt = nn::OptimizerState(fwd, pair.forward.mlp.parameter_count());
  pair.backward_opt = nn::OptimizerState(bwd, pair.backward.mlp.parameter_count());
  return pair;
}

void TrajectoryCache::consume(long generator_step) {
  if (generator_step != policy_step) {
    throw ContractError("trajectory cache was sampled by policy step " + std::to_string(policy_step) +
                        ", generator is now at step " + std::to_string(generator_step));
  }
  if (uses >= refresh_period) {
    throw ContractError("trajectory cache is stale: used " + std::to_string(uses) + " times, refresh period " +
                        std::to_string(refresh_period));
  }
  ++uses;
}

TrajectoryCache sample_forward_cache(const PolicyPair& pair, const std::vector<data::TimeSeriesWindow>& windows,
                                     const TrainConfig& cfg, Rng& rng) {
  if (windows.empty()) throw ValidationError("forward cache: no training windows");
  const int P = cfg.cache_paths, D = pair.forward.dim();
  TrajectoryCache cache;
  cache.x0.resize(D, P);
  cache.obs.resize(D, P);
  for (int p = 0; p < P; ++p) {
    const auto& w = windows[rng.below(windows.size())];
    cache.x0.col(p) = flatten(w.values);
    cache.obs.col(p) = flatten(w.masks.obs);
  }
  Rng base = derive(rng);
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(P));
  for (int p = 0; p < P; ++p) rngs.push_back(base.split(static_cast<std::uint64_t>(p)));
  const PolicyNet& fwd = pair.forward;
  sde::BatchDriftFn policy = [&fwd](const Eigen::MatrixXd& x, double t) {
    return fwd.eval(x, {}, {}, constant_times(x.cols(), t));
  };
  cache.paths = sde::em_forward_batch(cfg.sde, cache.x0, policy, rngs, {cfg.threads, 64});
  cache.refresh_period = cfg.refresh_period;
  cache.policy_step = pair.forward_opt.step;
  return cache;
}

TrajectoryCache sample_backward_cache(const PolicyPair& pair, const TrainConfig& cfg, Rng& rng) {
  const int P = cfg.cache_paths, D = pair.backward.dim();
  Rng base = derive(rng);
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(P));
  Eigen::MatrixXd xT(D, P);
  const double sd = sde::prior_std(cfg.sde);
  for (int p = 0; p < P; ++p) {
    rngs.push_back(base.split(static_cast<std::uint64_t>(p)));
    for (int i = 0; i < D; ++i) xT(i, p) = sd * rngs.back().normal();
  }
  const PolicyNet& bwd = pair.backward;
  sde::BatchDriftFn policy = [&bwd](const Eigen::MatrixXd& x, double t) {
    const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(x.rows(), x.cols());
    return bwd.eval(x, zero, zero, constant_times(x.cols(), t));
  };
  TrajectoryCache cache;
  cache.paths = sde::em_backward_batch(cfg.sde, xT, policy, rngs, {cfg.threads, 64});
  cache.refresh_period = cfg.refresh_period;
  cache.policy_step = pair.backward_opt.step;
  return cache;
}

LossTerms likelihood_loss(const PolicyNet& net, const LossBatch& batch, const DivergenceMode& mode, Rng& probe_rng,
                          nn::MlpParams* grad) {
  const Eigen::Index D = net.dim(), B = batch.x.cols();
  if (batch.x.rows() != D || batch.m_target.rows() != D || batch.m_target.cols() != B || batch.z_other.rows() != D ||
      batch.z_other.cols() != B || batch.t.size() != B || batch.g.size() != B) {
    throw ValidationError("likelihood_loss: batch shapes are inconsistent");
  }
  if (net.conditional && (batch.m_cond.cols() != B || batch.x_cond.cols() != B)) {
    throw ValidationError("likelihood_loss: conditional policy needs x_cond and m_cond");
  }
  if (B == 0) throw ValidationError("likelihood_loss: empty batch");

  std::vector<Eigen::VectorXd> probes;
  std::vector<double> weights;
  std::vector<Eigen::Index> owner;
  std::vector<int> per_sample(static_cast<std::size_t>(B), 0);
  for (Eigen::Index b = 0; b < B; ++b) {
    const std::size_t before = probes.size();
    append_probes(mode, batch.m_target.col(b), probe_rng, probes, weights);
    per_sample[static_cast<std::size_t>(b)] = static_cast<int>(probes.size() - before);
    owner.insert(owner.end(), probes.size() - before, b);
  }
  LossTerms terms;
  const auto C = static_cast<Eigen::Index>(probes.size());
  if (C == 0) return terms;

  const Eigen::MatrixXd in = net.assemble(batch.x, batch.x_cond, batch.m_cond, {batch.t.data(), static_cast<std::size_t>(B)});
  Eigen::MatrixXd X(in.rows(), C), Xdot = Eigen::MatrixXd::Zero(in.rows(), C);
  for (Eigen::Index c = 0; c < C; ++c) {
    X.col(c) = in.col(owner[static_cast<std::size_t>(c)]);
    Xdot.col(c).head(D) = probes[static_cast<std::size_t>(c)];
  }
  const nn::DualTape tape = nn::dual_forward(net.mlp, X, Xdot);

  Eigen::MatrixXd ybar(D, C), ydotbar(D, C);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (Eigen::Index c = 0; c < C; ++c) {
    const Eigen::Index b = owner[static_cast<std::size_t>(c)];
    const double share = inv_b / per_sample[static_cast<std::size_t>(b)];
    const Eigen::VectorXd m = batch.m_target.col(b);
    const Eigen::VectorXd zm = tape.y.col(c).cwiseProduct(m);
    const Eigen::VectorXd zo = batch.z_other.col(b).cwiseProduct(m);
    const Eigen::VectorXd& v = probes[static_cast<std::size_t>(c)];
    const double w = weights[static_cast<std::size_t>(c)];
    terms.quadratic += share * 0.5 * zm.squaredNorm();
    terms.cross += share * zo.dot(zm);
    terms.divergence += inv_b * batch.g[b] * w * v.dot(tape.ydot.col(c).cwiseProduct(m));
    ybar.col(c) = share * (zm + zo).cwiseProduct(m);
    ydotbar.col(c) = (inv_b * batch.g[b] * w) * v.cwiseProduct(m);
  }
  if (grad) nn::dual_backward(net.mlp, tape, ybar, ydotbar, *grad);
  return terms;
}

LossBatch backward_batch(const PolicyPair& pair, TrajectoryCache& cache, const sde::SdeSpec& spec, std::span<const int> paths,
                         std::span<const int> steps, const std::vector<data::MaskSet>& masks) {
  const std::size_t B = paths.size();
  if (steps.size() != B || masks.size() != B) throw ValidationError("backward_batch: paths, steps and masks differ in length");
  if (cache.x0.cols() == 0) throw ValidationError("backward_batch: cache has no initial states (not a forward cache)");
  cache.consume(pair.forward_opt.step);
  const Eigen::Index D = pair.backward.dim();
  LossBatch lb;
  lb.x.resize(D, static_cast<Eigen::Index>(B));
  lb.t.resize(static_cast<Eigen::Index>(B));
  lb.g.resize(static_cast<Eigen::Index>(B));
  lb.x_cond.resize(D, static_cast<Eigen::Index>(B));
  lb.m_cond.resize(D, static_cast<Eigen::Index>(B));
  lb.m_target.resize(D, static_cast<Eigen::Index>(B));
  for (std::size_t b = 0; b < B; ++b) {
    const int p = paths[b], i = steps[b];
    if (p < 0 || p >= cache.paths.paths()) throw ValidationError("backward_batch: path index out of range");
    if (i < 1 || i > spec.n_steps) throw ValidationError("backward_batch: step must be in 1..N");
    const auto col = static_cast<Eigen::Index>(b);
    lb.x.col(col) = cache.paths.states[static_cast<std::size_t>(i)].col(p);
    lb.t[col] = spec.time_at(i);
    lb.g[col] = sde::diffusion_coefficient(spec, lb.t[col]);
    lb.m_cond.col(col) = flatten(masks[b].cond);
    lb.m_target.col(col) = flatten(masks[b].target);
    lb.x_cond.col(col) = cache.x0.col(p).cwiseProduct(lb.m_cond.col(col));
  }
  lb.z_other = pair.forward.eval(lb.x, {}, {}, {lb.t.data(), B});
  return lb;
}

LossBatch forward_batch(const PolicyPair& pair, TrajectoryCache& cache, const sde::SdeSpec& spec, std::span<const int> paths,
                        std::span<const int> steps) {
  const std::size_t B = paths.size();
  if (steps.size() != B) throw ValidationError("forward_batch: paths and steps differ in length");
  cache.consume(pair.backward_opt.step);
  const Eigen::Index D = pair.forward.dim();
  LossBatch lb;
  lb.x.resize(D, static_cast<Eigen::Index>(B));
  lb.t.resize(static_cast<Eigen::Index>(B));
  lb.g.resize(static_cast<Eigen::Index>(B));
  lb.x_cond = Eigen::MatrixXd::Zero(D, static_cast<Eigen::Index>(B));
  lb.m_cond = Eigen::MatrixXd::Zero(D, static_cast<Eigen::Index>(B));
  lb.m_target = Eigen::MatrixXd::Ones(D, static_cast<Eigen::Index>(B));
  for (std::size_t b = 0; b < B; ++b) {
    const int p = paths[b], i = steps[b];
    if (p < 0 || p >= cache.paths.paths()) throw ValidationError("forward_batch: path index out of range");
    if (i < 0 || i >= spec.n_steps) throw ValidationError("forward_batch: step must be in 0..N-1");
    const auto col = static_cast<Eigen::Index>(b);
    lb.x.col(col) = cache.paths.states[static_cast<std::size_t>(i)].col(p);
    lb.t[col] = spec.time_at(i);
    lb.g[col] = sde::diffusion_coefficient(spec, lb.t[col]);
  }
  lb.z_other = pair.backward.eval(lb.x, lb.x_cond, lb.m_cond, {lb.t.data(), B});
  return lb;
}

double dsm_loss(const PolicyNet& backward, const DsmBatch& batch, const sde::SdeSpec& spec, nn::MlpParams* grad) {
  const Eigen::Index D = backward.dim(), B = batch.x0.cols();
  if (batch.x0.rows() != D || batch.noise.rows() != D || batch.noise.cols() != B || batch.t.size() != B ||
      batch.m_cond.cols() != B || batch.m_target.cols() != B) {
    throw ValidationError("dsm_loss: batch shapes are inconsistent");
  }
  if (B == 0) throw ValidationError("dsm_loss: empty batch");
  Eigen::MatrixXd xt(D, B);
  Eigen::VectorXd sd(B), g(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto [factor, var] = sde::schedule_moments(spec, 0.0, batch.t[b]);
    sd[b] = std::sqrt(var);
    g[b] = sde::diffusion_coefficient(spec, batch.t[b]);
    xt.col(b) = factor * batch.x0.col(b) + sd[b] * batch.noise.col(b);
  }
  const Eigen::MatrixXd x_cond = batch.x0.cwiseProduct(batch.m_cond);
  const Eigen::MatrixXd in = backward.assemble(xt, x_cond, batch.m_cond, {batch.t.data(), static_cast<std::size_t>(B)});
  const nn::DualTape tape = nn::dual_forward(backward.mlp, in, Eigen::MatrixXd::Zero(in.rows(), B));
  double loss = 0.0;
  Eigen::MatrixXd ybar(D, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const Eigen::VectorXd r = ((sd[b] / g[b]) * tape.y.col(b) + batch.noise.col(b)).cwiseProduct(batch.m_target.col(b));
    loss += r.squaredNorm() / static_cast<double>(B);
    ybar.col(b) = (2.0 / static_cast<double>(B)) * (sd[b] / g[b]) * r;
  }
  if (grad) nn::dual_backward(backward.mlp, tape, ybar, Eigen::MatrixXd::Zero(D, B), *grad);
  return loss;
}

std::string TrainingLog::to_jsonl() const {
  std::ostringstream os;
  for (const auto& r : records) {
    nlohmann::json j = {{"stage", r.stage}, {"iter", r.iter}};
    if (r.event) {
      j["event"] = r.direction;
    } else {
      j["direction"] = r.direction;
      j["loss"] = r.loss;
      j["lr"] = r.lr;
    }
    os << j.dump() << '\n';
  }
  return os.str();
}

void dsm_warmup(PolicyPair& pair, const std::vector<data::TimeSeriesWindow>& windows, const data::TargetStrategy& strategy,
                const TrainConfig& cfg, Rng& rng, TrainingLog* log) {
  if (windows.empty()) throw ValidationError("dsm_warmup: no training windows");
  const PolicyNet& net = pair.backward;
  const Eigen::Index D = net.dim(), B = cfg.batch_size;
  const int N = cfg.sde.n_steps;
  for (int it = 0; it < cfg.warmup_iters; ++it) {
    DsmBatch batch{Eigen::MatrixXd(D, B), Eigen::MatrixXd(D, B), Eigen::VectorXd(B), Eigen::MatrixXd(D, B), Eigen::MatrixXd(D, B)};
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto& w = windows[rng.below(windows.size())];
      const data::MaskSet m = draw_masks(w.masks.obs, strategy, cfg.uncond_prob, rng);
      batch.x0.col(b) = flatten(w.values);
      batch.m_cond.col(b) = flatten(m.cond);
      batch.m_target.col(b) = flatten(m.target);
      batch.t[b] = cfg.sde.time_at(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(N))));
      for (Eigen::Index i = 0; i < D; ++i) batch.noise(i, b) = rng.normal();
    }
    nn::MlpParams grad = net.mlp.zeros_like();
    const double loss = dsm_loss(net, batch, cfg.sde, &grad);
    if (!std::isfinite(loss)) throw DivergenceError("warmup: non-finite loss at iteration " + std::to_string(it), it);
    const double lr = pair.backward_opt.current_lr();
    nn::adamw_step(pair.backward.mlp, grad, pair.backward_opt);
    if (log) log->records.push_back({-1, it, "warmup", loss, lr});
  }
}

TrainResult train(const TrainConfig& cfg, const std::vector<data::TimeSeriesWindow>& windows, const data::TargetStrategy& strategy) {
  cfg.validate();
  if (windows.empty()) throw ValidationError("train: empty dataset");
  const int K = static_cast<int>(windows.front().values.rows()), L = static_cast<int>(windows.front().values.cols());
  for (const auto& w : windows) {
    if (w.values.rows() != K || w.values.cols() != L) throw ValidationError("train: windows differ in shape");
    w.masks.validate(false);
  }
  TrainResult out{make_policy_pair(K, L, cfg), {}};
  PolicyPair& pair = out.pair;
  TrainingLog& log = out.log;
  const Rng root(cfg.seed, 0x7A1);
  Rng warm = root.split(kWarmup);
  dsm_warmup(pair, windows, strategy, cfg, warm, &log);
  pair.backward_opt.config.lr = cfg.lr_backward;

  Rng cache_rng = root.split(kCache), batch_rng = root.split(kBatch), probe_rng = root.split(kProbe);
  const int N = cfg.sde.n_steps, B = cfg.batch_size;
  long global = cfg.warmup_iters;
  std::vector<int> paths(static_cast<std::size_t>(B)), steps(static_cast<std::size_t>(B));

  auto step_policy = [&](PolicyNet& net, nn::OptimizerState& opt, const LossBatch& lb, int stage, int it, const char* dir) {
    nn::MlpParams grad = net.mlp.zeros_like();
    const double loss = likelihood_loss(net, lb, cfg.divergence, probe_rng, &grad).total();
    if (!std::isfinite(loss)) {
      throw DivergenceError(std::string(dir) + " loss is non-finite at stage " + std::to_string(stage) + " iteration " + std::to_string(it), global);
    }
    const double lr = opt.current_lr();
    nn::adamw_step(net.mlp, grad, opt);
    log.records.push_back({stage, it, dir, loss, lr});
    ++global;
  };

  for (int stage = 0; stage < cfg.stages; ++stage) {
    TrajectoryCache fc;
    for (int it = 0; it < cfg.iters_per_stage; ++it) {
      if (it % cfg.refresh_period == 0) {
        fc = sample_forward_cache(pair, windows, cfg, cache_rng);
        log.records.push_back({stage, it, "refresh_forward_cache", std::nan(""), 0.0, true});
      }
      std::vector<data::MaskSet> masks;
      masks.reserve(static_cast<std::size_t>(B));
      for (int b = 0; b < B; ++b) {
        paths[static_cast<std::size_t>(b)] = static_cast<int>(batch_rng.below(static_cast<std::uint64_t>(cfg.cache_paths)));
        steps[static_cast<std::size_t>(b)] = 1 + static_cast<int>(batch_rng.below(static_cast<std::uint64_t>(N)));
        const data::Mask obs = unflatten(fc.obs.col(paths[static_cast<std::size_t>(b)]), K, L);
        masks.push_back(draw_masks(obs, strategy, cfg.uncond_prob, batch_rng));
      }
      const LossBatch lb = backward_batch(pair, fc, cfg.sde, paths, steps, masks);
      step_policy(pair.backward, pair.backward_opt, lb, stage, it, "backward");
    }
    TrajectoryCache bc;
    for (int it = 0; it < cfg.iters_per_stage; ++it) {
      if (it % cfg.refresh_period == 0) {
        bc = sample_backward_cache(pair, cfg, cache_rng);
        log.records.push_back({stage, it, "refresh_backward_cache", std::nan(""), 0.0, true});
      }
      for (int b = 0; b < B; ++b) {
        paths[static_cast<std::size_t>(b)] = static_cast<int>(batch_rng.below(static_cast<std::uint64_t>(cfg.cache_paths)));
        steps[static_cast<std::size_t>(b)] = static_cast<int>(batch_rng.below(static_cast<std::uint64_t>(N)));
      }
      const LossBatch lb = forward_batch(pair, bc, cfg.sde, paths, steps);
      step_policy(pair.forward, pair.forward_opt, lb, stage, it, "forward");
    }
  }
  return out;
}

Eigen::VectorXd langevin_correct(const ScoreFn& score, Eigen::VectorXd x, double t, int n_steps, double snr, Rng& rng) {
  if (!(snr > 0.0)) throw ValidationError("langevin_correct: snr must be > 0");
  if (n_steps < 0) throw ValidationError("langevin_correct: steps must be >= 0");
  for (int s = 0; s < n_steps; ++s) {
    const Eigen::VectorXd sc = score(x, t);
    const double sn = sc.norm();
    if (sn == 0.0) continue;
    Eigen::VectorXd xi(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) xi[i] = rng.normal();
    const double r = snr * xi.norm() / sn;
    const double delta = r * r;
    x += delta * sc + std::sqrt(2.0 * delta) * xi;
  }
  return x;
}

std::vector<Eigen::MatrixXd> impute(const PolicyNet& backward, const Eigen::MatrixXd& x_cond, const data::MaskSet& masks,
                                    int n_samples, const ImputeOptions& opts, const Rng& rng) {
  if (!backward.conditional) throw ValidationError("impute: policy is not conditional");
  if (n_samples < 1) throw ValidationError("impute: n_samples must be >= 1");
  if (x_cond.rows() != backward.K || x_cond.cols() != backward.L) throw ValidationError("impute: condition shape differs from the policy");
  masks.validate(false);
  if (masks.cond.rows() != backward.K || masks.cond.cols() != backward.L) throw ValidationError("impute: mask shape differs from the policy");
  if ((x_cond.array() * (1.0 - masks.cond.array()) != 0.0).any()) throw ValidationError("impute: x_cond must be zero outside M_cond");
  opts.sde.validate();

  const sde::SdeSpec& spec = opts.sde;
  const Eigen::Index D = backward.dim();
  const Eigen::VectorXd xc = flatten(x_cond), mc = flatten(masks.cond);
  const int N = spec.n_steps;
  const double dt = spec.step(), sqdt = std::sqrt(dt), prior = sde::prior_std(spec);
  Eigen::MatrixXd all(D, n_samples);

  auto overwrite = [&](Eigen::MatrixXd& X) {
    for (Eigen::Index c = 0; c < X.cols(); ++c)
      for (Eigen::Index i = 0; i < D; ++i)
        if (mc[i] != 0.0) X(i, c) = xc[i];
  };

  sde::parallel_chunks(n_samples, 64, opts.threads, [&](int c0, int c1) {
    const int m = c1 - c0;
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<std::size_t>(m));
    Eigen::MatrixXd X(D, m);
    for (int s = 0; s < m; ++s) {
      rngs.push_back(rng.split(static_cast<std::uint64_t>(c0 + s)));
      for (Eigen::Index i = 0; i < D; ++i) X(i, s) = prior * rngs.back().normal();
    }
    const Eigen::MatrixXd XC = xc.replicate(1, m), MC = mc.replicate(1, m);
    for (int i = N; i >= 1; --i) {
      const double t = spec.time_at(i);
      const double g = sde::diffusion_coefficient(spec, t), a = sde::drift_rate(spec, t);
      overwrite(X);
      const Eigen::MatrixXd z = backward.eval(X, XC, MC, constant_times(m, t));
      Eigen::MatrixXd next = X + (-a * X + g * z) * dt;
      for (int s = 0; s < m; ++s)
        for (Eigen::Index r = 0; r < D; ++r) next(r, s) += g * sqdt * rngs[static_cast<std::size_t>(s)].normal();
      X = std::move(next);
      if (!X.allFinite()) throw DivergenceError("impute: non-finite state", N - i + 1);
      if (opts.langevin.steps > 0 && i - 1 >= 1) {
        const double tc = spec.time_at(i - 1);
        const double gc = sde::diffusion_coefficient(spec, tc);
        for (int s = 0; s < m; ++s) {
          const ScoreFn score = [&](const Eigen::VectorXd& x, double tt) -> Eigen::VectorXd {
            Eigen::MatrixXd xm = x;
            for (Eigen::Index r = 0; r < D; ++r)
              if (mc[r] != 0.0) xm(r, 0) = xc[r];
            return backward.eval(xm, xc, mc, constant_times(1, tt)).col(0) / gc;
          };
          X.col(s) = langevin_correct(score, X.col(s), tc, opts.langevin.steps, opts.langevin.snr, rngs[static_cast<std::size_t>(s)]);
        }
        if (!X.allFinite()) throw DivergenceError("impute: non-finite state after Langevin correction", N - i + 1);
      }
    }
    overwrite(X);
    all.middleCols(c0, m) = X;
  });

  std::vector<Eigen::MatrixXd> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) out.push_back(unflatten(all.col(s), backward.K, backward.L));
  return out;
}

}  // namespace sbridge::csbi
