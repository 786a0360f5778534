#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sbridge/data.hpp"
#include "sbridge/neural.hpp"
#include "sbridge/rng.hpp"
#include "sbridge/sde.hpp"

namespace sbridge::csbi {

/// A K x L window flattened column-major: entry (k, l) sits at k + K l.
inline Eigen::VectorXd flatten(const Eigen::MatrixXd& w) { return w.reshaped(); }
inline Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, int K, int L) { return v.reshaped(K, L); }

enum class DivergenceKind { kExact, kHutchinson, kComplete };

struct DivergenceMode {
  DivergenceKind kind = DivergenceKind::kHutchinson;
  int n_probes = 1;

  static DivergenceMode exact() { return {DivergenceKind::kExact, 0}; }
  static DivergenceMode hutchinson(int n) { return {DivergenceKind::kHutchinson, n}; }
  /// Every Rademacher sign pattern on the target coordinates (at most 2^20 of them).
  static DivergenceMode complete() { return {DivergenceKind::kComplete, 0}; }
  std::string name() const;
  /// "exact", "complete" or "hutchinson:N".
  static DivergenceMode parse(const std::string& text);
};

/// One drift network with its input contract.
///   conditional (backward): [x * (1 - Mc) + x_cond * Mc, Mc, embed(t)]
///   unconditional (forward): [x, embed(t)]
struct PolicyNet {
  nn::MlpParams mlp;
  nn::EmbeddingSpec embedding;
  int K = 0;
  int L = 0;
  bool conditional = false;

  int dim() const { return K * L; }
  int input_width() const { return (conditional ? 2 : 1) * dim() + embedding.width(K, L); }
  /// Network inputs for a batch; x, x_cond, m_cond are D x B (the latter two ignored when unconditional).
  Eigen::MatrixXd assemble(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_cond, const Eigen::MatrixXd& m_cond,
                           std::span<const double> t) const;
  /// Drift z for each column.
  Eigen::MatrixXd eval(const Eigen::MatrixXd& x, const Eigen::MatrixXd& x_cond, const Eigen::MatrixXd& m_cond,
                       std::span<const double> t) const;
};

struct PolicyPair {
  PolicyNet forward;   ///< z->, no masks
  PolicyNet backward;  ///< z<-, conditional
  nn::OptimizerState forward_opt;
  nn::OptimizerState backward_opt;
};

struct TrainConfig {
  int warmup_iters = 2000;
  int stages = 8;
  int iters_per_stage = 120;
  int refresh_period = 40;
  int batch_size = 32;
  int cache_paths = 256;
  /// Backward learning rate during score-matching warmup.
  double lr_warmup = 1e-3;
  /// Learning rates of the alternating likelihood stages.
  double lr_forward = 1e-5;
  double lr_backward = 1e-4;
  /// Per-step multiplicative learning-rate decay.
  double decay = 0.9998;
  double weight_decay = 0.0;
  DivergenceMode divergence = DivergenceMode::hutchinson(1);
  sde::SdeSpec sde = sde::SdeSpec::ve(0.001, 20.0, 100);
  std::vector<int> hidden = {256, 256};
  nn::EmbeddingSpec embedding{};
  /// Probability that a training sample uses M_cond = 0, M_target = M_obs.
  double uncond_prob = 0.2;
  std::uint64_t seed = 0;
  int threads = 1;

  /// Throws ValidationError.
  void validate() const;
};

/// Fresh networks: Glorot weights, forward output layer zeroed so z-> starts at exactly 0.
PolicyPair make_policy_pair(int K, int L, const TrainConfig& cfg);

/// Paths sampled by one direction's policy, consumed by the other direction's loss.
struct TrajectoryCache {
  sde::PathBatch paths;
  Eigen::MatrixXd x0;   ///< D x P data the forward paths started from (empty for backward caches)
  Eigen::MatrixXd obs;  ///< D x P observation masks of x0 (empty for backward caches)
  int refresh_period = 0;
  int uses = 0;
  /// Optimizer step of the generating policy; the cache is invalid once that policy moves.
  long policy_step = 0;

  /// Registers one training iteration; throws ContractError when the cache is stale.
  void consume(long generator_step);
};

/// Forward SDE from training windows under the current z->.
TrajectoryCache sample_forward_cache(const PolicyPair& pair, const std::vector<data::TimeSeriesWindow>& windows,
                                     const TrainConfig& cfg, Rng& rng);
/// Unconditional backward SDE from the prior under the current z<-.
TrajectoryCache sample_backward_cache(const PolicyPair& pair, const TrainConfig& cfg, Rng& rng);

/// Columns of a likelihood-loss evaluation.
struct LossBatch {
  Eigen::MatrixXd x;         ///< D x B states
  Eigen::VectorXd t;         ///< diffusion times
  Eigen::VectorXd g;         ///< g(t)
  Eigen::MatrixXd x_cond;    ///< D x B, zero outside m_cond
  Eigen::MatrixXd m_cond;    ///< D x B
  Eigen::MatrixXd m_target;  ///< D x B
  Eigen::MatrixXd z_other;   ///< counterpart drift at (x, t), frozen
};

struct LossTerms {
  double quadratic = 0.0;   ///< mean 1/2 |z * M|^2
  double divergence = 0.0;  ///< mean g div(z * M)
  double cross = 0.0;       ///< mean (z_other * M)^T (z * M)
  double total() const { return quadratic + divergence + cross; }
};

/// Batch mean of 1/2 |z * M|^2 + g div(z * M) + (z_other * M)^T (z * M), with the divergence taken
/// over target coordinates only. Adds the parameter gradient of the total into `grad` when given.
LossTerms likelihood_loss(const PolicyNet& net, const LossBatch& batch, const DivergenceMode& mode, Rng& probe_rng,
                          nn::MlpParams* grad = nullptr);

/// Backward-loss batch from a forward cache: states at steps[b] in 1..N of paths[b], with per-sample masks.
LossBatch backward_batch(const PolicyPair& pair, TrajectoryCache& cache, const sde::SdeSpec& spec,
                         std::span<const int> paths, std::span<const int> steps,
                         const std::vector<data::MaskSet>& masks);
/// Forward-loss batch from a backward cache: steps in 0..N-1, all-ones target, no conditioning.
LossBatch forward_batch(const PolicyPair& pair, TrajectoryCache& cache, const sde::SdeSpec& spec,
                        std::span<const int> paths, std::span<const int> steps);

struct DsmBatch {
  Eigen::MatrixXd x0;        ///< D x B clean data
  Eigen::MatrixXd noise;     ///< D x B standard normal
  Eigen::VectorXd t;
  Eigen::MatrixXd m_cond;
  Eigen::MatrixXd m_target;
};

/// Variance-weighted denoising score matching: mean |(sigma_t s + noise) * M_target|^2 with
/// x_t = mean_t + sigma_t noise and s = z / g.
double dsm_loss(const PolicyNet& backward, const DsmBatch& batch, const sde::SdeSpec& spec, nn::MlpParams* grad = nullptr);

struct LogRecord {
  int stage;        ///< -1 during warmup
  int iter;
  std::string direction;  ///< "warmup", "backward", "forward", or an event name
  double loss;      ///< NaN for events
  double lr;
  bool event = false;
};

struct TrainingLog {
  std::vector<LogRecord> records;
  std::string to_jsonl() const;
};

/// Score-matching warmup of z<- with z-> held at zero.
void dsm_warmup(PolicyPair& pair, const std::vector<data::TimeSeriesWindow>& windows, const data::TargetStrategy& strategy,
                const TrainConfig& cfg, Rng& rng, TrainingLog* log = nullptr);

struct TrainResult {
  PolicyPair pair;
  TrainingLog log;
};

/// Warmup followed by `stages` alternating backward / forward likelihood stages. Masks for each
/// sample are redrawn with `strategy` on every use.
TrainResult train(const TrainConfig& cfg, const std::vector<data::TimeSeriesWindow>& windows,
                  const data::TargetStrategy& strategy);

struct LangevinConfig {
  int steps = 0;  ///< 0 disables the corrector
  double snr = 0.16;
};

using ScoreFn = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, double t)>;

/// x <- x + delta s + sqrt(2 delta) xi with delta = (snr |xi| / |s|)^2; a zero score skips the step.
Eigen::VectorXd langevin_correct(const ScoreFn& score, Eigen::VectorXd x, double t, int n_steps, double snr, Rng& rng);

struct ImputeOptions {
  sde::SdeSpec sde = sde::SdeSpec::ve(0.001, 20.0, 100);
  LangevinConfig langevin{};
  int threads = 1;
};

/// Conditional reverse sampling of one window. x_cond is K x L and zero outside masks.cond.
/// Conditioned entries are overwritten before every step and once more at the end, so they equal
/// x_cond exactly. Sample s draws all its noise from rng.split(s).
std::vector<Eigen::MatrixXd> impute(const PolicyNet& backward, const Eigen::MatrixXd& x_cond, const data::MaskSet& masks,
                                    int n_samples, const ImputeOptions& opts, const Rng& rng);

}  // namespace sbridge::csbi
