#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "sbridge/rng.hpp"

namespace sbridge::nn {

struct Layer {
  Eigen::MatrixXd weight;  ///< out x in
  Eigen::VectorXd bias;
};

/// Multilayer perceptron: SiLU on hidden layers, identity on the output layer.
struct MlpParams {
  std::vector<int> widths;  ///< input, hidden..., output
  std::vector<Layer> layers;

  /// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  static MlpParams glorot(const std::vector<int>& widths, Rng& rng);
  static MlpParams zeros(const std::vector<int>& widths);

  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }
  Eigen::Index parameter_count() const;
  /// Throws ValidationError on incompatible shapes or non-finite entries.
  void validate() const;

  /// Layer by layer: weight (column-major) then bias.
  Eigen::VectorXd flatten() const;
  void assign(const Eigen::VectorXd& flat);
  /// Zero-valued parameters with the same shapes.
  MlpParams zeros_like() const;
};

double silu(double a);

Eigen::VectorXd mlp_forward(const MlpParams& p, const Eigen::VectorXd& x);
/// Columns of `x` (in x N) are independent inputs.
Eigen::MatrixXd mlp_forward(const MlpParams& p, const Eigen::MatrixXd& x);

struct MlpGradient {
  MlpParams params;      ///< d<upstream, f(x)> / d params
  Eigen::VectorXd input; ///< d<upstream, f(x)> / dx
};

MlpGradient mlp_grad(const MlpParams& p, const Eigen::VectorXd& x, const Eigen::VectorXd& upstream);

struct JvpResult {
  Eigen::VectorXd value;
  Eigen::VectorXd tangent;  ///< J(x) v
};

JvpResult mlp_jvp(const MlpParams& p, const Eigen::VectorXd& x, const Eigen::VectorXd& v);

/// Value and tangent streams of a batched forward-mode pass, kept for the reverse sweep.
struct DualTape {
  std::vector<Eigen::MatrixXd> h;     ///< layer inputs (h[0] = x)
  std::vector<Eigen::MatrixXd> hdot;  ///< layer input tangents
  std::vector<Eigen::MatrixXd> a;     ///< pre-activations
  std::vector<Eigen::MatrixXd> adot;
  Eigen::MatrixXd y;                  ///< output values
  Eigen::MatrixXd ydot;               ///< output tangents
};

DualTape dual_forward(const MlpParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& xdot);

/// Reverse sweep through both streams of `tape`: accumulates into `grad` the parameter gradient of
/// sum(ybar .* y) + sum(ydotbar .* ydot). Input adjoints are written when the pointers are non-null.
void dual_backward(const MlpParams& p, const DualTape& tape, const Eigen::MatrixXd& ybar,
                   const Eigen::MatrixXd& ydotbar, MlpParams& grad, Eigen::MatrixXd* xbar = nullptr,
                   Eigen::MatrixXd* xdotbar = nullptr);

/// Trace of the Jacobian of a square field: d forward-mode passes with e_i.
double divergence_exact(const MlpParams& p, const Eigen::VectorXd& x);
/// Mean over Rademacher probes v of v^T J v.
double divergence_hutchinson(const MlpParams& p, const Eigen::VectorXd& x, int n_probes, Rng& rng);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Learning rate after s steps is lr * decay^s.
  double decay = 1.0;
};

struct OptimizerState {
  AdamWConfig config;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;

  OptimizerState() = default;
  OptimizerState(const AdamWConfig& cfg, Eigen::Index n_params)
      : config(cfg), m(Eigen::VectorXd::Zero(n_params)), v(Eigen::VectorXd::Zero(n_params)) {}
  double current_lr() const;
};

/// Decoupled weight decay, then the bias-corrected Adam update. Throws DivergenceError (with the
/// step index) on a non-finite gradient.
void adamw_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, OptimizerState& state);
void adamw_step(MlpParams& params, const MlpParams& grads, OptimizerState& state);

struct EmbeddingSpec {
  int time_width = 16;          ///< sinusoidal diffusion-time channels, even
  int feature_index_width = 0;  ///< per-feature sinusoid channels
  int time_index_width = 0;     ///< per-time-step sinusoid channels
  double min_frequency = 0.5;
  double max_frequency = 100.0;

  void validate() const;
  /// Width of embed(., ., K, L).
  int width(int K, int L) const { return time_width + K * feature_index_width + L * time_index_width; }
};

/// [sin(t w_r), cos(t w_r)] over a geometric ladder w_r, then the feature-index and time-index
/// blocks (sinusoids of the index, one block per feature / time step).
Eigen::VectorXd embed(const EmbeddingSpec& spec, double t, int K, int L);

}  // namespace sbridge::nn
