#include "sbridge/neural.hpp"

#include <cmath>
#include <string>

#include "sbridge/errors.hpp"

namespace sbridge::nn {
namespace {

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

double silu_d1(double a) {
  const double s = sigmoid(a);
  return s + a * s * (1.0 - s);
}

double silu_d2(double a) {
  const double s = sigmoid(a);
  return s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s));
}

void check_input(const MlpParams& p, Eigen::Index rows, const char* where) {
  if (p.layers.empty()) throw ValidationError(std::string(where) + ": network has no layers");
  if (rows != p.input_width()) {
    throw ValidationError(std::string(where) + ": input width " + std::to_string(rows) + ", network expects " +
                          std::to_string(p.input_width()));
  }
}

void check_square(const MlpParams& p, const char* where) {
  if (p.input_width() != p.output_width()) throw ValidationError(std::string(where) + ": field is not square");
}

}  // namespace

double silu(double a) { return a * sigmoid(a); }

MlpParams MlpParams::zeros(const std::vector<int>& widths) {
  if (widths.size() < 2) throw ValidationError("mlp: need at least input and output widths");
  MlpParams p;
  p.widths = widths;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    if (widths[l] < 1 || widths[l + 1] < 1) throw ValidationError("mlp: widths must be positive");
    p.layers.push_back({Eigen::MatrixXd::Zero(widths[l + 1], widths[l]), Eigen::VectorXd::Zero(widths[l + 1])});
  }
  return p;
}

MlpParams MlpParams::glorot(const std::vector<int>& widths, Rng& rng) {
  MlpParams p = zeros(widths);
  for (auto& layer : p.layers) {
    const double limit = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = rng.uniform(-limit, limit);
  }
  return p;
}

Eigen::Index MlpParams::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void MlpParams::validate() const {
  if (widths.size() != layers.size() + 1 || layers.empty()) throw ValidationError("mlp: layer count does not match widths");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    if (L.weight.cols() != widths[l] || L.weight.rows() != widths[l + 1] || L.bias.size() != widths[l + 1]) {
      throw ValidationError("mlp: layer " + std::to_string(l) + " shape does not match widths");
    }
    if (!L.weight.allFinite() || !L.bias.allFinite()) throw ValidationError("mlp: non-finite parameter in layer " + std::to_string(l));
  }
}

Eigen::VectorXd MlpParams::flatten() const {
  Eigen::VectorXd flat(parameter_count());
  Eigen::Index o = 0;
  for (const auto& l : layers) {
    flat.segment(o, l.weight.size()) = l.weight.reshaped();
    o += l.weight.size();
    flat.segment(o, l.bias.size()) = l.bias;
    o += l.bias.size();
  }
  return flat;
}

void MlpParams::assign(const Eigen::VectorXd& flat) {
  if (flat.size() != parameter_count()) throw ValidationError("mlp: flat parameter vector has the wrong length");
  Eigen::Index o = 0;
  for (auto& l : layers) {
    l.weight.reshaped() = flat.segment(o, l.weight.size());
    o += l.weight.size();
    l.bias = flat.segment(o, l.bias.size());
    o += l.bias.size();
  }
}

MlpParams MlpParams::zeros_like() const { return zeros(widths); }

DualTape dual_forward(const MlpParams& p, const Eigen::MatrixXd& x, const Eigen::MatrixXd& xdot) {
  check_input(p, x.rows(), "mlp");
  if (xdot.rows() != x.rows() || xdot.cols() != x.cols()) throw ValidationError("mlp_jvp: tangent shape differs from input");
  DualTape t;
  const std::size_t n = p.layers.size();
  t.h.reserve(n);
  t.hdot.reserve(n);
  t.a.reserve(n);
  t.adot.reserve(n);
  Eigen::MatrixXd h = x, hd = xdot;
  for (std::size_t l = 0; l < n; ++l) {
    const auto& L = p.layers[l];
    Eigen::MatrixXd a = L.weight * h;
    a.colwise() += L.bias;
    Eigen::MatrixXd ad = L.weight * hd;
    t.h.push_back(std::move(h));
    t.hdot.push_back(std::move(hd));
    if (l + 1 < n) {
      h = a.unaryExpr([](double v) { return silu(v); });
      hd = a.unaryExpr([](double v) { return silu_d1(v); }).cwiseProduct(ad);
    } else {
      t.y = a;
      t.ydot = ad;
    }
    t.a.push_back(std::move(a));
    t.adot.push_back(std::move(ad));
  }
  return t;
}

void dual_backward(const MlpParams& p, const DualTape& tape, const Eigen::MatrixXd& ybar,
                   const Eigen::MatrixXd& ydotbar, MlpParams& grad, Eigen::MatrixXd* xbar, Eigen::MatrixXd* xdotbar) {
  if (ybar.rows() != tape.y.rows() || ybar.cols() != tape.y.cols() || ydotbar.rows() != tape.y.rows() ||
      ydotbar.cols() != tape.y.cols()) {
    throw ValidationError("mlp_grad: upstream shape differs from output");
  }
  if (grad.layers.size() != p.layers.size()) throw ValidationError("mlp_grad: gradient buffer shape");
  Eigen::MatrixXd abar = ybar, adbar = ydotbar;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const auto& L = p.layers[l];
    auto& G = grad.layers[l];
    G.weight.noalias() += abar * tape.h[l].transpose();
    G.weight.noalias() += adbar * tape.hdot[l].transpose();
    G.bias += abar.rowwise().sum();
    if (l == 0 && !xbar && !xdotbar) break;
    Eigen::MatrixXd hbar = L.weight.transpose() * abar;
    Eigen::MatrixXd hdbar = L.weight.transpose() * adbar;
    if (l == 0) {
      if (xbar) *xbar = std::move(hbar);
      if (xdotbar) *xdotbar = std::move(hdbar);
      break;
    }
    const Eigen::MatrixXd& a = tape.a[l - 1];
    const Eigen::MatrixXd& ad = tape.adot[l - 1];
    const Eigen::MatrixXd d1 = a.unaryExpr([](double v) { return silu_d1(v); });
    const Eigen::MatrixXd d2 = a.unaryExpr([](double v) { return silu_d2(v); });
    abar = hbar.cwiseProduct(d1) + hdbar.cwiseProduct(d2).cwiseProduct(ad);
    adbar = hdbar.cwiseProduct(d1);
  }
}

Eigen::VectorXd mlp_forward(const MlpParams& p, const Eigen::VectorXd& x) {
  return mlp_forward(p, Eigen::MatrixXd(x)).col(0);
}

Eigen::MatrixXd mlp_forward(const MlpParams& p, const Eigen::MatrixXd& x) {
  check_input(p, x.rows(), "mlp_forward");
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    Eigen::MatrixXd a = p.layers[l].weight * h;
    a.colwise() += p.layers[l].bias;
    h = (l + 1 < p.layers.size()) ? Eigen::MatrixXd(a.unaryExpr([](double v) { return silu(v); })) : a;
  }
  return h;
}

MlpGradient mlp_grad(const MlpParams& p, const Eigen::VectorXd& x, const Eigen::VectorXd& upstream) {
  check_input(p, x.size(), "mlp_grad");
  if (upstream.size() != p.output_width()) throw ValidationError("mlp_grad: upstream width differs from output");
  const Eigen::MatrixXd X = x;
  const DualTape tape = dual_forward(p, X, Eigen::MatrixXd::Zero(X.rows(), 1));
  MlpGradient g{p.zeros_like(), {}};
  Eigen::MatrixXd xbar;
  dual_backward(p, tape, Eigen::MatrixXd(upstream), Eigen::MatrixXd::Zero(upstream.size(), 1), g.params, &xbar);
  g.input = xbar.col(0);
  return g;
}

JvpResult mlp_jvp(const MlpParams& p, const Eigen::VectorXd& x, const Eigen::VectorXd& v) {
  check_input(p, x.size(), "mlp_jvp");
  if (v.size() != x.size()) throw ValidationError("mlp_jvp: tangent width differs from input");
  const DualTape t = dual_forward(p, Eigen::MatrixXd(x), Eigen::MatrixXd(v));
  return {t.y.col(0), t.ydot.col(0)};
}

double divergence_exact(const MlpParams& p, const Eigen::VectorXd& x) {
  check_input(p, x.size(), "divergence_exact");
  check_square(p, "divergence_exact");
  const Eigen::Index d = x.size();
  const DualTape t = dual_forward(p, x.replicate(1, d), Eigen::MatrixXd::Identity(d, d));
  return t.ydot.trace();
}

double divergence_hutchinson(const MlpParams& p, const Eigen::VectorXd& x, int n_probes, Rng& rng) {
  check_input(p, x.size(), "divergence_hutchinson");
  check_square(p, "divergence_hutchinson");
  if (n_probes < 1) throw ValidationError("divergence_hutchinson: n_probes must be >= 1");
  const Eigen::Index d = x.size();
  Eigen::MatrixXd probes(d, n_probes);
  for (int j = 0; j < n_probes; ++j)
    for (Eigen::Index i = 0; i < d; ++i) probes(i, j) = rng.rademacher();
  const DualTape t = dual_forward(p, x.replicate(1, n_probes), probes);
  return probes.cwiseProduct(t.ydot).sum() / n_probes;
}

double OptimizerState::current_lr() const { return config.lr * std::pow(config.decay, static_cast<double>(step)); }

void adamw_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, OptimizerState& state) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ValidationError("adamw_step: parameter, gradient and moment shapes differ");
  }
  if (!grads.allFinite()) throw DivergenceError("adamw_step: non-finite gradient", state.step);
  const auto& c = state.config;
  const double lr = state.current_lr();
  state.step += 1;
  params *= 1.0 - lr * c.weight_decay;
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * grads;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * grads.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  params.array() -= lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + c.eps);
}

void adamw_step(MlpParams& params, const MlpParams& grads, OptimizerState& state) {
  Eigen::VectorXd flat = params.flatten();
  adamw_step(flat, grads.flatten(), state);
  params.assign(flat);
}

void EmbeddingSpec::validate() const {
  if (time_width < 0 || feature_index_width < 0 || time_index_width < 0) throw ValidationError("embedding: widths must be >= 0");
  if (time_width % 2 != 0) throw ValidationError("embedding: time width must be even");
  if (!(min_frequency > 0.0) || !(max_frequency >= min_frequency)) throw ValidationError("embedding: bad frequency range");
}

Eigen::VectorXd embed(const EmbeddingSpec& spec, double t, int K, int L) {
  spec.validate();
  if (!std::isfinite(t)) throw DomainError("embed: non-finite time");
  Eigen::VectorXd e(spec.width(K, L));
  const int R = spec.time_width / 2;
  for (int r = 0; r < R; ++r) {
    const double frac = R > 1 ? static_cast<double>(r) / (R - 1) : 0.0;
    const double w = spec.min_frequency * std::pow(spec.max_frequency / spec.min_frequency, frac);
    e[r] = std::sin(t * w);
    e[R + r] = std::cos(t * w);
  }
  Eigen::Index o = spec.time_width;
  auto index_block = [&](int count, int width) {
    for (int idx = 0; idx < count; ++idx) {
      for (int j = 0; j < width; ++j) {
        const double f = std::pow(1e4, -2.0 * (j / 2) / std::max(width, 1));
        e[o++] = (j % 2 == 0) ? std::sin(idx * f) : std::cos(idx * f);
      }
    }
  };
  index_block(K, spec.feature_index_width);
  index_block(L, spec.time_index_width);
  return e;
}

}  // namespace sbridge::nn
