#include <doctest.h>

#include <cmath>
#include <vector>

#include "sbridge/errors.hpp"
#include "sbridge/neural.hpp"
#include "support.hpp"

using namespace sbridge;
using namespace sbridge::nn;

namespace {

// Straight-line forward pass used as an oracle.
Eigen::VectorXd reference_forward(const MlpParams& p, const Eigen::VectorXd& x) {
  std::vector<double> h(x.data(), x.data() + x.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& W = p.layers[l].weight;
    std::vector<double> a(static_cast<std::size_t>(W.rows()));
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
      double s = p.layers[l].bias[i];
      for (Eigen::Index j = 0; j < W.cols(); ++j) s += W(i, j) * h[static_cast<std::size_t>(j)];
      a[static_cast<std::size_t>(i)] = (l + 1 < p.layers.size()) ? s / (1.0 + std::exp(-s)) : s;
    }
    h = std::move(a);
  }
  return Eigen::Map<Eigen::VectorXd>(h.data(), static_cast<Eigen::Index>(h.size()));
}

MlpParams linear(const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
  MlpParams p = MlpParams::zeros({static_cast<int>(A.cols()), static_cast<int>(A.rows())});
  p.layers[0].weight = A;
  p.layers[0].bias = b;
  return p;
}

MlpParams seeded(const std::vector<int>& widths, std::uint64_t seed, double bias_scale = 0.3) {
  Rng rng(seed);
  MlpParams p = MlpParams::glorot(widths, rng);
  for (auto& L : p.layers)
    for (Eigen::Index i = 0; i < L.bias.size(); ++i) L.bias[i] = bias_scale * rng.normal();
  return p;
}

Eigen::VectorXd random_vec(int n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

bool close(double a, double b, double rel, double abs_floor) { return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor; }

}  // namespace

TEST_CASE("mlp_forward") {
  const MlpParams z = MlpParams::zeros({3, 5, 2});
  CHECK(mlp_forward(z, Eigen::VectorXd(Eigen::VectorXd::Constant(3, 7.0))).norm() == 0.0);

  Rng rng(1);
  const Eigen::MatrixXd A = Eigen::MatrixXd::Random(2, 3);
  const Eigen::VectorXd b = Eigen::VectorXd::Random(2);
  const Eigen::VectorXd x = random_vec(3, rng);
  CHECK((mlp_forward(linear(A, b), x) - (A * x + b)).norm() == 0.0);

  const MlpParams p = seeded({2, 16, 2}, 2);
  for (int t = 0; t < 20; ++t) {
    const Eigen::VectorXd xi = 2.0 * random_vec(2, rng);
    CHECK((mlp_forward(p, xi) - reference_forward(p, xi)).cwiseAbs().maxCoeff() < 1e-12);
  }
  Eigen::MatrixXd X(2, 5);
  for (int c = 0; c < 5; ++c) X.col(c) = random_vec(2, rng);
  const Eigen::MatrixXd Y = mlp_forward(p, X);
  for (int c = 0; c < 5; ++c) CHECK((Y.col(c) - reference_forward(p, X.col(c))).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(mlp_forward(p, Eigen::VectorXd(Eigen::VectorXd::Zero(3))), ValidationError);
}

TEST_CASE("MlpParams flatten, assign, validate") {
  const MlpParams p = seeded({3, 4, 2}, 3);
  CHECK(p.parameter_count() == 3 * 4 + 4 + 4 * 2 + 2);
  const Eigen::VectorXd f = p.flatten();
  CHECK(f[0] == p.layers[0].weight(0, 0));
  CHECK(f[1] == p.layers[0].weight(1, 0));
  CHECK(f[12] == p.layers[0].bias[0]);
  MlpParams q = p.zeros_like();
  q.assign(f);
  CHECK(q.flatten() == f);
  q.layers[1].bias[0] = std::nan("");
  CHECK_THROWS_AS(q.validate(), ValidationError);
  CHECK_THROWS_AS(q.assign(Eigen::VectorXd::Zero(3)), ValidationError);
  // Glorot bound.
  Rng rng(4);
  const MlpParams g = MlpParams::glorot({10, 30}, rng);
  CHECK(g.layers[0].weight.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 40.0));
  CHECK(g.layers[0].bias.norm() == 0.0);
}

TEST_CASE("mlp_grad: closed forms and finite differences") {
  Rng rng(5);
  const Eigen::MatrixXd A = Eigen::MatrixXd::Random(3, 4);
  const Eigen::VectorXd x = random_vec(4, rng), up = random_vec(3, rng);
  const MlpGradient lg = mlp_grad(linear(A, Eigen::VectorXd::Zero(3)), x, up);
  CHECK((lg.params.layers[0].weight - up * x.transpose()).norm() < 1e-15);
  CHECK((lg.params.layers[0].bias - up).norm() < 1e-15);
  const MlpGradient ig = mlp_grad(linear(Eigen::MatrixXd::Identity(4, 4), Eigen::VectorXd::Zero(4)), x, x);
  CHECK((ig.input - x).norm() == 0.0);

  const MlpParams p = seeded({4, 8, 4}, 6);
  const Eigen::VectorXd xi = random_vec(4, rng), u = random_vec(4, rng);
  const MlpGradient g = mlp_grad(p, xi, u);
  const Eigen::VectorXd flat = p.flatten(), gflat = g.params.flatten();
  const double h = 1e-5;
  MlpParams q = p;
  for (Eigen::Index k = 0; k < flat.size(); ++k) {
    Eigen::VectorXd f = flat;
    f[k] += h;
    q.assign(f);
    const double up_v = u.dot(mlp_forward(q, xi));
    f[k] -= 2 * h;
    q.assign(f);
    const double dn_v = u.dot(mlp_forward(q, xi));
    CHECK(close(gflat[k], (up_v - dn_v) / (2 * h), 1e-6, 1e-9));
  }
  for (int i = 0; i < 4; ++i) {
    Eigen::VectorXd a = xi, b = xi;
    a[i] += h;
    b[i] -= h;
    CHECK(close(g.input[i], (u.dot(mlp_forward(p, a)) - u.dot(mlp_forward(p, b))) / (2 * h), 1e-6, 1e-9));
  }
}

TEST_CASE("mlp_jvp") {
  Rng rng(7);
  const Eigen::MatrixXd A = Eigen::MatrixXd::Random(3, 3);
  const Eigen::VectorXd v = random_vec(3, rng);
  CHECK((mlp_jvp(linear(A, Eigen::VectorXd::Ones(3)), random_vec(3, rng), v).tangent - A * v).norm() < 1e-14);

  const MlpParams p = seeded({5, 12, 5}, 8);
  const Eigen::VectorXd x = random_vec(5, rng);
  CHECK(mlp_jvp(p, x, Eigen::VectorXd::Zero(5)).tangent.norm() == 0.0);
  const double h = 1e-5;
  for (int i = 0; i < 5; ++i) {
    const Eigen::VectorXd col = mlp_jvp(p, x, Eigen::VectorXd::Unit(5, i)).tangent;
    Eigen::VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    const Eigen::VectorXd fd = (mlp_forward(p, a) - mlp_forward(p, b)) / (2 * h);
    CHECK(support::rel_err(col, fd) < 1e-6);
  }
  CHECK_THROWS_AS(mlp_jvp(p, x, Eigen::VectorXd::Zero(4)), ValidationError);
}

TEST_CASE("dual_backward: gradients through both streams") {
  Rng rng(9);
  const MlpParams p = seeded({4, 10, 10, 4}, 10);
  Eigen::MatrixXd X(4, 3), Xd(4, 3), Yb(4, 3), Ydb(4, 3);
  for (int c = 0; c < 3; ++c) {
    X.col(c) = random_vec(4, rng);
    Xd.col(c) = random_vec(4, rng);
    Yb.col(c) = random_vec(4, rng);
    Ydb.col(c) = random_vec(4, rng);
  }
  auto objective = [&](const MlpParams& q, const Eigen::MatrixXd& x, const Eigen::MatrixXd& xd) {
    const DualTape t = dual_forward(q, x, xd);
    return (Yb.array() * t.y.array()).sum() + (Ydb.array() * t.ydot.array()).sum();
  };
  MlpParams g = p.zeros_like();
  Eigen::MatrixXd xbar, xdbar;
  dual_backward(p, dual_forward(p, X, Xd), Yb, Ydb, g, &xbar, &xdbar);
  const Eigen::VectorXd flat = p.flatten(), gf = g.flatten();
  const double h = 1e-5;
  MlpParams q = p;
  for (Eigen::Index k = 0; k < flat.size(); ++k) {
    Eigen::VectorXd f = flat;
    f[k] += h;
    q.assign(f);
    const double a = objective(q, X, Xd);
    f[k] -= 2 * h;
    q.assign(f);
    const double b = objective(q, X, Xd);
    CHECK(close(gf[k], (a - b) / (2 * h), 1e-6, 1e-9));
  }
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    Eigen::MatrixXd a = X, b = X;
    a.data()[i] += h;
    b.data()[i] -= h;
    CHECK(close(xbar.data()[i], (objective(p, a, Xd) - objective(p, b, Xd)) / (2 * h), 1e-6, 1e-9));
    Eigen::MatrixXd c = Xd, d = Xd;
    c.data()[i] += h;
    d.data()[i] -= h;
    CHECK(close(xdbar.data()[i], (objective(p, X, c) - objective(p, X, d)) / (2 * h), 1e-6, 1e-9));
  }
  // Accumulation: a second call doubles the buffer.
  dual_backward(p, dual_forward(p, X, Xd), Yb, Ydb, g);
  CHECK((g.flatten() - 2 * gf).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("divergence: exact") {
  const MlpParams diag = linear((Eigen::MatrixXd(2, 2) << 2, 0, 0, 3).finished(), Eigen::VectorXd::Zero(2));
  CHECK(divergence_exact(diag, Eigen::VectorXd::Random(2)) == 5.0);

  // One SiLU layer at the origin with zero biases: J = W2 diag(silu'(0)) W1 = W2 W1 / 2.
  MlpParams one = seeded({3, 7, 3}, 11, 0.0);
  CHECK(divergence_exact(one, Eigen::VectorXd::Zero(3)) ==
        doctest::Approx(0.5 * (one.layers[1].weight * one.layers[0].weight).trace()).epsilon(1e-14));

  const MlpParams p = seeded({6, 20, 6}, 12);
  Rng rng(13);
  const Eigen::VectorXd x = random_vec(6, rng);
  double fd = 0;
  const double h = 1e-5;
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    fd += (mlp_forward(p, a)[i] - mlp_forward(p, b)[i]) / (2 * h);
  }
  CHECK(support::rel_err(divergence_exact(p, x), fd) < 1e-6);
  CHECK_THROWS_AS(divergence_exact(seeded({3, 4, 2}, 1), Eigen::VectorXd::Zero(3)), ValidationError);
}

TEST_CASE("divergence: Hutchinson") {
  const MlpParams diag = linear((Eigen::MatrixXd(2, 2) << 2, 0, 0, 3).finished(), Eigen::VectorXd::Zero(2));
  Rng rng(14);
  for (int i = 0; i < 50; ++i) CHECK(divergence_hutchinson(diag, Eigen::VectorXd::Random(2), 1, rng) == 5.0);

  const Eigen::MatrixXd A = (Eigen::MatrixXd(2, 2) << 1.5, 1, -1, -0.25).finished();
  const MlpParams full = linear(A, Eigen::VectorXd::Zero(2));
  double mean = 0;
  for (int s = 0; s < 4; ++s) {
    const Eigen::Vector2d v((s & 1) ? -1.0 : 1.0, (s & 2) ? -1.0 : 1.0);
    mean += v.dot(mlp_jvp(full, Eigen::VectorXd::Zero(2), v).tangent) / 4;
  }
  CHECK(mean == A.trace());

  // Complete sign set equals the exact trace for every width up to 8.
  for (int d = 1; d <= 8; ++d) {
    const MlpParams p = seeded({d, 9, d}, 100 + d);
    const Eigen::VectorXd x = random_vec(d, rng);
    double acc = 0;
    const int n = 1 << d;
    for (int s = 0; s < n; ++s) {
      Eigen::VectorXd v(d);
      for (int i = 0; i < d; ++i) v[i] = ((s >> i) & 1) ? -1.0 : 1.0;
      acc += v.dot(mlp_jvp(p, x, v).tangent);
    }
    CHECK(std::abs(acc / n - divergence_exact(p, x)) < 1e-10);
  }

  // 1024 probes: within 5% of the exact value on at least 95 of 100 trials. W2 = W1^T keeps the
  // Jacobian positive semidefinite so the trace is well away from zero.
  int good = 0;
  for (int trial = 0; trial < 100; ++trial) {
    MlpParams p = seeded({6, 32, 6}, 500 + trial);
    p.layers[1].weight = p.layers[0].weight.transpose();
    const Eigen::VectorXd x = 0.5 * random_vec(6, rng);
    const double exact = divergence_exact(p, x);
    if (std::abs(divergence_hutchinson(p, x, 1024, rng) - exact) < 0.05 * std::abs(exact)) ++good;
  }
  CHECK(good >= 95);
}

TEST_CASE("adamw_step") {
  OptimizerState st(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0, 1.0}, 3);
  Eigen::VectorXd p = Eigen::VectorXd::Constant(3, 0.4);
  adamw_step(p, Eigen::VectorXd::Zero(3), st);
  CHECK((p.array() == 0.4).all());

  OptimizerState s1(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0, 1.0}, 1);
  Eigen::VectorXd q = Eigen::VectorXd::Zero(1);
  adamw_step(q, Eigen::VectorXd::Ones(1), s1);
  CHECK(q[0] == doctest::Approx(-0.1).epsilon(1e-7));
  CHECK(s1.step == 1);

  OptimizerState wd(AdamWConfig{0.05, 0.9, 0.999, 1e-8, 0.2, 1.0}, 2);
  Eigen::VectorXd r = (Eigen::VectorXd(2) << 1.0, -3.0).finished();
  adamw_step(r, Eigen::VectorXd::Zero(2), wd);
  CHECK(r[0] == doctest::Approx(1.0 * (1 - 0.05 * 0.2)).epsilon(1e-15));
  CHECK(r[1] == doctest::Approx(-3.0 * (1 - 0.05 * 0.2)).epsilon(1e-15));

  OptimizerState dec(AdamWConfig{0.01, 0.9, 0.999, 1e-8, 0.0, 0.5}, 1);
  Eigen::VectorXd s = Eigen::VectorXd::Zero(1);
  for (int i = 0; i < 3; ++i) adamw_step(s, Eigen::VectorXd::Ones(1), dec);
  CHECK(dec.current_lr() == doctest::Approx(0.01 * 0.125).epsilon(1e-15));

  OptimizerState bad(AdamWConfig{}, 1);
  bad.step = 17;
  try {
    adamw_step(s, Eigen::VectorXd::Constant(1, std::nan("")), bad);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 17);
  }
}

TEST_CASE("embed") {
  EmbeddingSpec spec;
  spec.time_width = 64;
  const Eigen::VectorXd e0 = embed(spec, 0.0, 2, 3);
  CHECK(e0.size() == 64);
  CHECK(e0.head(32).norm() == 0.0);
  CHECK((e0.tail(32).array() == 1.0).all());

  std::vector<Eigen::VectorXd> grid;
  for (int i = 1; i < 400; ++i) grid.push_back(embed(spec, i / 400.0, 1, 1));
  double min_gap = 1e9;
  for (std::size_t a = 0; a < grid.size(); ++a)
    for (std::size_t b = a + 1; b < grid.size(); ++b) min_gap = std::min(min_gap, (grid[a] - grid[b]).cwiseAbs().maxCoeff());
  CHECK(min_gap > 1e-3);

  EmbeddingSpec none;
  none.time_width = 0;
  CHECK(embed(none, 0.4, 2, 3).size() == 0);
  CHECK(none.width(2, 3) == 0);

  EmbeddingSpec idx;
  idx.time_width = 4;
  idx.feature_index_width = 2;
  idx.time_index_width = 3;
  CHECK(idx.width(2, 5) == 4 + 4 + 15);
  CHECK(embed(idx, 0.3, 2, 5).size() == idx.width(2, 5));
  CHECK(embed(idx, 0.3, 2, 5) == embed(idx, 0.3, 2, 5));

  EmbeddingSpec odd;
  odd.time_width = 3;
  CHECK_THROWS_AS(odd.validate(), ValidationError);
}
