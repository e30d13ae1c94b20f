#include <doctest.h>

#include <cmath>

#include "rpg/nn.hpp"
#include "rpg/rng.hpp"

using namespace rpg::nn;

namespace {

Matrix RandomMatrix(int rows, int cols, rpg::Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.Normal();
  return m;
}

// Loss = sum(weights .* output), so d_output = weights.
double WeightedOutput(const Network& net, const ParamVector& p, const Matrix& x,
                      int steps, int batch, const Matrix& weights,
                      const Array* reset) {
  return (net.Forward(p, x, steps, batch, nullptr, reset).output.array() *
          weights.array())
      .sum();
}

// Max relative error between the analytic gradient and central differences.
double GradCheck(const Network& net, ParamVector& p, const Matrix& x, int steps,
                 int batch, const Matrix& weights, const Array* reset,
                 double h = 1e-6) {
  const ForwardPass pass = net.Forward(p, x, steps, batch, nullptr, reset);
  ParamVector grad = p.ZerosLike();
  net.Backward(p, pass, weights, grad);
  double worst = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double saved = p.flat()[k];
    p.flat()[k] = saved + h;
    const double up = WeightedOutput(net, p, x, steps, batch, weights, reset);
    p.flat()[k] = saved - h;
    const double down = WeightedOutput(net, p, x, steps, batch, weights, reset);
    p.flat()[k] = saved;
    const double fd = (up - down) / (2 * h);
    const double err = std::abs(fd - grad.flat()[k]) /
                       std::max(1e-3, std::abs(fd) + std::abs(grad.flat()[k]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace

TEST_CASE("pack and unpack round-trip") {
  ParamVector p;
  p.AddSlice("a", 2, 3);
  p.AddSlice("b", 4, 1);
  rpg::Rng rng(1);
  for (Eigen::Index k = 0; k < p.size(); ++k) p.flat()[k] = rng.Normal();
  const ParamVector q = ParamVector::Pack(p, p.Unpack());
  CHECK(q.flat() == p.flat());
  CHECK(q.SameLayout(p));
  CHECK_THROWS_AS(p.AddSlice("a", 1, 1), std::invalid_argument);
  auto named = p.Unpack();
  named.erase("b");
  CHECK_THROWS_AS(ParamVector::Pack(p, named), std::invalid_argument);
}

TEST_CASE("zero weights give a uniform policy") {
  ParamVector p;
  Network net(p, "pi", Architecture{4, 64, 2, false, 3});
  Matrix x = Matrix::Ones(4, 5);
  const Matrix logp = LogSoftmax(net.Forward(p, x, 1, 5).output);
  for (Eigen::Index i = 0; i < logp.size(); ++i) {
    CHECK(logp.data()[i] == doctest::Approx(std::log(1.0 / 3.0)));
  }
  Network v(p, "v", Architecture{4, 64, 2, false, 2});
  CHECK(v.Forward(p, x, 1, 5).output.isZero(0.0));
}

TEST_CASE("forward is deterministic and checks shapes") {
  ParamVector p;
  Network net(p, "pi", Architecture{3, 8, 2, true, 4});
  rpg::Rng rng(2);
  net.Initialize(p, rng);
  const Matrix x = RandomMatrix(3, 6, rng);
  const ForwardPass a = net.Forward(p, x, 3, 2);
  const ForwardPass b = net.Forward(p, x, 3, 2);
  CHECK(a.output == b.output);
  CHECK(a.final_hidden == b.final_hidden);
  CHECK_THROWS_AS(net.Forward(p, RandomMatrix(2, 6, rng), 3, 2), std::invalid_argument);
  CHECK_THROWS_AS(net.Forward(p, x, 2, 2), std::invalid_argument);
}

TEST_CASE("orthogonal init is seeded and orthogonal") {
  ParamVector p1, p2;
  Network n1(p1, "pi", Architecture{10, 64, 2, false, 4});
  Network n2(p2, "pi", Architecture{10, 64, 2, false, 4});
  rpg::Rng r1(7), r2(7);
  n1.Initialize(p1, r1);
  n2.Initialize(p2, r2);
  CHECK(p1.Hash() == p2.Hash());
  const Matrix w = p1.Mat(p1.FindSlice("pi/fc1/W"));
  CHECK((w.transpose() * w - Matrix::Identity(64, 64)).norm() < 1e-10);
}

TEST_CASE("gradient checks per layer type over random seeds") {
  struct Case {
    const char* name;
    Architecture arch;
    int steps;
  };
  const Case cases[] = {
      {"linear", Architecture{3, 5, 0, false, 2}, 1},
      {"tanh", Architecture{3, 5, 2, false, 2, Activation::kTanh}, 1},
      {"relu", Architecture{3, 5, 1, false, 2, Activation::kRelu}, 1},
      {"gru", Architecture{3, 4, 1, true, 2}, 4},
      {"value", Architecture{6, 5, 2, false, 1, Activation::kTanh, 0.25}, 1},
  };
  for (const Case& c : cases) {
    double worst = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
      rpg::Rng rng(seed);
      ParamVector p;
      Network net(p, "n", c.arch);
      net.Initialize(p, rng);
      // Nonzero biases so every path is exercised.
      for (Eigen::Index k = 0; k < p.size(); ++k) p.flat()[k] += 0.1 * rng.Normal();
      const int batch = 3;
      const Matrix x = RandomMatrix(c.arch.input_dim, c.steps * batch, rng);
      const Matrix wts = RandomMatrix(c.arch.output_dim, c.steps * batch, rng);
      worst = std::max(worst, GradCheck(net, p, x, c.steps, batch, wts, nullptr));
    }
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("gradient check for log-softmax policy loss") {
  rpg::Rng rng(3);
  ParamVector p;
  Network net(p, "pi", Architecture{4, 6, 2, false, 3});
  net.Initialize(p, rng);
  const Matrix x = RandomMatrix(4, 5, rng);
  const std::vector<int> actions{0, 2, 1, 1, 0};
  auto loss = [&](const ParamVector& q) {
    const Matrix lp = LogSoftmax(net.Forward(q, x, 1, 5).output);
    double s = 0;
    for (int j = 0; j < 5; ++j) s += lp(actions[j], j);
    return s;
  };
  const ForwardPass pass = net.Forward(p, x, 1, 5);
  const Matrix lp = LogSoftmax(pass.output);
  Matrix d = -lp.array().exp().matrix();
  for (int j = 0; j < 5; ++j) d(actions[j], j) += 1.0;
  ParamVector g = p.ZerosLike();
  net.Backward(p, pass, d, g);
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    ParamVector up = p, down = p;
    up.flat()[k] += 1e-6;
    down.flat()[k] -= 1e-6;
    const double fd = (loss(up) - loss(down)) / 2e-6;
    CHECK(std::abs(fd - g.flat()[k]) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("GRU gradient with episode resets inside the sequence") {
  rpg::Rng rng(4);
  ParamVector p;
  Network net(p, "n", Architecture{2, 4, 1, true, 2});
  net.Initialize(p, rng);
  const Matrix x = RandomMatrix(2, 5 * 2, rng);
  const Matrix w = RandomMatrix(2, 5 * 2, rng);
  Array reset = Array::Zero(5, 2);
  reset(2, 0) = 1;
  reset(4, 1) = 1;
  CHECK(GradCheck(net, p, x, 5, 2, w, &reset) < 1e-4);
}

TEST_CASE("chunked GRU unroll reproduces the monolithic pass") {
  rpg::Rng rng(5);
  ParamVector p;
  Network net(p, "n", Architecture{3, 8, 2, true, 4});
  net.Initialize(p, rng);
  const int T = 20, B = 3, chunk = 5;
  const Matrix x = RandomMatrix(3, T * B, rng);
  const ForwardPass full = net.Forward(p, x, T, B);
  Matrix h = Matrix::Zero(8, B);
  for (int c = 0; c < T / chunk; ++c) {
    const Matrix xc = x.middleCols(c * chunk * B, chunk * B);
    const ForwardPass part = net.Forward(p, xc, chunk, B, &h);
    CHECK((part.output - full.output.middleCols(c * chunk * B, chunk * B)).norm() < 1e-12);
    h = full.features.middleCols(((c + 1) * chunk - 1) * B, B);
  }
}

TEST_CASE("value heads are independent") {
  rpg::Rng rng(6);
  ParamVector p;
  Network v(p, "v", Architecture{4, 8, 2, false, 3});
  v.Initialize(p, rng);
  const Matrix x = RandomMatrix(4, 2, rng);
  const Matrix before = v.Forward(p, x, 1, 2).output;
  const int head_w = p.FindSlice("v/head/W");
  p.Mat(head_w).row(1).array() += 0.5;
  p.Mat(p.FindSlice("v/head/b"))(1, 0) += 1.0;
  const Matrix after = v.Forward(p, x, 1, 2).output;
  CHECK(after.row(0) == before.row(0));
  CHECK(after.row(2) == before.row(2));
  CHECK(after.row(1) != before.row(1));
}

TEST_CASE("loss graph parameter terms") {
  ParamVector p;
  p.AddSlice("a", 3, 2);
  rpg::Rng rng(8);
  for (Eigen::Index k = 0; k < p.size(); ++k) p.flat()[k] = rng.Normal();
  LossGraph empty(p);
  CHECK_THROWS_AS(empty.Backward(), std::logic_error);
  LossGraph sum(p);
  sum.AddParamSum(1.0);
  CHECK(sum.Backward().flat() == Vector::Ones(p.size()));
  LossGraph quad(p);
  quad.AddHalfSquaredNorm(1.0);
  CHECK(quad.Backward().flat() == p.flat());
  CHECK(quad.value() == doctest::Approx(0.5 * p.flat().squaredNorm()));
}

TEST_CASE("backward without a recorded pass throws") {
  ParamVector p;
  Network net(p, "n", Architecture{2, 3, 1, false, 1});
  ParamVector g = p.ZerosLike();
  CHECK_THROWS_AS(net.Backward(p, ForwardPass{}, Matrix::Zero(1, 1), g), std::logic_error);
}

TEST_CASE("adam step respects the prefix filter") {
  ParamVector p;
  Network pi(p, "pi", Architecture{2, 3, 1, false, 2});
  Network v(p, "v", Architecture{2, 3, 1, false, 1});
  rpg::Rng rng(9);
  pi.Initialize(p, rng);
  v.Initialize(p, rng);
  ParamVector g = p.ZerosLike();
  g.flat().setOnes();
  AdamState st;
  const uint64_t pi_hash = p.Hash("pi/");
  const uint64_t v_hash = p.Hash("v/");
  AdamStep(p, g, st, 1e-2, AdamConfig{}, "v/");
  CHECK(p.Hash("pi/") == pi_hash);
  CHECK(p.Hash("v/") != v_hash);
  // Adam's first step moves every coordinate by ~lr.
  const int b = p.FindSlice("v/head/b");
  CHECK(st.t == 1);
  CHECK(std::abs(p.Mat(b)(0, 0)) == doctest::Approx(1e-2).epsilon(1e-3));
}

TEST_CASE("gradient clipping") {
  ParamVector g;
  g.AddSlice("a", 2, 1);
  g.flat() << 3, 4;
  CHECK(ClipGradNorm(g, 0.5) == doctest::Approx(5.0));
  CHECK(g.flat().norm() == doctest::Approx(0.5).epsilon(1e-5));
  g.flat() << 0.1, 0.1;
  ClipGradNorm(g, 0.5);
  CHECK(g.flat()[0] == 0.1);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  ParamVector p;
  Network net(p, "pi", Architecture{3, 4, 1, true, 2});
  rpg::Rng rng(10);
  net.Initialize(p, rng);
  Checkpoint ck;
  ck.networks["pi"] = net.arch();
  ck.params = p;
  ck.optimizer.m = Vector::Constant(p.size(), 1.0 / 3.0);
  ck.optimizer.v = Vector::Constant(p.size(), 1e-300);
  ck.optimizer.t = 17;
  ck.rng_state = rng.SerializeState();
  ck.meta["w"] = "[4, 0, 0, 0]";
  const Checkpoint back = Checkpoint::Deserialize(ck.Serialize());
  CHECK(back.params.flat() == p.flat());
  CHECK(back.params.SameLayout(p));
  CHECK(back.optimizer.m == ck.optimizer.m);
  CHECK(back.optimizer.v == ck.optimizer.v);
  CHECK(back.optimizer.t == 17);
  CHECK(back.networks.at("pi") == net.arch());
  CHECK(back.meta.at("w") == "[4, 0, 0, 0]");
  rpg::Rng restored;
  restored.RestoreState(back.rng_state);
  CHECK(restored.NextU64() == rng.NextU64());
  CHECK_THROWS(Checkpoint::Deserialize("garbage"));
}
