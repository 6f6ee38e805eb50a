#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "psp/autodiff.hpp"
#include "psp/sgd.hpp"
#include "test_helpers.hpp"

using namespace psp;
using namespace psp::testing;

TEST_CASE("backward trivial losses") {
  SUBCASE("loss = sum(w) gives gradient of ones") {
    Graph g;
    Rng rng(101);
    const int w = g.add_param(random_tensor({3, 4}, rng), "w");
    const int loss = g.sum_all(w);
    g.backward(loss);
    for (int64_t i = 0; i < 12; ++i) CHECK(g.grad(w)[i] == 1.0);
  }

  SUBCASE("loss = 0.5 * ||w||^2 gives w") {
    Graph g;
    const int w = g.add_param(Tensor({2}, {1.0, -2.0}), "w");
    const int loss = g.scale_const(g.sum_all(g.square(w)), 0.5);
    g.backward(loss);
    CHECK(g.grad(w)[0] == doctest::Approx(1.0));
    CHECK(g.grad(w)[1] == doctest::Approx(-2.0));
  }

  SUBCASE("non-scalar loss rejected") {
    Graph g;
    const int w = g.add_param(Tensor({2}, {1.0, 2.0}), "w");
    CHECK_THROWS_AS(g.backward(w), std::invalid_argument);
  }

  SUBCASE("backward before any forward rejected") {
    Graph g;
    CHECK_THROWS_AS(g.backward(0), std::logic_error);
  }
}

TEST_CASE("per-op gradients match central finite differences") {
  Rng rng(103);

  SUBCASE("conv2d weight and input") {
    ConvGeometry geom{3, 2, 3, 3, 1, 1, 5, 5};
    Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5);
    Tensor x = random_tensor({2, 2, 5, 5}, rng, 0.5);
    auto run = [&]() {
      Graph g;
      const int wi = g.add_param(w, "w");
      const int xi = g.add_param(x, "x");
      return g.value(g.sum_all(g.square(g.conv2d(wi, xi, geom))))[0];
    };
    Graph g;
    const int wi = g.add_param(w, "w");
    const int xi = g.add_param(x, "x");
    const int loss = g.sum_all(g.square(g.conv2d(wi, xi, geom)));
    g.backward(loss);
    const Tensor fdw = finite_difference(w, run);
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(rel_err(g.grad(wi)[i], fdw[i]) <= 1e-5);
    const Tensor fdx = finite_difference(x, run);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(rel_err(g.grad(xi)[i], fdx[i]) <= 1e-5);
  }

  SUBCASE("strided conv weight") {
    ConvGeometry geom{2, 2, 3, 3, 2, 1, 6, 6};
    Tensor w = random_tensor({2, 2, 3, 3}, rng, 0.5);
    Tensor x = random_tensor({1, 2, 6, 6}, rng, 0.5);
    auto run = [&]() {
      Graph g;
      return g.value(
          g.sum_all(g.square(g.conv2d(g.add_param(w, "w"), g.add_input(x), geom))))[0];
    };
    Graph g;
    const int wi = g.add_param(w, "w");
    const int loss = g.sum_all(g.square(g.conv2d(wi, g.add_input(x), geom)));
    g.backward(loss);
    const Tensor fd = finite_difference(w, run);
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(rel_err(g.grad(wi)[i], fd[i]) <= 1e-5);
  }

  SUBCASE("linear with bias") {
    Tensor x = random_tensor({4, 5}, rng);
    Tensor w = random_tensor({3, 5}, rng);
    Tensor b = random_tensor({3}, rng);
    auto run = [&]() {
      Graph g;
      return g.value(g.sum_all(g.square(
          g.linear(g.add_param(x, "x"), g.add_param(w, "w"), g.add_param(b, "b")))))[0];
    };
    Graph g;
    const int xi = g.add_param(x, "x");
    const int wi = g.add_param(w, "w");
    const int bi = g.add_param(b, "b");
    g.backward(g.sum_all(g.square(g.linear(xi, wi, bi))));
    for (auto [node, tensor] : {std::pair{xi, &x}, {wi, &w}, {bi, &b}}) {
      const Tensor fd = finite_difference(*tensor, run);
      for (int64_t i = 0; i < tensor->numel(); ++i) CHECK(rel_err(g.grad(node)[i], fd[i]) <= 1e-4);
    }
  }

  SUBCASE("batchnorm train and eval modes") {
    for (bool training : {true, false}) {
      CAPTURE(training);
      Tensor x = random_tensor({3, 2, 4, 4}, rng);
      Tensor gamma = random_tensor({2}, rng, 0.2);
      for (int64_t i = 0; i < 2; ++i) gamma[i] += 1.0;
      Tensor beta = random_tensor({2}, rng, 0.2);
      Tensor rm({2}), rv = Tensor::full({2}, 1.0);
      rm[0] = 0.3;
      rv[1] = 2.0;
      auto run = [&]() {
        Tensor rm2 = rm, rv2 = rv;  // keep probe side effects out of the stats
        Graph g;
        return g.value(g.sum_all(g.square(g.batchnorm(
            g.add_param(x, "x"), g.add_param(gamma, "g"), g.add_param(beta, "b"), &rm2, &rv2,
            training))))[0];
      };
      Tensor rm2 = rm, rv2 = rv;
      Graph g;
      const int xi = g.add_param(x, "x");
      const int gi = g.add_param(gamma, "g");
      const int bi = g.add_param(beta, "b");
      g.backward(g.sum_all(g.square(g.batchnorm(xi, gi, bi, &rm2, &rv2, training))));
      for (auto [node, tensor] : {std::pair{xi, &x}, {gi, &gamma}, {bi, &beta}}) {
        const Tensor fd = finite_difference(*tensor, run);
        for (int64_t i = 0; i < tensor->numel(); ++i)
          CHECK(rel_err(g.grad(node)[i], fd[i]) <= 1e-4);
      }
    }
  }

  SUBCASE("relu, pools, concat, add, gather, bias_add") {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    // keep relu inputs away from the kink
    for (int64_t i = 0; i < x.numel(); ++i)
      if (std::fabs(x[i]) < 1e-3) x[i] = 0.1;
    Tensor y = random_tensor({2, 2, 4, 4}, rng);
    Tensor bias = random_tensor({3}, rng);
    auto run = [&]() {
      Graph g;
      const int xi = g.add_param(x, "x");
      const int yi = g.add_param(y, "y");
      const int bi = g.add_param(bias, "bias");
      const int biased = g.bias_add_channels(xi, bi);
      const int r = g.relu(biased);
      const int cat = g.concat_channels({r, yi});
      const int mp = g.maxpool(cat, 2, 2);
      const int ap = g.avgpool(cat, 2, 2);
      const int sum = g.add(mp, ap);
      const int gat = g.gather_channels(sum, {0, 2, 4});
      const int gap = g.global_avgpool(gat);
      return g.value(g.sum_all(g.square(gap)))[0];
    };
    Graph g;
    const int xi = g.add_param(x, "x");
    const int yi = g.add_param(y, "y");
    const int bi = g.add_param(bias, "bias");
    const int biased = g.bias_add_channels(xi, bi);
    const int cat = g.concat_channels({g.relu(biased), yi});
    const int joined = g.add(g.maxpool(cat, 2, 2), g.avgpool(cat, 2, 2));
    g.backward(g.sum_all(g.square(g.global_avgpool(g.gather_channels(joined, {0, 2, 4})))));
    for (auto [node, tensor] : {std::pair{xi, &x}, {yi, &y}, {bi, &bias}}) {
      const Tensor fd = finite_difference(*tensor, run);
      for (int64_t i = 0; i < tensor->numel(); ++i) CHECK(rel_err(g.grad(node)[i], fd[i]) <= 1e-4);
    }
  }

  SUBCASE("softmax cross entropy") {
    Tensor logits = random_tensor({5, 7}, rng);
    const std::vector<int> labels = {0, 3, 6, 2, 2};
    auto run = [&]() {
      Graph g;
      return g.value(g.softmax_cross_entropy(g.add_param(logits, "l"), labels))[0];
    };
    Graph g;
    const int li = g.add_param(logits, "l");
    g.backward(g.softmax_cross_entropy(li, labels));
    const Tensor fd = finite_difference(logits, run);
    for (int64_t i = 0; i < logits.numel(); ++i) CHECK(rel_err(g.grad(li)[i], fd[i]) <= 1e-4);
  }

  SUBCASE("psp_scale under both gradient rules") {
    ConvGeometry geom{2, 3, 3, 3, 1, 1, 4, 4};
    Tensor w = random_tensor({2, 3, 3, 3}, rng, 0.5);
    Tensor alpha = random_tensor({3, 3, 3}, rng, 0.1);
    // keep every structure active and away from the threshold so FD is valid
    const double eps = 0.02;
    for (int64_t i = 0; i < alpha.numel(); ++i)
      if (std::fabs(alpha[i]) < eps + 0.01) alpha[i] = eps + 0.05;
    PspMeta meta{Granularity::column, eps, GradRule::chain_rule, {}};
    Tensor x = random_tensor({1, 3, 4, 4}, rng, 0.5);
    auto run = [&]() {
      Graph g;
      const int q = g.psp_scale(g.add_param(w, "w"), g.add_param(alpha, "a"), meta);
      return g.value(g.sum_all(g.square(g.conv2d(q, g.add_input(x), geom))))[0];
    };
    Graph g;
    const int wi = g.add_param(w, "w");
    const int ai = g.add_param(alpha, "a");
    const int q = g.psp_scale(wi, ai, meta);
    g.backward(g.sum_all(g.square(g.conv2d(q, g.add_input(x), geom))));
    const Tensor fda = finite_difference(alpha, run);
    for (int64_t i = 0; i < alpha.numel(); ++i) CHECK(rel_err(g.grad(ai)[i], fda[i]) <= 1e-4);
    const Tensor fdw = finite_difference(w, run);
    for (int64_t i = 0; i < w.numel(); ++i) CHECK(rel_err(g.grad(wi)[i], fdw[i]) <= 1e-4);
  }
}

TEST_CASE("mask_scale blocks loss gradients at masked weights") {
  Rng rng(107);
  Tensor w = random_tensor({2, 2, 3, 3}, rng);
  Tensor mask = Tensor::full({2, 2, 3, 3}, 1.0);
  for (int64_t i = 0; i < mask.numel(); i += 3) mask[i] = 0.0;  // fine-grained holes
  Graph g;
  const int wi = g.add_param(w, "w");
  g.backward(g.sum_all(g.square(g.mask_scale(wi, mask))));
  for (int64_t i = 0; i < w.numel(); ++i) {
    if (mask[i] == 0.0)
      CHECK(g.grad(wi)[i] == 0.0);
    else
      CHECK(g.grad(wi)[i] == doctest::Approx(2.0 * w[i]));
  }
}

TEST_CASE("sgd weight decay step") {
  SUBCASE("worked example") {
    Tensor p = Tensor::scalar(1.0);
    SgdState st;
    st.momentum = 0.9;
    st.learning_rate = 0.1;
    st.lambda = 1e-4;
    sgd_step_weight_decay(p, Tensor::scalar(0.5), st);
    CHECK(st.velocity[0] == doctest::Approx(-0.05001).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(0.94999).epsilon(1e-12));
  }
  SUBCASE("zero grad, zero lambda leaves p unchanged") {
    Tensor p = Tensor::scalar(0.7);
    SgdState st;
    st.momentum = 0.0;
    st.lambda = 0.0;
    sgd_step_weight_decay(p, Tensor::scalar(0.0), st);
    CHECK(p[0] == 0.7);
  }
  SUBCASE("decay-only shrinks by (1 - lambda*eta)") {
    Tensor p = Tensor::scalar(2.0);
    SgdState st;
    st.momentum = 0.0;
    st.learning_rate = 0.1;
    st.lambda = 0.01;
    sgd_step_weight_decay(p, Tensor::scalar(0.0), st);
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.001)));
  }
  SUBCASE("non-finite input rejected with the parameter name") {
    Tensor p = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
    SgdState st;
    try {
      sgd_step_weight_decay(p, Tensor::scalar(0.0), st, "g0b0.conv1.weight");
      FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("g0b0.conv1.weight") != std::string::npos);
    }
  }
}

TEST_CASE("sgd l1 step") {
  SUBCASE("worked example") {
    Tensor p = Tensor::scalar(0.5);
    SgdState st;
    st.momentum = 0.0;
    st.learning_rate = 0.1;
    st.lambda = 0.01;
    sgd_step_l1(p, Tensor::scalar(0.0), st);
    CHECK(p[0] == doctest::Approx(0.499).epsilon(1e-12));
  }
  SUBCASE("sign(0) = 0: no pull at the origin") {
    Tensor p = Tensor::scalar(0.0);
    SgdState st;
    st.momentum = 0.0;
    st.learning_rate = 0.1;
    st.lambda = 0.5;
    sgd_step_l1(p, Tensor::scalar(0.0), st);
    CHECK(p[0] == 0.0);
  }
  SUBCASE("odd symmetry") {
    Tensor pp = Tensor::scalar(0.5), pn = Tensor::scalar(-0.5);
    SgdState sp, sn;
    sp.momentum = sn.momentum = 0.3;
    sp.learning_rate = sn.learning_rate = 0.1;
    sp.lambda = sn.lambda = 0.01;
    for (int i = 0; i < 5; ++i) {
      sgd_step_l1(pp, Tensor::scalar(0.2), sp);
      sgd_step_l1(pn, Tensor::scalar(-0.2), sn);
      CHECK(pp[0] == doctest::Approx(-pn[0]).epsilon(1e-14));
    }
  }
}

TEST_CASE("weight decay shrinks geometrically, l1 by a constant step") {
  // With zero loss gradient the two rules separate cleanly: one is
  // multiplicative per step, the other subtracts a fixed magnitude.
  const double eta = 0.1, lambda = 0.05;
  Tensor pw = Tensor::scalar(0.8), pl = Tensor::scalar(0.8);
  SgdState sw, sl;
  sw.momentum = sl.momentum = 0.0;
  sw.learning_rate = sl.learning_rate = eta;
  sw.lambda = sl.lambda = lambda;
  double prev_w = pw[0], prev_l = pl[0];
  for (int t = 0; t < 20; ++t) {
    sgd_step_weight_decay(pw, Tensor::scalar(0.0), sw);
    sgd_step_l1(pl, Tensor::scalar(0.0), sl);
    CHECK(pw[0] == doctest::Approx(prev_w * (1.0 - lambda * eta)).epsilon(1e-12));
    CHECK(prev_l - pl[0] == doctest::Approx(lambda * eta).epsilon(1e-12));
    CHECK(pw[0] > 0.0);  // never exactly zero in finitely many steps
    prev_w = pw[0];
    prev_l = pl[0];
  }
}

TEST_CASE("momentum velocity converges to -eta*g/(1-mu)") {
  const double eta = 0.01, mu = 0.9, g = 2.0;
  Tensor p = Tensor::scalar(0.0);
  SgdState st;
  st.momentum = mu;
  st.learning_rate = eta;
  st.lambda = 0.0;
  for (int t = 0; t < 200; ++t) sgd_step_weight_decay(p, Tensor::scalar(g), st);
  const double limit = -eta * g / (1.0 - mu);
  CHECK(std::fabs(st.velocity[0] - limit) <= 0.01 * std::fabs(limit));
}
