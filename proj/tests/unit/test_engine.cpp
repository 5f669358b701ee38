#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "tsce/engine.hpp"

using namespace tsce;

namespace {

Tensor series(std::initializer_list<double> v) {
  Tensor t({1, 1, Index(v.size())});
  Index i = 0;
  for (double x : v) t(0, 0, i++) = x;
  return t;
}

Tensor rows(std::initializer_list<std::initializer_list<double>> r) {
  const Index b = Index(r.size()), c = Index(r.begin()->size());
  Tensor t({b, c, 1});
  Index i = 0;
  for (const auto& row : r) {
    Index j = 0;
    for (double x : row) t(i, j++, 0) = x;
    ++i;
  }
  return t;
}

}  // namespace

TEST_SUITE("engine") {
  TEST_CASE("conv1d is a cross-correlation") {
    Rng rng(1);
    Layer conv = make_conv1d(1, 1, 3, Padding::valid, rng);
    conv.params[0].values() << 1.0, 0.0, -1.0;
    conv.params[1].values().setZero();
    const auto r = layer_forward(conv, series({1, 2, 3, 4}), Mode::eval, rng);
    REQUIRE(r.output.shape() == Shape{1, 1, 2});
    CHECK(r.output(0, 0, 0) == doctest::Approx(-2.0));
    CHECK(r.output(0, 0, 1) == doctest::Approx(-2.0));
  }

  TEST_CASE("same padding puts the extra zero on the right") {
    Rng rng(1);
    Layer conv = make_conv1d(1, 1, 4, Padding::same, rng);
    conv.params[0].values() << 1.0, 0.0, 0.0, 0.0;
    conv.params[1].values().setZero();
    // Kernel 4 pads one zero left, two right: output[t] = x[t - 1].
    const auto r = layer_forward(conv, series({1, 2, 3, 4, 5}), Mode::eval, rng);
    REQUIRE(r.output.time() == 5);
    CHECK(r.output(0, 0, 0) == 0.0);
    CHECK(r.output(0, 0, 1) == 1.0);
    CHECK(r.output(0, 0, 4) == 4.0);
  }

  TEST_CASE("global average pooling and softmax examples") {
    Rng rng(0);
    const auto gap = layer_forward(make_simple(LayerKind::global_avg_pool), series({2, 4, 6}),
                                   Mode::eval, rng);
    CHECK(gap.output(0, 0, 0) == doctest::Approx(4.0));

    const auto sm = layer_forward(make_simple(LayerKind::softmax), rows({{0, 0}}), Mode::eval, rng);
    CHECK(sm.output(0, 0, 0) == 0.5);
    CHECK(sm.output(0, 1, 0) == 0.5);
  }

  TEST_CASE("softmax rows are distributions") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor x = oracle::random_tensor({4, 5, 1}, rng, -30.0, 30.0);
      const auto y = layer_forward(make_simple(LayerKind::softmax), x, Mode::eval, rng).output;
      for (Index b = 0; b < 4; ++b) {
        double s = 0.0;
        for (Index c = 0; c < 5; ++c) {
          CHECK(y(b, c, 0) >= 0.0);
          s += y(b, c, 0);
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
  }

  TEST_CASE("dense backward is the transpose map") {
    Rng rng(5);
    Layer dense = make_dense(3, 2, rng);
    const Tensor x = oracle::random_tensor({1, 3, 1}, rng);
    const auto f = layer_forward(dense, x, Mode::eval, rng);
    const Tensor g = oracle::random_tensor({1, 2, 1}, rng);
    const auto b = layer_backward(dense, f.cache, g);
    const auto w = as_matrix(dense.params[0], 2, 3);
    const Eigen::VectorXd expected = w.transpose() * as_matrix(g, 1, 2).row(0).transpose();
    for (Index i = 0; i < 3; ++i) CHECK(b.grad_inputs[0](0, i, 0) == doctest::Approx(expected[i]));
  }

  TEST_CASE("relu passes no gradient at negative inputs") {
    Rng rng(0);
    const Layer relu = make_simple(LayerKind::relu);
    const auto f = layer_forward(relu, series({-1.0, 2.0, -3.0}), Mode::train, rng);
    const auto b = layer_backward(relu, f.cache, series({1.0, 1.0, 1.0}));
    CHECK(b.grad_inputs[0](0, 0, 0) == 0.0);
    CHECK(b.grad_inputs[0](0, 0, 1) == 1.0);
    CHECK(b.grad_inputs[0](0, 0, 2) == 0.0);
  }

  TEST_CASE("batch norm normalises each channel over batch and time") {
    Rng rng(11);
    const Layer bn = make_batch_norm(3);
    const Tensor x = oracle::random_tensor({4, 3, 7}, rng, -5.0, 9.0);
    const auto y = layer_forward(bn, x, Mode::train, rng).output;
    for (Index c = 0; c < 3; ++c) {
      double mean = 0.0, sq = 0.0;
      for (Index b = 0; b < 4; ++b)
        for (Index t = 0; t < 7; ++t) mean += y(b, c, t);
      mean /= 28.0;
      for (Index b = 0; b < 4; ++b)
        for (Index t = 0; t < 7; ++t) sq += (y(b, c, t) - mean) * (y(b, c, t) - mean);
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(sq / 28.0 - 1.0) < 1e-6);
    }
  }

  TEST_CASE("batch norm running statistics use momentum 0.99") {
    Rng rng(2);
    Layer bn = make_batch_norm(1);
    const Tensor x = series({1.0, 3.0});
    const auto f = layer_forward(bn, x, Mode::train, rng);
    update_running_statistics(bn, f.cache);
    CHECK(bn.buffers[0].data()[0] == doctest::Approx(0.01 * 2.0));
    CHECK(bn.buffers[1].data()[0] == doctest::Approx(0.99 * 1.0 + 0.01 * 1.0));
    const auto e = layer_forward(bn, x, Mode::eval, rng).output;
    CHECK(e(0, 0, 0) == doctest::Approx((1.0 - 0.02) / std::sqrt(1.0 + 1e-7)));
  }

  TEST_CASE("dropout is the identity in eval mode and inverted-scaled in train mode") {
    Rng rng(4);
    const Layer drop = make_dropout(0.5);
    const Tensor x = oracle::random_tensor({2, 3, 50}, rng);
    CHECK(layer_forward(drop, x, Mode::eval, rng).output == x);
    const auto y = layer_forward(drop, x, Mode::train, rng).output;
    int zeros = 0;
    for (Index i = 0; i < x.size(); ++i) {
      if (y.data()[i] == 0.0) ++zeros;
      else CHECK(y.data()[i] == doctest::Approx(2.0 * x.data()[i]));
    }
    CHECK(zeros > 100);
    CHECK(zeros < 200);
    CHECK_THROWS_AS(make_dropout(1.0), DomainError);
    CHECK_THROWS_AS(make_dropout(-0.1), DomainError);
  }

  TEST_CASE("shape mismatches and stale caches are rejected") {
    Rng rng(1);
    Layer conv = make_conv1d(2, 4, 3, Padding::same, rng);
    CHECK_THROWS_AS(layer_forward(conv, Tensor({1, 3, 8}), Mode::eval, rng), ShapeError);
    const auto f = layer_forward(conv, Tensor({1, 2, 8}), Mode::train, rng);
    conv.touch();
    CHECK_THROWS_AS(layer_backward(conv, f.cache, f.output), StateError);
    Layer other = make_conv1d(2, 4, 3, Padding::same, rng);
    CHECK_THROWS_AS(layer_backward(other, f.cache, f.output), StateError);
  }

  TEST_CASE("glorot uniform bounds, determinism and moments") {
    CHECK_THROWS_AS(glorot_uniform(0, 3, {3}, 1), DomainError);
    CHECK_THROWS_AS(glorot_uniform(3, 0, {3}, 1), DomainError);
    const Tensor a = glorot_uniform(3, 3, {100000}, 42);
    CHECK(a == glorot_uniform(3, 3, {100000}, 42));
    CHECK(a.values().minCoeff() >= -1.0);
    CHECK(a.values().maxCoeff() <= 1.0);
    // Uniform(-1, 1) with 1e5 draws: mean sd ~ 0.0018; extreme order
    // statistics lie within 1e-4 of the bounds with overwhelming probability.
    CHECK(std::abs(a.values().mean()) < 0.02);
    CHECK(a.values().minCoeff() <= -0.98);
    CHECK(a.values().maxCoeff() >= 0.98);
    const Tensor b = glorot_uniform(20, 30, {1000}, 1);
    CHECK(b.values().abs().maxCoeff() <= std::sqrt(6.0 / 50.0));
  }

  TEST_CASE("loss values") {
    const int one[] = {0};
    CHECK(loss(LossKind::cross_entropy, rows({{1.0, 0.0}}), one).value == 0.0);
    CHECK(loss(LossKind::mse, rows({{0.5, 0.5}}), one).value == doctest::Approx(0.25));
    CHECK_THROWS_AS(loss(LossKind::cross_entropy, rows({{0.5, 0.6}}), one), DomainError);
    const int bad[] = {2};
    CHECK_THROWS_AS(loss(LossKind::mse, rows({{0.5, 0.5}}), bad), DomainError);
  }

  TEST_CASE("loss gradients match finite differences") {
    Rng rng(9);
    const int labels[] = {0, 2, 1};
    const double h = 1e-5;
    // MSE directly on sigmoid-like outputs.
    const Tensor out = oracle::random_tensor({3, 3, 1}, rng, 0.05, 0.95);
    const auto mse = loss(LossKind::mse, out, labels);
    for (Index i = 0; i < out.size(); ++i) {
      Tensor p = out, m = out;
      p.data()[i] += h;
      m.data()[i] -= h;
      const double num =
          (loss(LossKind::mse, p, labels).value - loss(LossKind::mse, m, labels).value) / (2 * h);
      CHECK(oracle::relative_error(mse.grad.data()[i], num) < 1e-4);
    }
    // Cross-entropy composed with softmax, perturbing the logits so rows stay
    // distributions.
    const Layer sm = make_simple(LayerKind::softmax);
    const Tensor logits = oracle::random_tensor({3, 3, 1}, rng, -2.0, 2.0);
    auto ce = [&](const Tensor& z) {
      return loss(LossKind::cross_entropy, layer_forward(sm, z, Mode::eval, rng).output, labels);
    };
    const auto f = layer_forward(sm, logits, Mode::train, rng);
    const auto g = layer_backward(sm, f.cache, loss(LossKind::cross_entropy, f.output, labels).grad);
    for (Index i = 0; i < logits.size(); ++i) {
      Tensor p = logits, m = logits;
      p.data()[i] += h;
      m.data()[i] -= h;
      const double num = (ce(p).value - ce(m).value) / (2 * h);
      CHECK(oracle::relative_error(g.grad_inputs[0].data()[i], num) < 1e-4);
    }
  }

  TEST_CASE("adam first step and zero gradient") {
    Tensor p({1}, 3.0);
    Tensor* params[] = {&p};
    AdamState state =
        make_adam_state(std::vector<const Tensor*>{&p}, AdamHyper{0.1, 0.9, 0.999, 1e-8});
    const Tensor g({1}, 1.0);
    adam_step(params, std::span<const Tensor>(&g, 1), state);
    // m_hat = 1, v_hat = 1: step = lr * 1 / (1 + eps).
    CHECK(p.data()[0] == doctest::Approx(3.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-12));
    CHECK(state.step == 1);

    Tensor q({4}, 2.0);
    Tensor* qs[] = {&q};
    AdamState s2 = make_adam_state(std::vector<const Tensor*>{&q}, AdamHyper{});
    const Tensor zero({4}, 0.0);
    for (int i = 0; i < 3; ++i) adam_step(qs, std::span<const Tensor>(&zero, 1), s2);
    CHECK(q == Tensor({4}, 2.0));
  }

  TEST_CASE("adam rejects non-finite gradients and leaves parameters untouched") {
    Tensor p({2}, 1.0);
    Tensor* params[] = {&p};
    AdamState s = make_adam_state(std::vector<const Tensor*>{&p}, AdamHyper{});
    Tensor g({2}, 0.5);
    g.data()[1] = std::nan("");
    CHECK_THROWS_AS(adam_step(params, std::span<const Tensor>(&g, 1), s), NumericsError);
    CHECK(p == Tensor({2}, 1.0));
    CHECK(s.step == 0);
  }

  TEST_CASE("every layer kind passes the finite-difference check") {
    Rng rng(21);
    struct Case {
      const char* name;
      Layer layer;
      std::vector<Tensor> inputs;
    };
    std::vector<Case> cases;
    cases.push_back({"conv1d same", make_conv1d(2, 3, 4, Padding::same, rng),
                     {oracle::random_tensor({3, 2, 9}, rng)}});
    cases.push_back({"conv1d valid", make_conv1d(2, 3, 3, Padding::valid, rng),
                     {oracle::random_tensor({2, 2, 8}, rng)}});
    {
      Layer bn = make_batch_norm(3);
      bn.params[0] = oracle::random_tensor({3}, rng, 0.5, 1.5);
      bn.params[1] = oracle::random_tensor({3}, rng);
      cases.push_back({"batch_norm", bn, {oracle::random_tensor({4, 3, 5}, rng)}});
    }
    cases.push_back({"dense", make_dense(12, 4, rng), {oracle::random_tensor({3, 3, 4}, rng)}});
    cases.push_back({"relu", make_simple(LayerKind::relu), {oracle::random_tensor({2, 3, 6}, rng)}});
    cases.push_back(
        {"sigmoid", make_simple(LayerKind::sigmoid), {oracle::random_tensor({2, 3, 6}, rng)}});
    {
      Layer prelu = make_prelu(3);
      prelu.params[0] = oracle::random_tensor({3}, rng, 0.05, 0.5);
      cases.push_back({"prelu", prelu, {oracle::random_tensor({2, 3, 6}, rng)}});
    }
    cases.push_back({"dropout", make_dropout(0.3), {oracle::random_tensor({2, 3, 6}, rng)}});
    cases.push_back({"max_pool", make_pool(LayerKind::max_pool, 2),
                     {oracle::random_tensor({2, 3, 9}, rng)}});
    cases.push_back({"avg_pool", make_pool(LayerKind::avg_pool, 3),
                     {oracle::random_tensor({2, 3, 9}, rng)}});
    cases.push_back({"global_avg_pool", make_simple(LayerKind::global_avg_pool),
                     {oracle::random_tensor({2, 3, 7}, rng)}});
    cases.push_back(
        {"softmax", make_simple(LayerKind::softmax), {oracle::random_tensor({3, 4, 1}, rng)}});
    cases.push_back({"add", make_simple(LayerKind::add),
                     {oracle::random_tensor({2, 3, 5}, rng), oracle::random_tensor({2, 3, 5}, rng)}});
    cases.push_back({"attention_fuse", make_simple(LayerKind::attention_fuse),
                     {oracle::random_tensor({2, 6, 7}, rng)}});
    cases.push_back({"concat", make_simple(LayerKind::concat),
                     {oracle::random_tensor({2, 2, 5}, rng), oracle::random_tensor({2, 3, 5}, rng)}});
    REQUIRE(cases.size() == 15);  // conv1d twice, then the other 13 kinds once

    std::uint64_t seed = 100;
    for (auto& c : cases) {
      CAPTURE(c.name);
      const auto r = oracle::check_layer(c.layer, c.inputs, seed++);
      CHECK(r.checked > 0);
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}
