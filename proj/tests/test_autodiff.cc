#include <cmath>
#include <string>

#include "doctest.h"
#include "fairpm/autodiff.h"
#include "fairpm/errors.h"
#include "fairpm/random.h"
#include "support/grad_cases.h"

using namespace fairpm;
using fairpm::testing::primitive_cases;

TEST_SUITE("tensor") {
  TEST_CASE("shape and data agree") {
    Tensor t(Shape{2, 3});
    CHECK(t.size() == 6);
    CHECK(t.rank() == 2);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), ShapeError);
    CHECK(Tensor::scalar(4.5).item() == 4.5);
    CHECK_THROWS_AS(t.item(), ShapeError);
  }

  TEST_CASE("reshape keeps row-major order") {
    Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    Tensor r = m.reshaped(Shape{3, 2});
    CHECK(r.at(1, 0) == 3.0);
    CHECK(r.at(2, 1) == 6.0);
    CHECK_THROWS_AS(m.reshaped(Shape{4}), ShapeError);
  }

  TEST_CASE("identity") {
    Tensor i = Tensor::identity(3);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) CHECK(i.at(r, c) == (r == c ? 1.0 : 0.0));
  }
}

TEST_SUITE("autodiff") {
  TEST_CASE("forward values") {
    ad::Tape tape;
    CHECK(ad::sigmoid(tape.constant(Tensor::scalar(0.0))).item() == doctest::Approx(0.5).epsilon(1e-15));
    ad::Var s = ad::softmax(tape.constant(Tensor::vector({0, 0, 0})));
    for (double v : s.value().data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Rng rng(3);
    Tensor a = testing::random_tensor(rng, Shape{3, 3});
    ad::Var prod = ad::matmul(tape.constant(Tensor::identity(3)), tape.constant(a));
    CHECK(prod.value() == a);
  }

  TEST_CASE("sigmoid derivative at zero") {
    ad::ParameterStore store;
    store.add("x", Tensor::scalar(0.0));
    ad::Tape tape;
    auto grads = tape.backward(ad::sigmoid(tape.param(store.get("x"))));
    CHECK(grads.at("x").item() == doctest::Approx(0.25).epsilon(1e-15));
  }

  TEST_CASE("gradient of sum of matrix product") {
    Rng rng(11);
    ad::ParameterStore store;
    store.add("a", testing::random_tensor(rng, Shape{3, 4}));
    store.add("b", testing::random_tensor(rng, Shape{4, 2}), false);
    auto f = [](ad::Tape& t, ad::ParameterStore& s) {
      return ad::sum(ad::matmul(t.param(s.get("a")), t.param(s.get("b"))));
    };
    CHECK(ad::finite_difference_check(f, store, 1e-5) < 1e-8);

    // d/dA sum(AB) [i][k] = sum_j B[k][j]
    ad::Tape tape;
    auto grads = tape.backward(f(tape, store));
    const Tensor& b = store.get("b").value;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 4; ++k)
        CHECK(grads.at("a").at(i, k) == doctest::Approx(b.at(k, 0) + b.at(k, 1)).epsilon(1e-14));
  }

  TEST_CASE("constants and unreachable parameters get zero gradients") {
    ad::ParameterStore store;
    store.add("used", Tensor::vector({1.0, 2.0}));
    store.add("unused", Tensor::vector({3.0, 4.0, 5.0}));
    ad::Tape tape;
    ad::Var c = tape.constant(Tensor::vector({7.0, 8.0}));
    ad::Var root = ad::sum(ad::mul(c, c));
    auto grads = tape.backward(root, store);
    CHECK(grads.at("used") == Tensor(Shape{2}));
    CHECK(grads.at("unused") == Tensor(Shape{3}));
  }

  TEST_CASE("non-scalar root is rejected") {
    ad::Tape tape;
    ad::Var v = tape.constant(Tensor::vector({1.0, 2.0}));
    CHECK_THROWS_AS(tape.backward(v), ShapeError);
  }

  TEST_CASE("shape errors name the primitive and shapes") {
    ad::Tape tape;
    ad::Var a = tape.constant(Tensor(Shape{2, 3}));
    ad::Var b = tape.constant(Tensor(Shape{2, 3}));
    try {
      ad::matmul(a, b);
      FAIL("expected a shape error");
    } catch (const ShapeError& e) {
      const std::string what = e.what();
      CHECK(what.find("matrix-multiply") != std::string::npos);
      CHECK(what.find("[2,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(ad::add(a, tape.constant(Tensor(Shape{3, 2}))), ShapeError);
  }

  TEST_CASE("finite differences are exact for a linear function") {
    Rng rng(5);
    ad::ParameterStore store;
    store.add("w", testing::random_tensor(rng, Shape{6}));
    const Tensor x = testing::random_tensor(rng, Shape{6});
    auto f = [x](ad::Tape& t, ad::ParameterStore& s) { return ad::dot(t.param(s.get("w")), t.constant(x)); };
    CHECK(ad::finite_difference_check(f, store, 1e-5) < 1e-10);
    CHECK_THROWS_AS(ad::finite_difference_check(f, store, 0.0), ConfigError);
    CHECK_THROWS_AS(ad::finite_difference_check(f, store, -1e-5), ConfigError);
  }

  TEST_CASE("every primitive matches central differences over 100 seeds") {
    for (const auto& c : primitive_cases()) {
      double worst = 0.0;
      for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 7919 + 1);
        ad::ParameterStore store;
        c.init(rng, store);
        worst = std::max(worst, ad::finite_difference_check(c.f, store, 1e-5));
      }
      INFO(c.name);
      CHECK(worst < 1e-4);
    }
  }

  TEST_CASE("backward twice gives identical gradients") {
    Rng rng(8);
    ad::ParameterStore store;
    store.add("a", testing::random_tensor(rng, Shape{3, 3}));
    ad::Tape tape;
    ad::Var a = tape.param(store.get("a"));
    ad::Var root = ad::sum(ad::tanh(ad::matmul(a, a)));
    auto first = tape.backward(root);
    auto second = tape.backward(root);
    CHECK(first.at("a") == second.at("a"));
  }

  TEST_CASE("softmax normalises and sigmoid stays in the open unit interval") {
    Rng rng(21);
    ad::Tape tape;
    for (int trial = 0; trial < 50; ++trial) {
      ad::Var s = ad::softmax(tape.constant(testing::random_tensor(rng, Shape{4, 6}, -20.0, 20.0)));
      for (std::size_t r = 0; r < 4; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < 6; ++c) total += s.value().at(r, c);
        CHECK(std::fabs(total - 1.0) < 1e-12);
      }
      ad::Var g = ad::sigmoid(tape.constant(testing::random_tensor(rng, Shape{8}, -30.0, 30.0)));
      for (double v : g.value().data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }

  TEST_CASE("kinked primitives use a zero subgradient at the kink") {
    ad::ParameterStore store;
    store.add("x", Tensor::vector({0.0, 0.0, 0.0}));
    ad::Tape tape;
    ad::Var x = tape.param(store.get("x"));
    auto grads = tape.backward(ad::add(ad::add(ad::sum(ad::hinge(x)), ad::sum(ad::relu(x))), ad::sum(ad::abs(x))));
    CHECK(grads.at("x") == Tensor(Shape{3}));
  }

  TEST_CASE("gradient reversal is the identity forward and negates backward") {
    ad::ParameterStore store;
    store.add("x", Tensor::vector({0.5, -1.0}));
    for (double w : {0.0, 1.0, 2.5}) {
      ad::Tape tape;
      ad::Var x = tape.param(store.get("x"));
      ad::Var r = ad::grad_reverse(x, w);
      CHECK(r.value() == x.value());
      auto grads = tape.backward(ad::sum(ad::mul(r, tape.constant(Tensor::vector({3.0, 4.0})))));
      CHECK(grads.at("x")[0] == -w * 3.0);
      CHECK(grads.at("x")[1] == -w * 4.0);
    }
  }

  TEST_CASE("repeated evaluation is bitwise deterministic") {
    auto run = [] {
      Rng rng(99);
      ad::ParameterStore store;
      store.add("w", testing::random_tensor(rng, Shape{4, 5}));
      ad::Tape tape;
      ad::Var w = tape.param(store.get("w"));
      ad::Var root = ad::sum(ad::log_softmax(ad::matmul(w, ad::reshape(w, Shape{5, 4}))));
      auto grads = tape.backward(root);
      return std::make_pair(root.item(), grads.at("w"));
    };
    auto a = run();
    auto b = run();
    CHECK(a.first == b.first);
    CHECK(a.second == b.second);
  }

  TEST_CASE("parameter names are unique") {
    ad::ParameterStore store;
    store.add("w", Tensor::scalar(1.0));
    CHECK_THROWS_AS(store.add("w", Tensor::scalar(2.0)), ConfigError);
    CHECK_THROWS(store.get("missing"));
  }
}
