#include <doctest.h>

#include <cmath>
#include <map>

#include "ecgadv/autodiff.hpp"
#include "ecgadv/classifier.hpp"
#include "helpers.hpp"

namespace ad = ecgadv::ad;
using ecgadv::Array1D;

TEST_SUITE("autodiff") {

TEST_CASE("square of 3 has value 9 and gradient 6") {
  ad::Tape tape;
  ad::Var x = tape.variable({3.0});
  ad::Var y = ad::square(tape, x);
  tape.backward(y);
  CHECK(tape.scalar(y) == 9.0);
  CHECK(tape.grad(x)[0] == 6.0);
}

TEST_CASE("gradient of a sum is all ones") {
  ad::Tape tape;
  ad::Var x = tape.variable({1.5, -2.0, 0.25, 7.0});
  tape.backward(ad::sum(tape, x));
  for (double g : tape.grad(x)) CHECK(g == 1.0);
}

TEST_CASE("product and quotient rules") {
  ad::Tape tape;
  ad::Var a = tape.variable({2.0});
  ad::Var b = tape.variable({5.0});
  ad::Var y = ad::div(tape, ad::mul(tape, a, b), ad::add(tape, a, b));  // ab / (a + b)
  tape.backward(y);
  const double s = 7.0;
  CHECK(tape.grad(a)[0] == doctest::Approx(25.0 / (s * s)));
  CHECK(tape.grad(b)[0] == doctest::Approx(4.0 / (s * s)));
}

TEST_CASE("constants receive no gradient and shared nodes accumulate") {
  ad::Tape tape;
  ad::Var x = tape.variable({2.0});
  ad::Var c = tape.constant({10.0});
  ad::Var y = ad::add(tape, ad::mul(tape, x, x), ad::mul(tape, x, c));  // x^2 + 10x
  tape.backward(y);
  CHECK(tape.grad(x)[0] == 14.0);
  CHECK_FALSE(tape.requires_grad(c));
}

TEST_CASE("shape mismatches are rejected") {
  ad::Tape tape;
  ad::Var a = tape.variable({1.0, 2.0});
  ad::Var b = tape.variable({1.0, 2.0, 3.0});
  CHECK_THROWS_AS(ad::add(tape, a, b), ecgadv::ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ecgadv::ShapeError);
  CHECK_THROWS_AS(ad::select(tape, a, 2), ecgadv::ShapeError);
  CHECK_THROWS_AS(tape.variable({1.0, 2.0}, ad::Shape{1, 3}), ecgadv::ShapeError);
}

TEST_CASE("non-finite values name the producing node") {
  ad::Tape tape;
  ad::Var a = tape.variable({1.0});
  ad::Var z = tape.constant({0.0});
  try {
    ad::div(tape, a, z);
    FAIL("expected NumericalError");
  } catch (const ecgadv::NumericalError& e) {
    CHECK(std::string(e.what()).find("div") != std::string::npos);
  }
}

TEST_CASE("finite differences agree on a smooth graph") {
  ad::ComputeGraph g;
  g.parameters["w"] = {{0.3, -1.2, 0.8}, {1, 3}};
  g.input_slots["x"] = {1, 3};
  g.build = [](ad::Tape& t, const ad::Bindings& p, const ad::Bindings& in) {
    ad::Var v = ad::mul(t, p.at("w"), in.at("x"));
    return ad::sum(t, ad::square(t, v));
  };
  const std::map<std::string, Array1D> inputs{{"x", {1.0, 2.0, -0.5}}};
  ad::FiniteDifferenceOptions opt;
  opt.step = 1e-5;
  const auto report = ad::finite_difference_check(g, inputs, opt);
  CHECK(report.compared == 6);
  CHECK(report.max_relative_error < 1e-6);

  // Oracle: d/dw_i (w_i x_i)^2 = 2 w_i x_i^2.
  const auto grads = ad::evaluate_with_gradients(g, inputs);
  const Array1D& gw = grads.parameter_gradients.at("w");
  CHECK(gw[0] == doctest::Approx(2 * 0.3 * 1.0));
  CHECK(gw[1] == doctest::Approx(2 * -1.2 * 4.0));
  CHECK(gw[2] == doctest::Approx(2 * 0.8 * 0.25));
}

TEST_CASE("coordinates straddling a ReLU kink are skipped") {
  ad::ComputeGraph g;
  g.parameters["w"] = {{1.0, 1.0}, {1, 2}};
  g.input_slots["x"] = {1, 2};
  g.build = [](ad::Tape& t, const ad::Bindings& p, const ad::Bindings& in) {
    return ad::sum(t, ad::relu(t, ad::mul(t, p.at("w"), in.at("x"))));
  };
  // The first product sits exactly on the kink.
  const auto report = ad::finite_difference_check(g, {{"x", {0.0, 2.0}}}, {});
  CHECK(report.skipped_kinks > 0);
  CHECK(report.max_relative_error < 1e-8);
}

TEST_CASE("desk CNN loss gradients match central differences") {
  const auto model = ecgadv::build_model("desk", 64, ecgadv::kNumClasses, 11);
  const auto graph = ecgadv::make_loss_graph(model, ecgadv::one_hot(2), 1.0);
  ad::FiniteDifferenceOptions opt;
  opt.step = 1e-5;
  opt.max_coordinates = 200;
  opt.seed = 5;
  const auto report =
      ad::finite_difference_check(graph, {{"x", testing::random_vector(64, 3)}}, opt);
  CHECK(report.compared > 150);
  CHECK_MESSAGE(report.max_relative_error < 1e-4, report.worst_coordinate);
}

TEST_CASE("backward is deterministic") {
  const auto model = ecgadv::build_model("desk", 64, ecgadv::kNumClasses, 2);
  const auto graph = ecgadv::make_loss_graph(model, ecgadv::one_hot(0), 1.0);
  const std::map<std::string, Array1D> inputs{{"x", testing::random_vector(64, 8)}};
  const auto a = ad::evaluate_with_gradients(graph, inputs);
  const auto b = ad::evaluate_with_gradients(graph, inputs);
  CHECK(a.loss == b.loss);
  CHECK(a.parameter_gradients == b.parameter_gradients);
  CHECK(a.input_gradients == b.input_gradients);
}

TEST_CASE("gradient is linear in the output seed") {
  ad::Tape tape;
  ad::Var x = tape.variable({0.5, -1.5, 2.0});
  ad::Var y = ad::sum(tape, ad::square(tape, x));
  tape.backward(y, 3.0);
  const Array1D g = tape.grad(x);
  CHECK(g[0] == 3.0 * 1.0);
  CHECK(g[1] == 3.0 * -3.0);
  CHECK(g[2] == 3.0 * 4.0);
}

TEST_CASE("conv1d matches a direct convolution") {
  ad::Tape tape;
  const Array1D xv{1, 2, 3, 4, 5};
  const Array1D wv{0.5, -1.0, 2.0};
  ad::Var x = tape.variable(xv, {1, 5});
  ad::Var w = tape.variable(wv, {1, 3});
  ad::Var b = tape.variable({0.25}, {1, 1});
  ad::Var y = ad::conv1d(tape, x, w, b, {1, 3, 1, 1});
  const Array1D& out = tape.value(y);
  REQUIRE(out.size() == 5);
  for (int i = 0; i < 5; ++i) {
    double expect = 0.25;
    for (int k = 0; k < 3; ++k) {
      const int j = i + k - 1;
      if (j >= 0 && j < 5) expect += wv[k] * xv[j];
    }
    CHECK(out[i] == doctest::Approx(expect));
  }
}

}  // TEST_SUITE
