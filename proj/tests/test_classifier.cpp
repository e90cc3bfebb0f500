#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecgadv/classifier.hpp"
#include "helpers.hpp"

using namespace ecgadv;

namespace {

// Textbook softmax without max subtraction.
Array1D naive_softmax(const Array1D& z, double t) {
  Array1D p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += std::exp(z[i] / t);
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] / t) / s;
  return p;
}

double frobenius_sq(const std::vector<Array1D>& rows) {
  double s = 0.0;
  for (const auto& r : rows)
    for (double v : r) s += v * v;
  return s;
}

}  // namespace

TEST_SUITE("classifier") {

TEST_CASE("softmax at T=1 matches the textbook formula") {
  for (std::uint64_t k = 0; k < 1000; ++k) {
    const Array1D z = testing::random_vector(4, k, 3.0);
    const Array1D p = softmax_with_temperature(z, 1.0);
    const Array1D q = naive_softmax(z, 1.0);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(std::abs(p[i] - q[i]) < 1e-9);
  }
}

TEST_CASE("softmax worked examples") {
  const Array1D p = softmax_with_temperature(Array1D{0.0, 0.0, 0.0, 0.0}, 1.0);
  for (double v : p) CHECK(v == 0.25);
  const Array1D z{1.0, 2.0, 3.0, 4.0};
  const Array1D q = softmax_with_temperature(z, 2.0);
  const double denom = std::exp(0.5) + std::exp(1.0) + std::exp(1.5) + std::exp(2.0);
  CHECK(q[3] == doctest::Approx(std::exp(2.0) / denom).epsilon(1e-12));
  // Large logits stay finite.
  const Array1D big = softmax_with_temperature(Array1D{1000.0, 0.0, 0.0, 0.0}, 1.0);
  CHECK(big[0] == doctest::Approx(1.0));
}

TEST_CASE("large temperature tends to uniform and argmax is temperature invariant") {
  for (std::uint64_t k = 0; k < 200; ++k) {
    const Array1D z = testing::random_vector(4, 1000 + k, 5.0);
    const Array1D flat = softmax_with_temperature(z, 1e6);
    for (double v : flat) REQUIRE(std::abs(v - 0.25) < 1e-3);
    const auto am = std::max_element(z.begin(), z.end()) - z.begin();
    for (double t : {0.1, 1.0, 10.0, 100.0}) {
      const Array1D p = softmax_with_temperature(z, t);
      REQUIRE(std::max_element(p.begin(), p.end()) - p.begin() == am);
      REQUIRE(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS(softmax_with_temperature(Array1D{1.0, 2.0}, 0.0));
}

TEST_CASE("hard and soft label losses") {
  const std::vector<ProbabilityVector> probs{{0.7, 0.1, 0.1, 0.1}, {0.25, 0.25, 0.25, 0.25}};
  const std::vector<std::size_t> labels{0, 3};
  CHECK(hard_label_loss(probs, labels) ==
        doctest::Approx(-(std::log(0.7) + std::log(0.25)) / 2.0).epsilon(1e-14));

  const std::vector<LabelVector> soft{{0.5, 0.5, 0.0, 0.0}, {0.1, 0.2, 0.3, 0.4}};
  const double expect = -((0.5 * std::log(0.7) + 0.5 * std::log(0.1)) +
                          (0.1 + 0.2 + 0.3 + 0.4) * std::log(0.25)) /
                        2.0;
  CHECK(soft_label_loss(probs, soft) == doctest::Approx(expect).epsilon(1e-14));

  // One-hot soft labels reduce to the hard loss.
  std::vector<LabelVector> onehots{one_hot(0), one_hot(3)};
  CHECK(soft_label_loss(probs, onehots) == hard_label_loss(probs, labels));

  // A zero probability is floored rather than producing infinity.
  const std::vector<ProbabilityVector> zero{{1.0, 0.0, 0.0, 0.0}};
  CHECK(hard_label_loss(zero, std::vector<std::size_t>{1}) == doctest::Approx(-std::log(kLogFloor)));
}

TEST_CASE("mixed loss") {
  CHECK(mixed_loss(2.0, 4.0, {0.5}) == 3.0);
  CHECK(mixed_loss(2.0, 4.0, {0.0}) == 4.0);
  CHECK(mixed_loss(2.0, 4.0, {1.0}) == 2.0);
  CHECK(mixed_loss(1.0, 0.0, {0.25}) == 0.25);
  CHECK_THROWS(mixed_loss(1.0, 1.0, {1.5}));
  CHECK_THROWS(mixed_loss(1.0, 1.0, {-0.1}));
}

TEST_CASE("predict follows the bias when weights are zero") {
  auto model = testing::linear_model(8, 1);
  for (auto& p : model.parameters()) std::fill(p.values.begin(), p.values.end(), 0.0);
  model.parameters()[1].values = {0.0, 9.0, 0.0, 0.0};
  const Prediction pr = predict(model, Array1D(8, 0.3));
  CHECK(pr.label == 1);
  // Ties go to the lowest index.
  model.parameters()[1].values = {0.0, 2.0, 2.0, 0.0};
  CHECK(predict(model, Array1D(8, 0.0)).label == 1);
}

TEST_CASE("model construction") {
  const auto desk = build_model("desk", 256, kNumClasses, 3);
  CHECK(desk.conv_layer_count() == 3);
  // 8*1*7+8 + 16*8*5+16 + 16*16*5+16 + 4*(16*32)+4
  CHECK(desk.parameter_count() == 64 + 656 + 1296 + 2052);
  CHECK(desk.parameter_count() == expected_parameter_count(desk.layers(), 256));

  const auto deep = build_model("cnn13", 512, kNumClasses, 3);
  CHECK(deep.conv_layer_count() == 13);
  CHECK(deep.parameter_count() == expected_parameter_count(deep.layers(), 512));

  CHECK(build_model("desk", 256, kNumClasses, 3) == desk);
  CHECK_FALSE(build_model("desk", 256, kNumClasses, 4) == desk);
  CHECK_THROWS(build_model("resnet", 256, kNumClasses, 1));
  CHECK_THROWS_AS(desk.logits(Array1D(100, 0.0)), ecgadv::ShapeError);
}

TEST_CASE("serialization round-trips bit-exactly") {
  const auto model = build_model("desk", 128, kNumClasses, 17);
  const auto back = deserialize_model(serialize_model(model));
  CHECK(back == model);
  CHECK(back.digest() == model.digest());
  const Array1D x = testing::random_vector(128, 4);
  CHECK(back.logits(x) == model.logits(x));

  testing::TempDir dir("model");
  save_model(model, dir.path / "m.json");
  CHECK(load_model(dir.path / "m.json") == model);
  CHECK_THROWS(deserialize_model("{\"format\": \"something-else\"}"));
}

TEST_CASE("input gradient matches the linear closed form") {
  const auto model = testing::linear_model(6, 9);
  const Array1D x = testing::random_vector(6, 10);
  const auto& w = model.parameters()[0].values;
  const auto& b = model.parameters()[1].values;
  Array1D z(4);
  for (std::size_t k = 0; k < 4; ++k) {
    z[k] = b[k];
    for (std::size_t i = 0; i < 6; ++i) z[k] += w[k * 6 + i] * x[i];
  }
  const double t = 2.0;
  const Array1D p = naive_softmax(z, t);
  const auto g = input_loss_gradient(model, x, one_hot(2), t);
  CHECK(g.loss == doctest::Approx(-std::log(p[2])).epsilon(1e-12));
  for (std::size_t i = 0; i < 6; ++i) {
    double expect = 0.0;
    for (std::size_t k = 0; k < 4; ++k) expect += (p[k] - (k == 2 ? 1.0 : 0.0)) * w[k * 6 + i] / t;
    CHECK(g.gradient[i] == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("higher temperature shrinks the probability Jacobian") {
  const auto model = build_model("desk", 128, kNumClasses, 21);
  for (std::uint64_t k = 0; k < 5; ++k) {
    const Array1D x = testing::random_vector(128, 50 + k);
    const double cold = frobenius_sq(output_jacobian(model, x, 1.0, true));
    const double hot = frobenius_sq(output_jacobian(model, x, 20.0, true));
    CHECK(hot < cold);
  }
  // Logit rows do not depend on the temperature.
  const Array1D x = testing::random_vector(128, 99);
  CHECK(output_jacobian(model, x, 1.0, false) == output_jacobian(model, x, 20.0, false));
}

}  // TEST_SUITE
