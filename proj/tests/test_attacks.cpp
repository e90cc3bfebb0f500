#include <doctest.h>

#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ecgadv/attacks.hpp"
#include "helpers.hpp"

using namespace ecgadv;

namespace {

AttackParams small_params() {
  AttackParams p;
  p.epsilon = 0.15;
  p.alpha = 0.015;
  p.t = 10;
  p.t_prime = 10;
  p.anchor = ClipAnchor::original;
  return p;
}

double max_abs_diff(const Array1D& a, const Array1D& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// |DFT| at bin k.
double dft_magnitude(const Array1D& v, std::size_t k) {
  std::complex<double> acc = 0.0;
  const double n = static_cast<double>(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * i) / n);
  }
  return std::abs(acc);
}

}  // namespace

TEST_SUITE("attacks") {

TEST_CASE("clip worked examples") {
  const Array1D out = clip(Array1D{0.0, 5.0, -5.0, 1.2}, Array1D{0.0, 1.0, 1.0, 1.0}, 0.5);
  CHECK(out == Array1D{0.0, 1.5, 0.5, 1.2});
  CHECK_THROWS(clip(Array1D{3.0}, Array1D{3.0}, 0.0));
}

TEST_CASE("gaussian kernels sum to one, are symmetric and match the closed form") {
  const AttackParams p;
  const KernelBank bank = KernelBank::from_params(p);
  REQUIRE(bank.kernels.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const Array1D& k = bank.kernels[i];
    const int s = p.kernel_sizes[i];
    const double sigma = p.kernel_stds[i];
    REQUIRE(static_cast<int>(k.size()) == s);
    double total = 0.0;
    for (double v : k) total += v;
    CHECK(std::abs(total - 1.0) < 1e-12);
    for (int m = 0; m < s; ++m) CHECK(k[m] == k[s - 1 - m]);
    // Centre value: 1 / sum_d exp(-d^2 / (2 sigma^2)), d = -M..M.
    const int half = (s - 1) / 2;
    double z = 0.0;
    for (int d = -half; d <= half; ++d) z += std::exp(-static_cast<double>(d * d) / (2.0 * sigma * sigma));
    CHECK(k[half] == doctest::Approx(1.0 / z).epsilon(1e-13));
  }
  CHECK_THROWS(gaussian_kernel(4, 1.0));
  CHECK_THROWS(gaussian_kernel(5, 0.0));
}

TEST_CASE("smoothing matches a direct zero-padded convolution and is linear") {
  const AttackParams p;
  const KernelBank bank = KernelBank::from_params(p);
  const Array1D d = testing::random_vector(40, 12);
  const Array1D e = testing::random_vector(40, 13);
  const Array1D s = smooth_perturbation(d, bank);
  for (std::size_t i = 0; i < d.size(); ++i) {
    double expect = 0.0;
    for (const auto& k : bank.kernels) {
      const int half = static_cast<int>(k.size()) / 2;
      for (int j = -half; j <= half; ++j) {
        const int src = static_cast<int>(i) + j;
        if (src >= 0 && src < 40) expect += d[src] * k[j + half];
      }
    }
    CHECK(s[i] == doctest::Approx(expect / 5.0).epsilon(1e-12));
  }
  Array1D combo(40);
  for (std::size_t i = 0; i < 40; ++i) combo[i] = 2.0 * d[i] - 3.0 * e[i];
  const Array1D se = smooth_perturbation(e, bank);
  const Array1D sc = smooth_perturbation(combo, bank);
  for (std::size_t i = 0; i < 40; ++i) CHECK(sc[i] == doctest::Approx(2.0 * s[i] - 3.0 * se[i]));
  // Self-adjoint: <S d, e> == <d, S e>.
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < 40; ++i) {
    lhs += s[i] * e[i];
    rhs += d[i] * se[i];
  }
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  CHECK_THROWS_AS(smooth_perturbation(Array1D(10, 0.0), bank), ecgadv::ShapeError);
}

TEST_CASE("PGD with zero steps returns the input") {
  const auto model = build_model("desk", 64, kNumClasses, 1);
  AttackParams p = small_params();
  p.t = 0;
  const Array1D x = testing::random_vector(64, 2);
  const auto ex = pgd_attack(model, x, 1, p);
  CHECK(ex.adversarial == x);
  for (double v : ex.delta) CHECK(v == 0.0);
}

TEST_CASE("PGD on a linear model follows the sign of the closed-form gradient") {
  const auto model = testing::linear_model(16, 3);
  const Array1D x = testing::random_vector(16, 4);
  AttackParams p = small_params();
  p.t = 1;
  const auto ex = pgd_attack(model, x, 0, p);
  // d(-log p_0)/dx = W^T (p - e_0).
  const auto& w = model.parameters()[0].values;
  const Array1D prob = softmax_with_temperature(model.logits(x), 1.0);
  for (std::size_t i = 0; i < 16; ++i) {
    double g = 0.0;
    for (std::size_t k = 0; k < 4; ++k) g += (prob[k] - (k == 0 ? 1.0 : 0.0)) * w[k * 16 + i];
    const double step = g > 0 ? p.alpha : (g < 0 ? -p.alpha : 0.0);
    CHECK(ex.adversarial[i] == doctest::Approx(x[i] + step).epsilon(1e-14));
  }
  // The loss of the true class rises.
  CHECK(input_loss_gradient(model, ex.adversarial, one_hot(0), 1.0).loss >
        input_loss_gradient(model, x, one_hot(0), 1.0).loss);
}

TEST_CASE("PGD anchors bound the deviation") {
  const auto model = build_model("desk", 64, kNumClasses, 5);
  for (std::uint64_t k = 0; k < 10; ++k) {
    const Array1D x = testing::random_vector(64, 100 + k);
    AttackParams p = small_params();
    p.t = 20;
    const auto orig = pgd_attack(model, x, k % 4, p);
    CHECK(max_abs_diff(orig.adversarial, x) <= p.epsilon + 1e-12);
    p.anchor = ClipAnchor::previous;
    const auto prev = pgd_attack(model, x, k % 4, p);
    // Each step moves at most min(alpha, eps), so t steps bound the total.
    CHECK(max_abs_diff(prev.adversarial, x) <= p.t * std::min(p.alpha, p.epsilon) + 1e-12);
  }
}

TEST_CASE("SAP with zero smoothing steps is bit-identical to PGD") {
  const auto model = build_model("desk", 64, kNumClasses, 6);
  AttackParams p = small_params();
  p.t_prime = 0;
  const Array1D x = testing::random_vector(64, 7);
  const auto a = pgd_attack(model, x, 2, p);
  const auto b = sap_attack(model, x, 2, p);
  CHECK(a.delta == b.delta);
  CHECK(a.applied == b.applied);
  CHECK(a.adversarial == b.adversarial);
}

TEST_CASE("SAP applies the smoothed delta exactly") {
  const auto model = build_model("desk", 64, kNumClasses, 8);
  const AttackParams p = small_params();
  const Array1D x = testing::random_vector(64, 9);
  const auto ex = sap_attack(model, x, 1, p);
  CHECK(ex.applied == smooth_perturbation(ex.delta, KernelBank::from_params(p)));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(ex.adversarial[i] == x[i] + ex.applied[i]);
  for (double v : ex.delta) CHECK(std::abs(v) <= p.epsilon + 1e-12);
  CHECK(ex.provenance.attack == "sap");
}

TEST_CASE("SAP perturbations are smoother than PGD perturbations") {
  const auto model = build_model("desk", 128, kNumClasses, 10);
  const AttackParams p = small_params();
  double tv_sap = 0.0, tv_pgd = 0.0;
  for (std::uint64_t k = 0; k < 8; ++k) {
    const Array1D x = testing::random_vector(128, 200 + k);
    tv_pgd += total_variation(pgd_attack(model, x, k % 4, p).applied);
    tv_sap += total_variation(sap_attack(model, x, k % 4, p).applied);
  }
  CHECK(tv_sap < tv_pgd);
  CHECK(total_variation(Array1D{0, 1, -1, 2}) == 6.0);
}

TEST_CASE("attack parameters are validated") {
  AttackParams p;
  p.kernel_sizes = {5, 7};
  CHECK_THROWS(p.validate());
  p = AttackParams{};
  p.epsilon = -1;
  CHECK_THROWS(p.validate());
  p = AttackParams{};
  p.t = -1;
  CHECK_THROWS(p.validate());
  CHECK(clip_anchor_from_string("original") == ClipAnchor::original);
  CHECK_THROWS(clip_anchor_from_string("sideways"));
}

TEST_CASE("Hanning filter") {
  const Array1D x = testing::random_vector(50, 14);
  CHECK(hanning_filter(x, 1) == x);

  // An impulse reproduces the window.
  Array1D impulse(41, 0.0);
  impulse[20] = 1.0;
  const Array1D w = hanning_window(21);
  const Array1D h = hanning_filter(impulse, 21);
  for (int k = 0; k < 21; ++k) CHECK(h[10 + k] == doctest::Approx(w[k]).epsilon(1e-15));
  for (double v : w) CHECK(v > 0.0);

  // Low frequencies pass, the Nyquist component is suppressed.
  const std::size_t n = 256;
  Array1D low(n), high(n);
  for (std::size_t i = 0; i < n; ++i) {
    low[i] = std::cos(2.0 * std::numbers::pi * 2.0 * static_cast<double>(i) / n);
    high[i] = (i % 2 == 0) ? 1.0 : -1.0;
  }
  const double low_gain = dft_magnitude(hanning_filter(low, 21), 2) / dft_magnitude(low, 2);
  const double high_gain = dft_magnitude(hanning_filter(high, 21), n / 2) / dft_magnitude(high, n / 2);
  CHECK(low_gain > 0.8);
  CHECK(high_gain < 0.01);
  CHECK_THROWS(hanning_window(4));
}

TEST_CASE("boundary attack invariants") {
  // Class = sign pattern of two projections.
  const ClassOracle oracle = [](std::span<const double> v) -> std::size_t {
    double a = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) a += v[i] * std::sin(0.1 * static_cast<double>(i));
    return a > 0.0 ? 1 : 0;
  };
  const std::size_t n = 64;
  Array1D victim(n), seed(n);
  for (std::size_t i = 0; i < n; ++i) {
    victim[i] = -std::sin(0.1 * static_cast<double>(i));
    seed[i] = 2.0 * std::sin(0.1 * static_cast<double>(i)) + 0.3 * std::cos(0.7 * static_cast<double>(i));
  }
  REQUIRE(oracle(victim) == 0);
  REQUIRE(oracle(seed) == 1);
  BoundaryParams p;
  p.target_class = 1;
  p.budget = 400;
  p.seed = 3;
  const auto r = boundary_attack(oracle, victim, seed, p);
  CHECK(r.queries <= p.budget);
  CHECK(r.improved);
  CHECK(oracle(r.example.adversarial) == 1);
  CHECK(r.final_distance <= r.initial_distance);
  for (std::size_t i = 1; i < r.accepted_distances.size(); ++i) {
    CHECK(r.accepted_distances[i] <= r.accepted_distances[i - 1]);
  }
  for (std::size_t i = 0; i < n; ++i) CHECK(r.example.adversarial[i] == victim[i] + r.example.applied[i]);

  // Same seed, same walk.
  const auto again = boundary_attack(oracle, victim, seed, p);
  CHECK(again.example.adversarial == r.example.adversarial);

  BoundaryParams wrong = p;
  wrong.target_class = 0;
  CHECK_THROWS(boundary_attack(oracle, victim, seed, wrong));
}

TEST_CASE("adversarial sets persist and detect tampering") {
  const auto model = build_model("desk", 64, kNumClasses, 15);
  std::vector<Array1D> signals{testing::random_vector(64, 1), testing::random_vector(64, 2),
                               testing::random_vector(64, 3)};
  const std::vector<std::size_t> labels{0, 2, 3};
  const std::vector<std::string> ids{"a", "b", "c"};
  const auto set = generate_adversarial_set(model, model.digest(), signals, labels, ids, small_params());
  CHECK(set.attack == "sap");
  CHECK(set.manifest_id == compute_manifest_id(set));
  REQUIRE(set.records.size() == 3);

  testing::TempDir dir("advset");
  write_adversarial_set(set, dir.path);
  const auto back = read_adversarial_set(dir.path);
  CHECK(back.manifest_id == set.manifest_id);
  CHECK(back.source_model == model.digest());
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.records[i].id == ids[i]);
    CHECK(back.records[i].example.adversarial == set.records[i].example.adversarial);
  }

  record_manifest_use(dir.path, "some-model", "situation I");
  CHECK(read_adversarial_set(dir.path).manifest_id == set.manifest_id);

  SUBCASE("edited sample") {
    std::ofstream(dir.path / "samples" / "b.json", std::ios::app) << " ";
    CHECK_THROWS(read_adversarial_set(dir.path));
  }
  SUBCASE("edited manifest line") {
    std::ifstream in(dir.path / "manifest.jsonl");
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    const auto pos = text.find("situation I");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 11, "situation X");
    // Break the chain by editing an earlier line instead.
    const auto first = text.find("\"kind\"");
    text.insert(first, " ");
    std::ofstream(dir.path / "manifest.jsonl", std::ios::trunc) << text;
    CHECK_THROWS(read_adversarial_set(dir.path));
  }
}

}  // TEST_SUITE
