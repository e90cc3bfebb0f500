#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ecgadv/defenses.hpp"
#include "ecgadv/parallel.hpp"
#include "regularizer_terms.hpp"

namespace ecgadv {

namespace {

constexpr double kRatioFloor = 1e-12;

std::size_t strongest_rival(std::span<const double> z, std::size_t label) {
  std::size_t best = label == 0 ? 1 : 0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (k != label && z[k] > z[best]) best = k;
  }
  return best;
}

}  // namespace

double jacobian_penalty(const ClassifierModel& model, std::span<const Array1D> batch, double lambda,
                        double temperature, JacobianOutput output) {
  if (lambda < 0.0) throw std::invalid_argument("jacobian_penalty: lambda must be >= 0");
  if (batch.empty()) throw std::invalid_argument("jacobian_penalty: empty batch");
  if (lambda == 0.0) return 0.0;
  std::vector<double> norms(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto rows =
        output_jacobian(model, batch[i], temperature, output == JacobianOutput::probabilities);
    double s = 0.0;
    for (const auto& r : rows) {
      for (double g : r) s += g * g;
    }
    norms[i] = s;
  });
  double total = 0.0;
  for (double n : norms) total += n;
  return lambda * total / static_cast<double>(batch.size());
}

double nsr_penalty(const ClassifierModel& model, std::span<const Array1D> batch,
                   std::span<const std::size_t> labels, double epsilon_max, double beta) {
  if (epsilon_max < 0.0 || beta < 0.0) {
    throw std::invalid_argument("nsr_penalty: epsilon_max and beta must be >= 0");
  }
  if (batch.empty() || batch.size() != labels.size()) {
    throw std::invalid_argument("nsr_penalty: batch and labels must be non-empty and equal length");
  }
  if (beta == 0.0 || epsilon_max == 0.0) return 0.0;
  std::vector<double> terms(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const std::size_t y = labels[i];
    if (y >= model.classes()) throw std::invalid_argument("nsr_penalty: label out of range");
    const Array1D z = model.logits(batch[i]);
    const auto rows = output_jacobian(model, batch[i], 1.0, false);
    double l1 = 0.0;
    for (double g : rows[y]) l1 += std::abs(g);
    const double noise = epsilon_max * l1;
    const double ratio = noise / std::max(std::abs(z[y]), kRatioFloor);
    const double margin = z[y] - z[strongest_rival(z, y)];
    const double hinge = std::max(0.0, noise - std::max(0.0, margin));
    terms[i] = ratio + hinge;
  });
  double total = 0.0;
  for (double t : terms) total += t;
  return beta * total / static_cast<double>(batch.size());
}

namespace detail {

namespace {

Array1D shifted(std::span<const double> x, std::span<const double> dir, double step) {
  Array1D out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + step * dir[i];
  return out;
}

}  // namespace

ad::Var jacobian_term(ad::Tape& tape, const ClassifierModel& model, std::span<const ad::Var> params,
                      std::span<const double> x, std::span<const double> u, double temperature,
                      double h) {
  const ad::Shape shape{1, x.size()};
  ad::Var plus = ad::softmax(
      tape, model.logits(tape, tape.constant(shifted(x, u, h), shape), params), temperature);
  ad::Var minus = ad::softmax(
      tape, model.logits(tape, tape.constant(shifted(x, u, -h), shape), params), temperature);
  ad::Var ju = ad::scale(tape, ad::sub(tape, plus, minus), 1.0 / (2.0 * h));
  return ad::sum(tape, ad::square(tape, ju));
}

ad::Var nsr_term(ad::Tape& tape, const ClassifierModel& model, std::span<const ad::Var> params,
                 ad::Var logits, std::span<const double> x, std::size_t label, double epsilon_max,
                 double h) {
  // Direction of the worst l_inf perturbation for z_y, held constant.
  const auto rows = output_jacobian(model, x, 1.0, false);
  Array1D dir(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double g = rows[label][i];
    dir[i] = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
  }
  const ad::Shape shape{1, x.size()};
  ad::Var zp = model.logits(tape, tape.constant(shifted(x, dir, h), shape), params);
  ad::Var zm = model.logits(tape, tape.constant(shifted(x, dir, -h), shape), params);
  ad::Var noise = ad::scale(
      tape, ad::sub(tape, ad::select(tape, zp, label), ad::select(tape, zm, label)),
      epsilon_max / (2.0 * h));
  ad::Var zy = ad::select(tape, logits, label);
  ad::Var ratio = ad::div(tape, noise, ad::clamp_min(tape, ad::abs(tape, zy), kRatioFloor));
  const std::size_t rival = strongest_rival(tape.value(logits), label);
  ad::Var margin = ad::sub(tape, zy, ad::select(tape, logits, rival));
  ad::Var hinge = ad::relu(tape, ad::sub(tape, noise, ad::relu(tape, margin)));
  return ad::add(tape, ratio, hinge);
}

}  // namespace detail

}  // namespace ecgadv
