#include "ecgadv/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace ecgadv {

std::string to_string(ClipAnchor a) { return a == ClipAnchor::previous ? "previous" : "original"; }

ClipAnchor clip_anchor_from_string(std::string_view s) {
  if (s == "previous") return ClipAnchor::previous;
  if (s == "original") return ClipAnchor::original;
  throw std::invalid_argument("unknown clip anchor '" + std::string(s) + "' (previous|original)");
}

void AttackParams::validate() const {
  if (!(epsilon > 0.0)) throw std::invalid_argument("attack epsilon must be > 0");
  if (!(alpha > 0.0)) throw std::invalid_argument("attack alpha must be > 0");
  if (t < 0) throw std::invalid_argument("attack t must be >= 0");
  if (t_prime < 0) throw std::invalid_argument("attack t' must be >= 0");
  if (kernel_sizes.size() != kernel_stds.size()) {
    throw std::invalid_argument("kernel size and std lists must have equal length");
  }
  if (kernel_sizes.empty()) throw std::invalid_argument("kernel bank must not be empty");
  for (int s : kernel_sizes) {
    if (s < 1 || s % 2 == 0) throw std::invalid_argument("kernel sizes must be odd and >= 1");
  }
  for (double sd : kernel_stds) {
    if (!(sd > 0.0)) throw std::invalid_argument("kernel stds must be > 0");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("attack temperature must be > 0");
}

KernelBank KernelBank::from_params(const AttackParams& params) {
  params.validate();
  KernelBank bank;
  for (std::size_t i = 0; i < params.kernel_sizes.size(); ++i) {
    bank.kernels.push_back(gaussian_kernel(params.kernel_sizes[i], params.kernel_stds[i]));
  }
  return bank;
}

std::size_t KernelBank::max_length() const {
  std::size_t n = 0;
  for (const auto& k : kernels) n = std::max(n, k.size());
  return n;
}

Array1D clip(std::span<const double> candidate, std::span<const double> anchor, double epsilon) {
  if (candidate.size() != anchor.size()) {
    throw ShapeError("clip: candidate length " + std::to_string(candidate.size()) +
                     " != anchor length " + std::to_string(anchor.size()));
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("clip: epsilon must be > 0");
  Array1D out(candidate.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = std::clamp(candidate[j], anchor[j] - epsilon, anchor[j] + epsilon);
  }
  return out;
}

Array1D gaussian_kernel(int size, double sigma) {
  if (size < 1 || size % 2 == 0) throw std::invalid_argument("gaussian_kernel: size must be odd and >= 1");
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be > 0");
  const int half = (size - 1) / 2;
  Array1D k(static_cast<std::size_t>(size));
  double denom = 0.0;
  for (int m = 0; m < size; ++m) {
    const double d = m - half;
    k[static_cast<std::size_t>(m)] = std::exp(-(d * d) / (2.0 * sigma * sigma));
    denom += k[static_cast<std::size_t>(m)];
  }
  for (double& v : k) v /= denom;
  return k;
}

Array1D smooth_perturbation(std::span<const double> delta, const KernelBank& bank) {
  if (bank.kernels.empty()) throw std::invalid_argument("smooth_perturbation: empty kernel bank");
  if (delta.size() < bank.max_length()) {
    throw ShapeError("smooth_perturbation: signal of length " + std::to_string(delta.size()) +
                     " is shorter than kernel of length " + std::to_string(bank.max_length()));
  }
  const auto n = static_cast<std::ptrdiff_t>(delta.size());
  Array1D out(delta.size(), 0.0);
  Array1D conv(delta.size());
  for (const auto& k : bank.kernels) {
    const auto half = static_cast<std::ptrdiff_t>(k.size() / 2);
    // (delta (*) K)[i] = sum_j delta[i - j + M] K[j]; reads outside delta are 0.
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::ptrdiff_t j = 0; j < static_cast<std::ptrdiff_t>(k.size()); ++j) {
        const std::ptrdiff_t src = i - j + half;
        if (src >= 0 && src < n) acc += delta[static_cast<std::size_t>(src)] * k[static_cast<std::size_t>(j)];
      }
      conv[static_cast<std::size_t>(i)] = acc;
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += conv[i];
  }
  const double m = static_cast<double>(bank.kernels.size());
  for (double& v : out) v /= m;
  return out;
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Array1D loss_gradient(const ClassifierModel& model, std::span<const double> x,
                      std::span<const double> target, double temperature, const char* stage, int iter) {
  try {
    return input_loss_gradient(model, x, target, temperature).gradient;
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(stage) + " iteration " + std::to_string(iter) + ": " + e.what());
  }
}

AdversarialExample finish(std::span<const double> x, Array1D delta, Array1D applied, std::string attack,
                          const AttackParams& params) {
  AdversarialExample ex;
  ex.original.assign(x.begin(), x.end());
  ex.adversarial.resize(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) ex.adversarial[j] = x[j] + applied[j];
  ex.delta = std::move(delta);
  ex.applied = std::move(applied);
  ex.provenance = {std::move(attack), "", params};
  return ex;
}

}  // namespace

AdversarialExample pgd_attack(const ClassifierModel& model, std::span<const double> x,
                              std::span<const double> target, const AttackParams& params) {
  params.validate();
  if (x.size() != model.input_length()) throw ShapeError("pgd_attack: signal length does not match model");
  Array1D cur(x.begin(), x.end());
  Array1D cand(x.size());
  for (int i = 0; i < params.t; ++i) {
    const Array1D g = loss_gradient(model, cur, target, params.temperature, "pgd", i + 1);
    for (std::size_t j = 0; j < cur.size(); ++j) cand[j] = cur[j] + params.alpha * sign(g[j]);
    cur = params.anchor == ClipAnchor::previous ? clip(cand, cur, params.epsilon)
                                                : clip(cand, x, params.epsilon);
  }
  Array1D delta(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) delta[j] = cur[j] - x[j];
  Array1D applied = delta;
  return finish(x, std::move(delta), std::move(applied), "pgd", params);
}

AdversarialExample pgd_attack(const ClassifierModel& model, std::span<const double> x, std::size_t label,
                              const AttackParams& params) {
  return pgd_attack(model, x, one_hot(label, model.classes()), params);
}

AdversarialExample sap_attack(const ClassifierModel& model, std::span<const double> x,
                              std::span<const double> target, const AttackParams& params) {
  AdversarialExample pgd = pgd_attack(model, x, target, params);
  pgd.provenance.attack = "sap";
  if (params.t_prime == 0) return pgd;

  const KernelBank bank = KernelBank::from_params(params);
  const Array1D zeros(x.size(), 0.0);
  Array1D delta = std::move(pgd.delta);
  Array1D xa(x.size());
  Array1D cand(x.size());
  for (int i = 0; i < params.t_prime; ++i) {
    const Array1D smoothed = smooth_perturbation(delta, bank);
    for (std::size_t j = 0; j < x.size(); ++j) xa[j] = x[j] + smoothed[j];
    const Array1D gx = loss_gradient(model, xa, target, params.temperature, "sap", i + 1);
    // Each kernel is symmetric, so the smoothing operator is its own
    // adjoint: d/d(delta) = smooth(d/dx).
    const Array1D gd = smooth_perturbation(gx, bank);
    for (std::size_t j = 0; j < x.size(); ++j) cand[j] = delta[j] + params.alpha * sign(gd[j]);
    delta = params.anchor == ClipAnchor::previous ? clip(cand, delta, params.epsilon)
                                                  : clip(cand, zeros, params.epsilon);
  }
  Array1D applied = smooth_perturbation(delta, bank);
  return finish(x, std::move(delta), std::move(applied), "sap", params);
}

AdversarialExample sap_attack(const ClassifierModel& model, std::span<const double> x, std::size_t label,
                              const AttackParams& params) {
  return sap_attack(model, x, one_hot(label, model.classes()), params);
}

double total_variation(std::span<const double> v) {
  double tv = 0.0;
  for (std::size_t i = 1; i < v.size(); ++i) tv += std::abs(v[i] - v[i - 1]);
  return tv;
}

Array1D hanning_window(int window) {
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("hanning window length must be odd and >= 1");
  Array1D w(static_cast<std::size_t>(window));
  double total = 0.0;
  for (int k = 0; k < window; ++k) {
    w[static_cast<std::size_t>(k)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * (k + 1) / static_cast<double>(window + 1)));
    total += w[static_cast<std::size_t>(k)];
  }
  for (double& v : w) v /= total;
  return w;
}

Array1D hanning_filter(std::span<const double> signal, int window) {
  const Array1D w = hanning_window(window);
  const auto n = static_cast<std::ptrdiff_t>(signal.size());
  const auto half = static_cast<std::ptrdiff_t>(w.size() / 2);
  Array1D out(signal.size(), 0.0);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(w.size()); ++k) {
      const std::ptrdiff_t src = i + k - half;
      if (src >= 0 && src < n) acc += w[static_cast<std::size_t>(k)] * signal[static_cast<std::size_t>(src)];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Boundary attack

namespace {

double norm2(std::span<const double> v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

}  // namespace

BoundaryResult boundary_attack(const ClassOracle& query, std::span<const double> victim,
                               std::span<const double> seed_sample, const BoundaryParams& params) {
  if (victim.size() != seed_sample.size()) throw ShapeError("boundary_attack: victim/seed length mismatch");
  if (params.budget == 0) throw std::invalid_argument("boundary_attack: budget must be > 0");
  const std::size_t n = victim.size();

  BoundaryResult result;
  auto ask = [&](std::span<const double> delta, Array1D& candidate) {
    for (std::size_t j = 0; j < n; ++j) candidate[j] = victim[j] + delta[j];
    ++result.queries;
    return query(candidate) == params.target_class;
  };

  ++result.queries;
  if (query(seed_sample) != params.target_class) {
    throw std::invalid_argument("boundary_attack: seed sample is not classified as the target class " +
                                std::to_string(params.target_class));
  }
  Array1D delta(n);
  for (std::size_t j = 0; j < n; ++j) delta[j] = seed_sample[j] - victim[j];
  Array1D candidate(n);
  if (!ask(delta, candidate)) {
    throw std::runtime_error("boundary_attack: seed sample changed class under re-expression");
  }
  double dist = norm2(delta);
  result.initial_distance = dist;

  // Blend toward the victim along the straight line first.
  Array1D trial(n);
  const Array1D start = delta;
  double lo = 0.0;
  double hi = 1.0;
  for (std::size_t s = 0; s < params.line_search_steps && result.queries < params.budget; ++s) {
    const double mid = 0.5 * (lo + hi);
    for (std::size_t j = 0; j < n; ++j) trial[j] = (1.0 - mid) * start[j];
    const double trial_dist = norm2(trial);
    if (trial_dist <= dist && ask(trial, candidate)) {
      lo = mid;
      delta = trial;
      dist = trial_dist;
      result.accepted_distances.push_back(dist);
    } else {
      hi = mid;
    }
  }

  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  double spherical = params.spherical_step;
  double source = params.source_step;
  std::size_t window_proposals = 0;
  std::size_t window_accepts = 0;
  Array1D eta(n);
  while (result.queries < params.budget && dist > 0.0) {
    for (double& v : eta) v = normal(rng);
    eta = hanning_filter(eta, params.hanning_window);
    // Orthogonal to the current direction, scaled relative to the distance.
    const double proj = std::inner_product(eta.begin(), eta.end(), delta.begin(), 0.0) / (dist * dist);
    for (std::size_t j = 0; j < n; ++j) eta[j] -= proj * delta[j];
    const double eta_norm = norm2(eta);
    if (eta_norm == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) trial[j] = delta[j] + eta[j] * (spherical * dist / eta_norm);
    const double sphere_norm = norm2(trial);
    const double shrink = dist / sphere_norm * (1.0 - source);
    for (double& v : trial) v *= shrink;
    const double trial_dist = norm2(trial);

    ++window_proposals;
    if (trial_dist <= dist && ask(trial, candidate)) {
      delta = trial;
      dist = trial_dist;
      result.accepted_distances.push_back(dist);
      ++window_accepts;
    }
    if (window_proposals == params.adaptation_window) {
      const double rate = static_cast<double>(window_accepts) / static_cast<double>(window_proposals);
      if (rate > params.target_acceptance) {
        spherical = std::min(1.0, spherical * params.step_adaptation);
        source = std::min(0.5, source * params.step_adaptation);
      } else {
        spherical /= params.step_adaptation;
        source /= params.step_adaptation;
      }
      window_proposals = 0;
      window_accepts = 0;
    }
  }

  result.improved = !result.accepted_distances.empty();
  result.final_distance = dist;
  Array1D applied = delta;
  result.example.original.assign(victim.begin(), victim.end());
  result.example.adversarial.resize(n);
  for (std::size_t j = 0; j < n; ++j) result.example.adversarial[j] = victim[j] + applied[j];
  result.example.delta = std::move(delta);
  result.example.applied = std::move(applied);
  result.example.provenance.attack = "boundary";
  return result;
}

}  // namespace ecgadv
