#pragma once

// Tape-level JR / NSR terms used during training. Both avoid second-order
// derivatives by differencing the forward pass along a fixed direction.

#include <span>

#include "ecgadv/autodiff.hpp"
#include "ecgadv/classifier.hpp"

namespace ecgadv::detail {

/// ||J u||^2 with J = d F / d x (probabilities at `temperature`), via a
/// central difference of step h along u. E_u ||J u||^2 = ||J||_F^2 for
/// u ~ N(0, I).
ad::Var jacobian_term(ad::Tape& tape, const ClassifierModel& model, std::span<const ad::Var> params,
                      std::span<const double> x, std::span<const double> u, double temperature,
                      double h);

/// ratio + hinge of nsr_penalty for one sample, with the l1 gradient norm
/// replaced by the central difference along sign(d z_y / d x).
ad::Var nsr_term(ad::Tape& tape, const ClassifierModel& model, std::span<const ad::Var> params,
                 ad::Var logits, std::span<const double> x, std::size_t label, double epsilon_max,
                 double h);

}  // namespace ecgadv::detail
