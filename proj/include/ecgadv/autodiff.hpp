#pragma once

// Reverse-mode differentiation over flat double arrays.
//
// A Tape records primitive operations in creation order (define-by-run), so
// every node's inputs precede it and the recorded graph is acyclic by
// construction. Multi-channel signals are flat arrays with a (channels,
// length) shape, channel-major.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecgadv {

using Array1D = std::vector<double>;

/// Raised when a forward value or gradient stops being finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace ecgadv

namespace ecgadv::ad {

struct Shape {
  std::size_t channels = 1;
  std::size_t length = 1;

  std::size_t size() const { return channels * length; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var constant(Array1D values, Shape shape);
  Var constant(Array1D values);
  Var variable(Array1D values, Shape shape);
  Var variable(Array1D values);

  const Array1D& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulated by the last backward(); zeros if the node was not
  /// reached.
  Array1D grad(Var v) const;

  /// Seeds d(out)/d(out) = seed and propagates to every node that requires a
  /// gradient. `out` must be a single element.
  void backward(Var out, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(Var v) const { return nodes_.at(v.id).op; }

  /// Branch decisions of ReLU / max-pool nodes recorded during forward.
  /// Two evaluations with equal signatures lie in the same linear region.
  const std::vector<std::uint8_t>& kink_signature() const { return kinks_; }
  void record_kinks(std::span<const std::uint8_t> bits) {
    kinks_.insert(kinks_.end(), bits.begin(), bits.end());
  }

  // Used by primitive implementations.
  Var push(const char* op, Shape shape, Array1D value, std::vector<std::size_t> inputs,
           BackwardFn backward);
  Array1D& grad_ref(std::size_t id);
  const Array1D& grad_of(std::size_t id) const { return nodes_[id].grad; }
  const Array1D& value_of(std::size_t id) const { return nodes_[id].value; }
  bool tracks(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    const char* op = "";
    Shape shape;
    Array1D value;
    Array1D grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<std::uint8_t> kinks_;
};

// Elementwise arithmetic (operands must share a shape).
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var div(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double factor);
Var square(Tape& t, Var a);
Var abs(Tape& t, Var a);
/// max(a, floor) elementwise; derivative is 0 where the floor is active.
Var clamp_min(Tape& t, Var a, double floor);
/// Natural log of max(a, floor).
Var log(Tape& t, Var a, double floor);

// Reductions.
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
/// Element `index` of a flat array, as a scalar.
Var select(Tape& t, Var a, std::size_t index);

// Network layers.
struct Conv1dConfig {
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation with zero padding. Weight layout out x in x kernel,
/// bias one value per output channel.
Var conv1d(Tape& t, Var x, Var weight, Var bias, const Conv1dConfig& cfg);
/// ReLU with derivative 0 at exactly 0.
Var relu(Tape& t, Var x);
/// Non-overlapping max pooling per channel; trailing remainder is dropped.
/// Ties resolve to the first maximum.
Var maxpool1d(Tape& t, Var x, std::size_t size);
Var global_avg_pool(Tape& t, Var x);
/// Fully connected layer over the flattened input; weight is out x in.
Var dense(Tape& t, Var x, Var weight, Var bias, std::size_t out);
/// exp(z_i / T) / sum_l exp(z_l / T) over the flattened input.
Var softmax(Tape& t, Var logits, double temperature);
/// -sum_i target_i * log(max(p_i, floor)); zero target weights are skipped.
/// Every floor hit bumps a process-wide counter.
Var cross_entropy(Tape& t, Var probs, std::span<const double> target, double floor);

std::size_t log_floor_hits();
void reset_log_floor_hits();

// Whole-graph evaluation.
struct NamedArray {
  Array1D values;
  Shape shape;
};

using Bindings = std::map<std::string, Var>;
using GraphBuilder =
    std::function<Var(Tape&, const Bindings& parameters, const Bindings& inputs)>;

struct ComputeGraph {
  std::map<std::string, NamedArray> parameters;
  std::map<std::string, Shape> input_slots;
  GraphBuilder build;
};

struct GradientBundle {
  double loss = 0.0;
  std::map<std::string, Array1D> parameter_gradients;
  std::map<std::string, Array1D> input_gradients;
};

double evaluate(const ComputeGraph& graph, const std::map<std::string, Array1D>& inputs);

GradientBundle evaluate_with_gradients(const ComputeGraph& graph,
                                       const std::map<std::string, Array1D>& inputs);

struct FiniteDifferenceOptions {
  double step = 1e-5;
  /// Denominator floor for the relative error.
  double floor = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded random subset.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
  /// Skip coordinates whose +-step evaluations land in a different ReLU /
  /// pooling region than the base point.
  bool skip_kinks = true;
};

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  std::size_t compared = 0;
  std::size_t skipped_kinks = 0;
  std::string worst_coordinate;
};

/// max over coordinates of |analytic - central difference| / max(|analytic|, floor).
FiniteDifferenceReport finite_difference_check(const ComputeGraph& graph,
                                               const std::map<std::string, Array1D>& inputs,
                                               const FiniteDifferenceOptions& options = {});

}  // namespace ecgadv::ad
