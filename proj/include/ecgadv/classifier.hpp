#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ecgadv/autodiff.hpp"

namespace ecgadv {

inline constexpr std::size_t kNumClasses = 4;
/// Probabilities are floored at this value inside every log-loss.
inline constexpr double kLogFloor = 1e-12;

struct ConvLayer {
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
};
struct ReluLayer {};
struct MaxPoolLayer {
  std::size_t size = 2;
};
struct GlobalAvgPoolLayer {};
struct DenseLayer {
  std::size_t out = 1;
};

using LayerSpec = std::variant<ConvLayer, ReluLayer, MaxPoolLayer, GlobalAvgPoolLayer, DenseLayer>;

struct Parameter {
  std::string name;
  ad::Shape shape;
  Array1D values;
};

/// F(X): one probability per class.
using ProbabilityVector = Array1D;
/// Y(X): one-hot (hard) or a probability vector (soft).
using LabelVector = Array1D;

LabelVector one_hot(std::size_t label, std::size_t classes = kNumClasses);

/// A 1D CNN over single-lead signals. The last layer must be Dense with
/// width equal to the class count; `temperature` is the training temperature.
class ClassifierModel {
 public:
  ClassifierModel(std::string spec_name, std::vector<LayerSpec> layers, std::size_t input_length,
                  std::size_t classes, std::uint64_t seed, double temperature = 1.0);

  const std::string& spec_name() const { return spec_name_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t input_length() const { return input_length_; }
  std::size_t classes() const { return classes_; }
  double temperature() const { return temperature_; }
  void set_temperature(double t);
  const std::vector<LayerSpec>& layers() const { return layers_; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  std::size_t conv_layer_count() const;

  /// Parameters as tape leaves; `track` marks them differentiable.
  std::vector<ad::Var> bind_parameters(ad::Tape& tape, bool track) const;
  /// Records the forward pass Z(X) on `tape`.
  ad::Var logits(ad::Tape& tape, ad::Var input, std::span<const ad::Var> params) const;
  Array1D logits(std::span<const double> signal) const;

  /// SHA-256 over the architecture, temperature and parameter bits.
  std::string digest() const;

  bool operator==(const ClassifierModel&) const;

 private:
  void check_input(std::size_t length) const;

  std::string spec_name_;
  std::vector<LayerSpec> layers_;
  std::size_t input_length_ = 0;
  std::size_t classes_ = 0;
  std::uint64_t seed_ = 0;
  double temperature_ = 1.0;
  std::vector<Parameter> params_;
};

/// Parameter count implied by a layer stack, computed from the descriptors
/// alone (conv: out*in*k + out, dense: out*in + out).
std::size_t expected_parameter_count(std::span<const LayerSpec> layers, std::size_t input_length);

std::vector<LayerSpec> desk_layers(std::size_t classes);
std::vector<LayerSpec> cnn13_layers(std::size_t classes);

/// "desk" (3 conv layers, CPU-friendly) or "cnn13" (13 conv layers,
/// reference-shaped stand-in). Initialization is a pure function of `seed`.
ClassifierModel build_model(std::string_view spec, std::size_t input_length, std::size_t classes,
                            std::uint64_t seed);

/// Max-subtracted softmax of logits / T.
ProbabilityVector softmax_with_temperature(std::span<const double> logits, double temperature);

/// -(1/|X|) sum log F_l(X), with F floored at kLogFloor.
double hard_label_loss(std::span<const ProbabilityVector> probs, std::span<const std::size_t> labels);

/// -(1/|X|) sum_X sum_i Y_i(X) log F^d_i(X), where Y are the soft labels and
/// F^d the predicted probabilities.
double soft_label_loss(std::span<const ProbabilityVector> predicted,
                       std::span<const LabelVector> soft_labels);

struct MixedLossConfig {
  double c = 0.5;
  void validate() const;
};

/// c * L_adv + (1 - c) * L.
double mixed_loss(double adversarial_loss, double natural_loss, const MixedLossConfig& config);

struct Prediction {
  std::size_t label = 0;
  ProbabilityVector probabilities;
};

/// argmax of the temperature softmax; ties go to the lowest class index.
Prediction predict(const ClassifierModel& model, std::span<const double> signal,
                   double temperature = 1.0);
std::vector<Prediction> predict_batch(const ClassifierModel& model,
                                      std::span<const Array1D> signals, double temperature = 1.0);

struct InputGradient {
  double loss = 0.0;
  Array1D gradient;
  ProbabilityVector probabilities;
};

/// Loss -sum_i target_i log F_i(x) at temperature T and its gradient with
/// respect to the input only.
InputGradient input_loss_gradient(const ClassifierModel& model, std::span<const double> signal,
                                  std::span<const double> target, double temperature);

/// Rows d(output_i)/d(input), one per class. `probabilities` selects F(X) at
/// temperature T; otherwise the raw logits Z(X).
std::vector<Array1D> output_jacobian(const ClassifierModel& model, std::span<const double> signal,
                                     double temperature, bool probabilities);

/// Scalar loss graph over the model parameters with one input slot "x".
ad::ComputeGraph make_loss_graph(const ClassifierModel& model, const LabelVector& target,
                                 double temperature);

// Versioned JSON model file; doubles round-trip bit-exactly.
void save_model(const ClassifierModel& model, const std::filesystem::path& path);
ClassifierModel load_model(const std::filesystem::path& path);
std::string serialize_model(const ClassifierModel& model);
ClassifierModel deserialize_model(std::string_view text);

}  // namespace ecgadv
