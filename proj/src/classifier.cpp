#include "ecgadv/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ecgadv/digest.hpp"
#include "ecgadv/parallel.hpp"

namespace ecgadv {

using nlohmann::json;

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::size_t conv_out_length(const ConvLayer& c, std::size_t length) {
  if (length + 2 * c.padding < c.kernel) {
    throw ShapeError("conv layer: input length " + std::to_string(length) +
                     " shorter than kernel " + std::to_string(c.kernel));
  }
  return (length + 2 * c.padding - c.kernel) / c.stride + 1;
}

// Walks the layer stack and reports parameter shapes.
struct PlannedParameter {
  std::string name;
  ad::Shape shape;
  std::size_t fan_in = 0;  // 0 for biases
};

struct LayerPlan {
  std::vector<PlannedParameter> params;
  ad::Shape output;
};

LayerPlan plan_layers(std::span<const LayerSpec> layers, std::size_t input_length) {
  LayerPlan plan;
  ad::Shape cur{1, input_length};
  std::size_t conv_i = 0;
  std::size_t dense_i = 0;
  for (const auto& layer : layers) {
    std::visit(overloaded{
                   [&](const ConvLayer& c) {
                     if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
                       throw std::invalid_argument("conv layer: zero-sized configuration");
                     }
                     const std::string n = "conv" + std::to_string(++conv_i);
                     plan.params.push_back({n + ".weight", {c.out_channels * cur.channels, c.kernel},
                                           cur.channels * c.kernel});
                     plan.params.push_back({n + ".bias", {1, c.out_channels}, 0});
                     cur = {c.out_channels, conv_out_length(c, cur.length)};
                   },
                   [&](const ReluLayer&) {},
                   [&](const MaxPoolLayer& p) {
                     if (p.size == 0 || cur.length / p.size == 0) {
                       throw ShapeError("max-pool layer: input shorter than window");
                     }
                     cur.length /= p.size;
                   },
                   [&](const GlobalAvgPoolLayer&) { cur.length = 1; },
                   [&](const DenseLayer& d) {
                     if (d.out == 0) throw std::invalid_argument("dense layer: zero width");
                     const std::string n = "dense" + std::to_string(++dense_i);
                     plan.params.push_back({n + ".weight", {d.out, cur.size()}, cur.size()});
                     plan.params.push_back({n + ".bias", {1, d.out}, 0});
                     cur = {1, d.out};
                   },
               },
               layer);
  }
  plan.output = cur;
  return plan;
}

json layer_to_json(const LayerSpec& layer) {
  return std::visit(overloaded{
                        [](const ConvLayer& c) {
                          return json{{"type", "conv"},
                                      {"out_channels", c.out_channels},
                                      {"kernel", c.kernel},
                                      {"stride", c.stride},
                                      {"padding", c.padding}};
                        },
                        [](const ReluLayer&) { return json{{"type", "relu"}}; },
                        [](const MaxPoolLayer& p) { return json{{"type", "maxpool"}, {"size", p.size}}; },
                        [](const GlobalAvgPoolLayer&) { return json{{"type", "global_avg_pool"}}; },
                        [](const DenseLayer& d) { return json{{"type", "dense"}, {"out", d.out}}; },
                    },
                    layer);
}

LayerSpec layer_from_json(const json& j) {
  const std::string type = j.at("type");
  if (type == "conv") {
    return ConvLayer{j.at("out_channels"), j.at("kernel"), j.at("stride"), j.at("padding")};
  }
  if (type == "relu") return ReluLayer{};
  if (type == "maxpool") return MaxPoolLayer{j.at("size")};
  if (type == "global_avg_pool") return GlobalAvgPoolLayer{};
  if (type == "dense") return DenseLayer{j.at("out")};
  throw std::runtime_error("unknown layer type '" + type + "'");
}

}  // namespace

LabelVector one_hot(std::size_t label, std::size_t classes) {
  if (label >= classes) throw std::out_of_range("label " + std::to_string(label) + " out of range");
  LabelVector y(classes, 0.0);
  y[label] = 1.0;
  return y;
}

// ---------------------------------------------------------------------------
// ClassifierModel

ClassifierModel::ClassifierModel(std::string spec_name, std::vector<LayerSpec> layers,
                                 std::size_t input_length, std::size_t classes, std::uint64_t seed,
                                 double temperature)
    : spec_name_(std::move(spec_name)),
      layers_(std::move(layers)),
      input_length_(input_length),
      classes_(classes),
      seed_(seed) {
  set_temperature(temperature);
  if (input_length_ == 0) throw std::invalid_argument("model input length must be positive");
  if (layers_.empty() || !std::holds_alternative<DenseLayer>(layers_.back())) {
    throw std::invalid_argument("model must end with a dense layer");
  }
  if (std::get<DenseLayer>(layers_.back()).out != classes_) {
    throw std::invalid_argument("output layer width must equal the class count");
  }
  const LayerPlan plan = plan_layers(layers_, input_length_);

  // He-normal weights, zero biases.
  std::mt19937_64 rng(seed_);
  for (const auto& planned : plan.params) {
    Parameter p{planned.name, planned.shape, Array1D(planned.shape.size(), 0.0)};
    if (planned.fan_in > 0) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(planned.fan_in)));
      for (double& v : p.values) v = dist(rng);
    }
    params_.push_back(std::move(p));
  }
}

void ClassifierModel::set_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) {
    throw std::invalid_argument("temperature must be finite and > 0");
  }
  temperature_ = t;
}

std::size_t ClassifierModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.values.size();
  return n;
}

std::size_t ClassifierModel::conv_layer_count() const {
  return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(), [](const LayerSpec& l) {
    return std::holds_alternative<ConvLayer>(l);
  }));
}

void ClassifierModel::check_input(std::size_t length) const {
  if (length != input_length_) {
    throw ShapeError("signal length " + std::to_string(length) + " does not match model input length " +
                     std::to_string(input_length_));
  }
}

std::vector<ad::Var> ClassifierModel::bind_parameters(ad::Tape& tape, bool track) const {
  std::vector<ad::Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) {
    vars.push_back(track ? tape.variable(p.values, p.shape) : tape.constant(p.values, p.shape));
  }
  return vars;
}

ad::Var ClassifierModel::logits(ad::Tape& tape, ad::Var input, std::span<const ad::Var> params) const {
  check_input(tape.value(input).size());
  if (params.size() != params_.size()) throw ShapeError("parameter binding size mismatch");
  ad::Var cur = input;
  std::size_t pi = 0;
  for (const auto& layer : layers_) {
    cur = std::visit(overloaded{
                         [&](const ConvLayer& c) {
                           ad::Var out = ad::conv1d(tape, cur, params[pi], params[pi + 1],
                                                    {c.out_channels, c.kernel, c.stride, c.padding});
                           pi += 2;
                           return out;
                         },
                         [&](const ReluLayer&) { return ad::relu(tape, cur); },
                         [&](const MaxPoolLayer& p) { return ad::maxpool1d(tape, cur, p.size); },
                         [&](const GlobalAvgPoolLayer&) { return ad::global_avg_pool(tape, cur); },
                         [&](const DenseLayer& d) {
                           ad::Var out = ad::dense(tape, cur, params[pi], params[pi + 1], d.out);
                           pi += 2;
                           return out;
                         },
                     },
                     layer);
  }
  return cur;
}

Array1D ClassifierModel::logits(std::span<const double> signal) const {
  check_input(signal.size());
  ad::Tape tape;
  auto params = bind_parameters(tape, false);
  ad::Var x = tape.constant(Array1D(signal.begin(), signal.end()), {1, signal.size()});
  return tape.value(logits(tape, x, params));
}

std::string ClassifierModel::digest() const {
  std::ostringstream meta;
  json layers = json::array();
  for (const auto& l : layers_) layers.push_back(layer_to_json(l));
  meta << spec_name_ << '|' << input_length_ << '|' << classes_ << '|' << layers.dump() << '|';
  std::string bytes = meta.str();
  bytes.append(reinterpret_cast<const char*>(&temperature_), sizeof temperature_);
  for (const auto& p : params_) {
    bytes += p.name;
    bytes.append(reinterpret_cast<const char*>(p.values.data()), p.values.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

bool ClassifierModel::operator==(const ClassifierModel& o) const {
  if (spec_name_ != o.spec_name_ || input_length_ != o.input_length_ || classes_ != o.classes_ ||
      seed_ != o.seed_ || temperature_ != o.temperature_ || params_.size() != o.params_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != o.params_[i].name || params_[i].values != o.params_[i].values) return false;
  }
  return digest() == o.digest();
}

std::size_t expected_parameter_count(std::span<const LayerSpec> layers, std::size_t input_length) {
  std::size_t channels = 1;
  std::size_t length = input_length;
  std::size_t total = 0;
  for (const auto& layer : layers) {
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      total += c->out_channels * channels * c->kernel + c->out_channels;
      length = (length + 2 * c->padding - c->kernel) / c->stride + 1;
      channels = c->out_channels;
    } else if (const auto* p = std::get_if<MaxPoolLayer>(&layer)) {
      length /= p->size;
    } else if (std::holds_alternative<GlobalAvgPoolLayer>(layer)) {
      length = 1;
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      total += d->out * channels * length + d->out;
      channels = 1;
      length = d->out;
    }
  }
  return total;
}

std::vector<LayerSpec> desk_layers(std::size_t classes) {
  return {ConvLayer{8, 7, 1, 3},  ReluLayer{}, MaxPoolLayer{2},
          ConvLayer{16, 5, 1, 2}, ReluLayer{}, MaxPoolLayer{2},
          ConvLayer{16, 5, 1, 2}, ReluLayer{}, MaxPoolLayer{2},
          DenseLayer{classes}};
}

std::vector<LayerSpec> cnn13_layers(std::size_t classes) {
  // 13 conv layers of kernel 5 with ReLU; pooling after every second conv;
  // global average pooling feeds the dense output.
  const std::size_t widths[13] = {16, 16, 16, 32, 32, 32, 64, 64, 64, 64, 128, 128, 128};
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < 13; ++i) {
    layers.push_back(ConvLayer{widths[i], 5, 1, 2});
    layers.push_back(ReluLayer{});
    if (i % 2 == 1) layers.push_back(MaxPoolLayer{2});
  }
  layers.push_back(GlobalAvgPoolLayer{});
  layers.push_back(DenseLayer{classes});
  return layers;
}

ClassifierModel build_model(std::string_view spec, std::size_t input_length, std::size_t classes,
                            std::uint64_t seed) {
  if (spec == "desk") return ClassifierModel("desk", desk_layers(classes), input_length, classes, seed);
  if (spec == "cnn13") return ClassifierModel("cnn13", cnn13_layers(classes), input_length, classes, seed);
  throw std::invalid_argument("unknown model spec '" + std::string(spec) + "' (expected desk or cnn13)");
}

// ---------------------------------------------------------------------------
// Probabilities and losses

ProbabilityVector softmax_with_temperature(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  const double zmax = *std::max_element(logits.begin(), logits.end());
  ProbabilityVector p(logits.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i])) throw NumericalError("softmax: non-finite logit");
    p[i] = std::exp((logits[i] - zmax) / temperature);
    denom += p[i];
  }
  for (double& v : p) v /= denom;
  return p;
}

double hard_label_loss(std::span<const ProbabilityVector> probs, std::span<const std::size_t> labels) {
  if (probs.empty()) throw std::invalid_argument("hard_label_loss: empty batch");
  if (probs.size() != labels.size()) throw ShapeError("hard_label_loss: batch size mismatch");
  std::vector<LabelVector> targets;
  targets.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) targets.push_back(one_hot(labels[i], probs[i].size()));
  return soft_label_loss(probs, targets);
}

double soft_label_loss(std::span<const ProbabilityVector> predicted,
                       std::span<const LabelVector> soft_labels) {
  if (predicted.empty()) throw std::invalid_argument("soft_label_loss: empty batch");
  if (predicted.size() != soft_labels.size()) throw ShapeError("soft_label_loss: batch size mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < predicted.size(); ++n) {
    ad::Tape tape;
    ad::Var p = tape.constant(predicted[n]);
    total += tape.scalar(ad::cross_entropy(tape, p, soft_labels[n], kLogFloor));
  }
  return total / static_cast<double>(predicted.size());
}

void MixedLossConfig::validate() const {
  if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("mixed loss weight c must lie in [0, 1]");
}

double mixed_loss(double adversarial_loss, double natural_loss, const MixedLossConfig& config) {
  config.validate();
  return config.c * adversarial_loss + (1.0 - config.c) * natural_loss;
}

// ---------------------------------------------------------------------------
// Inference

Prediction predict(const ClassifierModel& model, std::span<const double> signal, double temperature) {
  Prediction out;
  out.probabilities = softmax_with_temperature(model.logits(signal), temperature);
  out.label = static_cast<std::size_t>(
      std::max_element(out.probabilities.begin(), out.probabilities.end()) - out.probabilities.begin());
  return out;
}

std::vector<Prediction> predict_batch(const ClassifierModel& model, std::span<const Array1D> signals,
                                      double temperature) {
  std::vector<Prediction> out(signals.size());
  parallel_for(signals.size(), [&](std::size_t i) { out[i] = predict(model, signals[i], temperature); });
  return out;
}

InputGradient input_loss_gradient(const ClassifierModel& model, std::span<const double> signal,
                                  std::span<const double> target, double temperature) {
  ad::Tape tape;
  auto params = model.bind_parameters(tape, false);
  ad::Var x = tape.variable(Array1D(signal.begin(), signal.end()), {1, signal.size()});
  ad::Var probs = ad::softmax(tape, model.logits(tape, x, params), temperature);
  ad::Var loss = ad::cross_entropy(tape, probs, target, kLogFloor);
  tape.backward(loss);
  return {tape.scalar(loss), tape.grad(x), tape.value(probs)};
}

std::vector<Array1D> output_jacobian(const ClassifierModel& model, std::span<const double> signal,
                                     double temperature, bool probabilities) {
  ad::Tape tape;
  auto params = model.bind_parameters(tape, false);
  ad::Var x = tape.variable(Array1D(signal.begin(), signal.end()), {1, signal.size()});
  ad::Var out = model.logits(tape, x, params);
  if (probabilities) out = ad::softmax(tape, out, temperature);
  std::vector<Array1D> rows;
  for (std::size_t i = 0; i < model.classes(); ++i) {
    tape.backward(ad::select(tape, out, i));
    rows.push_back(tape.grad(x));
  }
  return rows;
}

ad::ComputeGraph make_loss_graph(const ClassifierModel& model, const LabelVector& target,
                                 double temperature) {
  ad::ComputeGraph graph;
  std::vector<std::string> names;
  for (const auto& p : model.parameters()) {
    graph.parameters[p.name] = {p.values, p.shape};
    names.push_back(p.name);
  }
  graph.input_slots["x"] = {1, model.input_length()};
  graph.build = [model, target, temperature, names](ad::Tape& tape, const ad::Bindings& params,
                                                     const ad::Bindings& inputs) {
    std::vector<ad::Var> ordered;
    ordered.reserve(names.size());
    for (const auto& n : names) ordered.push_back(params.at(n));
    ad::Var probs = ad::softmax(tape, model.logits(tape, inputs.at("x"), ordered), temperature);
    return ad::cross_entropy(tape, probs, target, kLogFloor);
  };
  return graph;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {
constexpr const char* kModelFormat = "ecgadv-model";
constexpr int kModelVersion = 1;
}  // namespace

std::string serialize_model(const ClassifierModel& model) {
  json j;
  j["format"] = kModelFormat;
  j["version"] = kModelVersion;
  j["spec"] = model.spec_name();
  j["seed"] = model.seed();
  j["input_length"] = model.input_length();
  j["classes"] = model.classes();
  j["temperature"] = model.temperature();
  j["layers"] = json::array();
  for (const auto& l : model.layers()) j["layers"].push_back(layer_to_json(l));
  j["parameters"] = json::array();
  for (const auto& p : model.parameters()) {
    j["parameters"].push_back({{"name", p.name}, {"values", p.values}});
  }
  j["digest"] = model.digest();
  return j.dump();
}

ClassifierModel deserialize_model(std::string_view text) {
  const json j = json::parse(text);
  if (j.value("format", "") != kModelFormat) throw std::runtime_error("not an ecgadv model file");
  if (j.at("version").get<int>() != kModelVersion) {
    throw std::runtime_error("unsupported model file version " + j.at("version").dump());
  }
  std::vector<LayerSpec> layers;
  for (const auto& l : j.at("layers")) layers.push_back(layer_from_json(l));
  ClassifierModel model(j.at("spec"), std::move(layers), j.at("input_length"), j.at("classes"),
                        j.at("seed"), j.at("temperature"));
  const auto& stored = j.at("parameters");
  auto& params = model.parameters();
  if (stored.size() != params.size()) throw std::runtime_error("model file parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (stored[i].at("name") != params[i].name) throw std::runtime_error("model file parameter order mismatch");
    auto values = stored[i].at("values").get<Array1D>();
    if (values.size() != params[i].values.size()) {
      throw std::runtime_error("model file parameter '" + params[i].name + "' has wrong size");
    }
    params[i].values = std::move(values);
  }
  if (j.contains("digest") && j.at("digest") != model.digest()) {
    throw std::runtime_error("model file digest mismatch");
  }
  return model;
}

void save_model(const ClassifierModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write model file " + path.string());
  out << serialize_model(model);
}

ClassifierModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read model file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_model(ss.str());
}

}  // namespace ecgadv
