#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ecgadv/defenses.hpp"
#include "ecgadv/json_io.hpp"
#include "ecgadv/parallel.hpp"
#include "regularizer_terms.hpp"

namespace ecgadv {

using nlohmann::json;

namespace {

struct MethodName {
  DefenseMethod method;
  const char* name;
};

constexpr MethodName kMethodNames[] = {
    {DefenseMethod::none, "none"},         {DefenseMethod::at, "at"},
    {DefenseMethod::dd, "dd"},             {DefenseMethod::adt, "adt"},
    {DefenseMethod::init_adt, "init-adt"}, {DefenseMethod::dist_adt, "dist-adt"},
    {DefenseMethod::jr, "jr"},             {DefenseMethod::nsr, "nsr"},
};

// Finite-difference step of the JR / NSR surrogates, in signal units.
constexpr double kSurrogateStep = 1e-3;

}  // namespace

std::string to_string(DefenseMethod m) {
  for (const auto& e : kMethodNames) {
    if (e.method == m) return e.name;
  }
  throw std::invalid_argument("unknown defense method");
}

DefenseMethod defense_method_from_string(std::string_view s) {
  for (const auto& e : kMethodNames) {
    if (s == e.name) return e.method;
  }
  throw std::invalid_argument("unknown defense '" + std::string(s) +
                              "' (expected none, at, dd, adt, init-adt, dist-adt, jr, nsr)");
}

const std::vector<DefenseMethod>& all_defense_methods() {
  static const std::vector<DefenseMethod> methods = [] {
    std::vector<DefenseMethod> v;
    for (const auto& e : kMethodNames) v.push_back(e.method);
    return v;
  }();
  return methods;
}

bool is_distillation_family(DefenseMethod m) {
  return m == DefenseMethod::dd || m == DefenseMethod::adt || m == DefenseMethod::init_adt ||
         m == DefenseMethod::dist_adt;
}

std::vector<std::string> RegularizerConfig::violations() const {
  std::vector<std::string> out;
  if (!(lambda >= 0.0)) out.push_back("regularizer.lambda must be >= 0");
  if (!(epsilon_max >= 0.0)) out.push_back("regularizer.epsilon_max must be >= 0");
  if (!(beta >= 0.0)) out.push_back("regularizer.beta must be >= 0");
  return out;
}

std::vector<std::string> TrainPlan::violations() const {
  std::vector<std::string> out;
  if (model_spec != "desk" && model_spec != "cnn13") {
    out.push_back("plan.model_spec must be desk or cnn13, got '" + model_spec + "'");
  }
  if (e1 < 1) out.push_back("plan.e1 must be >= 1");
  if (e2 < 1) out.push_back("plan.e2 must be >= 1");
  if (batch_size < 1) out.push_back("plan.batch_size must be >= 1");
  if (!(learning_rate > 0.0)) out.push_back("plan.learning_rate must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) out.push_back("plan.adam_beta1 must be in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) out.push_back("plan.adam_beta2 must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) out.push_back("plan.adam_epsilon must be > 0");
  if (!(temperature_stage1 > 0.0)) out.push_back("plan.temperature_stage1 must be > 0");
  if (!(temperature_stage2 > 0.0)) out.push_back("plan.temperature_stage2 must be > 0");
  if (!(c_stage1 >= 0.0 && c_stage1 <= 1.0)) out.push_back("plan.c_stage1 must be in [0, 1]");
  if (!(c_stage2 >= 0.0 && c_stage2 <= 1.0)) out.push_back("plan.c_stage2 must be in [0, 1]");
  if (warmup_epoch < 1) out.push_back("plan.warmup_epoch must be >= 1");
  try {
    attack.validate();
  } catch (const std::exception& e) {
    out.push_back(std::string("plan.attack: ") + e.what());
  }
  for (auto& v : regularizer.violations()) out.push_back("plan." + v);
  return out;
}

void TrainPlan::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid training plan:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw std::invalid_argument(msg);
}

std::size_t TrainingData::length() const {
  if (signals.empty()) throw std::invalid_argument("training data is empty");
  return signals.front().size();
}

void TrainingData::check() const {
  if (signals.empty()) throw std::invalid_argument("training data is empty");
  if (signals.size() != labels.size()) {
    throw std::invalid_argument("training data: signal and label counts differ");
  }
  for (std::size_t i = 0; i < signals.size(); ++i) {
    if (signals[i].size() != signals.front().size()) {
      throw ShapeError("training data: signal " + std::to_string(i) + " has a different length");
    }
    if (labels[i] >= kNumClasses) {
      throw std::invalid_argument("training data: label out of range at " + std::to_string(i));
    }
  }
}

const ClassifierModel& TrainedDefense::deployable() const {
  if (models.empty()) throw std::logic_error("trained defense holds no model");
  return models.back();
}

std::string TrainedDefense::model_id() const { return deployable().digest(); }

void TrainedDefense::write_epoch_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "stage,epoch,loss_natural,loss_adversarial,penalty,objective,train_accuracy,digest\n";
  out << std::setprecision(17);
  for (const auto& e : log.epochs) {
    out << e.stage << ',' << e.epoch << ',' << e.loss_natural << ',' << e.loss_adversarial << ','
        << e.penalty << ',' << e.objective << ',' << e.train_accuracy << ',' << e.digest << '\n';
  }
}

void TrainedDefense::write_batch_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "stage,epoch,batch,loss_natural,loss_adversarial,penalty,objective\n";
  out << std::setprecision(17);
  for (const auto& b : log.batches) {
    out << b.stage << ',' << b.epoch << ',' << b.batch << ',' << b.loss_natural << ','
        << b.loss_adversarial << ',' << b.penalty << ',' << b.objective << '\n';
  }
}

void TrainedDefense::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json files = json::array();
  for (std::size_t i = 0; i < models.size(); ++i) {
    const std::string name = i + 1 == models.size() ? "model.json" : "first_model.json";
    save_model(models[i], dir / name);
    files.push_back(name);
  }
  write_epoch_csv(dir / "training_epochs.csv");
  write_batch_csv(dir / "training_batches.csv");
  json manifest = {{"format", "ecgadv-defense"},
                   {"version", 1},
                   {"method", to_string(method)},
                   {"models", files},
                   {"model_id", model_id()}};
  std::ofstream out(dir / "defense.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "defense.json").string());
  out << manifest.dump(2) << '\n';
}

TrainedDefense TrainedDefense::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "defense.json");
  if (!in) throw std::runtime_error("missing defense manifest " + (dir / "defense.json").string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "ecgadv-defense") {
    throw std::runtime_error((dir / "defense.json").string() + " is not a defense manifest");
  }
  TrainedDefense d;
  d.method = defense_method_from_string(manifest.at("method").get<std::string>());
  for (const auto& f : manifest.at("models")) d.models.push_back(load_model(dir / f.get<std::string>()));
  const std::size_t expected = is_distillation_family(d.method) ? 2 : 1;
  if (d.models.size() != expected) {
    throw std::runtime_error("defense " + to_string(d.method) + " must carry " +
                             std::to_string(expected) + " model(s)");
  }
  if (d.model_id() != manifest.at("model_id")) {
    throw std::runtime_error("model id mismatch in " + dir.string());
  }
  return d;
}

namespace {

enum class Penalty { none, jacobian, nsr };

struct StageConfig {
  int stage = 1;
  int epochs = 1;
  double temperature = 1.0;
  double c = 0.0;
  bool adversarial = false;
  Penalty penalty = Penalty::none;
};

class Adam {
 public:
  Adam(const ClassifierModel& model, const TrainPlan& plan) : plan_(plan) {
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.values.size(), 0.0);
      v_.emplace_back(p.values.size(), 0.0);
    }
  }

  void step(ClassifierModel& model, const std::vector<Array1D>& grads) {
    ++t_;
    const double b1 = plan_.adam_beta1;
    const double b2 = plan_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    auto& params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& w = params[k].values;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * g;
        v_[k][i] = b2 * v_[k][i] + (1.0 - b2) * g * g;
        const double mhat = m_[k][i] / c1;
        const double vhat = v_[k][i] / c2;
        w[i] -= plan_.learning_rate * mhat / (std::sqrt(vhat) + plan_.adam_epsilon);
      }
    }
  }

 private:
  const TrainPlan& plan_;
  std::vector<Array1D> m_;
  std::vector<Array1D> v_;
  long t_ = 0;
};

struct SampleResult {
  double loss_natural = 0.0;
  double loss_adversarial = 0.0;
  double penalty = 0.0;
  double objective = 0.0;
  bool correct = false;
  std::vector<Array1D> grads;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

SampleResult sample_step(const ClassifierModel& model, std::span<const double> x,
                         std::size_t label, const LabelVector& target, const Array1D* x_adv,
                         const StageConfig& cfg, const TrainPlan& plan, bool with_penalty,
                         std::uint64_t noise_seed) {
  ad::Tape tape;
  auto params = model.bind_parameters(tape, true);
  const ad::Shape shape{1, x.size()};
  ad::Var z = model.logits(tape, tape.constant(Array1D(x.begin(), x.end()), shape), params);
  ad::Var probs = ad::softmax(tape, z, cfg.temperature);
  ad::Var nat = ad::cross_entropy(tape, probs, target, kLogFloor);
  ad::Var objective = ad::scale(tape, nat, 1.0 - cfg.c);

  SampleResult r;
  if (x_adv != nullptr) {
    ad::Var za = model.logits(tape, tape.constant(*x_adv, shape), params);
    ad::Var adv = ad::cross_entropy(tape, ad::softmax(tape, za, cfg.temperature), target, kLogFloor);
    r.loss_adversarial = tape.scalar(adv);
    objective = ad::add(tape, objective, ad::scale(tape, adv, cfg.c));
  }
  if (with_penalty) {
    ad::Var term;
    double weight = 0.0;
    if (cfg.penalty == Penalty::jacobian) {
      std::mt19937_64 rng(noise_seed);
      std::normal_distribution<double> normal(0.0, 1.0);
      Array1D u(x.size());
      for (double& v : u) v = normal(rng);
      term = detail::jacobian_term(tape, model, params, x, u, cfg.temperature, kSurrogateStep);
      weight = plan.regularizer.lambda;
    } else {
      term = detail::nsr_term(tape, model, params, z, x, label, plan.regularizer.epsilon_max,
                              kSurrogateStep);
      weight = plan.regularizer.beta;
    }
    ad::Var weighted = ad::scale(tape, term, weight);
    r.penalty = tape.scalar(weighted);
    objective = ad::add(tape, objective, weighted);
  }
  tape.backward(objective);

  r.loss_natural = tape.scalar(nat);
  r.objective = tape.scalar(objective);
  const auto& p = tape.value(probs);
  r.correct = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == label;
  r.grads.reserve(params.size());
  for (auto v : params) r.grads.push_back(tape.grad(v));
  return r;
}

void run_stage(ClassifierModel& model, const TrainingData& data,
               const std::vector<LabelVector>& targets, const StageConfig& cfg,
               const TrainPlan& plan, TrainingLog& log) {
  model.set_temperature(cfg.temperature);
  Adam adam(model, plan);
  AttackParams attack = plan.attack;
  attack.temperature = cfg.temperature;

  const std::size_t n = data.size();
  const std::size_t bs = static_cast<std::size_t>(plan.batch_size);
  std::vector<std::size_t> order(n);
  std::mt19937_64 shuffle_rng(mix_seed(plan.seed, static_cast<std::uint64_t>(cfg.stage)));

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const bool with_penalty = cfg.penalty != Penalty::none && epoch >= plan.warmup_epoch;
    EpochLogEntry ep;
    ep.stage = cfg.stage;
    ep.epoch = epoch;
    std::size_t correct = 0;
    std::size_t batch_index = 0;
    try {
      for (std::size_t start = 0; start < n; start += bs, ++batch_index) {
        const std::size_t count = std::min(bs, n - start);
        std::vector<Array1D> adv(cfg.adversarial ? count : 0);
        std::vector<SampleResult> results(count);
        // The model is not touched until every sample of the batch is done,
        // so generation and gradients all see the batch-start parameters.
        parallel_for(count, [&](std::size_t j) {
          const std::size_t i = order[start + j];
          if (cfg.adversarial) {
            AdversarialExample ex = attack.t_prime == 0
                                        ? pgd_attack(model, data.signals[i], targets[i], attack)
                                        : sap_attack(model, data.signals[i], targets[i], attack);
            adv[j] = std::move(ex.adversarial);
          }
          const std::uint64_t noise_seed =
              mix_seed(mix_seed(plan.seed, static_cast<std::uint64_t>(cfg.stage * 100000 + epoch)),
                       static_cast<std::uint64_t>(i));
          results[j] = sample_step(model, data.signals[i], data.labels[i], targets[i],
                                   cfg.adversarial ? &adv[j] : nullptr, cfg, plan, with_penalty,
                                   noise_seed);
        });

        std::vector<Array1D> grads = results[0].grads;
        for (std::size_t j = 1; j < count; ++j) {
          for (std::size_t k = 0; k < grads.size(); ++k) {
            for (std::size_t e = 0; e < grads[k].size(); ++e) grads[k][e] += results[j].grads[k][e];
          }
        }
        const double inv = 1.0 / static_cast<double>(count);
        for (auto& g : grads) {
          for (double& v : g) v *= inv;
        }
        adam.step(model, grads);

        BatchLogEntry b;
        b.stage = cfg.stage;
        b.epoch = epoch;
        b.batch = batch_index;
        for (const auto& r : results) {
          b.loss_natural += r.loss_natural;
          b.loss_adversarial += r.loss_adversarial;
          b.penalty += r.penalty;
          b.objective += r.objective;
          if (r.correct) ++correct;
        }
        b.loss_natural *= inv;
        b.loss_adversarial *= inv;
        b.penalty *= inv;
        b.objective *= inv;
        if (!std::isfinite(b.objective)) throw NumericalError("non-finite batch objective");
        ep.loss_natural += b.loss_natural * static_cast<double>(count);
        ep.loss_adversarial += b.loss_adversarial * static_cast<double>(count);
        ep.penalty += b.penalty * static_cast<double>(count);
        ep.objective += b.objective * static_cast<double>(count);
        log.batches.push_back(b);
      }
      for (const auto& p : model.parameters()) {
        for (double v : p.values) {
          if (!std::isfinite(v)) throw NumericalError("non-finite parameter in " + p.name);
        }
      }
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged in stage " + std::to_string(cfg.stage) + " epoch " +
                           std::to_string(epoch) + ": " + e.what());
    }
    const double dn = static_cast<double>(n);
    ep.loss_natural /= dn;
    ep.loss_adversarial /= dn;
    ep.penalty /= dn;
    ep.objective /= dn;
    ep.train_accuracy = static_cast<double>(correct) / dn;
    ep.digest = model.digest();
    log.epochs.push_back(ep);
  }
}

std::vector<LabelVector> hard_targets(const TrainingData& data) {
  std::vector<LabelVector> t;
  t.reserve(data.size());
  for (std::size_t l : data.labels) t.push_back(one_hot(l));
  return t;
}

ClassifierModel first_network(const TrainingData& data, const TrainPlan& plan) {
  return build_model(plan.model_spec, data.length(), kNumClasses, plan.seed);
}

TrainedDefense single_network(DefenseMethod method, const TrainingData& data, const TrainPlan& plan,
                              bool adversarial, Penalty penalty) {
  data.check();
  plan.validate();
  TrainedDefense d;
  d.method = method;
  d.models.push_back(first_network(data, plan));
  StageConfig cfg;
  cfg.epochs = plan.e1;
  cfg.temperature = plan.temperature_stage1;
  cfg.adversarial = adversarial;
  cfg.c = adversarial ? plan.c_stage1 : 0.0;
  cfg.penalty = penalty;
  run_stage(d.models.front(), data, hard_targets(data), cfg, plan, d.log);
  return d;
}

TrainedDefense two_networks(DefenseMethod method, const TrainingData& data, const TrainPlan& plan,
                            bool adversarial_first, bool adversarial_second) {
  data.check();
  plan.validate();
  TrainedDefense d;
  d.method = method;
  d.models.push_back(first_network(data, plan));

  StageConfig first;
  first.stage = 1;
  first.epochs = plan.e1;
  first.temperature = plan.temperature_stage1;
  first.adversarial = adversarial_first;
  first.c = adversarial_first ? plan.c_stage1 : 0.0;
  run_stage(d.models.front(), data, hard_targets(data), first, plan, d.log);

  const ClassifierModel& teacher = d.models.front();
  d.soft_labels.resize(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    d.soft_labels[i] =
        softmax_with_temperature(teacher.logits(data.signals[i]), plan.temperature_stage1);
  });

  const ClassifierModel& shape = d.models.front();
  d.models.emplace_back(shape.spec_name(), shape.layers(), shape.input_length(), shape.classes(),
                        mix_seed(plan.seed, 2), plan.temperature_stage2);
  StageConfig second;
  second.stage = 2;
  second.epochs = plan.e2;
  second.temperature = plan.temperature_stage2;
  second.adversarial = adversarial_second;
  second.c = adversarial_second ? plan.c_stage2 : 0.0;
  run_stage(d.models.back(), data, d.soft_labels, second, plan, d.log);
  return d;
}

}  // namespace

TrainedDefense train_standard(const TrainingData& data, const TrainPlan& plan) {
  return single_network(DefenseMethod::none, data, plan, false, Penalty::none);
}

TrainedDefense train_adversarial(const TrainingData& data, const TrainPlan& plan) {
  return single_network(DefenseMethod::at, data, plan, true, Penalty::none);
}

TrainedDefense train_distilled(const TrainingData& data, const TrainPlan& plan) {
  return two_networks(DefenseMethod::dd, data, plan, false, false);
}

TrainedDefense train_adt(const TrainingData& data, const TrainPlan& plan, AdtVariant variant) {
  switch (variant) {
    case AdtVariant::full:
      return two_networks(DefenseMethod::adt, data, plan, true, true);
    case AdtVariant::init_only:
      return two_networks(DefenseMethod::init_adt, data, plan, true, false);
    case AdtVariant::dist_only:
      return two_networks(DefenseMethod::dist_adt, data, plan, false, true);
  }
  throw std::invalid_argument("unknown ADT variant");
}

TrainedDefense train_jacobian_regularized(const TrainingData& data, const TrainPlan& plan) {
  return single_network(DefenseMethod::jr, data, plan, false, Penalty::jacobian);
}

TrainedDefense train_nsr_regularized(const TrainingData& data, const TrainPlan& plan) {
  return single_network(DefenseMethod::nsr, data, plan, false, Penalty::nsr);
}

TrainedDefense train_defense(DefenseMethod method, const TrainingData& data, const TrainPlan& plan) {
  switch (method) {
    case DefenseMethod::none: return train_standard(data, plan);
    case DefenseMethod::at: return train_adversarial(data, plan);
    case DefenseMethod::dd: return train_distilled(data, plan);
    case DefenseMethod::adt: return train_adt(data, plan, AdtVariant::full);
    case DefenseMethod::init_adt: return train_adt(data, plan, AdtVariant::init_only);
    case DefenseMethod::dist_adt: return train_adt(data, plan, AdtVariant::dist_only);
    case DefenseMethod::jr: return train_jacobian_regularized(data, plan);
    case DefenseMethod::nsr: return train_nsr_regularized(data, plan);
  }
  throw std::invalid_argument("unknown defense method");
}

}  // namespace ecgadv
