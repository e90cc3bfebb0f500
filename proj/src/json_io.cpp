#include "ecgadv/json_io.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace ecgadv {

using nlohmann::json;

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return key == a; });
    if (!known) throw std::invalid_argument("unknown key '" + key + "' in " + where);
  }
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void to_json(json& j, const AttackParams& p) {
  j = {{"epsilon", p.epsilon},         {"alpha", p.alpha},
       {"t", p.t},                     {"t_prime", p.t_prime},
       {"kernel_sizes", p.kernel_sizes}, {"kernel_stds", p.kernel_stds},
       {"anchor", to_string(p.anchor)}, {"temperature", p.temperature}};
}

void from_json(const json& j, AttackParams& p) {
  reject_unknown_keys(j, {"epsilon", "alpha", "t", "t_prime", "kernel_sizes", "kernel_stds", "anchor",
                          "temperature"},
                      "attack params");
  read(j, "epsilon", p.epsilon);
  read(j, "alpha", p.alpha);
  read(j, "t", p.t);
  read(j, "t_prime", p.t_prime);
  read(j, "kernel_sizes", p.kernel_sizes);
  read(j, "kernel_stds", p.kernel_stds);
  read(j, "temperature", p.temperature);
  if (j.contains("anchor")) p.anchor = clip_anchor_from_string(j.at("anchor").get<std::string>());
}

void to_json(json& j, const RegularizerConfig& r) {
  j = {{"lambda", r.lambda}, {"epsilon_max", r.epsilon_max}, {"beta", r.beta}};
}

void from_json(const json& j, RegularizerConfig& r) {
  reject_unknown_keys(j, {"lambda", "epsilon_max", "beta"}, "regularizer");
  read(j, "lambda", r.lambda);
  read(j, "epsilon_max", r.epsilon_max);
  read(j, "beta", r.beta);
}

void to_json(json& j, const TrainPlan& p) {
  j = {{"model_spec", p.model_spec},
       {"e1", p.e1},
       {"e2", p.e2},
       {"batch_size", p.batch_size},
       {"learning_rate", p.learning_rate},
       {"adam_beta1", p.adam_beta1},
       {"adam_beta2", p.adam_beta2},
       {"adam_epsilon", p.adam_epsilon},
       {"seed", p.seed},
       {"temperature_stage1", p.temperature_stage1},
       {"temperature_stage2", p.temperature_stage2},
       {"c_stage1", p.c_stage1},
       {"c_stage2", p.c_stage2},
       {"attack", p.attack},
       {"regularizer", p.regularizer},
       {"warmup_epoch", p.warmup_epoch}};
}

void from_json(const json& j, TrainPlan& p) {
  reject_unknown_keys(j, {"model_spec", "e1", "e2", "batch_size", "learning_rate", "adam_beta1",
                          "adam_beta2", "adam_epsilon", "seed", "temperature", "temperature_stage1",
                          "temperature_stage2", "c", "c_stage1", "c_stage2", "attack", "regularizer",
                          "warmup_epoch"},
                      "train plan");
  read(j, "model_spec", p.model_spec);
  read(j, "e1", p.e1);
  read(j, "e2", p.e2);
  read(j, "batch_size", p.batch_size);
  read(j, "learning_rate", p.learning_rate);
  read(j, "adam_beta1", p.adam_beta1);
  read(j, "adam_beta2", p.adam_beta2);
  read(j, "adam_epsilon", p.adam_epsilon);
  read(j, "seed", p.seed);
  // "temperature" and "c" set both stages; per-stage keys override them.
  if (j.contains("temperature")) p.temperature_stage1 = p.temperature_stage2 = j.at("temperature");
  if (j.contains("c")) p.c_stage1 = p.c_stage2 = j.at("c");
  read(j, "temperature_stage1", p.temperature_stage1);
  read(j, "temperature_stage2", p.temperature_stage2);
  read(j, "c_stage1", p.c_stage1);
  read(j, "c_stage2", p.c_stage2);
  if (j.contains("attack")) {
    AttackParams a = p.attack;
    from_json(j.at("attack"), a);
    p.attack = a;
  }
  if (j.contains("regularizer")) {
    RegularizerConfig r = p.regularizer;
    from_json(j.at("regularizer"), r);
    p.regularizer = r;
  }
  read(j, "warmup_epoch", p.warmup_epoch);
}

}  // namespace ecgadv
