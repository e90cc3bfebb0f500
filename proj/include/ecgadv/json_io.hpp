#pragma once

// JSON mapping of the configuration structs. Reading starts from the
// defaults, overrides the keys present and rejects unknown keys.

#include <json.hpp>

#include "ecgadv/attacks.hpp"
#include "ecgadv/defenses.hpp"

namespace ecgadv {

void to_json(nlohmann::json& j, const AttackParams& p);
void from_json(const nlohmann::json& j, AttackParams& p);

void to_json(nlohmann::json& j, const RegularizerConfig& r);
void from_json(const nlohmann::json& j, RegularizerConfig& r);

void to_json(nlohmann::json& j, const TrainPlan& p);
void from_json(const nlohmann::json& j, TrainPlan& p);

/// Throws std::invalid_argument naming the first key of `j` not in `allowed`.
void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

}  // namespace ecgadv
