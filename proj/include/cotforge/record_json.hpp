#pragma once

#include <nlohmann/json.hpp>

#include "cotforge/record.hpp"

namespace cotforge {

nlohmann::json to_json_value(const Problem& p);
nlohmann::json to_json_value(const CoTRecord& r);

// Structural conversion; throws ValidationError naming the offending field.
Problem problem_from_json(const nlohmann::json& j);
CoTRecord record_from_json(const nlohmann::json& j);

}  // namespace cotforge
