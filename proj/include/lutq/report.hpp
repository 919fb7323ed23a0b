#pragma once

#include <string>

#include "json.hpp"
#include "lutq/inference.hpp"
#include "lutq/packed_model.hpp"

namespace lutq {

nlohmann::json to_json(const OpCounts& ops);
nlohmann::json to_json(const OpCountReport& report);
nlohmann::json to_json(const FootprintReport& report);
nlohmann::json to_json(const SerializationStats& stats);

std::string format_text(const OpCountReport& report);
std::string format_text(const FootprintReport& report);

}  // namespace lutq
