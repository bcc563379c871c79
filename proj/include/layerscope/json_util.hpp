#pragma once

#include <cstdint>

#include <json.hpp>

namespace layerscope {

// Any non-negative JSON integer. Parsed text yields unsigned values, but
// literals built in code are stored as signed.
inline bool is_index(const nlohmann::json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

}  // namespace layerscope
