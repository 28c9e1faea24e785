#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "dpffn/error.hpp"

namespace dpffn {

using Json = nlohmann::json;

namespace detail {

// Reads `key` from object `j` into `out` if present; type errors name the
// full key path.
template <typename T>
void read_field(const Json& j, const char* key, const std::string& path, T& out) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(path + "." + key + ": " + e.what());
  }
}

}  // namespace detail
}  // namespace dpffn
