#pragma once

// Strict JSON object reading shared by the config parsers: every key must be
// consumed, and values must have the declared type.

#include <cstdint>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <string>

#include "arimg/errors.hpp"

namespace arimg::detail {

class Fields {
 public:
  Fields(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw DataError(where_ + ": expected a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const nlohmann::json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void get(const char* key, int& out) {
    if (!take(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < std::numeric_limits<int>::min() ||
        v.get<std::int64_t>() > std::numeric_limits<int>::max()) {
      bad(key, "an integer");
    }
    out = v.get<int>();
  }
  void get(const char* key, std::int64_t& out) {
    if (!take(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) bad(key, "an integer");
    out = v.get<std::int64_t>();
  }
  void get(const char* key, std::uint64_t& out) {
    if (!take(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) bad(key, "a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  void get(const char* key, double& out) {
    if (!take(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) bad(key, "a number");
    out = v.get<double>();
  }
  void get(const char* key, bool& out) {
    if (!take(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) bad(key, "a boolean");
    out = v.get<bool>();
  }
  void get(const char* key, std::string& out) {
    if (!take(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) bad(key, "a string");
    out = v.get<std::string>();
  }

  // Call once every known key was read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw DataError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

  const std::string& where() const { return where_; }

 private:
  bool take(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  [[noreturn]] void bad(const char* key, const char* what) const {
    throw DataError(where_ + "." + key + ": expected " + what);
  }

  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline nlohmann::json parse_json(const std::string& text, const std::string& where) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + ": invalid JSON (" + e.what() + ")");
  }
}

}  // namespace arimg::detail
