#pragma once

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "schedlab/util/error.hpp"

namespace schedlab {

/// Strict reader for config objects: optional fields keep their defaults,
/// type errors and unknown keys raise InvalidArgument naming the key path.
class JsonFields {
 public:
  JsonFields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InvalidArgument("config key '" + path_ + "' must be an object");
  }

  template <typename V>
  JsonFields& opt(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return *this;
    try {
      out = j_.at(key).template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument("config key '" + qualified(key) + "': " + e.what());
    }
    return *this;
  }

  template <typename V>
  JsonFields& req(const char* key, V& out) {
    if (!j_.contains(key)) throw InvalidArgument("config key '" + qualified(key) + "' is required");
    return opt(key, out);
  }

  bool has(const char* key) const { return j_.contains(key); }
  std::string qualified(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  /// Rejects any key that was not read.
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.contains(k)) throw InvalidArgument("unknown config key '" + qualified(k) + "'");
    }
  }

  JsonFields& mark(const char* key) {
    seen_.insert(key);
    return *this;
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace schedlab
