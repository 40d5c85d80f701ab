#pragma once

// Internal strict field-by-field JSON object reader shared by the config
// (de)serializers. Unknown keys and type mismatches raise ConfigError naming
// the offending key; absent keys leave the caller's default in place.

#include <set>
#include <string>
#include <utility>

#include "json.hpp"

#include "cdm/errors.hpp"

namespace cdm::detail {

class JsonReader {
public:
    JsonReader(const nlohmann::json& j, std::string what) : j_(j), what_(std::move(what)) {
        if (!j_.is_object()) throw ConfigError(what_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(what_ + ": bad value for key '" + key + "'");
        }
    }

    bool present(const char* key) const { return j_.contains(key); }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError(what_ + ": unknown key '" + it.key() + "'");
    }

private:
    const nlohmann::json& j_;
    std::string what_;
    std::set<std::string> seen_;
};

} // namespace cdm::detail
