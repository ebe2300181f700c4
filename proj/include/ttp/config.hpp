#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ttp {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Flat "key = value" text. '#' starts a comment; blank lines are ignored.
// Duplicate keys are an error.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text);
    static KeyValueConfig load(const std::string& path);

    bool has(const std::string& key) const { return values_.contains(key); }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<long long> get_int_list(const std::string& key, std::vector<long long> fallback) const;

    // Throws ConfigError naming the first key not in `known`.
    void reject_unknown(const std::vector<std::string>& known) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    std::string format() const;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace ttp
