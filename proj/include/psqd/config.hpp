#pragma once

#include "psqd/math.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace psqd {

/// Thrown on malformed or missing configuration; the message names the
/// offending key. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Flat key = value configuration with dotted key paths ("env.kind",
/// "train.steps"). Lines starting with '#' are comments. Values keep their
/// verbatim text; typed accessors parse on demand.
class Config {
public:
    Config() = default;

    static Config parse_file(const std::string& path);
    static Config parse_text(const std::string& text, const std::string& origin = "<string>");

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    std::string get_string(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    long get_int(const std::string& key) const;
    long get_int(const std::string& key, long fallback) const;
    double get_double(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    /// Comma-separated doubles: "0.5, 1.0, 2".
    std::vector<double> get_double_list(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const;

    /// Comma-separated integer list.
    std::vector<int> get_int_list(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;

    /// Semicolon-separated integer pairs: "1,2; 3,4".
    std::vector<std::pair<int, int>> get_int_pairs(const std::string& key) const;

    /// Strings split on commas, trimmed.
    std::vector<std::string> get_string_list(const std::string& key) const;

    /// All entries in sorted key order (used for manifests and echo).
    const std::map<std::string, std::string>& entries() const { return entries_; }

    /// Serializes back to the key = value text form.
    std::string to_text() const;

private:
    std::optional<std::string> find(const std::string& key) const;
    std::map<std::string, std::string> entries_;
};

} // namespace psqd
