#pragma once

#include <map>
#include <string>
#include <vector>

namespace m2m {

// Minimal TOML subset used for experiment configs: [section] headers,
// key = value pairs, # comments. Values: strings, integers, floats, booleans,
// and flat arrays of integers/floats/strings. Keys are flattened to dotted
// form ("train.learning_rate"). Enough for round-tripping resolved-config
// snapshots; not a general TOML implementation.
struct TomlValue {
    enum class Kind { String, Int, Float, Bool, Array };
    Kind kind = Kind::String;
    std::string str;
    long long i = 0;
    double f = 0.0;
    bool b = false;
    std::vector<TomlValue> array;

    static TomlValue make_string(std::string s);
    static TomlValue make_int(long long v);
    static TomlValue make_float(double v);
    static TomlValue make_bool(bool v);
    static TomlValue make_array(std::vector<TomlValue> items);

    double as_double() const;  // Int or Float
    std::string serialize() const;
};

class TomlTable {
public:
    static TomlTable parse(const std::string& text, const std::string& origin = "<string>");
    static TomlTable parse_file(const std::string& path);

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& def) const;
    long long get_int(const std::string& key, long long def) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;
    std::vector<long long> get_int_array(const std::string& key) const;
    std::vector<double> get_double_array(const std::string& key) const;
    std::vector<std::string> get_string_array(const std::string& key) const;

    void set(const std::string& key, TomlValue v) { kv_[key] = std::move(v); }
    // Parses "key=value" with the value in TOML literal syntax.
    void set_from_assignment(const std::string& assignment);

    std::vector<std::string> keys() const;

    // Serializes grouped by section, deterministically ordered.
    std::string serialize() const;
    void write_file(const std::string& path) const;

private:
    const TomlValue& require(const std::string& key, TomlValue::Kind kind) const;
    std::map<std::string, TomlValue> kv_;
};

}  // namespace m2m
