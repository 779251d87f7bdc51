#include "m2m/core/toml.h"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace m2m {

namespace {

[[noreturn]] void fail(const std::string& origin, int line, const std::string& msg) {
    throw std::runtime_error(origin + ":" + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a string literal.
std::string strip_comment(const std::string& s) {
    bool in_str = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') in_str = !in_str;
        if (s[i] == '#' && !in_str) return s.substr(0, i);
    }
    return s;
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
            return false;
    return true;
}

TomlValue parse_scalar(const std::string& raw, const std::string& origin, int line) {
    std::string v = trim(raw);
    if (v.empty()) fail(origin, line, "empty value");
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"') fail(origin, line, "unterminated string: " + v);
        std::string out;
        for (std::size_t i = 1; i + 1 < v.size(); ++i) {
            if (v[i] == '\\' && i + 2 < v.size()) {
                ++i;
                switch (v[i]) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default: fail(origin, line, std::string("unsupported escape \\") + v[i]);
                }
            } else {
                out += v[i];
            }
        }
        return TomlValue::make_string(out);
    }
    if (v == "true") return TomlValue::make_bool(true);
    if (v == "false") return TomlValue::make_bool(false);

    bool looks_float = v.find_first_of(".eE") != std::string::npos &&
                       v.find_first_not_of("+-0123456789.eE") == std::string::npos;
    if (!looks_float) {
        long long iv = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), iv);
        if (ec == std::errc() && p == v.data() + v.size()) return TomlValue::make_int(iv);
    }
    try {
        std::size_t used = 0;
        double fv = std::stod(v, &used);
        if (used == v.size()) return TomlValue::make_float(fv);
    } catch (...) {
    }
    fail(origin, line, "cannot parse value '" + v + "'");
}

TomlValue parse_value(const std::string& raw, const std::string& origin, int line) {
    std::string v = trim(raw);
    if (!v.empty() && v.front() == '[') {
        if (v.back() != ']') fail(origin, line, "unterminated array: " + v);
        std::string inner = v.substr(1, v.size() - 2);
        std::vector<TomlValue> items;
        std::string cur;
        bool in_str = false;
        for (char c : inner) {
            if (c == '"') in_str = !in_str;
            if (c == ',' && !in_str) {
                if (!trim(cur).empty()) items.push_back(parse_scalar(cur, origin, line));
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!trim(cur).empty()) items.push_back(parse_scalar(cur, origin, line));
        return TomlValue::make_array(std::move(items));
    }
    return parse_scalar(raw, origin, line);
}

std::string format_double(double v) {
    char buf[40];
    snprintf(buf, sizeof(buf), "%.17g", v);
    std::string s = buf;
    // Ensure the literal reads back as a float, not an int.
    if (s.find_first_of(".eEnN") == std::string::npos) s += ".0";
    return s;
}

}  // namespace

TomlValue TomlValue::make_string(std::string s) {
    TomlValue v;
    v.kind = Kind::String;
    v.str = std::move(s);
    return v;
}
TomlValue TomlValue::make_int(long long x) {
    TomlValue v;
    v.kind = Kind::Int;
    v.i = x;
    return v;
}
TomlValue TomlValue::make_float(double x) {
    TomlValue v;
    v.kind = Kind::Float;
    v.f = x;
    return v;
}
TomlValue TomlValue::make_bool(bool x) {
    TomlValue v;
    v.kind = Kind::Bool;
    v.b = x;
    return v;
}
TomlValue TomlValue::make_array(std::vector<TomlValue> items) {
    TomlValue v;
    v.kind = Kind::Array;
    v.array = std::move(items);
    return v;
}

double TomlValue::as_double() const {
    if (kind == Kind::Int) return double(i);
    if (kind == Kind::Float) return f;
    throw std::runtime_error("TOML value is not numeric");
}

std::string TomlValue::serialize() const {
    switch (kind) {
        case Kind::String: {
            std::string out = "\"";
            for (char c : str) {
                if (c == '"' || c == '\\') out += '\\';
                if (c == '\n') {
                    out += "\\n";
                    continue;
                }
                out += c;
            }
            return out + "\"";
        }
        case Kind::Int: return std::to_string(i);
        case Kind::Float: return format_double(f);
        case Kind::Bool: return b ? "true" : "false";
        case Kind::Array: {
            std::string out = "[";
            for (std::size_t k = 0; k < array.size(); ++k) {
                if (k) out += ", ";
                out += array[k].serialize();
            }
            return out + "]";
        }
    }
    return "";
}

TomlTable TomlTable::parse(const std::string& text, const std::string& origin) {
    TomlTable t;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = trim(strip_comment(line));
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') fail(origin, lineno, "unterminated section header: " + s);
            section = trim(s.substr(1, s.size() - 2));
            if (!valid_key(section)) fail(origin, lineno, "bad section name '" + section + "'");
            continue;
        }
        std::size_t eq = std::string::npos;
        bool in_str = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') in_str = !in_str;
            if (s[i] == '=' && !in_str) {
                eq = i;
                break;
            }
        }
        if (eq == std::string::npos) fail(origin, lineno, "expected key = value, got '" + s + "'");
        std::string key = trim(s.substr(0, eq));
        if (!valid_key(key)) fail(origin, lineno, "bad key '" + key + "'");
        if (!section.empty()) key = section + "." + key;
        if (t.kv_.count(key)) fail(origin, lineno, "duplicate key '" + key + "'");
        t.kv_[key] = parse_value(s.substr(eq + 1), origin, lineno);
    }
    return t;
}

TomlTable TomlTable::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
}

const TomlValue& TomlTable::require(const std::string& key, TomlValue::Kind kind) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::runtime_error("missing config key '" + key + "'");
    if (it->second.kind != kind &&
        !(kind == TomlValue::Kind::Float && it->second.kind == TomlValue::Kind::Int))
        throw std::runtime_error("config key '" + key + "' has the wrong type");
    return it->second;
}

std::string TomlTable::get_string(const std::string& key, const std::string& def) const {
    if (!has(key)) return def;
    return require(key, TomlValue::Kind::String).str;
}
long long TomlTable::get_int(const std::string& key, long long def) const {
    if (!has(key)) return def;
    return require(key, TomlValue::Kind::Int).i;
}
double TomlTable::get_double(const std::string& key, double def) const {
    if (!has(key)) return def;
    return require(key, TomlValue::Kind::Float).as_double();
}
bool TomlTable::get_bool(const std::string& key, bool def) const {
    if (!has(key)) return def;
    return require(key, TomlValue::Kind::Bool).b;
}
std::vector<long long> TomlTable::get_int_array(const std::string& key) const {
    std::vector<long long> out;
    if (!has(key)) return out;
    for (const auto& v : require(key, TomlValue::Kind::Array).array) {
        if (v.kind != TomlValue::Kind::Int)
            throw std::runtime_error("config key '" + key + "' must be an integer array");
        out.push_back(v.i);
    }
    return out;
}
std::vector<double> TomlTable::get_double_array(const std::string& key) const {
    std::vector<double> out;
    if (!has(key)) return out;
    for (const auto& v : require(key, TomlValue::Kind::Array).array) out.push_back(v.as_double());
    return out;
}
std::vector<std::string> TomlTable::get_string_array(const std::string& key) const {
    std::vector<std::string> out;
    if (!has(key)) return out;
    for (const auto& v : require(key, TomlValue::Kind::Array).array) {
        if (v.kind != TomlValue::Kind::String)
            throw std::runtime_error("config key '" + key + "' must be a string array");
        out.push_back(v.str);
    }
    return out;
}

void TomlTable::set_from_assignment(const std::string& assignment) {
    std::size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::runtime_error("override '" + assignment + "' is not of the form key=value");
    std::string key = trim(assignment.substr(0, eq));
    if (!valid_key(key)) throw std::runtime_error("override has a bad key: '" + key + "'");
    std::string raw = trim(assignment.substr(eq + 1));
    // Bare words that are not numbers/booleans/arrays are treated as strings,
    // so --set train.regime=m2m works without shell-quoted quotes.
    try {
        kv_[key] = parse_value(raw, "<override>", 1);
    } catch (const std::exception&) {
        kv_[key] = TomlValue::make_string(raw);
    }
}

std::vector<std::string> TomlTable::keys() const {
    std::vector<std::string> out;
    out.reserve(kv_.size());
    for (const auto& [k, _] : kv_) out.push_back(k);
    return out;
}

std::string TomlTable::serialize() const {
    // Top-level keys must precede any [section] header, otherwise they would
    // be re-parsed as members of the previous section.
    std::string out;
    for (const auto& [key, value] : kv_)
        if (key.rfind('.') == std::string::npos) out += key + " = " + value.serialize() + "\n";
    std::string cur_section;
    for (const auto& [key, value] : kv_) {
        std::size_t dot = key.rfind('.');
        if (dot == std::string::npos) continue;
        std::string section = key.substr(0, dot);
        if (section != cur_section) {
            if (!out.empty()) out += "\n";
            out += "[" + section + "]\n";
            cur_section = section;
        }
        out += key.substr(dot + 1) + " = " + value.serialize() + "\n";
    }
    return out;
}

void TomlTable::write_file(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write config snapshot '" + path + "'");
    f << serialize();
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace m2m
