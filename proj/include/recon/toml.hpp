// Reader for the TOML subset the config files use: [section] headers,
// key = value lines, strings, booleans, numbers, and nested arrays that
// may span lines. Keys are exposed flat as "section.key". Every parse
// failure names the input and the 1-based line it happened on.
#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "recon/geometry.hpp"

namespace recon {

class ConfigError : public Error {
public:
    using Error::Error;
};

class TomlValue {
public:
    enum class Kind { string, boolean, number, array };

    Kind kind = Kind::number;
    std::string text;  // string payload, or the raw numeric token
    double number = 0.0;
    bool flag = false;
    std::vector<TomlValue> items;
};

class TomlDoc {
public:
    std::string name = "config";  // label used in error messages
    std::map<std::string, TomlValue> values;

    bool has(const std::string& key) const { return values.count(key) != 0; }

    const TomlValue& at(const std::string& key) const {
        const auto it = values.find(key);
        if (it == values.end()) throw ConfigError(name + ": missing required key '" + key + "'");
        return it->second;
    }

    std::string str(const std::string& key) const {
        const TomlValue& v = at(key);
        if (v.kind != TomlValue::Kind::string) throw type_error(key, "a string");
        return v.text;
    }

    bool flag(const std::string& key) const {
        const TomlValue& v = at(key);
        if (v.kind != TomlValue::Kind::boolean) throw type_error(key, "a boolean");
        return v.flag;
    }

    double f64(const std::string& key) const {
        const TomlValue& v = at(key);
        if (v.kind != TomlValue::Kind::number) throw type_error(key, "a number");
        return v.number;
    }

    // Integer getters reread the raw token so 64-bit seeds survive intact.
    std::int64_t i64(const std::string& key) const {
        const TomlValue& v = at(key);
        if (v.kind != TomlValue::Kind::number) throw type_error(key, "an integer");
        std::int64_t out = 0;
        if (!exact_int(v.text, out)) throw type_error(key, "an integer");
        return out;
    }

    std::uint64_t u64(const std::string& key) const {
        const TomlValue& v = at(key);
        if (v.kind != TomlValue::Kind::number) throw type_error(key, "a non-negative integer");
        std::uint64_t out = 0;
        if (!exact_int(v.text, out)) throw type_error(key, "a non-negative integer");
        return out;
    }

    const std::vector<TomlValue>& array(const std::string& key) const {
        const TomlValue& v = at(key);
        if (v.kind != TomlValue::Kind::array) throw type_error(key, "an array");
        return v.items;
    }

    // Flat numeric array; rejects nesting and non-numeric entries.
    std::vector<double> numbers(const std::string& key) const {
        std::vector<double> out;
        for (const TomlValue& v : array(key)) {
            if (v.kind != TomlValue::Kind::number) throw type_error(key, "an array of numbers");
            out.push_back(v.number);
        }
        return out;
    }

    std::string str_or(const std::string& key, const std::string& fb) const {
        return has(key) ? str(key) : fb;
    }
    bool flag_or(const std::string& key, bool fb) const { return has(key) ? flag(key) : fb; }
    double f64_or(const std::string& key, double fb) const { return has(key) ? f64(key) : fb; }
    std::int64_t i64_or(const std::string& key, std::int64_t fb) const {
        return has(key) ? i64(key) : fb;
    }
    std::uint64_t u64_or(const std::string& key, std::uint64_t fb) const {
        return has(key) ? u64(key) : fb;
    }

private:
    template <class Int>
    static bool exact_int(const std::string& raw, Int& out) {
        const char* first = raw.data();
        const char* last = raw.data() + raw.size();
        if (first != last && *first == '+') ++first;
        const auto res = std::from_chars(first, last, out);
        return res.ec == std::errc{} && res.ptr == last;
    }

    ConfigError type_error(const std::string& key, const char* want) const {
        return ConfigError(name + ": key '" + key + "' is not " + want);
    }
};

namespace detail {

inline ConfigError toml_error(const std::string& name, int line, const std::string& msg) {
    return ConfigError(name + ":" + std::to_string(line) + ": " + msg);
}

// Cut an end-of-line comment, honoring quotes so '#' inside strings stays.
inline std::string_view strip_comment(std::string_view s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (quoted && s[i] == '\\' && i + 1 < s.size()) {
            ++i;
        } else if (s[i] == '"') {
            quoted = !quoted;
        } else if (!quoted && s[i] == '#') {
            return s.substr(0, i);
        }
    }
    return s;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

// Net bracket depth outside quotes; lets arrays continue on following lines.
inline int bracket_depth(std::string_view s) {
    int depth = 0;
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (quoted && s[i] == '\\' && i + 1 < s.size()) ++i;
        else if (s[i] == '"') quoted = !quoted;
        else if (!quoted && s[i] == '[') ++depth;
        else if (!quoted && s[i] == ']') --depth;
    }
    return depth;
}

inline bool bare_key_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
}

class TomlValueParser {
public:
    TomlValueParser(std::string_view src, const std::string& name, int line)
        : src_(src), name_(name), line_(line) {}

    TomlValue run() {
        const TomlValue v = value();
        skip_space();
        if (pos_ != src_.size()) throw err("trailing characters after value");
        return v;
    }

private:
    std::string_view src_;
    const std::string& name_;
    int line_;
    std::size_t pos_ = 0;

    ConfigError err(const std::string& msg) const { return toml_error(name_, line_, msg); }

    void skip_space() {
        while (pos_ < src_.size() &&
               std::isspace(static_cast<unsigned char>(src_[pos_])))
            ++pos_;
    }

    TomlValue value() {
        skip_space();
        if (pos_ >= src_.size()) throw err("missing value");
        const char c = src_[pos_];
        if (c == '"') return string_value();
        if (c == '[') return array_value();
        if (src_.compare(pos_, 4, "true") == 0 && !tail_after(4)) {
            pos_ += 4;
            TomlValue v;
            v.kind = TomlValue::Kind::boolean;
            v.flag = true;
            return v;
        }
        if (src_.compare(pos_, 5, "false") == 0 && !tail_after(5)) {
            pos_ += 5;
            TomlValue v;
            v.kind = TomlValue::Kind::boolean;
            v.flag = false;
            return v;
        }
        return number_value();
    }

    // True when a bare word continues past `n` chars (so "truest" is not a bool).
    bool tail_after(std::size_t n) const {
        return pos_ + n < src_.size() && bare_key_char(src_[pos_ + n]);
    }

    TomlValue string_value() {
        ++pos_;  // opening quote
        std::string out;
        while (pos_ < src_.size() && src_[pos_] != '"') {
            char c = src_[pos_++];
            if (c == '\\') {
                if (pos_ >= src_.size()) throw err("dangling escape in string");
                const char e = src_[pos_++];
                switch (e) {
                    case '"': c = '"'; break;
                    case '\\': c = '\\'; break;
                    case 'n': c = '\n'; break;
                    case 't': c = '\t'; break;
                    default: throw err(std::string("unknown escape '\\") + e + "'");
                }
            }
            out.push_back(c);
        }
        if (pos_ >= src_.size()) throw err("unterminated string");
        ++pos_;  // closing quote
        TomlValue v;
        v.kind = TomlValue::Kind::string;
        v.text = std::move(out);
        return v;
    }

    TomlValue array_value() {
        ++pos_;  // opening bracket
        TomlValue v;
        v.kind = TomlValue::Kind::array;
        skip_space();
        while (true) {
            if (pos_ >= src_.size()) throw err("unterminated array");
            if (src_[pos_] == ']') {
                ++pos_;
                return v;
            }
            v.items.push_back(value());
            skip_space();
            if (pos_ < src_.size() && src_[pos_] == ',') {
                ++pos_;
                skip_space();
            } else if (pos_ >= src_.size() || src_[pos_] != ']') {
                throw err("expected ',' or ']' in array");
            }
        }
    }

    TomlValue number_value() {
        std::size_t end = pos_;
        while (end < src_.size() && src_[end] != ',' && src_[end] != ']' &&
               !std::isspace(static_cast<unsigned char>(src_[end])))
            ++end;
        const std::string raw(src_.substr(pos_, end - pos_));
        double num = 0.0;
        const char* first = raw.data();
        const char* last = raw.data() + raw.size();
        if (first != last && *first == '+') ++first;
        const auto res = std::from_chars(first, last, num);
        if (raw.empty() || res.ec != std::errc{} || res.ptr != last)
            throw err("'" + raw + "' is not a number");
        pos_ = end;
        TomlValue v;
        v.kind = TomlValue::Kind::number;
        v.number = num;
        v.text = raw;
        return v;
    }
};

}  // namespace detail

inline TomlDoc parse_toml(std::string_view text, const std::string& name = "config") {
    TomlDoc doc;
    doc.name = name;
    std::string section;
    int line_no = 0;

    std::size_t cursor = 0;
    while (cursor <= text.size()) {
        const std::size_t eol = text.find('\n', cursor);
        std::string_view physical =
            text.substr(cursor, eol == std::string_view::npos ? text.size() - cursor
                                                              : eol - cursor);
        cursor = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
        ++line_no;
        const int start_line = line_no;

        std::string logical(detail::strip_comment(physical));
        // Pull in continuation lines while an array is still open.
        while (detail::bracket_depth(logical) > 0 && cursor <= text.size()) {
            const std::size_t next_eol = text.find('\n', cursor);
            physical = text.substr(cursor, next_eol == std::string_view::npos
                                               ? text.size() - cursor
                                               : next_eol - cursor);
            cursor = next_eol == std::string_view::npos ? text.size() + 1 : next_eol + 1;
            ++line_no;
            logical += ' ';
            logical += detail::strip_comment(physical);
        }

        const std::string_view body = detail::trim(logical);
        if (body.empty()) continue;

        if (body.front() == '[') {
            if (body.back() != ']')
                throw detail::toml_error(name, start_line, "malformed section header");
            const std::string_view inner = detail::trim(body.substr(1, body.size() - 2));
            if (inner.empty())
                throw detail::toml_error(name, start_line, "empty section name");
            for (char c : inner)
                if (!detail::bare_key_char(c))
                    throw detail::toml_error(name, start_line,
                                             "bad character in section name");
            section = std::string(inner);
            continue;
        }

        const std::size_t eq = body.find('=');
        if (eq == std::string_view::npos)
            throw detail::toml_error(name, start_line, "expected 'key = value'");
        const std::string_view key_sv = detail::trim(body.substr(0, eq));
        if (key_sv.empty()) throw detail::toml_error(name, start_line, "empty key");
        for (char c : key_sv)
            if (!detail::bare_key_char(c))
                throw detail::toml_error(name, start_line, "bad character in key");

        std::string key = section.empty() ? std::string(key_sv)
                                          : section + "." + std::string(key_sv);
        if (doc.values.count(key))
            throw detail::toml_error(name, start_line, "duplicate key '" + key + "'");

        detail::TomlValueParser parser(body.substr(eq + 1), name, start_line);
        doc.values.emplace(std::move(key), parser.run());
    }
    return doc;
}

inline TomlDoc read_toml(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_toml(buf.str(), path);
}

}  // namespace recon
