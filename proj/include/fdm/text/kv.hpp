#pragma once

#include <charconv>
#include <cstdio>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fdm/error.hpp"

// Line-oriented key=value text, used for artifact metadata and plan files.
// Plan files add "[section]" headers; '#' starts a comment line.
namespace fdm::text {

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line) : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct Entry {
    std::string section;
    std::string key;
    std::string value;
    std::size_t line = 0;
};

// Parses "key=value" lines. With allow_sections, "[name]" lines set the
// section of the following entries; blank and '#' lines are skipped.
inline std::vector<Entry> parse_lines(std::string_view text, bool allow_sections) {
    std::vector<Entry> out;
    std::string section;
    std::size_t lineno = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view raw = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++lineno;
        std::string_view line = trim(raw);
        if (allow_sections && (line.empty() || line.front() == '#')) continue;
        if (allow_sections && line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) throw ParseError("malformed section header", lineno);
            section = std::string(trim(line.substr(1, line.size() - 2)));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos || eq == 0) throw ParseError("expected key=value", lineno);
        out.push_back({section, std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))), lineno});
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <class T>
T parse_number(const std::string& s, const std::string& what) {
    T v{};
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) throw Error("invalid number for " + what + ": \"" + s + "\"");
    return v;
}

template <>
inline double parse_number<double>(const std::string& s, const std::string& what) {
    if (s.empty()) throw Error("invalid number for " + what + ": empty");
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw Error("invalid number for " + what + ": \"" + s + "\"");
    }
    if (pos != s.size()) throw Error("invalid number for " + what + ": \"" + s + "\"");
    return v;
}

} // namespace fdm::text
