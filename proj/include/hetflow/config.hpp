#pragma once

// key = value text files. '#' starts a comment; blank lines are ignored.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "hetflow/error.hpp"

namespace hetflow {

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_key_values(std::string_view text, const std::string& origin = "config") {
  KeyValues out;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos, ErrorCode::format, origin + ":" + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    std::string value = trim(std::string_view(t).substr(eq + 1));
    require(!key.empty(), ErrorCode::format, origin + ":" + std::to_string(line_no) + ": empty key");
    out[std::move(key)] = std::move(value);
  }
  return out;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), ErrorCode::io, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str(), path);
}

inline double parse_double(const std::string& key, const std::string& value) {
  double v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  require(ec == std::errc() && p == value.data() + value.size(), ErrorCode::format,
          "'" + key + "': not a number: '" + value + "'");
  return v;
}

inline long long parse_int(const std::string& key, const std::string& value) {
  long long v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  require(ec == std::errc() && p == value.data() + value.size(), ErrorCode::format,
          "'" + key + "': not an integer: '" + value + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
  if (value == "0" || value == "false" || value == "no" || value == "off") return false;
  fail(ErrorCode::format, "'" + key + "': not a boolean: '" + value + "'");
}

}  // namespace hetflow
