#pragma once

// Load traces as `ip_hex,vaddr_hex,domain_id` lines. Blank lines and `#` comments are
// skipped.

#include <afterimage/experiments.hpp>

#include <charconv>
#include <istream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace afterimage {

class TraceParseError : public std::runtime_error {
 public:
  TraceParseError(std::size_t line, const std::string& what)
      : std::runtime_error("trace line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out, int base) {
  if (base == 16 && s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) s.remove_prefix(2);
  if (s.empty()) return false;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, base);
  return ec == std::errc{} && p == s.data() + s.size();
}

}  // namespace detail

inline std::vector<TraceRecord> parse_trace(std::istream& in) {
  std::vector<TraceRecord> out;
  std::string raw;
  std::size_t n = 0;
  while (std::getline(in, raw)) {
    ++n;
    const std::string_view line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(detail::trim(line.substr(start, i - start)));
        start = i + 1;
      }
    }
    if (fields.size() != 3) throw TraceParseError(n, "expected ip,vaddr,domain");
    TraceRecord r;
    if (!detail::parse_number(fields[0], r.ip.value, 16)) throw TraceParseError(n, "bad ip");
    if (!detail::parse_number(fields[1], r.vaddr.value, 16)) throw TraceParseError(n, "bad address");
    if (!detail::parse_number(fields[2], r.domain, 10) || r.domain < 0) throw TraceParseError(n, "bad domain id");
    out.push_back(r);
  }
  return out;
}

}  // namespace afterimage
