#pragma once

// Result tables: `# key=value` header comments, one header row, data rows and optional
// trailing comments. Nothing time-dependent is written, so equal inputs give equal bytes.

#include <afterimage/programs.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace afterimage {

struct CsvTable {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::pair<std::string, std::string>> trailer;
};

inline std::string format_fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline std::string format_hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

inline void write_csv(const CsvTable& t, std::ostream& os) {
  for (const auto& [k, v] : t.config) os << "# " << k << '=' << v << '\n';
  auto row = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << '\n';
  };
  row(t.columns);
  for (const auto& r : t.rows) {
    if (r.size() != t.columns.size()) throw std::logic_error("csv row width does not match header");
    row(r);
  }
  for (const auto& [k, v] : t.trailer) os << "# " << k << '=' << v << '\n';
}

inline void emit_csv(const CsvTable& t, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  write_csv(t, f);
  f.flush();
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

inline CsvTable event_log_table(const EventLog& log) {
  CsvTable t;
  t.columns = {"time", "domain", "kind", "ip", "vaddr", "paddr", "latency", "bit_index", "secret", "label"};
  for (const Event& e : log.events) {
    t.rows.push_back({std::to_string(e.time), std::to_string(e.domain), to_string(e.kind), format_hex(e.ip.value),
                      format_hex(e.vaddr.value), format_hex(e.paddr.value), std::to_string(e.latency),
                      std::to_string(e.bit_index), e.secret ? "1" : "0", e.label});
  }
  return t;
}

}  // namespace afterimage
