#pragma once

#include <cstddef>
#include <iomanip>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ladabert/error.hpp"

namespace ladabert {

/// Minimal comma-separated table: no quoting, first line is the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

inline CsvTable parse_csv(std::istream& is) {
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw FormatError("csv: empty input");
  t.header = detail::split_csv_line(line);
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    auto row = detail::split_csv_line(line);
    row.resize(t.header.size());
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline CsvTable parse_csv(const std::string& text) {
  std::istringstream is(text);
  return parse_csv(is);
}

inline std::string csv_number(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

}  // namespace ladabert
