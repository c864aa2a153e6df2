#pragma once

// Minimal CSV for the pipeline's own schemas: header row mandatory, comma
// separated, '.' decimal separator, no quoting. Doubles are written with 17
// significant digits so a write/read cycle is bit-exact.

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pfsim/errors.hpp"

namespace pfsim::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::ptrdiff_t column(const std::string& name) const {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (header[c] == name) return static_cast<std::ptrdiff_t>(c);
    return -1;
  }
};

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  Table t;
  std::string line;
  bool have_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);  // BOM
    if (trim(line).empty()) continue;
    auto cells = split(line);
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size())
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(t.header.size()) + " fields, found " + std::to_string(cells.size()));
    t.rows.push_back(std::move(cells));
  }
  if (!have_header) throw ConfigError(path.string() + ": missing header row");
  return t;
}

inline double parse_double(const std::string& s, const std::string& context) {
  if (s.empty()) throw ConfigError(context + ": empty numeric field");
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  // ERANGE on underflow still returns the nearest (subnormal or zero) value.
  if (end != s.c_str() + s.size() || (errno == ERANGE && std::fabs(v) == HUGE_VAL)) throw ConfigError(context + ": not a number: '" + s + "'");
  if (!std::isfinite(v)) throw ConfigError(context + ": non-finite value '" + s + "'");
  return v;
}

inline std::string format(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class Writer {
 public:
  Writer(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path), path_(path) {
    if (!out_) throw ConfigError("cannot write " + path.string());
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) out_ << (c ? "," : "") << cells[c];
    out_ << '\n';
  }

  void row(const std::vector<double>& values) {
    for (std::size_t c = 0; c < values.size(); ++c) out_ << (c ? "," : "") << format(values[c]);
    out_ << '\n';
  }

  ~Writer() { out_.flush(); }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

inline void write_matrix(const std::filesystem::path& path, const std::vector<std::string>& header,
                         const Eigen::MatrixXd& m) {
  Writer w(path, header);
  std::vector<double> row(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    w.row(row);
  }
}

// All-numeric table to a matrix, columns in file order.
inline Eigen::MatrixXd to_matrix(const Table& t, const std::string& context) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    for (std::size_t c = 0; c < t.header.size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          parse_double(t.rows[r][c], context + " row " + std::to_string(r + 1) + " column " + t.header[c]);
  return m;
}

}  // namespace pfsim::csv
