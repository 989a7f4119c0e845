#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdj/tensor.hpp"

// The tabular text format every exported artifact uses: '#' comment lines
// (provenance), one tab-separated header row, then tab-separated data rows.
// Reals are printed with round-trip precision so reruns are byte-identical.
namespace cdj {

inline std::string format_real(real v) {
  char buf[40];
#ifdef CDJ_REAL_FLOAT
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
#else
  std::snprintf(buf, sizeof(buf), "%.17g", v);
#endif
  return buf;
}

struct Table {
  std::vector<std::string> comments;  // without the leading '#'
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add_row(std::vector<std::string> cells) {
    if (cells.size() != columns.size()) {
      throw std::invalid_argument("table: row with " +
                                  std::to_string(cells.size()) +
                                  " cells under " +
                                  std::to_string(columns.size()) + " columns");
    }
    rows.push_back(std::move(cells));
  }

  std::string to_string() const {
    std::ostringstream os;
    for (const std::string& c : comments) os << "# " << c << "\n";
    for (std::size_t i = 0; i < columns.size(); ++i) {
      os << (i ? "\t" : "") << columns[i];
    }
    os << "\n";
    for (const std::vector<std::string>& row : rows) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        os << (i ? "\t" : "") << row[i];
      }
      os << "\n";
    }
    return os.str();
  }
};

/// Write via a temp file and rename, so failures never leave a partial
/// artifact behind.
inline void write_text_file(const std::string& path,
                            const std::string& content) {
  const std::filesystem::path tmp(path + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << content;
    if (!out) throw std::runtime_error(path + ": write failed");
  }
  std::filesystem::rename(tmp, std::filesystem::path(path));
}

inline void write_table(const std::string& path, const Table& table) {
  write_text_file(path, table.to_string());
}

inline Table read_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  Table table;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      table.comments.push_back(line.size() > 2 ? line.substr(2) : "");
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    if (!header_seen) {
      table.columns = std::move(cells);
      header_seen = true;
    } else {
      table.rows.push_back(std::move(cells));
    }
  }
  if (!header_seen) throw std::runtime_error(path + ": no header row");
  return table;
}

}  // namespace cdj
