#pragma once

// Minimal CSV emission. Header row mandatory, RFC 4180 quoting, doubles
// printed with %.17g so that re-running with the same seed reproduces files
// byte for byte.

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctlab {

inline std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

class CsvWriter {
 public:
  CsvWriter(std::ostream& os, std::vector<std::string> header) : os_(os), ncols_(header.size()) {
    write_row_strings(header);
  }

  CsvWriter& field(const std::string& s) {
    row_.push_back(s);
    return *this;
  }
  CsvWriter& field(double v) { return field(format_double(v)); }
  CsvWriter& field(long long v) { return field(std::to_string(v)); }
  CsvWriter& field(int v) { return field(std::to_string(v)); }
  CsvWriter& field(std::size_t v) { return field(std::to_string(v)); }

  void end_row() {
    if (row_.size() != ncols_)
      throw std::logic_error("csv row width " + std::to_string(row_.size()) +
                             " != header width " + std::to_string(ncols_));
    write_row_strings(row_);
    row_.clear();
  }

 private:
  void write_row_strings(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os_ << ',';
      os_ << csv_quote(cells[i]);
    }
    os_ << '\n';
  }
  std::ostream& os_;
  std::size_t ncols_;
  std::vector<std::string> row_;
};

// Writes to a temp file in the same directory, then renames into place.
class AtomicFileWriter {
 public:
  explicit AtomicFileWriter(const std::string& path) : path_(path), tmp_(path + ".tmp") {
    os_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!os_) throw std::runtime_error("cannot open for writing: " + tmp_);
  }
  std::ostream& stream() { return os_; }
  void commit() {
    os_.flush();
    os_.close();
    if (std::rename(tmp_.c_str(), path_.c_str()) != 0)
      throw std::runtime_error("cannot rename " + tmp_ + " -> " + path_);
  }

 private:
  std::string path_, tmp_;
  std::ofstream os_;
};

}  // namespace ctlab
