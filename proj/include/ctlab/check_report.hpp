#pragma once

// Structured results for numerical checks. A report carries one row per
// tested configuration with the computed left/right hand sides, so a verdict
// can be recomputed from the CSV alone. Report-only checks never fail the
// run; asserted checks do.

#include <algorithm>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "ctlab/csv.hpp"

namespace ctlab {

enum class CheckMode { asserted, report_only };

struct CheckRow {
  std::string config;  // "t=5 k=1 n=10000" style provenance
  double lhs = 0.0;
  double rhs = 0.0;
  double margin = 0.0;  // rhs - lhs unless noted otherwise
  bool pass = true;
};

struct CheckReport {
  std::string name;
  CheckMode mode = CheckMode::asserted;
  std::string notes;  // tolerances, estimator names, integrator settings
  std::vector<CheckRow> rows;

  void add(std::string config, double lhs, double rhs, bool pass) {
    rows.push_back({std::move(config), lhs, rhs, rhs - lhs, pass});
  }

  bool all_rows_pass() const {
    return std::all_of(rows.begin(), rows.end(), [](const CheckRow& r) { return r.pass; });
  }

  // Asserted + any failing row => the run fails.
  bool failed() const { return mode == CheckMode::asserted && !all_rows_pass(); }

  const CheckRow* worst_row() const {
    const CheckRow* w = nullptr;
    for (const auto& r : rows)
      if (!w || r.margin < w->margin) w = &r;
    return w;
  }

  void to_csv(std::ostream& os) const {
    CsvWriter csv(os, {"check", "mode", "config", "lhs", "rhs", "margin", "pass"});
    for (const auto& r : rows) {
      csv.field(name)
          .field(mode == CheckMode::asserted ? "asserted" : "report_only")
          .field(r.config)
          .field(r.lhs)
          .field(r.rhs)
          .field(r.margin)
          .field(r.pass ? "1" : "0");
      csv.end_row();
    }
  }

  void summary(std::ostream& os) const {
    os << "check: " << name << "  ["
       << (mode == CheckMode::asserted ? "asserted" : "report-only") << "]\n";
    if (!notes.empty()) os << "  notes: " << notes << "\n";
    os << "  rows: " << rows.size() << "  pass: " << (all_rows_pass() ? "yes" : "NO");
    if (const CheckRow* w = worst_row()) {
      os << "  worst: " << w->config << " lhs=" << w->lhs << " rhs=" << w->rhs
         << " margin=" << w->margin;
    }
    os << "\n";
  }
};

}  // namespace ctlab
