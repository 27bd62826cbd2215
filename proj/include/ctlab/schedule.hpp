#pragma once

// Discrete noising schedule (beta_t, alpha_t, alpha_bar_t), 1-based in t.
//
//   beta_1 = T^{-c0}
//   beta_t = (c1 log T / T) * min(beta_1 (1 + c1 log T / T)^t, 1),  2 <= t <= T
//   alpha_t = 1 - beta_t,  alpha_bar_t = prod_{k<=t} alpha_k
//
// 1 - alpha_bar_t is stored separately, computed by the cancellation-free
// recursion 1 - alpha_bar_t = beta_t + alpha_t (1 - alpha_bar_{t-1}); with
// beta_1 = T^{-c0} the direct subtraction would lose most digits for small t.

#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctlab/check_report.hpp"
#include "ctlab/csv.hpp"

namespace ctlab {

// A smoothing level: the pair (alpha_bar, 1 - alpha_bar) carried together so
// downstream formulas dividing by 1 - alpha_bar keep full precision.
struct SmoothingLevel {
  double ab;    // alpha_bar, in (0,1)
  double omab;  // 1 - alpha_bar, in (0,1)
};

inline SmoothingLevel level_from_alpha_bar(double alpha_bar) {
  return {alpha_bar, 1.0 - alpha_bar};
}

class Schedule {
 public:
  int T = 0;
  double c0 = 0.0, c1 = 0.0;

  // index 0 unused except alpha_bar_[0] = 1 (so formulas at t=1 can reference
  // alpha_bar_{t-1}).
  double beta(int t) const { return beta_[check(t)]; }
  double alpha(int t) const { return alpha_[check(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[check0(t)]; }
  double one_minus_alpha_bar(int t) const { return omab_[check0(t)]; }
  SmoothingLevel level(int t) const { return {alpha_bar(t), one_minus_alpha_bar(t)}; }

  // alpha_bar_{t-1} - alpha_bar_t, formed without cancellation.
  double alpha_bar_gap(int t) const { return alpha_bar(t - 1) * beta(t); }

  double rate() const { return c1 * std::log(double(T)) / double(T); }
  double log_T() const { return std::log(double(T)); }

  friend Schedule build_schedule(int T, double c0, double c1);

 private:
  int check(int t) const {
    if (t < 1 || t > T) throw std::out_of_range("schedule index t=" + std::to_string(t));
    return t;
  }
  int check0(int t) const {
    if (t < 0 || t > T) throw std::out_of_range("schedule index t=" + std::to_string(t));
    return t;
  }
  std::vector<double> beta_, alpha_, alpha_bar_, omab_;
};

inline void check_index(const Schedule& s, int t, int lowest) {
  if (t < lowest || t > s.T)
    throw std::out_of_range("schedule: t=" + std::to_string(t) + " outside [" +
                            std::to_string(lowest) + "," + std::to_string(s.T) + "]");
}

inline Schedule build_schedule(int T, double c0, double c1) {
  if (T < 2) throw std::invalid_argument("schedule: T must be >= 2");
  if (!(c0 > 0.0) || !(c1 > 0.0)) throw std::invalid_argument("schedule: c0, c1 must be > 0");

  Schedule s;
  s.T = T;
  s.c0 = c0;
  s.c1 = c1;
  s.beta_.assign(std::size_t(T) + 1, 0.0);
  s.alpha_.assign(std::size_t(T) + 1, 0.0);
  s.alpha_bar_.assign(std::size_t(T) + 1, 0.0);
  s.omab_.assign(std::size_t(T) + 1, 0.0);

  const double rate = c1 * std::log(double(T)) / double(T);
  const double beta1 = std::pow(double(T), -c0);
  s.beta_[1] = beta1;

  // growth = beta_1 (1 + rate)^t, advanced incrementally and clamped at 1.
  double growth = beta1 * (1.0 + rate);
  for (int t = 2; t <= T; ++t) {
    growth = std::min(growth * (1.0 + rate), 1.0);
    s.beta_[t] = rate * growth;
  }

  // extended-precision accumulators keep the products good to ~1e-15
  // relative even at T = 1e5
  s.alpha_bar_[0] = 1.0;
  s.omab_[0] = 0.0;
  long double ab_acc = 1.0L, omab_acc = 0.0L;
  for (int t = 1; t <= T; ++t) {
    const double b = s.beta_[t];
    if (!(b > 0.0) || !(b < 1.0))
      throw std::invalid_argument("schedule: beta out of (0,1) at t=" + std::to_string(t) +
                                  " (beta=" + std::to_string(b) + ")");
    const double a = 1.0 - b;
    if (a < 0.5)
      throw std::invalid_argument("schedule: alpha < 1/2 at t=" + std::to_string(t) +
                                  " (alpha=" + std::to_string(a) +
                                  "); (T, c0, c1) inadmissible");
    s.alpha_[t] = a;
    ab_acc *= (long double)(a);
    omab_acc = (t == 1) ? (long double)(b) : (long double)(b) + (long double)(a)*omab_acc;
    s.alpha_bar_[t] = double(ab_acc);
    s.omab_[t] = double(omab_acc);
  }
  return s;
}

// Evaluates the four schedule properties:
//   (1) alpha_t >= 1 - c1 log T / T >= 1/2                       (all t)
//   (2) (1/2) beta_t/(1-ab_t) <= (1/2) beta_t/(alpha_t-ab_t)
//         <= beta_t/(1-ab_{t-1}) <= 4 c1 log T / T               (t >= 2)
//   (3) 1 <= (1-ab_t)/(1-ab_{t-1}) <= 1 + 4 c1 log T / T         (t >= 2)
//   (4) alpha_bar_T <= T^{-terminal_exponent}
// The terminal exponent is configurable; the asymptotic value is far out of
// reach for desk-scale T, so the achieved exponent log(1/ab_T)/log T is
// reported alongside.
inline CheckReport verify_schedule_properties(const Schedule& s, double terminal_exponent) {
  CheckReport rep;
  rep.name = "schedule_properties";
  rep.mode = CheckMode::asserted;

  const double rate = s.rate();
  const char* tag = (s.T == 2) ? " (chain checked at t=2 only)" : "";
  rep.notes = "T=" + std::to_string(s.T) + " c0=" + format_double(s.c0) +
              " c1=" + format_double(s.c1) +
              " terminal_exponent=" + format_double(terminal_exponent) +
              " achieved_exponent=" + format_double(std::log(1.0 / s.alpha_bar(s.T)) / s.log_T()) +
              tag;

  // P1: worst alpha_t vs the lower bound, plus the bound vs 1/2.
  {
    int worst_t = 1;
    for (int t = 2; t <= s.T; ++t)
      if (s.alpha(t) < s.alpha(worst_t)) worst_t = t;
    const double lo = 1.0 - rate;
    bool pass = s.alpha(worst_t) >= lo && lo >= 0.5;
    rep.add("P1 alpha_lower_bound worst_t=" + std::to_string(worst_t),
            std::max(lo, 0.5) - (s.alpha(worst_t) - lo < lo - 0.5 ? (lo - s.alpha(worst_t)) : 0.0),
            s.alpha(worst_t), pass);
    // stored as lhs=bound side, rhs=alpha; the margin column is what matters
    rep.rows.back().lhs = lo;
    rep.rows.back().margin = std::min(s.alpha(worst_t) - lo, lo - 0.5);
  }

  // P2: the three-link chain, reported through its tightest link.
  {
    bool pass = true;
    double worst_margin = std::numeric_limits<double>::infinity();
    int worst_t = 2;
    double worst_lhs = 0, worst_rhs = 0;
    for (int t = 2; t <= s.T; ++t) {
      const double b = s.beta(t);
      const double l1 = 0.5 * b / s.one_minus_alpha_bar(t);
      const double l2 = 0.5 * b / (s.alpha(t) - s.alpha_bar(t));
      const double l3 = b / s.one_minus_alpha_bar(t - 1);
      const double cap = 4.0 * rate;
      const double m = std::min({l2 - l1, l3 - l2, cap - l3});
      if (m < worst_margin) {
        worst_margin = m;
        worst_t = t;
        worst_lhs = l3;
        worst_rhs = cap;
      }
      if (!(l1 <= l2 && l2 <= l3 && l3 <= cap)) pass = false;
    }
    rep.add("P2 step_ratio_chain worst_t=" + std::to_string(worst_t), worst_lhs, worst_rhs, pass);
    rep.rows.back().margin = worst_margin;
  }

  // P3: growth ratio of 1 - alpha_bar.
  {
    bool pass = true;
    double worst_margin = std::numeric_limits<double>::infinity();
    int worst_t = 2;
    double worst_ratio = 1.0;
    for (int t = 2; t <= s.T; ++t) {
      const double ratio = s.one_minus_alpha_bar(t) / s.one_minus_alpha_bar(t - 1);
      const double m = std::min(ratio - 1.0, 1.0 + 4.0 * rate - ratio);
      if (m < worst_margin) {
        worst_margin = m;
        worst_t = t;
        worst_ratio = ratio;
      }
      if (!(ratio >= 1.0 && ratio <= 1.0 + 4.0 * rate)) pass = false;
    }
    rep.add("P3 smoothing_growth worst_t=" + std::to_string(worst_t), worst_ratio,
            1.0 + 4.0 * rate, pass);
    rep.rows.back().margin = worst_margin;
  }

  // P4: terminal smallness of alpha_bar_T.
  {
    const double bound = std::pow(double(s.T), -terminal_exponent);
    rep.add("P4 terminal_alpha_bar", s.alpha_bar(s.T), bound, s.alpha_bar(s.T) <= bound);
  }
  return rep;
}

inline void schedule_to_csv(const Schedule& s, std::ostream& os) {
  CsvWriter csv(os, {"t", "beta", "alpha", "alpha_bar"});
  for (int t = 1; t <= s.T; ++t) {
    csv.field(t).field(s.beta(t)).field(s.alpha(t)).field(s.alpha_bar(t));
    csv.end_row();
  }
}

}  // namespace ctlab
