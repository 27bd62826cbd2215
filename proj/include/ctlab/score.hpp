#pragma once

// Score of the smoothed law, its Jacobian, the posterior-moment matrix J, and
// a Monte-Carlo cross-estimator.
//
// With N = x - sqrt(ab) X0 and posterior moments m = E[N|x],
// S = E[N N^T|x]:
//
//   score(x)          = -m / (1-ab)
//   score_jacobian(x) = -I/(1-ab) - (m m^T - S) / (1-ab)^2
//   J(x)              =  I + (m m^T - S) / (1-ab)
//
// so J = -(1-ab) * score_jacobian identically; the two are computed through
// separate code paths and the identity is a wiring check. The independent
// oracle for the Jacobian is central finite differences of score().

#include <optional>

#include "ctlab/schedule.hpp"
#include "ctlab/targets.hpp"

namespace ctlab {

inline Vec score(const Target& target, SmoothingLevel lv, const Vec& x) {
  if (!x.allFinite()) throw std::invalid_argument("score: non-finite query point");
  const Vec m = posterior_mean_x0(target, lv, x);
  return (std::sqrt(lv.ab) * m - x) / lv.omab;
}
inline Vec score(const Target& target, double alpha_bar, const Vec& x) {
  return score(target, level_from_alpha_bar(alpha_bar), x);
}

inline Mat score_jacobian(const Target& target, SmoothingLevel lv, const Vec& x) {
  const NoiseMoments nm = posterior_noise_moments(target, lv, x);
  const int d = int(x.size());
  Mat jac = -(1.0 / lv.omab) * Mat::Identity(d, d);
  jac -= (nm.mean * nm.mean.transpose() - nm.second_moment) / (lv.omab * lv.omab);
  return jac;
}
inline Mat score_jacobian(const Target& target, double alpha_bar, const Vec& x) {
  return score_jacobian(target, level_from_alpha_bar(alpha_bar), x);
}

// J matrix from posterior moments (identity matrix plus the normalized
// mean-outer-product minus second-moment gap).
inline Mat posterior_moment_jacobian(const Target& target, const Schedule& s, int t,
                                     const Vec& x) {
  const SmoothingLevel lv = s.level(t);
  const NoiseMoments nm = posterior_noise_moments(target, lv, x);
  const int d = int(x.size());
  return Mat::Identity(d, d) +
         (nm.mean * nm.mean.transpose() - nm.second_moment) / lv.omab;
}

struct ScoreEvaluation {
  Vec value;
  std::optional<Mat> jacobian;
  std::optional<Mat> j_matrix;
};

inline ScoreEvaluation evaluate_score(const Target& target, const Schedule& s, int t,
                                      const Vec& x, bool with_jacobian = true,
                                      bool with_j_matrix = true) {
  ScoreEvaluation ev;
  ev.value = score(target, s.level(t), x);
  if (with_jacobian) ev.jacobian = score_jacobian(target, s.level(t), x);
  if (with_j_matrix) ev.j_matrix = posterior_moment_jacobian(target, s, t, x);
  return ev;
}

// Central finite differences of score(); the step scales with 1 + |x|.
inline Mat score_jacobian_fd(const Target& target, SmoothingLevel lv, const Vec& x,
                             double base_step = 1e-5) {
  const int d = int(x.size());
  const double h = base_step * (1.0 + x.norm());
  Mat jac(d, d);
  for (int j = 0; j < d; ++j) {
    Vec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    jac.col(j) = (score(target, lv, xp) - score(target, lv, xm)) / (2.0 * h);
  }
  return jac;
}

// Self-normalized importance-sampling estimate of
// E[-Z / sqrt(1-ab) | X(ab) = x]: draw X0 ~ p_data, weight by the Gaussian
// kernel N(x; sqrt(ab) X0, (1-ab) I), average the implied -Z/sqrt(1-ab).
struct McScore {
  Vec estimate;
  Vec standard_error;  // per coordinate
  double effective_sample_size = 0.0;
  bool degenerate = false;
};

inline McScore score_mc_estimate(const Target& target, SmoothingLevel lv, const Vec& x,
                                 int n, RngStream& rng) {
  if (n < 1) throw std::invalid_argument("score_mc_estimate: n must be >= 1");
  const int d = int(x.size());
  const double sab = std::sqrt(lv.ab);
  const double somab = std::sqrt(lv.omab);

  Mat values(n, d);
  Vec logw(n);
  double max_logw = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const Vec x0 = sample_x0_one(target, rng);
    const Vec z = (x - sab * x0) / somab;  // implied by the pair (x, x0)
    values.row(i) = (-z / somab).transpose();
    logw[i] = -0.5 * z.squaredNorm();
    max_logw = std::max(max_logw, logw[i]);
  }

  McScore r;
  r.estimate = Vec::Zero(d);
  r.standard_error = Vec::Zero(d);
  if (max_logw < -700.0) {
    // every kernel underflowed; the query point is incompatible with the level
    r.degenerate = true;
    r.standard_error = Vec::Constant(d, std::numeric_limits<double>::infinity());
    return r;
  }
  Vec w = (logw.array() - max_logw).exp().matrix();
  const double wsum = w.sum();
  const double ess = wsum * wsum / w.squaredNorm();
  r.effective_sample_size = ess;
  w /= wsum;
  r.estimate = values.transpose() * w;
  // weighted variance of the integrand around the estimate, scaled by 1/ESS
  Vec var = Vec::Zero(d);
  for (int i = 0; i < n; ++i) {
    const Vec dif = values.row(i).transpose() - r.estimate;
    var += w[i] * dif.cwiseProduct(dif);
  }
  r.standard_error = (var / std::max(ess, 1.0)).cwiseSqrt();
  // a full-ESS tiny sample is exact-by-support, not degenerate
  r.degenerate = ess < std::min(10.0, 0.999 * double(n));
  return r;
}

}  // namespace ctlab
