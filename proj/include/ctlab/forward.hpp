#pragma once

// Forward-process samplers: marginals and the two joint couplings of
// (X_t, X_{t-1}).
//
// The shared-noise coupling plugs one draw of (X0, Z) into both marginal
// formulas; this is the coupling of the training objective and of the
// conditional-mean identity. The Markov coupling runs the chain one step,
// x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) W with fresh W; this is the
// conditional Gaussian used by the typical-event diagnostic. The two share
// t-marginals but have different joint laws, so they are kept as separate
// named samplers.

#include <stdexcept>

#include "ctlab/schedule.hpp"
#include "ctlab/targets.hpp"

namespace ctlab {

struct CoupledPair {
  Vec x_t;
  Vec x_tm1;
  Vec x0;
  Vec z;  // shared Gaussian draw, or the fresh innovation for the Markov coupling
};

inline Vec marginal_point(const Schedule& s, int t, const Vec& x0, const Vec& z) {
  return std::sqrt(s.alpha_bar(t)) * x0 + std::sqrt(s.one_minus_alpha_bar(t)) * z;
}

inline Mat sample_marginal(const Target& target, const Schedule& s, int t, int n,
                           RngStream& rng) {
  check_index(s, t, 1);
  const int d = dim(target);
  Mat out(n, d);
  for (int i = 0; i < n; ++i) {
    const Vec x0 = sample_x0_one(target, rng);
    const Vec z = rng.normal_vector(d);
    out.row(i) = marginal_point(s, t, x0, z).transpose();
  }
  return out;
}

inline std::vector<CoupledPair> sample_shared_noise_pair(const Target& target,
                                                         const Schedule& s, int t, int n,
                                                         RngStream& rng) {
  check_index(s, t, 2);
  const int d = dim(target);
  std::vector<CoupledPair> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    CoupledPair p;
    p.x0 = sample_x0_one(target, rng);
    p.z = rng.normal_vector(d);
    p.x_t = marginal_point(s, t, p.x0, p.z);
    p.x_tm1 = marginal_point(s, t - 1, p.x0, p.z);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<CoupledPair> sample_markov_pair(const Target& target, const Schedule& s,
                                                   int t, int n, RngStream& rng) {
  check_index(s, t, 2);
  const int d = dim(target);
  std::vector<CoupledPair> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) {
    CoupledPair p;
    p.x0 = sample_x0_one(target, rng);
    const Vec z_prev = rng.normal_vector(d);
    p.x_tm1 = marginal_point(s, t - 1, p.x0, z_prev);
    p.z = rng.normal_vector(d);  // fresh innovation
    p.x_t = std::sqrt(s.alpha(t)) * p.x_tm1 + std::sqrt(s.beta(t)) * p.z;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace ctlab
