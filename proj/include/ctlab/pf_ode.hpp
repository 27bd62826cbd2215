#pragma once

// Probability-flow ODE in the alpha_bar parameterization.
//
// The flow g(ab) from a time-t point toward the data end (increasing ab) is
// integrated in the rescaled variable u = g / sqrt(ab), which satisfies
//
//   du/dab = score_ab(sqrt(ab) u) / (2 ab^{3/2})
//
// removing the stiff linear term of the raw equation. Integration runs on a
// uniform ab grid per call; multi-step maps are compositions of single-step
// integrations through every intermediate schedule node, so endpoints land
// exactly on schedule levels.

#include <functional>
#include <stdexcept>
#include <string>

#include "ctlab/schedule.hpp"
#include "ctlab/score.hpp"

namespace ctlab {

enum class Integrator { rk4, heun, euler };

struct FlowConfig {
  int substeps = 8;  // per integration interval
  Integrator integrator = Integrator::rk4;
};

inline std::string integrator_name(Integrator i) {
  switch (i) {
    case Integrator::rk4: return "rk4";
    case Integrator::heun: return "heun";
    case Integrator::euler: return "euler";
  }
  return "?";
}
inline Integrator integrator_from_name(const std::string& s) {
  if (s == "rk4") return Integrator::rk4;
  if (s == "heun") return Integrator::heun;
  if (s == "euler") return Integrator::euler;
  throw std::invalid_argument("unknown integrator: " + s);
}

struct FlowSolution {
  int start_t = 0;
  int end_t = 0;  // -1 when the endpoint is an off-node alpha_bar
  Vec input;
  Vec output;
  std::optional<Mat> jacobian;
};

namespace detail {
// One integration leg from level `from` to level `to` (to.ab >= from.ab).
// Levels along the grid keep the (ab, omab) pair consistent by construction.
inline Vec integrate_leg(const Target& target, SmoothingLevel from, SmoothingLevel to,
                         const Vec& x, const FlowConfig& cfg) {
  if (to.ab < from.ab - 1e-15)
    throw std::invalid_argument("flow: end alpha_bar below start alpha_bar");
  Vec u = x / std::sqrt(from.ab);
  const double span = to.ab - from.ab;
  if (span <= 0.0) return x;
  const int n = std::max(cfg.substeps, 1);
  const double h = span / double(n);

  auto level_at = [&](double offset) -> SmoothingLevel {
    return {from.ab + offset, from.omab - offset};
  };
  auto rhs = [&](const Vec& uu, SmoothingLevel lv) -> Vec {
    return score(target, lv, std::sqrt(lv.ab) * uu) / (2.0 * lv.ab * std::sqrt(lv.ab));
  };

  for (int i = 0; i < n; ++i) {
    const double off = h * double(i);
    const SmoothingLevel l0 = level_at(off);
    switch (cfg.integrator) {
      case Integrator::euler: {
        u += h * rhs(u, l0);
        break;
      }
      case Integrator::heun: {
        const Vec k1 = rhs(u, l0);
        const Vec k2 = rhs(u + h * k1, level_at(off + h));
        u += 0.5 * h * (k1 + k2);
        break;
      }
      case Integrator::rk4: {
        const SmoothingLevel lh = level_at(off + 0.5 * h);
        const SmoothingLevel l1 = level_at(off + h);
        const Vec k1 = rhs(u, l0);
        const Vec k2 = rhs(u + 0.5 * h * k1, lh);
        const Vec k3 = rhs(u + 0.5 * h * k2, lh);
        const Vec k4 = rhs(u + h * k3, l1);
        u += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        break;
      }
    }
    if (!u.allFinite())
      throw std::runtime_error("flow: non-finite state at ab=" +
                               std::to_string(from.ab + off + h) + " (start ab=" +
                               std::to_string(from.ab) + ", substep " + std::to_string(i) + ")");
  }
  return std::sqrt(to.ab) * u;
}
}  // namespace detail

// g_t(x, ab_end): integrate from the level of node t to ab_end in a single
// uniform-grid leg.
inline Vec integrate_flow(const Target& target, const Schedule& s, int t, const Vec& x,
                          double ab_end, const FlowConfig& cfg = {}) {
  check_index(s, t, 1);
  const SmoothingLevel from = s.level(t);
  if (!(ab_end < 1.0)) throw std::invalid_argument("flow: ab_end must be < 1");
  if (ab_end < from.ab) throw std::invalid_argument("flow: ab_end below alpha_bar_t");
  const SmoothingLevel to{ab_end, from.omab - (ab_end - from.ab)};
  return detail::integrate_leg(target, from, to, x, cfg);
}

// One backward step, node t -> node t-1.
inline Vec flow_one_step(const Target& target, const Schedule& s, int t, const Vec& x,
                         const FlowConfig& cfg = {}) {
  check_index(s, t, 2);
  return detail::integrate_leg(target, s.level(t), s.level(t - 1), x, cfg);
}

// Composition node t -> node k (k <= t), stepping through every intermediate
// node. flow(t, 1, .) realizes the map to the time-1 marginal.
inline Vec flow(const Target& target, const Schedule& s, int t, int k, const Vec& x,
                const FlowConfig& cfg = {}) {
  check_index(s, t, 1);
  if (k < 1 || k > t) throw std::out_of_range("flow: need 1 <= k <= t");
  Vec y = x;
  for (int step = t; step > k; --step) y = flow_one_step(target, s, step, y, cfg);
  return y;
}

// Flow map with its provenance, optionally carrying a finite-difference
// Jacobian estimate.
inline Mat flow_jacobian_fd(const Target& target, const Schedule& s, int t, int k,
                            const Vec& x, const FlowConfig& cfg, double base_step);

inline FlowSolution solve_flow(const Target& target, const Schedule& s, int t, int k,
                               const Vec& x, const FlowConfig& cfg = {},
                               bool with_jacobian = false) {
  FlowSolution sol;
  sol.start_t = t;
  sol.end_t = k;
  sol.input = x;
  sol.output = flow(target, s, t, k, x, cfg);
  if (with_jacobian) sol.jacobian = flow_jacobian_fd(target, s, t, k, x, cfg, 1e-5);
  return sol;
}

// Central finite-difference Jacobian of flow(t, k, .).
inline Mat flow_jacobian_fd(const Target& target, const Schedule& s, int t, int k,
                            const Vec& x, const FlowConfig& cfg = {},
                            double base_step = 1e-5) {
  const int d = int(x.size());
  const double h = base_step * (1.0 + x.norm());
  Mat jac(d, d);
  for (int j = 0; j < d; ++j) {
    Vec xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    jac.col(j) = (flow(target, s, t, k, xp, cfg) - flow(target, s, t, k, xm, cfg)) / (2.0 * h);
  }
  return jac;
}

inline double operator_norm(const Mat& m) {
  return m.jacobiSvd().singularValues()[0];
}

}  // namespace ctlab
