#pragma once

// Recursive consistency training.
//
// f_1 is the identity. For t = 2..T, f_t is fit to minimize the empirical
// squared loss || f(x_t) - f_{t-1}(x_{t-1}) ||^2 over shared-noise pairs
// (one (X0, Z) draw plugged into both marginal formulas). The exact
// regression target is the conditional expectation
//
//   f_t*(x) = E[ f_{t-1}(X_{t-1}) | X_t = x ]
//
// under that coupling.
//
// Function classes:
//   exact_oracle    - f_t IS f_t* of the previously materialized model. Each
//                     step is materialized in closed form where the target
//                     admits it: affine maps for point masses and
//                     single-component Gaussians (the conditional-expectation
//                     operator preserves affinity there), and
//                     "scaled identity + 1-D profile along the atom axis" for
//                     atomic targets with collinear atoms (the posterior
//                     weights depend on x only through the axis projection).
//                     The profile is tabulated on an adaptive grid with cubic
//                     Hermite interpolation; per-atom preimages feed the
//                     previous materialized model, so evaluation cost does
//                     not grow with depth.
//   knn_kernel      - k-nearest-neighbor averaging (or Nadaraya-Watson with
//                     a Gaussian kernel when bandwidth > 0 and k == 0).
//   linear_features - least squares on features (1, x).

#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <variant>

#include "ctlab/forward.hpp"
#include "ctlab/schedule.hpp"
#include "ctlab/targets.hpp"

namespace ctlab {

// ---------------------------------------------------------------------------
// Models

struct AffineMapModel {
  Mat A;
  Vec b;
  Vec operator()(const Vec& x) const { return A * x + b; }
  static AffineMapModel identity(int d) { return {Mat::Identity(d, d), Vec::Zero(d)}; }
  bool is_scaled_identity(double* gamma = nullptr) const {
    const int d = int(A.rows());
    const double g = A(0, 0);
    if (!(A - g * Mat::Identity(d, d)).isZero(0.0)) return false;
    if (gamma) *gamma = g;
    return true;
  }
};

// f(x) = gamma * x + h(axis . x), h tabulated on an adaptive sorted grid with
// cubic Hermite interpolation and linear extrapolation beyond the ends.
struct AxisProfileModel {
  double gamma = 0.0;
  Vec axis;
  std::vector<double> u;  // sorted nodes
  Mat values;             // node values of h, one row per node
  Mat slopes;             // Hermite slopes
  double build_tolerance = 0.0;  // requested materialization tolerance

  Vec profile(double uq) const {
    const int m = int(u.size());
    if (uq <= u.front())
      return values.row(0).transpose() + (uq - u.front()) * slopes.row(0).transpose();
    if (uq >= u.back())
      return values.row(m - 1).transpose() + (uq - u.back()) * slopes.row(m - 1).transpose();
    const int hi = int(std::upper_bound(u.begin(), u.end(), uq) - u.begin());
    const int lo = hi - 1;
    const double h = u[hi] - u[lo];
    const double s = (uq - u[lo]) / h;
    const double s2 = s * s, s3 = s2 * s;
    const double h00 = 2 * s3 - 3 * s2 + 1;
    const double h10 = s3 - 2 * s2 + s;
    const double h01 = -2 * s3 + 3 * s2;
    const double h11 = s3 - s2;
    return h00 * values.row(lo).transpose() + h * h10 * slopes.row(lo).transpose() +
           h01 * values.row(hi).transpose() + h * h11 * slopes.row(hi).transpose();
  }

  Vec operator()(const Vec& x) const { return gamma * x + profile(axis.dot(x)); }
};

struct KnnModel {
  int k = 1;
  double bandwidth = 0.0;  // NW kernel regression when k == 0
  Mat X;                   // batch x d features (x_t)
  Mat Y;                   // batch x d targets (f_prev(x_{t-1}))

  Vec operator()(const Vec& x) const {
    const int m = int(X.rows());
    Vec d2(m);
    for (int i = 0; i < m; ++i) d2[i] = (X.row(i).transpose() - x).squaredNorm();
    if (k > 0) {
      const int kk = std::min(k, m);
      std::vector<int> idx(m);
      std::iota(idx.begin(), idx.end(), 0);
      std::nth_element(idx.begin(), idx.begin() + kk - 1, idx.end(),
                       [&](int a, int b) { return d2[a] < d2[b]; });
      Vec out = Vec::Zero(Y.cols());
      for (int i = 0; i < kk; ++i) out += Y.row(idx[i]).transpose();
      return out / double(kk);
    }
    // Nadaraya-Watson, log-domain weights
    Vec logw = (-d2 / (2.0 * bandwidth * bandwidth)).eval();
    const double mx = logw.maxCoeff();
    if (mx < -700.0) {
      // all kernels underflow; fall back to the nearest point
      int best = 0;
      d2.minCoeff(&best);
      return Y.row(best).transpose();
    }
    const Vec w = (logw.array() - mx).exp().matrix();
    return (Y.transpose() * w) / w.sum();
  }
};

using Model = std::variant<AffineMapModel, AxisProfileModel, KnnModel>;

inline Vec evaluate(const Model& m, const Vec& x) {
  return std::visit([&](const auto& f) { return f(x); }, m);
}

// ---------------------------------------------------------------------------
// Regressor specification

enum class RegressorKind { exact_oracle, knn_kernel, linear_features };

inline std::string regressor_name(RegressorKind k) {
  switch (k) {
    case RegressorKind::exact_oracle: return "exact_oracle";
    case RegressorKind::knn_kernel: return "knn_kernel";
    case RegressorKind::linear_features: return "linear_features";
  }
  return "?";
}
inline RegressorKind regressor_from_name(const std::string& s) {
  if (s == "exact_oracle") return RegressorKind::exact_oracle;
  if (s == "knn_kernel") return RegressorKind::knn_kernel;
  if (s == "linear_features") return RegressorKind::linear_features;
  throw std::invalid_argument("unknown regressor kind: " + s);
}

struct RegressorSpec {
  RegressorKind kind = RegressorKind::exact_oracle;
  int training_batch = 10000;
  int k = 16;              // knn neighbor count; 0 selects the kernel mode
  double bandwidth = 0.0;  // kernel width for knn_kernel with k == 0
  double ridge = 1e-12;
  double profile_tolerance = 1e-10;  // exact_oracle materialization tolerance
  int profile_max_nodes = 300000;

  void validate() const {
    if (training_batch < 1) throw std::invalid_argument("regressor: batch must be >= 1");
    if (kind == RegressorKind::knn_kernel && k == 0 && !(bandwidth > 0.0))
      throw std::invalid_argument("regressor: kernel mode needs bandwidth > 0");
    if (ridge < 0.0) throw std::invalid_argument("regressor: ridge must be >= 0");
  }

  std::string descriptor() const {
    return regressor_name(kind) + " batch=" + std::to_string(training_batch) +
           " k=" + std::to_string(k) + " bandwidth=" + format_double(bandwidth) +
           " ridge=" + format_double(ridge);
  }
};

// ---------------------------------------------------------------------------
// Exact regression target f_t*

namespace detail {

// Probabilists' Gauss-Hermite rule (expectation against N(0,1)) via the
// Golub-Welsch tridiagonal eigenproblem. Cached per node count; the cache is
// thread-local so concurrent sweep cells never share mutable state.
inline const std::pair<Vec, Vec>& gauss_hermite(int n) {
  thread_local std::map<int, std::pair<Vec, Vec>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  Mat J = Mat::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double off = std::sqrt(double(i));
    J(i, i - 1) = off;
    J(i - 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(J);
  Vec nodes = es.eigenvalues();
  Vec weights(n);
  for (int i = 0; i < n; ++i) {
    const double v0 = es.eigenvectors()(0, i);
    weights[i] = v0 * v0;
  }
  return cache.emplace(n, std::make_pair(std::move(nodes), std::move(weights))).first->second;
}

// Shared-noise preimage geometry for one backward step: conditioning on
// X_t = x and component i, X_{t-1} = r x + shift_scale * c_i (+ Gaussian
// spread for mixture targets).
struct StepGeometry {
  double r;            // sqrt(omab_{t-1} / omab_t)
  double shift_scale;  // sqrt(ab_{t-1}) - r sqrt(ab_t)
};

inline StepGeometry step_geometry(const Schedule& s, int t) {
  const SmoothingLevel cur = s.level(t);
  const SmoothingLevel prev = s.level(t - 1);
  StepGeometry g;
  g.r = std::sqrt(prev.omab / cur.omab);
  g.shift_scale = std::sqrt(prev.ab) - g.r * std::sqrt(cur.ab);
  return g;
}

}  // namespace detail

// E[f_prev(X_{t-1}) | X_t = x] under the shared-noise coupling, exact for
// atomic targets. For Gaussian mixtures the conditional law per component is
// Gaussian; affine f_prev integrates in closed form and a general callable
// goes through tensor Gauss-Hermite quadrature (exact for affine integrands,
// spectrally accurate otherwise; d <= 3).
inline Vec exact_regression_target(const Target& target, const Schedule& s, int t,
                                   const std::function<Vec(const Vec&)>& f_prev, const Vec& x,
                                   int gh_nodes = 24) {
  check_index(s, t, 2);
  const detail::StepGeometry g = detail::step_geometry(s, t);
  const SmoothingLevel lv = s.level(t);
  const SmoothedPosterior post = posterior(target, lv, x);
  if (post.degenerate && !std::holds_alternative<AtomicTarget>(target))
    throw std::runtime_error("exact_regression_target: degenerate posterior at t=" +
                             std::to_string(t));

  if (const auto* at = std::get_if<AtomicTarget>(&target)) {
    if (post.degenerate) {
      // weights remain well-defined in the log domain; proceed (they are a
      // valid softmax even when each kernel underflows in linear scale)
    }
    Vec out = Vec::Zero(at->dim());
    for (int i = 0; i < at->components(); ++i) {
      const Vec pre = g.r * x + g.shift_scale * at->atoms.row(i).transpose();
      out += post.weights[i] * f_prev(pre);
    }
    return out;
  }

  const auto& gm = std::get<GaussianMixtureTarget>(target);
  const int d = gm.dim();
  if (d > 3) throw std::invalid_argument("exact_regression_target: mixture path supports d <= 3");
  const double sab = std::sqrt(lv.ab);
  const auto& [nodes, wts] = detail::gauss_hermite(gh_nodes);
  Vec out = Vec::Zero(d);
  for (int i = 0; i < gm.components(); ++i) {
    const double vi = lv.ab * gm.variances[i] + lv.omab;
    const Vec mi = gm.means.row(i).transpose() +
                   (sab * gm.variances[i] / vi) * (x - sab * gm.means.row(i).transpose());
    const double psi = std::sqrt(gm.variances[i] * lv.omab / vi);  // posterior sd of X0
    const Vec center = g.r * x + g.shift_scale * mi;
    const double spread = std::abs(g.shift_scale) * psi;
    // tensor quadrature over the conditional Gaussian of X_{t-1}
    Vec comp = Vec::Zero(d);
    std::vector<int> idx(d, 0);
    while (true) {
      double w = 1.0;
      Vec xi(d);
      for (int j = 0; j < d; ++j) {
        w *= wts[idx[j]];
        xi[j] = nodes[idx[j]];
      }
      comp += w * f_prev(center + spread * xi);
      int j = 0;
      for (; j < d; ++j) {
        if (++idx[j] < gh_nodes) break;
        idx[j] = 0;
      }
      if (j == d) break;
    }
    out += post.weights[i] * comp;
  }
  return out;
}

inline Vec exact_regression_target(const Target& target, const Schedule& s, int t,
                                   const Model& f_prev, const Vec& x) {
  // Affine f_prev on a Gaussian mixture integrates without quadrature.
  if (const auto* aff = std::get_if<AffineMapModel>(&f_prev)) {
    if (const auto* gm = std::get_if<GaussianMixtureTarget>(&target)) {
      const detail::StepGeometry g = detail::step_geometry(s, t);
      const SmoothingLevel lv = s.level(t);
      const SmoothedPosterior post = posterior(target, lv, x);
      const double sab = std::sqrt(lv.ab);
      Vec out = Vec::Zero(gm->dim());
      for (int i = 0; i < gm->components(); ++i) {
        const double vi = lv.ab * gm->variances[i] + lv.omab;
        const Vec mi = gm->means.row(i).transpose() +
                       (sab * gm->variances[i] / vi) * (x - sab * gm->means.row(i).transpose());
        out += post.weights[i] * ((*aff)(g.r * x + g.shift_scale * mi));
      }
      return out;
    }
  }
  return exact_regression_target(
      target, s, t, [&](const Vec& y) { return evaluate(f_prev, y); }, x);
}

// ---------------------------------------------------------------------------
// Atom-axis structure detection (for exact_oracle materialization)

namespace detail {

struct AtomAxis {
  int affine_dim = 0;  // 0: single point, 1: collinear, 2: general position
  Vec axis;            // unit vector spanning the atom differences (affine_dim == 1)
};

inline AtomAxis atom_axis(const AtomicTarget& t) {
  AtomAxis ax;
  const int n = t.components();
  const int d = t.dim();
  ax.axis = Vec::Zero(d);
  if (n == 1) return ax;
  Mat diffs(n - 1, d);
  for (int i = 1; i < n; ++i) diffs.row(i - 1) = t.atoms.row(i) - t.atoms.row(0);
  Eigen::JacobiSVD<Mat> svd(diffs, Eigen::ComputeThinV);
  const double s0 = svd.singularValues()[0];
  int rank = 0;
  for (int i = 0; i < svd.singularValues().size(); ++i)
    if (svd.singularValues()[i] > 1e-12 * s0) ++rank;
  ax.affine_dim = rank;
  if (rank == 1) {
    ax.axis = svd.matrixV().col(0);
    // deterministic sign: first nonzero coordinate positive
    for (int i = 0; i < d; ++i) {
      if (std::abs(ax.axis[i]) > 1e-14) {
        if (ax.axis[i] < 0) ax.axis = -ax.axis;
        break;
      }
    }
  }
  return ax;
}

// Adaptive tabulation of F on [lo, hi]: recursively split segments until the
// midpoint linear-interpolation error is below tol/4 (the cubic Hermite used
// at evaluation time is strictly more accurate on the final grid). Probes at
// 1/4, 1/2, 3/4 guard against narrow features hiding between endpoints.
struct ProfileBuild {
  std::vector<double> u;
  std::vector<Vec> v;
  bool node_cap_hit = false;
};

inline void refine_segment(const std::function<Vec(double)>& F, double u0, const Vec& v0,
                           double u1, const Vec& v1, double tol, int depth, int max_depth,
                           ProfileBuild& out, int max_nodes) {
  if (int(out.u.size()) >= max_nodes) {
    out.node_cap_hit = true;
    out.u.push_back(u1);
    out.v.push_back(v1);
    return;
  }
  // probe at 1/4, 1/2, 3/4 and test the quartic difference: the cubic through
  // the endpoints and the outer probes predicts the midpoint with the same
  // h^4 f'''' scale as the final interpolant. The safety factor absorbs the
  // slope-estimation term of the non-uniform Hermite evaluation.
  const Vec q1 = F(u0 + 0.25 * (u1 - u0));
  const Vec vm = F(u0 + 0.5 * (u1 - u0));
  const Vec q3 = F(u0 + 0.75 * (u1 - u0));
  const double quartic =
      (vm - (-v0 + 4.0 * q1 + 4.0 * q3 - v1) / 6.0).cwiseAbs().maxCoeff();
  const bool ok = depth >= 1 && quartic <= tol / 50.0;
  if (ok || depth >= max_depth) {
    // keep the probes; they are already paid for and halve the local spacing
    out.u.push_back(u0 + 0.25 * (u1 - u0));
    out.v.push_back(q1);
    out.u.push_back(u0 + 0.5 * (u1 - u0));
    out.v.push_back(vm);
    out.u.push_back(u0 + 0.75 * (u1 - u0));
    out.v.push_back(q3);
    out.u.push_back(u1);
    out.v.push_back(v1);
    return;
  }
  const double um = 0.5 * (u0 + u1);
  refine_segment(F, u0, v0, um, vm, tol, depth + 1, max_depth, out, max_nodes);
  refine_segment(F, um, vm, u1, v1, tol, depth + 1, max_depth, out, max_nodes);
}

inline AxisProfileModel build_axis_profile(const std::function<Vec(double)>& F, double gamma,
                                           const Vec& axis, double lo, double hi,
                                           const std::vector<double>& seeds, double tol,
                                           int max_nodes, int d) {
  // initial grid: uniform nodes plus sorted in-range seeds
  std::vector<double> init;
  const int uniform_n = 129;
  for (int i = 0; i < uniform_n; ++i)
    init.push_back(lo + (hi - lo) * double(i) / double(uniform_n - 1));
  for (double sd : seeds)
    if (sd > lo && sd < hi) init.push_back(sd);
  std::sort(init.begin(), init.end());
  init.erase(std::unique(init.begin(), init.end(),
                         [&](double a, double b) { return std::abs(a - b) < 1e-13 * (hi - lo); }),
             init.end());

  ProfileBuild pb;
  pb.u.reserve(4096);
  pb.u.push_back(init[0]);
  pb.v.push_back(F(init[0]));
  for (std::size_t i = 1; i < init.size(); ++i) {
    const Vec vi = F(init[i]);
    refine_segment(F, pb.u.back(), pb.v.back(), init[i], vi, tol, 0, 42, pb, max_nodes);
  }
  if (pb.node_cap_hit)
    std::cerr << "[ctlab] warning: axis profile hit node cap " << max_nodes
              << "; materialization tolerance not certified\n";

  AxisProfileModel m;
  m.gamma = gamma;
  m.axis = axis;
  m.build_tolerance = tol;
  const int n = int(pb.u.size());
  m.u = std::move(pb.u);
  m.values.resize(n, d);
  for (int i = 0; i < n; ++i) m.values.row(i) = pb.v[i].transpose();
  m.slopes.resize(n, d);
  for (int i = 0; i < n; ++i) {
    if (i == 0) {
      m.slopes.row(0) = (m.values.row(1) - m.values.row(0)) / (m.u[1] - m.u[0]);
    } else if (i == n - 1) {
      m.slopes.row(i) = (m.values.row(i) - m.values.row(i - 1)) / (m.u[i] - m.u[i - 1]);
    } else {
      const double hl = m.u[i] - m.u[i - 1];
      const double hr = m.u[i + 1] - m.u[i];
      const Eigen::RowVectorXd dl = (m.values.row(i) - m.values.row(i - 1)) / hl;
      const Eigen::RowVectorXd dr = (m.values.row(i + 1) - m.values.row(i)) / hr;
      m.slopes.row(i) = (hr * dl + hl * dr) / (hl + hr);
    }
  }
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fitting

struct TrainingBatch {
  Mat x_t, x_tm1, x0, z, y;
};

namespace detail {

inline AffineMapModel fit_exact_affine(const Target& target, const Schedule& s, int t,
                                       const AffineMapModel& prev) {
  const StepGeometry g = step_geometry(s, t);
  if (const auto* at = std::get_if<AtomicTarget>(&target)) {
    // single atom: the preimage is deterministic
    const Vec a = at->atoms.row(0).transpose();
    return {g.r * prev.A, prev.A * (g.shift_scale * a) + prev.b};
  }
  const auto& gm = std::get<GaussianMixtureTarget>(target);
  const SmoothingLevel lv = s.level(t);
  const double sab = std::sqrt(lv.ab);
  const double v = lv.ab * gm.variances[0] + lv.omab;
  const double kk = sab * gm.variances[0] / v;
  const Vec mu = gm.means.row(0).transpose();
  // E[X_{t-1} | x] = (r + shift*k) x + shift*(1 - k sab) mu
  const double coef = g.r + g.shift_scale * kk;
  const Vec off = g.shift_scale * (1.0 - kk * sab) * mu;
  return {coef * prev.A, prev.A * off + prev.b};
}

inline double profile_range(const AtomicTarget& t, const Vec& axis) {
  double mx = 1.0;
  for (int i = 0; i < t.components(); ++i)
    mx = std::max(mx, std::abs(axis.dot(t.atoms.row(i).transpose())));
  return 16.0 * (1.0 + mx);
}

inline Model fit_exact_oracle(const Target& target, const Schedule& s, int t,
                              const Model& prev, const RegressorSpec& spec) {
  if (const auto* at = std::get_if<AtomicTarget>(&target)) {
    const AtomAxis ax = atom_axis(*at);
    if (ax.affine_dim == 0) {
      const auto* aff = std::get_if<AffineMapModel>(&prev);
      if (!aff) throw std::logic_error("exact_oracle: point-mass chain expects affine model");
      return fit_exact_affine(target, s, t, *aff);
    }
    if (ax.affine_dim == 1) {
      const StepGeometry g = step_geometry(s, t);
      double gamma_prev;
      if (const auto* aff = std::get_if<AffineMapModel>(&prev)) {
        if (!aff->is_scaled_identity(&gamma_prev))
          throw std::logic_error("exact_oracle: profile chain expects scaled-identity affine");
      } else {
        gamma_prev = std::get<AxisProfileModel>(prev).gamma;
      }
      const double gamma_new = g.r * gamma_prev;
      const int d = at->dim();
      const Vec axis = ax.axis;
      auto F = [&](double u) -> Vec {
        const Vec x = u * axis;
        const Vec full = exact_regression_target(target, s, t, prev, x);
        return full - gamma_new * x;
      };
      // seeds: posterior-weight crossings of the current level, plus the
      // previous profile's nodes mapped through the per-atom preimages
      std::vector<double> seeds;
      const SmoothingLevel lv = s.level(t);
      const double sab = std::sqrt(lv.ab);
      std::vector<double> proj(at->components());
      for (int i = 0; i < at->components(); ++i)
        proj[i] = axis.dot(at->atoms.row(i).transpose());
      for (int i = 0; i < at->components(); ++i)
        for (int j = i + 1; j < at->components(); ++j) {
          const double du = proj[i] - proj[j];
          if (std::abs(du) < 1e-14) continue;
          const double mid = 0.5 * sab * (proj[i] + proj[j]) +
                             lv.omab * std::log(at->weights[j] / at->weights[i]) / (sab * du);
          const double width = lv.omab / (sab * std::abs(du));
          for (double k : {-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0}) seeds.push_back(mid + k * width);
        }
      if (const auto* pm = std::get_if<AxisProfileModel>(&prev)) {
        const std::size_t stride = std::max<std::size_t>(1, pm->u.size() / 2048);
        for (std::size_t i = 0; i < pm->u.size(); i += stride)
          for (int a = 0; a < at->components(); ++a)
            seeds.push_back((pm->u[i] - g.shift_scale * proj[a]) / g.r);
      }
      const double range = profile_range(*at, axis);
      return build_axis_profile(F, gamma_new, axis, -range, range, seeds,
                                spec.profile_tolerance, spec.profile_max_nodes, d);
    }
    throw std::invalid_argument(
        "exact_oracle: atomic targets with atoms in general position (affine dim >= 2) are not "
        "supported for stack training; use knn_kernel or linear_features");
  }
  const auto& gm = std::get<GaussianMixtureTarget>(target);
  if (gm.components() != 1)
    throw std::invalid_argument(
        "exact_oracle: multi-component Gaussian mixtures are not supported for stack training");
  const auto* aff = std::get_if<AffineMapModel>(&prev);
  if (!aff) throw std::logic_error("exact_oracle: Gaussian chain expects affine model");
  return fit_exact_affine(target, s, t, *aff);
}

inline TrainingBatch draw_batch(const Target& target, const Schedule& s, int t,
                                const Model& prev, int batch, RngStream& rng) {
  const int d = dim(target);
  TrainingBatch tb;
  tb.x_t.resize(batch, d);
  tb.x_tm1.resize(batch, d);
  tb.x0.resize(batch, d);
  tb.z.resize(batch, d);
  tb.y.resize(batch, d);
  const auto pairs = sample_shared_noise_pair(target, s, t, batch, rng);
  for (int i = 0; i < batch; ++i) {
    tb.x_t.row(i) = pairs[i].x_t.transpose();
    tb.x_tm1.row(i) = pairs[i].x_tm1.transpose();
    tb.x0.row(i) = pairs[i].x0.transpose();
    tb.z.row(i) = pairs[i].z.transpose();
    tb.y.row(i) = evaluate(prev, pairs[i].x_tm1).transpose();
  }
  return tb;
}

inline AffineMapModel fit_linear(const TrainingBatch& tb, double ridge) {
  const int m = int(tb.x_t.rows());
  const int d = int(tb.x_t.cols());
  Mat F(m, d + 1);
  F.col(0).setOnes();
  F.rightCols(d) = tb.x_t;
  const Mat G = F.transpose() * F;
  const Mat R = F.transpose() * tb.y;
  Mat reg = G + ridge * Mat::Identity(d + 1, d + 1);
  Eigen::LDLT<Mat> ldlt(reg);
  const double dmin = ldlt.vectorD().minCoeff();
  const double dmax = ldlt.vectorD().maxCoeff();
  if (ldlt.info() != Eigen::Success || !(dmin > 1e-13 * std::max(dmax, 1.0))) {
    const double bump = std::max(ridge, 1e-8 * std::max(dmax, 1.0));
    std::cerr << "[ctlab] warning: near-singular normal equations; "
              << "re-solving with ridge " << bump << "\n";
    reg = G + bump * Mat::Identity(d + 1, d + 1);
    ldlt.compute(reg);
  }
  const Mat C = ldlt.solve(R);  // (d+1) x d
  AffineMapModel out;
  out.b = C.row(0).transpose();
  out.A = C.bottomRows(d).transpose();
  return out;
}

}  // namespace detail

inline Model fit_step(const Target& target, const Schedule& s, int t, const Model& f_prev,
                      const RegressorSpec& spec, RngStream& rng,
                      TrainingBatch* captured = nullptr) {
  check_index(s, t, 2);
  spec.validate();
  if (spec.kind == RegressorKind::exact_oracle)
    return detail::fit_exact_oracle(target, s, t, f_prev, spec);

  TrainingBatch tb = detail::draw_batch(target, s, t, f_prev, spec.training_batch, rng);
  Model out;
  if (spec.kind == RegressorKind::linear_features) {
    out = detail::fit_linear(tb, spec.ridge);
  } else {
    KnnModel m;
    m.k = spec.k;
    m.bandwidth = spec.bandwidth;
    m.X = tb.x_t;
    m.Y = tb.y;
    out = std::move(m);
  }
  if (captured) *captured = std::move(tb);
  return out;
}

// ---------------------------------------------------------------------------
// Stack

struct ConsistencyStack {
  Schedule schedule;
  int d = 0;
  RegressorSpec spec;
  std::vector<Model> models;  // index t in [1, T]; models[0] unused, models[1] = identity

  const Model& model(int t) const {
    if (t < 1 || t > schedule.T) throw std::out_of_range("stack: t out of range");
    return models[std::size_t(t)];
  }
  Vec apply(int t, const Vec& x) const { return evaluate(model(t), x); }
};

inline ConsistencyStack train_stack(const Target& target, const Schedule& s,
                                    const RegressorSpec& spec, RngStream& rng) {
  spec.validate();
  ConsistencyStack st;
  st.schedule = s;
  st.d = dim(target);
  st.spec = spec;
  st.models.resize(std::size_t(s.T) + 1);
  st.models[1] = AffineMapModel::identity(st.d);
  for (int t = 2; t <= s.T; ++t) {
    RngStream step_rng = rng.split(std::uint64_t(t));
    try {
      st.models[std::size_t(t)] = fit_step(target, s, t, st.models[std::size_t(t) - 1], spec,
                                           step_rng);
    } catch (const std::exception& e) {
      throw std::runtime_error("train_stack failed at t=" + std::to_string(t) + ": " + e.what());
    }
  }
  return st;
}

inline Mat one_shot_sample(const ConsistencyStack& st, int n, RngStream& rng) {
  Mat out(n, st.d);
  for (int i = 0; i < n; ++i)
    out.row(i) = st.apply(st.schedule.T, rng.normal_vector(st.d)).transpose();
  return out;
}

struct ErrorReport {
  Vec per_step;  // index 0 corresponds to t=2
  double eps_hat = 0.0;
};

// Empirical per-step distance to the exact regression target of the
// previously fitted model, summed over t (the training-error aggregate).
inline ErrorReport estimation_error(const ConsistencyStack& st, const Target& target,
                                    const Schedule& s, int n_eval, RngStream& rng) {
  ErrorReport rep;
  rep.per_step = Vec::Zero(std::max(s.T - 1, 0));
  for (int t = 2; t <= s.T; ++t) {
    RngStream tr = rng.split(std::uint64_t(t), 777);
    const Mat xs = sample_marginal(target, s, t, n_eval, tr);
    double acc = 0.0;
    for (int i = 0; i < n_eval; ++i) {
      const Vec x = xs.row(i).transpose();
      const Vec lhs = st.apply(t, x);
      const Vec rhs = exact_regression_target(target, s, t, st.model(t - 1), x);
      acc += (lhs - rhs).norm();
    }
    rep.per_step[t - 2] = acc / double(n_eval);
  }
  rep.eps_hat = rep.per_step.sum();
  return rep;
}

}  // namespace ctlab
