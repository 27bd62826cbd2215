#pragma once

// Wasserstein-1 distances between equal-size empirical samples.
//
// d=1 is exact via sorted order statistics. General d has an exact
// minimum-cost perfect matching solver (shortest augmenting path, O(n^3),
// capped at n=512) and a sliced estimator that averages the 1-D distance
// over random projection directions.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "ctlab/rng.hpp"
#include "ctlab/targets.hpp"

namespace ctlab {

// equal-weight empirical sample: one point per row
using EmpiricalSample = Mat;

inline double w1_exact_1d(Vec a, Vec b) {
  if (a.size() != b.size()) throw std::invalid_argument("w1_exact_1d: size mismatch");
  if (a.size() == 0) throw std::invalid_argument("w1_exact_1d: empty samples");
  std::sort(a.data(), a.data() + a.size());
  std::sort(b.data(), b.data() + b.size());
  double s = 0.0;
  for (int i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / double(a.size());
}

inline double w1_exact_1d(const Mat& a, const Mat& b) {
  if (a.cols() != 1 || b.cols() != 1) throw std::invalid_argument("w1_exact_1d: d != 1");
  return w1_exact_1d(Vec(a.col(0)), Vec(b.col(0)));
}

// Exact assignment W1: min-cost perfect matching under Euclidean cost / n.
inline double w1_assignment(const Mat& a, const Mat& b, int size_cap = 512) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("w1_assignment: shape mismatch");
  const int n = int(a.rows());
  if (n == 0) throw std::invalid_argument("w1_assignment: empty samples");
  if (n > size_cap)
    throw std::invalid_argument("w1_assignment: n=" + std::to_string(n) + " exceeds cap " +
                                std::to_string(size_cap));

  Mat cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).norm();

  // shortest augmenting path with potentials (1-based internals)
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  // summing the matched costs in sorted order makes the value independent of
  // which side was called first
  std::vector<double> matched;
  matched.reserve(std::size_t(n));
  for (int j = 1; j <= n; ++j)
    if (p[j]) matched.push_back(cost(p[j] - 1, j - 1));
  std::sort(matched.begin(), matched.end());
  double total = 0.0;
  for (double c : matched) total += c;
  return total / double(n);
}

struct SlicedW1 {
  double mean = 0.0;
  double standard_error = 0.0;
  int projections = 0;
};

inline SlicedW1 sliced_w1(const Mat& a, const Mat& b, int n_projections, RngStream& rng) {
  if (a.cols() != b.cols()) throw std::invalid_argument("sliced_w1: dim mismatch");
  if (a.rows() != b.rows()) throw std::invalid_argument("sliced_w1: size mismatch");
  if (n_projections < 1) throw std::invalid_argument("sliced_w1: need n_projections >= 1");
  const int d = int(a.cols());
  double sum = 0.0, sumsq = 0.0;
  for (int p = 0; p < n_projections; ++p) {
    const Vec dir = rng.unit_vector(d);
    const double w = w1_exact_1d(Vec(a * dir), Vec(b * dir));
    sum += w;
    sumsq += w * w;
  }
  SlicedW1 r;
  r.projections = n_projections;
  r.mean = sum / double(n_projections);
  const double var = std::max(0.0, sumsq / double(n_projections) - r.mean * r.mean);
  r.standard_error =
      n_projections > 1 ? std::sqrt(var / double(n_projections - 1)) : 0.0;
  return r;
}

}  // namespace ctlab
