#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "ctlab/transport.hpp"

using namespace ctlab;

namespace {
Mat points1d(std::initializer_list<double> xs) {
  Mat m(long(xs.size()), 1);
  int i = 0;
  for (double x : xs) m(i++, 0) = x;
  return m;
}
}  // namespace

TEST_CASE("1-D exact distance") {
  CHECK(w1_exact_1d(points1d({1, 2, 3}), points1d({3, 1, 2})) == 0.0);
  CHECK(w1_exact_1d(points1d({0}), points1d({3})) == 3.0);
  CHECK(w1_exact_1d(points1d({0, 2}), points1d({1, 3})) == 1.0);
  CHECK_THROWS_AS(w1_exact_1d(points1d({0, 1}), points1d({0})), std::invalid_argument);
}

TEST_CASE("assignment solver on hand instances") {
  SECTION("two vertical pairs") {
    Mat a(2, 2), b(2, 2);
    a << 0, 0, 1, 0;
    b << 0, 1, 1, 1;
    CHECK_THAT(w1_assignment(a, b), Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("permuting one side leaves the value unchanged") {
    RngStream rng(51);
    Mat a(16, 2), b(16, 2);
    for (int i = 0; i < 16; ++i) {
      a.row(i) = rng.normal_vector(2).transpose();
      b.row(i) = rng.normal_vector(2).transpose();
    }
    const double base = w1_assignment(a, b);
    Mat b2 = b;
    for (int i = 0; i < 16; ++i) b2.row(i) = b.row((i + 5) % 16);
    CHECK_THAT(w1_assignment(a, b2), Catch::Matchers::WithinAbs(base, 1e-12));
  }
  SECTION("matches brute force on tiny instances") {
    RngStream rng(52);
    for (int rep = 0; rep < 20; ++rep) {
      const int n = 2 + int(rng.index(4));  // up to 5 points
      Mat a(n, 2), b(n, 2);
      for (int i = 0; i < n; ++i) {
        a.row(i) = rng.normal_vector(2).transpose();
        b.row(i) = rng.normal_vector(2).transpose();
      }
      std::vector<int> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      double best = std::numeric_limits<double>::infinity();
      do {
        double c = 0.0;
        for (int i = 0; i < n; ++i) c += (a.row(i) - b.row(perm[std::size_t(i)])).norm();
        best = std::min(best, c / n);
      } while (std::next_permutation(perm.begin(), perm.end()));
      CHECK_THAT(w1_assignment(a, b), Catch::Matchers::WithinAbs(best, 1e-12));
    }
  }
  SECTION("size cap") {
    Mat a = Mat::Zero(513, 1), b = Mat::Zero(513, 1);
    CHECK_THROWS_AS(w1_assignment(a, b), std::invalid_argument);
  }
}

TEST_CASE("assignment agrees with the 1-D sort oracle") {
  RngStream rng(53);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 1 + int(rng.index(128));
    Mat a(n, 1), b(n, 1);
    for (int i = 0; i < n; ++i) {
      a(i, 0) = 3.0 * rng.normal();
      b(i, 0) = 1.0 + 2.0 * rng.normal();
    }
    const double sorted = w1_exact_1d(a, b);
    const double matched = w1_assignment(a, b);
    CHECK(std::abs(sorted - matched) < 1e-12 * (1.0 + sorted));
  }
}

TEST_CASE("sliced estimator") {
  RngStream rng(54);
  SECTION("identical samples give zero") {
    Mat a(32, 3);
    for (int i = 0; i < 32; ++i) a.row(i) = rng.normal_vector(3).transpose();
    RngStream proj(55);
    CHECK(sliced_w1(a, a, 16, proj).mean == 0.0);
  }
  SECTION("d=1 reduces to the exact 1-D distance") {
    Mat a(64, 1), b(64, 1);
    for (int i = 0; i < 64; ++i) {
      a(i, 0) = rng.normal();
      b(i, 0) = rng.normal() + 0.5;
    }
    RngStream proj(56);
    CHECK_THAT(sliced_w1(a, b, 8, proj).mean,
               Catch::Matchers::WithinRel(w1_exact_1d(a, b), 1e-12));
  }
  SECTION("translated clouds recover (2/pi)|v| in d=2") {
    // identical points shifted by v: each projection contributes |<v, dir>|
    const Vec v = [] {
      Vec v(2);
      v << 0.6, -0.8;
      return v;
    }();
    Mat a(256, 2);
    for (int i = 0; i < 256; ++i) a.row(i) = rng.normal_vector(2).transpose();
    const Mat b = a.rowwise() + v.transpose();
    RngStream proj(57);
    const SlicedW1 r = sliced_w1(a, b, 512, proj);
    const double expected = 2.0 * v.norm() / M_PI;
    CHECK(std::abs(r.mean - expected) <= 3.0 * r.standard_error);
  }
}

TEST_CASE("metric properties") {
  RngStream rng(58);
  SECTION("symmetry is exact") {
    Mat a(24, 2), b(24, 2);
    for (int i = 0; i < 24; ++i) {
      a.row(i) = rng.normal_vector(2).transpose();
      b.row(i) = rng.normal_vector(2).transpose();
    }
    CHECK(w1_assignment(a, b) == w1_assignment(b, a));
  }
  SECTION("triangle inequality on random triples") {
    for (int rep = 0; rep < 100; ++rep) {
      const int n = 4 + int(rng.index(61));  // up to 64
      Mat a(n, 2), b(n, 2), c(n, 2);
      for (int i = 0; i < n; ++i) {
        a.row(i) = rng.normal_vector(2).transpose();
        b.row(i) = (rng.normal_vector(2) + Vec::Ones(2)).transpose();
        c.row(i) = (2.0 * rng.normal_vector(2)).transpose();
      }
      CHECK(w1_assignment(a, c) <= w1_assignment(a, b) + w1_assignment(b, c) + 1e-9);
    }
  }
  SECTION("scale equivariance is exact for the exact estimators") {
    Mat a(32, 2), b(32, 2);
    for (int i = 0; i < 32; ++i) {
      a.row(i) = rng.normal_vector(2).transpose();
      b.row(i) = rng.normal_vector(2).transpose();
    }
    const double lam = 3.5;
    CHECK(w1_assignment(lam * a, lam * b) == Catch::Approx(lam * w1_assignment(a, b)).epsilon(1e-14));
    CHECK(w1_exact_1d(Mat(lam * a.col(0)), Mat(lam * b.col(0))) ==
          Catch::Approx(lam * w1_exact_1d(Mat(a.col(0)), Mat(b.col(0)))).epsilon(1e-14));
  }
  SECTION("sliced lower-bounds the assignment distance") {
    // projections are 1-Lipschitz; allow Monte-Carlo slack on the average
    Mat a(64, 2), b(64, 2);
    for (int i = 0; i < 64; ++i) {
      a.row(i) = rng.normal_vector(2).transpose();
      b.row(i) = (rng.normal_vector(2) + 2.0 * Vec::Ones(2)).transpose();
    }
    RngStream proj(59);
    const SlicedW1 r = sliced_w1(a, b, 256, proj);
    CHECK(r.mean <= w1_assignment(a, b) + 3.0 * r.standard_error);
  }
}
