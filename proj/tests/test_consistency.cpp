#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "ctlab/consistency.hpp"
#include "ctlab/forward.hpp"
#include "ctlab/pf_ode.hpp"
#include "ctlab/stack_io.hpp"

using namespace ctlab;

namespace {
Vec v1(double x) {
  Vec v(1);
  v << x;
  return v;
}
Vec v2(double x, double y) {
  Vec v(2);
  v << x, y;
  return v;
}

// closed-form coefficients of the exact conditional-expectation chain on a
// single Gaussian N(mu, sigma^2 I): each step is affine with slope
// rho_t / v_t and the chain maps the marginal mean to the marginal mean.
AffineMapModel gaussian_chain_closed_form(const Schedule& s, const Vec& mu, double sigma2,
                                          int d) {
  double gamma = 1.0;
  Vec b = Vec::Zero(d);
  for (int t = 2; t <= s.T; ++t) {
    const double ab = s.alpha_bar(t), om = s.one_minus_alpha_bar(t);
    const double abp = s.alpha_bar(t - 1), omp = s.one_minus_alpha_bar(t - 1);
    const double v = ab * sigma2 + om;
    const double rho = std::sqrt(abp * ab) * sigma2 + std::sqrt(omp * om);
    const double coef = rho / v;
    const Vec off = (std::sqrt(abp) - coef * std::sqrt(ab)) * mu;
    b = gamma * off + b;
    gamma *= coef;
  }
  return {gamma * Mat::Identity(d, d), b};
}
}  // namespace

TEST_CASE("exact regression target closed forms") {
  const Schedule s = build_schedule(64, 2.0, 4.0);
  auto identity = [](const Vec& x) { return x; };
  SECTION("point mass at zero with identity f_prev is the explicit contraction") {
    const Target t = make_point_mass(v1(0.0));
    const int tt = 30;
    const double ratio = std::sqrt(s.one_minus_alpha_bar(tt - 1) / s.one_minus_alpha_bar(tt));
    CHECK_THAT(exact_regression_target(t, s, tt, identity, v1(1.7))[0],
               Catch::Matchers::WithinRel(1.7 * ratio, 1e-13));
  }
  SECTION("constant f_prev returns the constant") {
    const Target t = make_two_atoms(v2(1.0, 0.0), 0.3);
    auto constant = [](const Vec& x) { return Vec::Constant(x.size(), 4.2); };
    const Vec r = exact_regression_target(t, s, 10, constant, v2(0.3, -0.8));
    CHECK((r - Vec::Constant(2, 4.2)).cwiseAbs().maxCoeff() < 1e-13);
    // the Gaussian quadrature path integrates constants exactly too
    const Target g = make_single_gaussian(v2(0.5, 0.5));
    const Vec rg = exact_regression_target(g, s, 10, constant, v2(0.3, -0.8));
    CHECK((rg - Vec::Constant(2, 4.2)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SECTION("symmetric two-atom target vanishes at the origin") {
    const Target t = make_two_atoms(v1(1.0));
    CHECK(std::abs(exact_regression_target(t, s, 12, identity, v1(0.0))[0]) < 1e-14);
  }
  SECTION("Gaussian affine fast path agrees with quadrature") {
    const Target g = make_single_gaussian(v1(0.7), 1.3);
    const Model aff = AffineMapModel{2.0 * Mat::Identity(1, 1), v1(-0.3)};
    const Vec fast = exact_regression_target(g, s, 9, aff, v1(0.5));
    const Vec quad = exact_regression_target(
        g, s, 9, [&](const Vec& y) { return evaluate(aff, y); }, v1(0.5));
    CHECK(std::abs(fast[0] - quad[0]) < 1e-12);
  }
}

TEST_CASE("exact-oracle stacks on affine-closed targets") {
  SECTION("T=2 point-mass stack is the single-step contraction") {
    const Schedule s = build_schedule(2, 1.0, 1.0);
    const Target t = make_point_mass(v1(0.0));
    RngStream rng(61);
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    const double ratio = std::sqrt(s.one_minus_alpha_bar(1) / s.one_minus_alpha_bar(2));
    CHECK_THAT(st.apply(2, v1(1.0))[0], Catch::Matchers::WithinRel(ratio, 1e-14));
  }
  SECTION("full point-mass stack telescopes") {
    const Schedule s = build_schedule(64, 2.0, 4.0);
    const Target t = make_point_mass(v1(0.0));
    RngStream rng(62);
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    const double ratio = std::sqrt(s.one_minus_alpha_bar(1) / s.one_minus_alpha_bar(64));
    CHECK_THAT(st.apply(64, v1(-0.8))[0], Catch::Matchers::WithinRel(-0.8 * ratio, 1e-12));
  }
  SECTION("Gaussian stack equals the conditional-expectation closed form") {
    const Schedule s = build_schedule(64, 2.0, 4.0);
    const Vec mu = v1(0.5);
    const Target t = make_single_gaussian(mu);
    RngStream rng(63);
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    const AffineMapModel want = gaussian_chain_closed_form(s, mu, 1.0, 1);
    const auto& got = std::get<AffineMapModel>(st.model(64));
    CHECK_THAT(got.A(0, 0), Catch::Matchers::WithinRel(want.A(0, 0), 1e-12));
    CHECK_THAT(got.b[0], Catch::Matchers::WithinRel(want.b[0], 1e-10));
    // the chain slope sits strictly below the flow's unit slope: the gap is
    // the per-step conditional-variance contraction, vanishing like log T / T
    CHECK(got.A(0, 0) < 1.0);
    CHECK(got.A(0, 0) > 0.9);
  }
  SECTION("stack evaluation is deterministic") {
    const Schedule s = build_schedule(16, 1.0, 2.0);
    const Target t = make_point_mass(v2(0.3, 0.1));
    RngStream rng(64);
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    CHECK((st.apply(16, v2(1.0, -1.0)) - st.apply(16, v2(1.0, -1.0))).norm() == 0.0);
  }
}

TEST_CASE("exact-oracle stack vs the ODE flow on a Gaussian") {
  // both maps agree up to the conditional-expectation contraction, which is
  // the trained recursion's intrinsic one-per-T bias; the discrepancy shrinks
  // roughly linearly in 1/T
  const Vec mu = v1(0.5);
  const Target t = make_single_gaussian(mu);
  double prev_gap = std::numeric_limits<double>::infinity();
  for (int T : {64, 256, 1024}) {
    const Schedule s = build_schedule(T, 2.0, 4.0);
    RngStream rng(65);
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    const auto& aff = std::get<AffineMapModel>(st.model(T));
    const double gap = std::abs(aff.A(0, 0) - 1.0);
    CHECK(gap < prev_gap);
    prev_gap = gap;
    // flow closed form: x + mu (sqrt(ab_1) - sqrt(ab_T))
    const double flow_off = mu[0] * (std::sqrt(s.alpha_bar(1)) - std::sqrt(s.alpha_bar(T)));
    RngStream draw(66);
    double mean_disc = 0.0;
    const int n_pts = 1000;
    const Mat xs = sample_marginal(t, s, T, n_pts, draw);
    for (int i = 0; i < n_pts; ++i) {
      const double x = xs(i, 0);
      mean_disc += std::abs((aff.A(0, 0) * x + aff.b[0]) - (x + flow_off));
    }
    mean_disc /= n_pts;
    INFO("T=" << T << " mean discrepancy to the flow: " << mean_disc);
    CHECK(mean_disc < 0.1);
  }
}

TEST_CASE("two-atom exact-oracle stack (axis profile materialization)") {
  const Schedule s = build_schedule(32, 2.0, 4.0);
  const Target t = make_two_atoms(v2(1.0, 0.0));
  RegressorSpec spec{RegressorKind::exact_oracle};
  spec.profile_tolerance = 1e-10;
  RngStream rng(67);
  const ConsistencyStack st = train_stack(t, s, spec, rng);

  SECTION("antisymmetry of the learned map") {
    for (double x : {0.3, 1.0, 2.5}) {
      const Vec plus = st.apply(32, v2(x, 0.4));
      const Vec minus = st.apply(32, v2(-x, -0.4));
      CHECK((plus + minus).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
  SECTION("per-step materialization error is at the build tolerance") {
    RngStream err_rng(68);
    const ErrorReport er = estimation_error(st, t, s, 64, err_rng);
    CHECK(er.eps_hat < 1e-9);
    CHECK(er.per_step.maxCoeff() < 1e-10);
  }
  SECTION("recursion fidelity against a posterior Monte-Carlo average") {
    // models[t](x) should equal E[models[t-1](X_{t-1}) | X_t = x]; sample the
    // posterior atoms directly and compare within three standard errors
    RngStream mc_rng(69);
    const int tt = 20;
    const Vec x = v2(0.4, -0.2);
    const SmoothedPosterior post = posterior(t, s.level(tt), x);
    const auto geom_r = std::sqrt(s.one_minus_alpha_bar(tt - 1) / s.one_minus_alpha_bar(tt));
    const auto shift = std::sqrt(s.alpha_bar(tt - 1)) - geom_r * std::sqrt(s.alpha_bar(tt));
    const int n = 200000;
    Vec acc = Vec::Zero(2), acc2 = Vec::Zero(2);
    const auto& atoms = std::get<AtomicTarget>(t).atoms;
    for (int i = 0; i < n; ++i) {
      const int a = mc_rng.uniform() < post.weights[0] ? 0 : 1;
      const Vec pre = geom_r * x + shift * atoms.row(a).transpose();
      const Vec y = st.apply(tt - 1, pre);
      acc += y;
      acc2 += y.cwiseProduct(y);
    }
    const Vec mean = acc / n;
    const Vec se = ((acc2 / n - mean.cwiseProduct(mean)) / n).cwiseMax(0.0).cwiseSqrt();
    const Vec got = st.apply(tt, x);
    for (int j = 0; j < 2; ++j)
      CHECK(std::abs(got[j] - mean[j]) <= 3.0 * se[j] + 1e-12);
  }
  SECTION("one-shot sampling returns n points of the right shape") {
    RngStream draw(70);
    const Mat out = one_shot_sample(st, 257, draw);
    CHECK(out.rows() == 257);
    CHECK(out.cols() == 2);
    CHECK(out.allFinite());
    CHECK(one_shot_sample(st, 0, draw).rows() == 0);
  }
}

TEST_CASE("exact-oracle rejects targets without a materializable structure") {
  const Schedule s = build_schedule(8, 1.0, 1.0);
  RngStream rng(71);
  SECTION("atoms in general position") {
    AtomicTarget t;
    t.atoms = Mat(3, 2);
    t.atoms << 1, 0, -1, 0, 0, 1;
    t.weights = Vec::Constant(3, 1.0 / 3.0);
    t.weights[2] += 1.0 - t.weights.sum();
    t.radius = 1.1;
    CHECK_THROWS_AS(train_stack(t, s, {RegressorKind::exact_oracle}, rng), std::runtime_error);
  }
  SECTION("collinear three atoms are fine") {
    AtomicTarget t;
    t.atoms = Mat(3, 2);
    t.atoms << 1, 1, -1, -1, 0, 0;
    t.weights = Vec::Constant(3, 1.0 / 3.0);
    t.weights[2] += 1.0 - t.weights.sum();
    t.radius = 1.5;
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    RngStream err_rng(72);
    CHECK(estimation_error(st, t, s, 32, err_rng).eps_hat < 1e-9);
  }
  SECTION("multi-component mixtures are rejected for stacks") {
    GaussianMixtureTarget t;
    t.means = Mat(2, 1);
    t.means << 1, -1;
    t.weights = Vec::Constant(2, 0.5);
    t.variances = Vec::Ones(2);
    CHECK_THROWS_AS(train_stack(t, s, {RegressorKind::exact_oracle}, rng), std::runtime_error);
  }
}

TEST_CASE("estimation error of exact-oracle stacks is zero to floating point") {
  const Schedule s = build_schedule(32, 2.0, 4.0);
  RngStream rng(73);
  SECTION("point mass") {
    const Target t = make_point_mass(v1(0.4));
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    RngStream err_rng(74);
    CHECK(estimation_error(st, t, s, 64, err_rng).eps_hat < 1e-12);
  }
  SECTION("single Gaussian") {
    const Target t = make_single_gaussian(v1(0.5));
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    RngStream err_rng(75);
    CHECK(estimation_error(st, t, s, 64, err_rng).eps_hat < 1e-12);
  }
}

TEST_CASE("linear function class") {
  SECTION("single-step fit recovers the affine truth on a Gaussian") {
    const Schedule s = build_schedule(64, 2.0, 4.0);
    const Vec mu = v1(0.5);
    const Target t = make_single_gaussian(mu);
    const int tt = 40, batch = 100000;
    RegressorSpec spec{RegressorKind::linear_features};
    spec.training_batch = batch;
    RngStream rng(76);
    const Model fitted = fit_step(t, s, tt, AffineMapModel::identity(1), spec, rng);
    const auto& aff = std::get<AffineMapModel>(fitted);
    // truth: slope rho_t / v_t, intercept via the chain closed form at depth 1
    const double ab = s.alpha_bar(tt), om = s.one_minus_alpha_bar(tt);
    const double abp = s.alpha_bar(tt - 1), omp = s.one_minus_alpha_bar(tt - 1);
    const double coef = std::sqrt(abp * ab) + std::sqrt(omp * om);
    const double off = (std::sqrt(abp) - coef * std::sqrt(ab)) * mu[0];
    const double cap = 5.0 / std::sqrt(double(batch));
    CHECK(std::abs(aff.A(0, 0) - coef) < cap);
    CHECK(std::abs(aff.b[0] - off) < cap);
  }
  SECTION("point-mass truth is exactly affine so the stack error is tiny") {
    const Schedule s = build_schedule(16, 1.0, 2.0);
    const Target t = make_point_mass(v1(0.3));
    RegressorSpec spec{RegressorKind::linear_features};
    spec.training_batch = 4000;
    RngStream rng(77);
    const ConsistencyStack st = train_stack(t, s, spec, rng);
    RngStream err_rng(78);
    CHECK(estimation_error(st, t, s, 64, err_rng).eps_hat < 1e-6);
  }
  SECTION("training batches expose the shared-noise coupling") {
    const Schedule s = build_schedule(16, 1.0, 2.0);
    const Target t = make_two_atoms(v1(1.0));
    RegressorSpec spec{RegressorKind::linear_features};
    spec.training_batch = 128;
    RngStream rng(79);
    TrainingBatch tb;
    (void)fit_step(t, s, 9, AffineMapModel::identity(1), spec, rng, &tb);
    REQUIRE(tb.x_t.rows() == 128);
    for (int i = 0; i < tb.x_t.rows(); ++i) {
      const double xt = std::sqrt(s.alpha_bar(9)) * tb.x0(i, 0) +
                        std::sqrt(s.one_minus_alpha_bar(9)) * tb.z(i, 0);
      const double xp = std::sqrt(s.alpha_bar(8)) * tb.x0(i, 0) +
                        std::sqrt(s.one_minus_alpha_bar(8)) * tb.z(i, 0);
      CHECK(std::abs(xt - tb.x_t(i, 0)) < 1e-14);
      CHECK(std::abs(xp - tb.x_tm1(i, 0)) < 1e-14);
    }
  }
}

TEST_CASE("knn function class") {
  const Schedule s = build_schedule(8, 1.0, 1.0);
  const Target t = make_two_atoms(v1(1.0));
  SECTION("batch of one degenerates to a constant map") {
    RegressorSpec spec{RegressorKind::knn_kernel};
    spec.training_batch = 1;
    spec.k = 4;
    RngStream rng(80);
    const Model m = fit_step(t, s, 5, AffineMapModel::identity(1), spec, rng);
    CHECK(evaluate(m, v1(-9.0))[0] == evaluate(m, v1(9.0))[0]);
  }
  SECTION("estimation error decreases with the batch size") {
    RngStream err_rng(81);
    double errs[2];
    int idx = 0;
    for (int batch : {1000, 10000}) {
      RegressorSpec spec{RegressorKind::knn_kernel};
      spec.training_batch = batch;
      spec.k = std::max(8, batch / 100);
      RngStream rng(82);
      const ConsistencyStack st = train_stack(t, s, spec, rng);
      RngStream er = err_rng.split(std::uint64_t(idx));
      errs[idx++] = estimation_error(st, t, s, 200, er).eps_hat;
    }
    INFO("knn eps_hat: " << errs[0] << " -> " << errs[1]);
    CHECK(std::isfinite(errs[0]));
    CHECK(errs[1] < errs[0]);
  }
  SECTION("kernel mode works and respects the bandwidth argument") {
    RegressorSpec spec{RegressorKind::knn_kernel};
    spec.training_batch = 500;
    spec.k = 0;
    spec.bandwidth = 0.2;
    RngStream rng(83);
    const Model m = fit_step(t, s, 5, AffineMapModel::identity(1), spec, rng);
    CHECK(std::isfinite(evaluate(m, v1(0.5))[0]));
    spec.bandwidth = 0.0;
    CHECK_THROWS_AS(fit_step(t, s, 5, AffineMapModel::identity(1), spec, rng),
                    std::invalid_argument);
  }
}

TEST_CASE("stack container round trip is bit exact") {
  const std::string path = "test_stack_tmp.bin";
  const Schedule s = build_schedule(12, 1.0, 2.0);
  RngStream rng(84);
  SECTION("axis profile stack") {
    const Target t = make_two_atoms(v2(1.0, 0.0));
    RegressorSpec spec{RegressorKind::exact_oracle};
    const ConsistencyStack st = train_stack(t, s, spec, rng);
    save_stack(st, path);
    const ConsistencyStack ld = load_stack(path);
    RngStream q(85);
    for (int i = 0; i < 20; ++i) {
      const Vec x = 2.0 * q.normal_vector(2);
      CHECK((st.apply(12, x) - ld.apply(12, x)).cwiseAbs().maxCoeff() == 0.0);
    }
    std::remove(path.c_str());
  }
  SECTION("knn stack") {
    const Target t = make_two_atoms(v1(1.0));
    RegressorSpec spec{RegressorKind::knn_kernel};
    spec.training_batch = 64;
    const ConsistencyStack st = train_stack(t, s, spec, rng);
    save_stack(st, path);
    const ConsistencyStack ld = load_stack(path);
    RngStream q(86);
    for (int i = 0; i < 20; ++i) {
      const Vec x = 2.0 * q.normal_vector(1);
      CHECK((st.apply(12, x) - ld.apply(12, x)).cwiseAbs().maxCoeff() == 0.0);
    }
    std::remove(path.c_str());
  }
  SECTION("corrupted or mismatched files are rejected") {
    {
      std::ofstream os(path, std::ios::binary);
      os << "NOTASTACKXXXX";
    }
    CHECK_THROWS(load_stack(path));
    std::remove(path.c_str());
    CHECK_THROWS(load_stack("missing_file.bin"));
  }
}

TEST_CASE("one-shot sampling matches the linear pushforward law") {
  SECTION("point mass stack variance") {
    const Schedule s = build_schedule(64, 2.0, 4.0);
    const Target t = make_point_mass(v1(0.0));
    RngStream rng(87);
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    RngStream draw(88);
    const int n = 100000;
    const Mat out = one_shot_sample(st, n, draw);
    const double var = out.col(0).squaredNorm() / n - std::pow(out.col(0).mean(), 2);
    const double want = s.one_minus_alpha_bar(1) / s.one_minus_alpha_bar(64);
    CHECK_THAT(var, Catch::Matchers::WithinRel(want, 0.05));
  }
  SECTION("Gaussian stack mean") {
    const Schedule s = build_schedule(64, 2.0, 4.0);
    const Vec mu = v1(0.5);
    const Target t = make_single_gaussian(mu);
    RngStream rng(89);
    const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
    RngStream draw(90);
    const int n = 100000;
    const Mat out = one_shot_sample(st, n, draw);
    const auto& aff = std::get<AffineMapModel>(st.model(64));
    CHECK(std::abs(out.col(0).mean() - aff.b[0]) < 3.0 / std::sqrt(double(n)));
    // and the offset is close to (though not exactly) the flow's offset
    const double flow_off = mu[0] * (std::sqrt(s.alpha_bar(1)) - std::sqrt(s.alpha_bar(64)));
    CHECK(std::abs(aff.b[0] - flow_off) < 0.05);
  }
}

TEST_CASE("stack container rejects a version bump") {
  const std::string path = "test_stack_ver_tmp.bin";
  const Schedule s = build_schedule(4, 1.0, 1.0);
  RngStream rng(91);
  const Target t = make_point_mass(v1(0.0));
  const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
  save_stack(st, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);  // version field follows the magic
    const std::uint32_t bad = 7;
    f.write(reinterpret_cast<const char*>(&bad), 4);
  }
  try {
    load_stack(path);
    FAIL("expected version rejection");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }
  std::remove(path.c_str());
}

TEST_CASE("singular normal equations fall back to a ridge solve") {
  // batch 1 with two features is rank deficient; with ridge = 0 the solver
  // must warn and re-solve rather than return garbage
  const Schedule s = build_schedule(8, 1.0, 1.0);
  const Target t = make_point_mass(v1(0.5));
  RegressorSpec spec{RegressorKind::linear_features};
  spec.training_batch = 1;
  spec.ridge = 0.0;
  RngStream rng(92);
  const Model m = fit_step(t, s, 5, AffineMapModel::identity(1), spec, rng);
  CHECK(evaluate(m, v1(0.3)).allFinite());
}

TEST_CASE("exact-oracle chain handles non-unit Gaussian variance") {
  const Schedule s = build_schedule(48, 2.0, 4.0);
  const Vec mu = v1(-0.7);
  const double sigma2 = 1.3;
  const Target t = make_single_gaussian(mu, sigma2);
  RngStream rng(93);
  const ConsistencyStack st = train_stack(t, s, {RegressorKind::exact_oracle}, rng);
  const AffineMapModel want = gaussian_chain_closed_form(s, mu, sigma2, 1);
  const auto& got = std::get<AffineMapModel>(st.model(48));
  CHECK_THAT(got.A(0, 0), Catch::Matchers::WithinRel(want.A(0, 0), 1e-12));
  CHECK_THAT(got.b[0], Catch::Matchers::WithinRel(want.b[0], 1e-10));
}
