#pragma once

// Experiment driver behind the CLI: schedule dump, the verification suite,
// stack training / sampling, and the scaling study over a T-list.
//
// Every emitted CSV row carries seed, estimator and sizes. Wall-clock timings
// go to a separate *_timing.csv so the data CSVs are byte-identical across
// reruns with the same seed. Sweep cells own derived RNG streams, so running
// them on one worker or many yields identical rows.

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include "ctlab/config.hpp"
#include "ctlab/consistency.hpp"
#include "ctlab/stack_io.hpp"
#include "ctlab/theory_check.hpp"

namespace ctlab {

inline void ensure_out_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
}

// ---------------------------------------------------------------------------
// schedule

inline int run_schedule_dump(const ExperimentConfig& cfg) {
  ensure_out_dir(cfg.out_dir);
  const Schedule s = build_schedule(cfg.T, cfg.c0, cfg.c1);
  AtomicFileWriter w(cfg.out_dir + "/schedule.csv");
  schedule_to_csv(s, w.stream());
  w.commit();
  std::cout << "wrote " << cfg.out_dir << "/schedule.csv (T=" << cfg.T << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// verify

namespace detail {
inline std::vector<int> spread_indices(int T, int count, int lowest = 2) {
  std::vector<int> out;
  if (T - lowest + 1 <= count) {
    for (int t = lowest; t <= T; ++t) out.push_back(t);
    return out;
  }
  for (int i = 0; i < count; ++i) {
    const int t = lowest + int(std::llround(double(i) * double(T - lowest) / double(count - 1)));
    if (out.empty() || out.back() != t) out.push_back(t);
  }
  return out;
}
}  // namespace detail

inline int run_verify(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  ensure_out_dir(cfg.out_dir);
  const Target target = cfg.load_target_checked();
  const Schedule s = build_schedule(cfg.T, cfg.c0, cfg.c1);
  RngStream rng(cfg.seed);
  const int d = dim(target);
  const bool atomic = std::holds_alternative<AtomicTarget>(target);

  std::vector<CheckReport> reports;
  reports.push_back(verify_schedule_properties(s, cfg.terminal_exponent));

  const std::vector<int> t_spread = detail::spread_indices(s.T, 8);
  {
    RngStream sr = rng.split(10);
    reports.push_back(check_score_moment(target, s, t_spread, cfg.n_check, sr));
  }

  if (atomic) {
    const std::vector<int> t_all = detail::spread_indices(s.T, 64);
    RngStream qr = rng.split(11);
    Mat queries(32, d);
    {
      const Mat pool = sample_marginal(target, s, std::max(2, s.T / 2), 32, qr);
      queries = pool;
    }
    reports.push_back(check_conditional_mean(target, s, t_all, queries));

    RngStream jr = rng.split(12);
    const Mat jq = sample_marginal(target, s, std::max(2, s.T / 2), 128, jr);
    reports.push_back(check_jacobian_identity(target, s, std::max(2, s.T / 2), jq));
    RngStream dr = rng.split(17);
    reports.push_back(
        check_discretization_shape(target, s, detail::spread_indices(s.T, 5), 200, dr));
  }

  {
    RngStream mr = rng.split(13);
    reports.push_back(check_marginal_preservation(
        target, s, {{s.T, 1}}, std::max(1000, cfg.n_samples), cfg.flow, mr, 2.0,
        cfg.n_projections));
  }
  {
    RngStream lr = rng.split(14);
    std::vector<std::pair<int, int>> pairs{{s.T, 1}};
    if (s.T >= 4) {
      pairs.push_back({s.T, s.T / 2});
      pairs.push_back({s.T / 2, 1});
    }
    reports.push_back(estimate_lipschitz(target, s, pairs, 10, cfg.flow, lr));
  }
  {
    RngStream er = rng.split(15);
    reports.push_back(typical_event_probability(target, s, s.T, std::min(cfg.n_check, 100000),
                                                {cfg.c3, cfg.c4}, er));
  }

  {
    AtomicFileWriter w(cfg.out_dir + "/checks.csv");
    bool first = true;
    for (const auto& r : reports) {
      if (!first) {
        // one header for the whole file; reports share the column layout
        std::ostringstream tmp;
        r.to_csv(tmp);
        const std::string text = tmp.str();
        w.stream() << text.substr(text.find('\n') + 1);
      } else {
        r.to_csv(w.stream());
        first = false;
      }
    }
    w.commit();
  }

  bool any_failed = false;
  {
    AtomicFileWriter w(cfg.out_dir + "/verify_summary.txt");
    for (const auto& r : reports) {
      r.summary(w.stream());
      r.summary(log);
      if (r.failed()) any_failed = true;
    }
    if (!atomic) {
      RngStream br = rng.split(16);
      const auto& gm = std::get<GaussianMixtureTarget>(target);
      const double ref_radius =
          gm.means.rowwise().norm().maxCoeff() + 3.0 * std::sqrt(gm.variances.maxCoeff());
      const double outside = mass_outside_radius(target, ref_radius, 100000, br);
      w.stream() << "note: mixture target; support bound approximate (mass outside R="
                 << format_double(ref_radius) << " is " << format_double(100.0 * outside)
                 << "%)\n";
    }
    w.stream() << (any_failed ? "VERIFY: FAIL\n" : "VERIFY: PASS\n");
    w.commit();
  }
  log << (any_failed ? "VERIFY: FAIL\n" : "VERIFY: PASS\n");
  return any_failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// train / sample

inline int run_train(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  ensure_out_dir(cfg.out_dir);
  const Target target = cfg.load_target_checked();
  const Schedule s = build_schedule(cfg.T, cfg.c0, cfg.c1);
  RngStream rng(cfg.seed, 100);
  const ConsistencyStack st = train_stack(target, s, cfg.regressor, rng);
  const std::string path =
      cfg.stack_path.empty() ? cfg.out_dir + "/stack.bin" : cfg.stack_path;
  save_stack(st, path);
  log << "wrote " << path << " (T=" << s.T << ", " << cfg.regressor.descriptor() << ")\n";
  return 0;
}

inline int run_sample(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  ensure_out_dir(cfg.out_dir);
  const std::string path =
      cfg.stack_path.empty() ? cfg.out_dir + "/stack.bin" : cfg.stack_path;
  const ConsistencyStack st = load_stack(path);
  RngStream rng(cfg.seed, 200);
  const Mat samples = one_shot_sample(st, cfg.n_samples, rng);
  AtomicFileWriter w(cfg.out_dir + "/samples.csv");
  std::vector<std::string> header;
  for (int j = 0; j < st.d; ++j) header.push_back("x" + std::to_string(j));
  CsvWriter csv(w.stream(), header);
  for (int i = 0; i < samples.rows(); ++i) {
    for (int j = 0; j < st.d; ++j) csv.field(samples(i, j));
    csv.end_row();
  }
  w.commit();
  log << "wrote " << cfg.out_dir << "/samples.csv (" << cfg.n_samples << " rows)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// scaling study

struct SweepRow {
  int T = 0;
  int d = 0;
  double lipschitz_hat = 0.0;
  double eps_hat = 0.0;
  double w1_sliced = 0.0;
  double w1_sliced_se = 0.0;
  double w1_sliced_floor = 0.0;
  double w1_assign = 0.0;
  double w1_assign_floor = 0.0;
  std::string estimator;
  int n = 0;
  std::uint64_t seed = 0;
  double wall_ms = 0.0;
};

namespace detail {

inline double mean_block_assignment(const Mat& a, const Mat& b, int block, int blocks) {
  double acc = 0.0;
  int used = 0;
  for (int k = 0; k < blocks; ++k) {
    const int lo = k * block;
    if (lo + block > a.rows() || lo + block > b.rows()) break;
    acc += w1_assignment(a.middleRows(lo, block), b.middleRows(lo, block));
    ++used;
  }
  return used ? acc / used : std::numeric_limits<double>::quiet_NaN();
}

struct SlopeFit {
  double slope = 0.0;
  double se = 0.0;
  int used = 0;
};

inline SlopeFit fit_loglog_slope(const std::vector<double>& T, const std::vector<double>& w) {
  SlopeFit f;
  const int n = int(T.size());
  f.used = n;
  if (n < 2) return f;
  double sx = 0, sy = 0;
  std::vector<double> xs(n), ys(n);
  for (int i = 0; i < n; ++i) {
    xs[i] = std::log(T[i]);
    ys[i] = std::log(w[i]);
    sx += xs[i];
    sy += ys[i];
  }
  const double xbar = sx / n, ybar = sy / n;
  double sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    sxx += (xs[i] - xbar) * (xs[i] - xbar);
    sxy += (xs[i] - xbar) * (ys[i] - ybar);
  }
  f.slope = sxy / sxx;
  double ss = 0;
  for (int i = 0; i < n; ++i) {
    const double r = ys[i] - ybar - f.slope * (xs[i] - xbar);
    ss += r * r;
  }
  f.se = n > 2 ? std::sqrt(ss / double(n - 2) / sxx) : 0.0;
  return f;
}

}  // namespace detail

inline SweepRow run_scaling_cell(const Target& target, const ExperimentConfig& cfg, int T,
                                 std::uint64_t cell_index) {
  const auto t0 = std::chrono::steady_clock::now();
  SweepRow row;
  row.T = T;
  row.d = dim(target);
  row.estimator = "sliced+assignment";
  row.n = cfg.n_samples;
  row.seed = cfg.seed;

  const Schedule s = build_schedule(T, cfg.c0, cfg.c1);
  RngStream cell_rng(cfg.seed, 500, cell_index);
  RngStream train_rng = cell_rng.split(1);
  const ConsistencyStack st = train_stack(target, s, cfg.regressor, train_rng);

  RngStream draw_rng = cell_rng.split(2);
  const Mat out = one_shot_sample(st, cfg.n_samples, draw_rng);
  const Mat x1_a = sample_marginal(target, s, 1, cfg.n_samples, draw_rng);
  const Mat x1_b = sample_marginal(target, s, 1, cfg.n_samples, draw_rng);

  RngStream proj_rng = cell_rng.split(3);
  RngStream proj_rng_floor = proj_rng;
  const SlicedW1 sw = sliced_w1(out, x1_a, cfg.n_projections, proj_rng);
  const SlicedW1 fw = sliced_w1(x1_b, x1_a, cfg.n_projections, proj_rng_floor);
  row.w1_sliced = sw.mean;
  row.w1_sliced_se = sw.standard_error;
  row.w1_sliced_floor = fw.mean;

  const int block = std::min(cfg.assignment_subsample, cfg.n_samples);
  const int blocks = std::min(4, cfg.n_samples / std::max(block, 1));
  row.w1_assign = detail::mean_block_assignment(out, x1_a, block, blocks);
  row.w1_assign_floor = detail::mean_block_assignment(x1_b, x1_a, block, blocks);

  try {
    RngStream err_rng = cell_rng.split(4);
    row.eps_hat = estimation_error(st, target, s, 256, err_rng).eps_hat;
  } catch (const std::exception&) {
    row.eps_hat = std::numeric_limits<double>::quiet_NaN();
  }

  {
    RngStream lip_rng = cell_rng.split(5);
    std::vector<std::pair<int, int>> pairs{{T, 1}};
    if (T >= 4) {
      pairs.push_back({T, T / 2});
      pairs.push_back({T / 2, 1});
    }
    const CheckReport lr = estimate_lipschitz(target, s, pairs, 10, cfg.flow, lip_rng);
    row.lipschitz_hat = lr.rows.back().lhs;
  }

  row.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

namespace detail {
inline void write_sweep_rows(std::ostream& os, const std::vector<const SweepRow*>& rows,
                             const ExperimentConfig& cfg) {
  CsvWriter csv(os, {"T", "d", "lipschitz_hat", "eps_hat", "w1_sliced", "w1_sliced_se",
                     "w1_sliced_floor", "w1_assign", "w1_assign_floor", "estimator", "n",
                     "seed", "substeps", "integrator", "n_projections"});
  for (const SweepRow* r : rows) {
    csv.field(r->T)
        .field(r->d)
        .field(r->lipschitz_hat)
        .field(r->eps_hat)
        .field(r->w1_sliced)
        .field(r->w1_sliced_se)
        .field(r->w1_sliced_floor)
        .field(r->w1_assign)
        .field(r->w1_assign_floor)
        .field(r->estimator)
        .field(r->n)
        .field((long long)r->seed)
        .field(cfg.flow.substeps)
        .field(integrator_name(cfg.flow.integrator))
        .field(cfg.n_projections);
    csv.end_row();
  }
}
}  // namespace detail

inline int run_scaling(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
  if (cfg.T_list.size() < 3)
    throw std::runtime_error("scaling: T_list must have at least 3 entries");
  ensure_out_dir(cfg.out_dir);
  ensure_out_dir(cfg.out_dir + "/cells");
  const Target target = cfg.load_target_checked();

  const int cells = int(cfg.T_list.size());
  std::vector<SweepRow> rows(cells);
  std::atomic<int> next{0};
  std::vector<std::string> errors(cells);
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= cells) return;
      try {
        rows[i] = run_scaling_cell(target, cfg, cfg.T_list[std::size_t(i)], std::uint64_t(i));
      } catch (const std::exception& e) {
        errors[std::size_t(i)] = e.what();
        rows[std::size_t(i)].T = cfg.T_list[std::size_t(i)];
        rows[std::size_t(i)].w1_sliced = std::numeric_limits<double>::quiet_NaN();
      }
      // flush the finished cell immediately so partial sweeps leave data behind
      AtomicFileWriter w(cfg.out_dir + "/cells/T" +
                         std::to_string(cfg.T_list[std::size_t(i)]) + ".csv");
      detail::write_sweep_rows(w.stream(), {&rows[std::size_t(i)]}, cfg);
      w.commit();
    }
  };
  const int nw = std::max(1, std::min(cfg.workers, cells));
  {
    std::vector<std::thread> pool;
    for (int i = 0; i < nw; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  {
    AtomicFileWriter w(cfg.out_dir + "/sweep.csv");
    std::vector<const SweepRow*> ptrs;
    for (const auto& r : rows) ptrs.push_back(&r);
    detail::write_sweep_rows(w.stream(), ptrs, cfg);
    w.commit();
  }
  {
    AtomicFileWriter w(cfg.out_dir + "/sweep_timing.csv");
    CsvWriter csv(w.stream(), {"T", "wall_ms"});
    for (const auto& r : rows) {
      csv.field(r.T).field(r.wall_ms);
      csv.end_row();
    }
    w.commit();
  }

  // slope over rows not dominated by the training error and not failed
  std::vector<double> Ts, ws;
  for (const auto& r : rows) {
    if (!std::isfinite(r.w1_sliced)) continue;
    if (std::isfinite(r.eps_hat) && r.eps_hat > cfg.slope_eps_fraction * r.w1_sliced) continue;
    Ts.push_back(double(r.T));
    ws.push_back(r.w1_sliced);
  }
  const detail::SlopeFit fit = detail::fit_loglog_slope(Ts, ws);
  const double ci_lo = fit.slope - 2.0 * fit.se, ci_hi = fit.slope + 2.0 * fit.se;

  bool any_error = false;
  {
    AtomicFileWriter w(cfg.out_dir + "/sweep_summary.txt");
    auto& os = w.stream();
    os << "scaling study: " << cfg.target_path << "  " << cfg.regressor.descriptor() << "\n";
    os << "integrator=" << integrator_name(cfg.flow.integrator)
       << " substeps=" << cfg.flow.substeps << " n=" << cfg.n_samples
       << " projections=" << cfg.n_projections << " seed=" << cfg.seed << "\n";
    for (int i = 0; i < cells; ++i) {
      const auto& r = rows[std::size_t(i)];
      os << "T=" << r.T << "  w1_sliced=" << format_double(r.w1_sliced)
         << " (floor " << format_double(r.w1_sliced_floor) << ")"
         << "  w1_assign=" << format_double(r.w1_assign) << " (floor "
         << format_double(r.w1_assign_floor) << ")"
         << "  eps_hat=" << format_double(r.eps_hat)
         << "  L_hat=" << format_double(r.lipschitz_hat) << "\n";
      if (!errors[std::size_t(i)].empty()) {
        os << "  ERROR: " << errors[std::size_t(i)] << "\n";
        any_error = true;
      }
    }
    os << "log-log slope of w1_sliced vs T: " << format_double(fit.slope) << " (se "
       << format_double(fit.se) << ", rows used " << fit.used << ")\n";
    if (ci_lo <= 0.0 && ci_hi >= 0.0)
      os << "note: rate masked by statistical floor (slope CI includes 0)\n";
    w.commit();
  }
  log << "scaling: slope=" << format_double(fit.slope) << " se=" << format_double(fit.se)
      << " rows=" << fit.used << "\n";
  return any_error ? 1 : 0;
}

}  // namespace ctlab
