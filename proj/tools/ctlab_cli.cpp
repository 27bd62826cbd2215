// ctlab command-line interface.
//
// Subcommands:
//   schedule  dump (t, beta, alpha, alpha_bar) as CSV
//   verify    run the verification suite; exit 1 if an asserted check fails
//   train     fit a consistency stack and write the stack container
//   sample    load a stack and write one-shot samples as CSV
//   scaling   sweep over a T-list and fit the W1-vs-T slope
//
// Exit codes: 0 success, 1 assertion failure, 2 usage/config error.

#include <CLI11.hpp>

#include "ctlab/harness.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> workers;
  std::optional<int> n;
  std::optional<std::string> stack;
  std::optional<int> T;
  std::string format = "csv";
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "path to a key = value config file")->required();
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--out", f.out, "override the output directory");
  cmd->add_option("--workers", f.workers, "override the worker count");
  cmd->add_option("--format", f.format, "output format (csv)");
}

ctlab::ExperimentConfig load(const CommonFlags& f) {
  ctlab::ExperimentConfig cfg = ctlab::ExperimentConfig::from_file(f.config_path);
  if (f.seed) cfg.seed = *f.seed;
  if (f.out) cfg.out_dir = *f.out;
  if (f.workers) cfg.workers = *f.workers;
  if (f.n) cfg.n_samples = *f.n;
  if (f.stack) cfg.stack_path = *f.stack;
  if (f.T) cfg.T = *f.T;
  if (f.format != "csv") throw std::runtime_error("only --format csv is supported");
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"numerical laboratory for recursive consistency training"};
  app.require_subcommand(1);

  CommonFlags sched_f, verify_f, train_f, sample_f, scaling_f;

  CLI::App* sched = app.add_subcommand("schedule", "dump the noising schedule as CSV");
  add_common(sched, sched_f);
  sched->add_option("--T", sched_f.T, "override the config step count");

  CLI::App* verify = app.add_subcommand("verify", "run the verification suite");
  add_common(verify, verify_f);

  CLI::App* train = app.add_subcommand("train", "train a consistency stack");
  add_common(train, train_f);
  train->add_option("--stack", train_f.stack, "stack container output path");

  CLI::App* sample = app.add_subcommand("sample", "one-shot sampling from a trained stack");
  add_common(sample, sample_f);
  sample->add_option("--stack", sample_f.stack, "stack container input path");
  sample->add_option("-n", sample_f.n, "number of samples");

  CLI::App* scaling = app.add_subcommand("scaling", "T-list scaling study");
  add_common(scaling, scaling_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sched->parsed()) return ctlab::run_schedule_dump(load(sched_f));
    if (verify->parsed()) return ctlab::run_verify(load(verify_f));
    if (train->parsed()) return ctlab::run_train(load(train_f));
    if (sample->parsed()) return ctlab::run_sample(load(sample_f));
    if (scaling->parsed()) return ctlab::run_scaling(load(scaling_f));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
