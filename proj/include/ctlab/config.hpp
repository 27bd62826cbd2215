#pragma once

// Flat key = value configuration files. '#' starts a comment; values keep
// internal whitespace (lists are whitespace-separated). Unknown keys are
// rejected by ExperimentConfig so typos surface immediately.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctlab/consistency.hpp"
#include "ctlab/pf_ode.hpp"

namespace ctlab {

class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    KeyValueConfig cfg;
    cfg.path_ = path;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                 ": expected 'key = value'");
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty key");
      if (cfg.values_.count(key))
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": duplicate key '" +
                                 key + "'");
      cfg.values_[key] = val;
      cfg.lines_[key] = line_no;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, std::optional<std::string> def = {}) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
      if (def) return *def;
      throw std::runtime_error(path_ + ": missing required key '" + key + "'");
    }
    return it->second;
  }

  double get_double(const std::string& key, std::optional<double> def = {}) const {
    if (!has(key) && def) return *def;
    const std::string v = get_string(key);
    try {
      std::size_t pos;
      const double r = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return r;
    } catch (...) {
      throw std::runtime_error(path_ + ":" + std::to_string(line(key)) + ": key '" + key +
                               "' is not a number: '" + v + "'");
    }
  }

  long long get_int(const std::string& key, std::optional<long long> def = {}) const {
    if (!has(key) && def) return *def;
    const std::string v = get_string(key);
    try {
      std::size_t pos;
      const long long r = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument("");
      return r;
    } catch (...) {
      throw std::runtime_error(path_ + ":" + std::to_string(line(key)) + ": key '" + key +
                               "' is not an integer: '" + v + "'");
    }
  }

  std::vector<long long> get_int_list(const std::string& key) const {
    std::stringstream ss(get_string(key));
    std::vector<long long> out;
    long long v;
    while (ss >> v) out.push_back(v);
    if (out.empty())
      throw std::runtime_error(path_ + ":" + std::to_string(line(key)) + ": key '" + key +
                               "' is an empty list");
    return out;
  }

  void reject_unknown(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k))
        throw std::runtime_error(path_ + ":" + std::to_string(line(k)) + ": unknown key '" + k +
                                 "'");
  }

  const std::string& path() const { return path_; }

 private:
  int line(const std::string& key) const {
    auto it = lines_.find(key);
    return it == lines_.end() ? 0 : it->second;
  }
  std::string path_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

struct ExperimentConfig {
  std::string target_path;
  int T = 64;
  std::vector<int> T_list;  // scaling sweeps
  double c0 = 2.0, c1 = 4.0;
  RegressorSpec regressor;
  int n_samples = 10000;
  int n_check = 100000;       // Monte-Carlo size for asserted checks
  int n_projections = 128;
  FlowConfig flow;
  std::string metric = "sliced";  // sliced | assignment
  std::uint64_t seed = 1234;
  std::string out_dir = "out";
  int workers = 1;
  double c3 = 10.0, c4 = 10.0;
  double terminal_exponent = 2.0;
  double slope_eps_fraction = 0.5;  // exclude sweep rows with eps_hat > frac * W1
  int assignment_subsample = 512;
  std::string stack_path;

  static ExperimentConfig from_file(const std::string& path) {
    const KeyValueConfig kv = KeyValueConfig::from_file(path);
    kv.reject_unknown({"target", "T", "T_list", "c0", "c1", "regressor", "batch", "k",
                       "bandwidth", "ridge", "profile_tolerance", "n_samples", "n_check",
                       "n_projections", "substeps", "integrator", "metric", "seed", "out",
                       "workers", "c3", "c4", "terminal_exponent", "slope_eps_fraction",
                       "assignment_subsample", "stack"});
    ExperimentConfig c;
    c.target_path = kv.get_string("target", std::string(""));
    c.T = int(kv.get_int("T", 64));
    if (kv.has("T_list")) {
      for (long long v : kv.get_int_list("T_list")) c.T_list.push_back(int(v));
      for (std::size_t i = 1; i < c.T_list.size(); ++i)
        if (c.T_list[i] <= c.T_list[i - 1])
          throw std::runtime_error(path + ": T_list must be strictly increasing");
    }
    c.c0 = kv.get_double("c0", 2.0);
    c.c1 = kv.get_double("c1", 4.0);
    c.regressor.kind = regressor_from_name(kv.get_string("regressor", std::string("exact_oracle")));
    c.regressor.training_batch = int(kv.get_int("batch", 10000));
    c.regressor.k = int(kv.get_int("k", 16));
    c.regressor.bandwidth = kv.get_double("bandwidth", 0.0);
    c.regressor.ridge = kv.get_double("ridge", 1e-12);
    c.regressor.profile_tolerance = kv.get_double("profile_tolerance", 1e-10);
    c.n_samples = int(kv.get_int("n_samples", 10000));
    c.n_check = int(kv.get_int("n_check", 100000));
    c.n_projections = int(kv.get_int("n_projections", 128));
    c.flow.substeps = int(kv.get_int("substeps", 8));
    c.flow.integrator = integrator_from_name(kv.get_string("integrator", std::string("rk4")));
    c.metric = kv.get_string("metric", std::string("sliced"));
    if (c.metric != "sliced" && c.metric != "assignment")
      throw std::runtime_error(path + ": metric must be 'sliced' or 'assignment'");
    c.seed = std::uint64_t(kv.get_int("seed", 1234));
    c.out_dir = kv.get_string("out", std::string("out"));
    c.workers = int(kv.get_int("workers", 1));
    c.c3 = kv.get_double("c3", 10.0);
    c.c4 = kv.get_double("c4", 10.0);
    c.terminal_exponent = kv.get_double("terminal_exponent", 2.0);
    c.slope_eps_fraction = kv.get_double("slope_eps_fraction", 0.5);
    c.assignment_subsample = int(kv.get_int("assignment_subsample", 512));
    c.stack_path = kv.get_string("stack", std::string(""));
    return c;
  }

  Target load_target_checked() const {
    if (target_path.empty()) throw std::runtime_error("config: no target file given");
    if (!std::filesystem::exists(target_path))
      throw std::runtime_error("config: target file does not exist: " + target_path);
    return load_target(target_path);
  }
};

}  // namespace ctlab
