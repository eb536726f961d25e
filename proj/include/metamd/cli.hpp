#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "metamd/bregman.hpp"
#include "metamd/metatrain.hpp"
#include "metamd/optim.hpp"
#include "metamd/tasks.hpp"
#include "metamd/tuner.hpp"

namespace metamd::cli {

struct CommonOptions {
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  std::size_t threads = 1;
};

/// Quadratic family plus the starting-point distribution theta_1 ~ N(0, init_std^2 I).
struct QuadraticOptions {
  double q00 = 0.3;
  double q11 = 14.0;
  double offdiag_std = 0.1;
  double diag_rel_std = 0.1;
  double init_std = 1.0;
  std::size_t task_pool = 0;  // 0 draws a fresh task every time
};

/// Classification domains: synthetic blobs, or IDX files named in a manifest
/// (relative to METAMD_DATA_DIR) optionally expanded into rotated copies.
struct DomainOptions {
  int domains = 3;
  int held_out = -1;  // index of the meta-test domain; -1 means the last
  int dim = 64;
  int classes = 3;
  int samples_per_class = 30;
  int hidden = 4;
  std::string activation = "tanh";
  double val_fraction = 0.1;
  std::string manifest;
  std::vector<double> rotations;
  int image_width = 8;
};

struct RosenbrockOptions {
  double start_x = -1.5;
  double start_y = 2.0;
  double init_std = 0.2;
};

struct MetaTrainOptions {
  CommonOptions common;
  std::string family = "quadratic";  // quadratic | rosenbrock | blobs | idx
  QuadraticOptions quad;
  DomainOptions domains;
  RosenbrockOptions rosen;
  int n_matrices = 3;
  double m_init = 1.0;
  MetaConfig meta;
  std::size_t snapshot_every = 0;
  // When non-empty, eta is first chosen from these by mean final training
  // loss of eta_select_iters MetaMD steps (with M_init) on sampled tasks,
  // preferring candidates whose loss never increases on any of them.
  std::vector<double> eta_candidates;
  std::size_t eta_select_iters = 500;
  std::size_t eta_select_tasks = 4;

  void validate() const;
};

struct CompareOptions {
  CommonOptions common;
  std::string family = "quadratic";
  QuadraticOptions quad;
  DomainOptions domains;
  RosenbrockOptions rosen;
  std::filesystem::path divergence;  // required when metamd is compared
  double eta = 0.1;
  std::vector<std::string> optimizers = {"metamd", "sgd", "sgd_momentum", "adam", "rmsprop"};
  std::string baseline_tuning = "grid";  // grid | fixed
  double baseline_lr = 0.01;
  double baseline_wd = 0.0;
  std::size_t n_tasks = 100;
  double grad_eps = 1e-3;
  std::size_t max_iters = 10000;
  std::size_t plateau_window = 0;
  double plateau_tol = 0.0;
  std::size_t batch_size = 0;
  std::size_t thin_every = 1;

  void validate() const;
};

struct BoundsOptions {
  CommonOptions common;
  std::filesystem::path run;  // directory written by compare
  double delta = 0.1;
  std::string frobenius = "effective";  // effective | raw
  double tolerance = 1e-9;

  void validate() const;
};

struct TuneOptions {
  CommonOptions common;
  std::string family = "blobs";
  QuadraticOptions quad;
  DomainOptions domains;
  std::string optimizer = "sgd";
  std::string mode = "grid";  // grid | bayes
  std::size_t iters = 25;
  double beta = 2.0;
  std::size_t max_iters = 500;
  double grad_eps = 0.0;

  void validate() const;
};

struct DemoOptions {
  MetaTrainOptions train;
  CompareOptions compare;
};

/// Each command validates its options before touching the output
/// directory, logs progress to `log`, and returns a process exit code.
int cmd_meta_train(const MetaTrainOptions& opt, std::ostream& log);
int cmd_compare(const CompareOptions& opt, std::ostream& log);
int cmd_bounds(const BoundsOptions& opt, std::ostream& log);
int cmd_tune(const TuneOptions& opt, std::ostream& log);
int cmd_quad_demo(const DemoOptions& opt, std::ostream& log);
int cmd_rosenbrock_demo(const DemoOptions& opt, std::ostream& log);

DemoOptions quad_demo_defaults();
DemoOptions rosenbrock_demo_defaults();

/// Dataset root from METAMD_DATA_DIR, or the working directory.
std::filesystem::path data_root();

/// Full command-line entry point (subcommands, --config files, overrides).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace metamd::cli
