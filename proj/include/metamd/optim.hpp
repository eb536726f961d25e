#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "metamd/bregman.hpp"
#include "metamd/models.hpp"
#include "metamd/numerics.hpp"
#include "metamd/rng.hpp"

namespace metamd {

struct Sgd {};
struct SgdMomentum {
  double mu = 0.9;
};
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};
struct RmsProp {
  double alpha = 0.99;
  double eps = 1e-8;
};
struct MetaMd {
  DiagonalMahalanobisSet divergence;
};

struct OptimizerSpec {
  std::variant<Sgd, SgdMomentum, Adam, RmsProp, MetaMd> kind;
  double learning_rate = 0.01;
  double weight_decay = 0.0;

  static OptimizerSpec sgd(double lr, double wd = 0.0) { return {Sgd{}, lr, wd}; }
  static OptimizerSpec sgd_momentum(double lr, double mu = 0.9, double wd = 0.0) {
    return {SgdMomentum{mu}, lr, wd};
  }
  static OptimizerSpec adam(double lr, double wd = 0.0) { return {Adam{}, lr, wd}; }
  static OptimizerSpec rmsprop(double lr, double wd = 0.0) { return {RmsProp{}, lr, wd}; }
  static OptimizerSpec metamd(DiagonalMahalanobisSet m, double eta, double wd = 0.0) {
    return {MetaMd{std::move(m)}, eta, wd};
  }

  /// Throws ArgumentError when a hyperparameter is outside its valid range.
  void validate() const;
  /// "sgd", "sgd_momentum", "adam", "rmsprop" or "metamd".
  std::string name() const;
  bool is_metamd() const noexcept { return std::holds_alternative<MetaMd>(kind); }
};

/// Per-run buffers (momentum, moment estimates). Starts empty.
struct OptimizerState {
  Vector first;
  Vector second;
  long steps = 0;
};

struct StepResult {
  Vector theta;
  int active = -1;  // MetaMD's active matrix, -1 for the baselines
};

/// One update. Weight decay is decoupled: theta <- theta * (1 - lr * wd)
/// before the optimizer's own rule.
StepResult step(const OptimizerSpec& spec, OptimizerState& state, const Vector& theta, const Vector& g);

struct StoppingCriteria {
  double grad_norm_eps = 1e-3;     // <= 0 disables
  std::size_t plateau_window = 0;  // 0 disables; otherwise >= 2
  double plateau_tol = 0.0;
  std::size_t max_iters = 1000;

  void validate() const;
};

enum class StopReason { kGradEps, kPlateau, kMaxIters };
std::string to_string(StopReason r);
StopReason stop_reason_from_string(const std::string& s);

/// Record of one inner-loop run. Entry t of losses/grad_norms/active_indices
/// describes the t-th iterate (t = 0 is the starting point), so every dense
/// sequence has iterations + 1 entries. Parameter snapshots may be thinned.
struct Trajectory {
  std::vector<std::size_t> theta_iters;
  std::vector<Vector> thetas;
  std::vector<double> losses;
  std::vector<double> grad_norms;
  std::vector<int> active_indices;
  StopReason stop_reason = StopReason::kMaxIters;
  std::size_t iterations = 0;

  const Vector& initial() const { return thetas.front(); }
  const Vector& final_theta() const { return thetas.back(); }
};

/// Supplies the batch used at each step: the whole dataset, or uniformly
/// sampled mini-batches (without replacement within a batch).
class Batcher {
 public:
  Batcher() = default;
  explicit Batcher(Batch data, std::size_t batch_size = 0);

  const Batch& next(RngStream& rng);
  const Batch& full() const noexcept { return data_; }
  bool full_batch() const noexcept { return batch_size_ == 0 || batch_size_ >= static_cast<std::size_t>(data_.size()); }

 private:
  Batch data_;
  std::size_t batch_size_ = 0;
  Batch scratch_;
};

/// Thrown when a loss or gradient turns non-finite; keeps the partial record.
class TrainingDivergedError : public std::runtime_error {
 public:
  TrainingDivergedError(const std::string& what, Trajectory partial)
      : std::runtime_error(what), trajectory_(std::move(partial)) {}
  const Trajectory& trajectory() const noexcept { return trajectory_; }

 private:
  Trajectory trajectory_;
};

struct TrainingOptions {
  std::size_t thin_every = 1;  // keep every k-th parameter snapshot (plus the last)
};

Trajectory run_training(const BaseModel& model, Batcher& batcher, const OptimizerSpec& spec,
                        const StoppingCriteria& stop, const Vector& theta_init, RngStream& rng,
                        const TrainingOptions& options = {});

/// CSV with header iteration,loss,grad_norm,active_index.
std::string trajectory_to_csv(const Trajectory& t);

// Binary layout (little-endian): "MMDT", u32 version, u64 kappa, u64
// iterations, u8 stop reason, u64 dense count, dense count x (f64 loss, f64
// grad norm, i32 active), u64 snapshot count, snapshot count x (u64
// iteration, kappa x f64).
std::string to_binary(const Trajectory& t);
Trajectory trajectory_from_binary(const std::string& bytes);

}  // namespace metamd
