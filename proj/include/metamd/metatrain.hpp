#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metamd/bregman.hpp"
#include "metamd/models.hpp"
#include "metamd/numerics.hpp"
#include "metamd/rng.hpp"

namespace metamd {

enum class FmdMode { kDenseHessian, kHvpColumns };
std::string to_string(FmdMode m);
FmdMode fmd_mode_from_string(const std::string& s);

struct MetaConfig {
  double outer_lr = 0.01;          // rho
  double k = 0.0;                  // weight of the k / lambda regulariser
  std::size_t inner_steps = 50;    // T
  double eta = 0.1;                // inner mirror step size
  std::size_t meta_batch = 1;      // n tasks per outer step
  std::size_t outer_iters = 100;
  FmdMode fmd_mode = FmdMode::kDenseHessian;
  double m_floor = 1e-4;           // |m| clamp applied after each outer update
  Eigen::Index hessian_cap = BaseModel::kDefaultHessianCap;
  std::size_t threads = 1;

  void validate() const;
};

/// One sampled meta-training problem with its starting point.
struct MetaTask {
  BaseModel model;
  Batch batch;  // full batch; empty for analytic objectives
  Vector theta_init;
};

/// Forward-mode tangent Z_t = d theta_t / d m, kappa x (N * kappa). Column
/// j * kappa + i holds the derivative with respect to m_{j,i}.
struct TangentState {
  Matrix z;
  std::size_t step = 0;

  static TangentState zeros(Eigen::Index kappa, Eigen::Index n_matrices) {
    return {Matrix::Zero(kappa, kappa * n_matrices), 0};
  }
};

/// Z_{t+1} = A_t Z_t + B_t for the step taken from theta_t.
Matrix fmd_step(const BaseModel& model, const Batch& batch, const DiagonalMahalanobisSet& m, double eta,
                const Vector& theta, const Matrix& z, FmdMode mode = FmdMode::kDenseHessian,
                Eigen::Index hessian_cap = BaseModel::kDefaultHessianCap);

struct TaskEndpoints {
  Vector theta_initial;
  Vector theta_final;
};

/// (1/n) sum_i B_phi(theta_T^i || theta_1^i) + k / lambda.
double meta_objective(const DiagonalMahalanobisSet& m, std::span<const TaskEndpoints> tasks, double k);

/// dE/dm split by origin. Each part is N x kappa (row j = matrix j).
struct HyperGradient {
  Matrix direct;
  Matrix indirect;
  Matrix lambda_part;
  Matrix total;  // direct + indirect + lambda_part
};

struct InnerRunSummary {
  TaskEndpoints endpoints;
  double bregman = 0.0;
  std::vector<std::size_t> activation_counts;  // per matrix, sums to T
};

struct HyperGradientResult {
  HyperGradient grad;
  InnerRunSummary run;
};

/// Runs T mirror steps while co-propagating the tangent, then assembles the
/// direct, indirect and lambda contributions of the single-task objective
/// B_phi(theta_T || theta_1) + k / lambda.
HyperGradientResult hypergradient(const MetaTask& task, const DiagonalMahalanobisSet& m, const MetaConfig& cfg);

/// Reverse-mode oracle: stores the trajectory and accumulates adjoints
/// backwards with Hessian-vector products. Refuses kappa * T above the cap.
HyperGradientResult rmd_hypergradient(const MetaTask& task, const DiagonalMahalanobisSet& m,
                                      const MetaConfig& cfg, std::size_t memory_cap = 10'000'000);

struct MetaHistory {
  std::vector<double> meta_objective;  // evaluated at M before each update
  std::vector<double> lambda;
  std::vector<std::vector<std::size_t>> activation_counts;  // per iteration, per matrix
};

class MetaTrainingAborted : public std::runtime_error {
 public:
  MetaTrainingAborted(const std::string& what, MetaHistory history, DiagonalMahalanobisSet last)
      : std::runtime_error(what), history_(std::move(history)), last_(std::move(last)) {}
  const MetaHistory& history() const noexcept { return history_; }
  const DiagonalMahalanobisSet& last() const noexcept { return last_; }

 private:
  MetaHistory history_;
  DiagonalMahalanobisSet last_;
};

/// Draws a task from the family using the given stream.
using TaskSampler = std::function<MetaTask(RngStream&)>;
/// Called after each outer update with the iteration count and new M.
using OuterCallback = std::function<void(std::size_t, const DiagonalMahalanobisSet&)>;

struct OuterLoopResult {
  DiagonalMahalanobisSet divergence;
  MetaHistory history;
};

/// Gradient descent on M: each iteration samples n tasks (task s of
/// iteration i uses rng.split(i * n + s)), sums their hypergradients in task
/// order, applies M <- M - (rho / n) h and clamps |m| >= m_floor.
OuterLoopResult outer_loop(const TaskSampler& sampler, const DiagonalMahalanobisSet& m_init,
                           const MetaConfig& cfg, const RngStream& rng, const OuterCallback& on_update = {});

}  // namespace metamd
