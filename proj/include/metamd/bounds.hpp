#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "metamd/bregman.hpp"
#include "metamd/optim.hpp"

namespace metamd {

/// Inputs to the generalization bound. mean_bregman is the average of
/// B_phi(theta* || theta_1) over the n meta-training tasks.
struct BoundInputs {
  double eta = 0.1;
  double lambda = 1.0;
  double horizon = 1.0;  // T
  double lipschitz = 1.0;  // L
  double c = 1.0;        // cap on ||M_j||_F
  double r = 1.0;        // cap on ||theta_1 - theta*||_2
  double delta = 0.1;
  double n_tasks = 1.0;
  double n_matrices = 1.0;
  double mean_bregman = 0.0;

  void validate() const;
};

struct BoundTerm {
  std::string name;
  double value = 0.0;
};

/// A bound's value with the terms it is the sum of.
struct BoundValue {
  double total = 0.0;
  std::vector<BoundTerm> terms;
};

/// sum_t (l(theta_t) - l*) over every recorded iterate.
double empirical_regret(const Trajectory& traj, double l_star);

/// B_phi(theta* || theta_1) / eta + eta / (2 lambda) * sum_t ||g_t||^2, with
/// the gradient norms recorded in the trajectory.
BoundValue regret_bound_thm1(const DiagonalMahalanobisSet& m, const Vector& theta_star, const Vector& theta_1,
                             const Trajectory& traj, double eta);

/// B_phi(theta* || theta_1) / eta + eta / (2 lambda) * T * L^2.
BoundValue regret_bound_lipschitz(const DiagonalMahalanobisSet& m, const Vector& theta_star,
                                  const Vector& theta_1, double eta, double horizon, double lipschitz);

/// mean_bregman / eta + eta T L^2 / (2 lambda) + N C^2 r^2 / (2 sqrt n)
///   + 3 sqrt(C r ln(2 / delta) / (8 n)).
BoundValue generalization_bound(const BoundInputs& in);

/// Regret-bound check of one run against its analytic minimizer.
struct BoundReport {
  std::string task;
  double l_star = 0.0;
  double lhs_empirical = 0.0;
  BoundValue thm1;
  BoundValue lipschitz;
  bool thm1_satisfied = false;
  bool lipschitz_satisfied = false;
  // Inputs echoed for auditing.
  double eta = 0.0;
  double lambda = 0.0;
  double lipschitz_constant = 0.0;
  std::size_t iterations = 0;
};

/// Builds the per-run report. L defaults to the largest recorded ||g_t||.
BoundReport check_regret_bounds(const std::string& task_name, const DiagonalMahalanobisSet& m,
                                const Vector& theta_star, double l_star, const Trajectory& traj, double eta,
                                double tolerance = 1e-9);

nlohmann::json to_json(const BoundValue& v);
nlohmann::json to_json(const BoundInputs& in);
nlohmann::json to_json(const BoundReport& r);

}  // namespace metamd
