#include "metamd/bounds.hpp"

#include <algorithm>
#include <cmath>

#include "metamd/errors.hpp"

namespace metamd {

namespace {

double positive_lambda(const DiagonalMahalanobisSet& m) {
  const double lambda = lambda_strong_convexity(m);
  if (!(lambda > 0.0)) throw DivergenceInvalidError("regret bound: lambda is zero");
  return lambda;
}

BoundValue make(std::vector<BoundTerm> terms) {
  BoundValue v;
  for (const auto& t : terms) v.total += t.value;
  v.terms = std::move(terms);
  return v;
}

}  // namespace

void BoundInputs::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw ArgumentError("delta must lie in (0, 1)");
  if (!(eta > 0.0)) throw ArgumentError("eta must be positive");
  if (!(lambda > 0.0)) throw DivergenceInvalidError("lambda must be positive");
  if (!(n_tasks > 0.0) || !(n_matrices > 0.0)) throw ArgumentError("n and N must be positive");
  if (!(horizon >= 0.0) || !(lipschitz >= 0.0) || !(c >= 0.0) || !(r >= 0.0) || !(mean_bregman >= 0.0)) {
    throw ArgumentError("bound inputs must be non-negative");
  }
}

double empirical_regret(const Trajectory& traj, double l_star) {
  double sum = 0.0;
  for (double l : traj.losses) sum += l - l_star;
  return sum;
}

BoundValue regret_bound_thm1(const DiagonalMahalanobisSet& m, const Vector& theta_star, const Vector& theta_1,
                             const Trajectory& traj, double eta) {
  const double lambda = positive_lambda(m);
  double sq = 0.0;
  for (double gn : traj.grad_norms) sq += gn * gn;
  return make({{"divergence", bregman_div(m, theta_star, theta_1) / eta},
               {"gradient", eta / (2.0 * lambda) * sq}});
}

BoundValue regret_bound_lipschitz(const DiagonalMahalanobisSet& m, const Vector& theta_star,
                                  const Vector& theta_1, double eta, double horizon, double lipschitz) {
  const double lambda = positive_lambda(m);
  return make({{"divergence", bregman_div(m, theta_star, theta_1) / eta},
               {"gradient", eta / (2.0 * lambda) * horizon * lipschitz * lipschitz}});
}

BoundValue generalization_bound(const BoundInputs& in) {
  in.validate();
  return make({
      {"divergence", in.mean_bregman / in.eta},
      {"gradient", in.eta * in.horizon * in.lipschitz * in.lipschitz / (2.0 * in.lambda)},
      {"complexity", in.n_matrices * in.c * in.c * in.r * in.r / (2.0 * std::sqrt(in.n_tasks))},
      {"confidence", 3.0 * std::sqrt(in.c * in.r * std::log(2.0 / in.delta) / (8.0 * in.n_tasks))},
  });
}

BoundReport check_regret_bounds(const std::string& task_name, const DiagonalMahalanobisSet& m,
                                const Vector& theta_star, double l_star, const Trajectory& traj, double eta,
                                double tolerance) {
  BoundReport r;
  r.task = task_name;
  r.l_star = l_star;
  r.eta = eta;
  r.lambda = lambda_strong_convexity(m);
  r.iterations = traj.iterations;
  r.lhs_empirical = empirical_regret(traj, l_star);
  r.lipschitz_constant = traj.grad_norms.empty() ? 0.0 : *std::max_element(traj.grad_norms.begin(), traj.grad_norms.end());
  r.thm1 = regret_bound_thm1(m, theta_star, traj.initial(), traj, eta);
  r.lipschitz = regret_bound_lipschitz(m, theta_star, traj.initial(), eta,
                                       static_cast<double>(traj.grad_norms.size()), r.lipschitz_constant);
  r.thm1_satisfied = r.lhs_empirical <= r.thm1.total + tolerance;
  r.lipschitz_satisfied = r.lhs_empirical <= r.lipschitz.total + tolerance;
  return r;
}

nlohmann::json to_json(const BoundValue& v) {
  nlohmann::json terms = nlohmann::json::object();
  for (const auto& t : v.terms) terms[t.name] = t.value;
  return {{"total", v.total}, {"terms", terms}};
}

nlohmann::json to_json(const BoundInputs& in) {
  return {{"eta", in.eta},       {"lambda", in.lambda}, {"T", in.horizon}, {"L", in.lipschitz},
          {"C", in.c},           {"r", in.r},           {"delta", in.delta}, {"n", in.n_tasks},
          {"N", in.n_matrices},  {"mean_bregman", in.mean_bregman}};
}

nlohmann::json to_json(const BoundReport& r) {
  return {{"task", r.task},
          {"inputs", {{"eta", r.eta}, {"lambda", r.lambda}, {"L", r.lipschitz_constant},
                      {"iterations", r.iterations}, {"l_star", r.l_star}}},
          {"lhs_empirical", r.lhs_empirical},
          {"rhs_theorem1", to_json(r.thm1)},
          {"rhs_lipschitz", to_json(r.lipschitz)},
          {"theorem1_satisfied", r.thm1_satisfied},
          {"lipschitz_satisfied", r.lipschitz_satisfied}};
}

}  // namespace metamd
