#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "metamd/bregman.hpp"
#include "metamd/metatrain.hpp"
#include "metamd/models.hpp"
#include "metamd/numerics.hpp"

namespace metamd::oracle {

inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-5) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|b|_inf, floor)
inline double rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-12) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), floor);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

/// Runs T plain mirror steps and evaluates B(theta_T || theta_1) + k / lambda.
inline double unrolled_meta_objective(const MetaTask& task, const DiagonalMahalanobisSet& m, const MetaConfig& cfg) {
  Vector theta = task.theta_init;
  for (std::size_t t = 0; t < cfg.inner_steps; ++t) {
    theta = mirror_step(m, {cfg.eta}, theta, task.model.grad(theta, task.batch)).theta;
  }
  const TaskEndpoints ends{task.theta_init, theta};
  return meta_objective(m, std::span<const TaskEndpoints>(&ends, 1), cfg.k);
}

/// Central differences of the unrolled meta-objective over every raw entry.
inline Matrix fd_hypergradient(const MetaTask& task, const DiagonalMahalanobisSet& m, const MetaConfig& cfg,
                               double h = 1e-4) {
  Matrix out(m.count(), m.kappa());
  for (Eigen::Index j = 0; j < m.count(); ++j) {
    for (Eigen::Index i = 0; i < m.kappa(); ++i) {
      Matrix up = m.raw(), down = m.raw();
      up(j, i) += h;
      down(j, i) -= h;
      out(j, i) = (unrolled_meta_objective(task, DiagonalMahalanobisSet(up), cfg) -
                   unrolled_meta_objective(task, DiagonalMahalanobisSet(down), cfg)) /
                  (2 * h);
    }
  }
  return out;
}

/// Smallest gap between the top two pieces of the max mixture at theta.
inline double activation_gap(const DiagonalMahalanobisSet& m, const Vector& theta) {
  if (m.count() < 2) return INFINITY;
  std::vector<double> v;
  for (Eigen::Index j = 0; j < m.count(); ++j) {
    v.push_back((m.raw().row(j).transpose().array().square() * theta.array().square()).sum());
  }
  std::sort(v.rbegin(), v.rend());
  return v[0] - v[1];
}

}  // namespace metamd::oracle

namespace metamd::oracle {

/// argmin_x eta <g, x> + B_phi(x || theta) by fixed-step gradient descent on
/// the max-mixture objective itself, started from theta.
inline Vector numeric_mirror_argmin(const DiagonalMahalanobisSet& m, double eta, const Vector& theta,
                                    const Vector& g, int iters = 2000) {
  const double lipschitz = m.effective().maxCoeff();
  const Vector anchor = grad_phi(m, theta);
  Vector x = theta;
  for (int it = 0; it < iters; ++it) x -= (eta * g + grad_phi(m, x) - anchor) / lipschitz;
  return x;
}

}  // namespace metamd::oracle
