#include "metamd/metatrain.hpp"

#include <algorithm>
#include <cmath>

#include "metamd/errors.hpp"
#include "metamd/parallel.hpp"

namespace metamd {

namespace {

void check_task(const MetaTask& task, const DiagonalMahalanobisSet& m) {
  if (task.theta_init.size() != task.model.param_count() || m.kappa() != task.model.param_count()) {
    throw ArgumentError("hypergradient: task, model and divergence dimensions disagree");
  }
  if (m.degenerate()) throw DivergenceInvalidError("hypergradient: divergence has a zero diagonal entry");
}

// Z <- Z - eta D_j^{-1} H Z + B_j, touching only the column blocks flagged in
// `live` (blocks of matrices that have never been active stay zero).
void fmd_update(const BaseModel& model, const Batch& batch, const DiagonalMahalanobisSet& m, double eta,
                const Vector& theta, const Vector& g, Eigen::Index j, Matrix& z, std::vector<char>& live,
                FmdMode mode, Eigen::Index cap) {
  const Eigen::Index kappa = m.kappa();
  const Vector scale = (eta / m.raw().row(j).array().square()).matrix().transpose();
  const bool any_live = std::find(live.begin(), live.end(), 1) != live.end();
  if (any_live) {
    Matrix h;
    if (mode == FmdMode::kDenseHessian) h = model.hessian_dense(theta, batch, cap);
    for (Eigen::Index b = 0; b < m.count(); ++b) {
      if (!live[static_cast<std::size_t>(b)]) continue;
      auto block = z.middleCols(b * kappa, kappa);
      Matrix hz(kappa, kappa);
      if (mode == FmdMode::kDenseHessian) {
        hz.noalias() = h * block;
      } else {
        for (Eigen::Index c = 0; c < kappa; ++c) hz.col(c) = model.hvp(theta, batch, block.col(c));
      }
      block -= scale.asDiagonal() * hz;
    }
  }
  for (Eigen::Index i = 0; i < kappa; ++i) {
    const double r = m.raw()(j, i);
    z(i, j * kappa + i) += 2.0 * eta * g[i] / (r * r * r);
  }
  live[static_cast<std::size_t>(j)] = 1;
}

// Gradient of B_phi(a || b) with respect to the raw entries, at fixed a, b.
Matrix bregman_direct_grad(const DiagonalMahalanobisSet& m, const Vector& a, const Vector& b) {
  Matrix d = Matrix::Zero(m.count(), m.kappa());
  const Eigen::Index ja = active_index(m, a);
  const Eigen::Index jb = active_index(m, b);
  for (Eigen::Index i = 0; i < m.kappa(); ++i) {
    d(ja, i) += m.raw()(ja, i) * a[i] * a[i];
    d(jb, i) += m.raw()(jb, i) * (b[i] * b[i] - 2.0 * a[i] * b[i]);
  }
  return d;
}

// d(k / lambda)/dm with all weight on the first minimal entry (row-major).
Matrix lambda_grad(const DiagonalMahalanobisSet& m, double k) {
  Matrix out = Matrix::Zero(m.count(), m.kappa());
  if (k == 0.0) return out;
  Eigen::Index bj = 0, bi = 0;
  double best = m.raw()(0, 0) * m.raw()(0, 0);
  for (Eigen::Index j = 0; j < m.count(); ++j) {
    for (Eigen::Index i = 0; i < m.kappa(); ++i) {
      const double v = m.raw()(j, i) * m.raw()(j, i);
      if (v < best) {
        best = v;
        bj = j;
        bi = i;
      }
    }
  }
  if (best == 0.0) throw DivergenceInvalidError("lambda is zero");
  out(bj, bi) = -(k / (best * best)) * 2.0 * m.raw()(bj, bi);
  return out;
}

Matrix reshape_blocks(const Vector& flat, Eigen::Index n, Eigen::Index kappa) {
  Matrix out(n, kappa);
  for (Eigen::Index j = 0; j < n; ++j) out.row(j) = flat.segment(j * kappa, kappa).transpose();
  return out;
}

HyperGradient assemble(const DiagonalMahalanobisSet& m, const InnerRunSummary& run, Matrix indirect,
                       double k) {
  HyperGradient h;
  h.direct = bregman_direct_grad(m, run.endpoints.theta_final, run.endpoints.theta_initial);
  h.indirect = std::move(indirect);
  h.lambda_part = lambda_grad(m, k);
  h.total = h.direct + h.indirect + h.lambda_part;
  return h;
}

void require_finite(const Vector& theta, const Vector& g, std::size_t t) {
  if (!theta.allFinite() || !g.allFinite()) {
    throw DivergenceInvalidError("inner loop produced non-finite values at step " + std::to_string(t));
  }
}

}  // namespace

std::string to_string(FmdMode m) { return m == FmdMode::kDenseHessian ? "dense_hessian" : "hvp_columns"; }

FmdMode fmd_mode_from_string(const std::string& s) {
  if (s == "dense_hessian") return FmdMode::kDenseHessian;
  if (s == "hvp_columns") return FmdMode::kHvpColumns;
  throw ArgumentError("unknown fmd mode '" + s + "' (expected dense_hessian or hvp_columns)");
}

void MetaConfig::validate() const {
  if (!(outer_lr >= 0.0)) throw ArgumentError("outer learning rate must be non-negative");
  if (!(eta > 0.0)) throw ArgumentError("inner step size eta must be positive");
  if (!(k >= 0.0)) throw ArgumentError("k must be non-negative");
  if (inner_steps < 1) throw ArgumentError("inner horizon T must be at least 1");
  if (meta_batch < 1) throw ArgumentError("meta batch must be at least 1");
  if (!(m_floor > 0.0)) throw ArgumentError("m_floor must be positive");
}

Matrix fmd_step(const BaseModel& model, const Batch& batch, const DiagonalMahalanobisSet& m, double eta,
                const Vector& theta, const Matrix& z, FmdMode mode, Eigen::Index hessian_cap) {
  if (z.rows() != m.kappa() || z.cols() != m.kappa() * m.count()) {
    throw ArgumentError("fmd_step: tangent must be kappa x (N * kappa)");
  }
  if (m.degenerate()) throw DivergenceInvalidError("fmd_step: divergence has a zero diagonal entry");
  const Vector g = model.grad(theta, batch);
  Matrix next = z;
  std::vector<char> live(static_cast<std::size_t>(m.count()), 1);
  fmd_update(model, batch, m, eta, theta, g, active_index(m, theta), next, live, mode, hessian_cap);
  return next;
}

double meta_objective(const DiagonalMahalanobisSet& m, std::span<const TaskEndpoints> tasks, double k) {
  if (tasks.empty()) throw ArgumentError("meta_objective: need at least one task");
  const double lambda = lambda_strong_convexity(m);
  if (!(lambda > 0.0)) throw DivergenceInvalidError("meta_objective: lambda is zero");
  double sum = 0.0;
  for (const auto& t : tasks) sum += bregman_div(m, t.theta_final, t.theta_initial);
  return sum / static_cast<double>(tasks.size()) + k / lambda;
}

HyperGradientResult hypergradient(const MetaTask& task, const DiagonalMahalanobisSet& m, const MetaConfig& cfg) {
  check_task(task, m);
  const Eigen::Index kappa = m.kappa();
  InnerRunSummary run;
  run.activation_counts.assign(static_cast<std::size_t>(m.count()), 0);
  run.endpoints.theta_initial = task.theta_init;

  Vector theta = task.theta_init;
  TangentState tangent = TangentState::zeros(kappa, m.count());
  Vector g;
  std::vector<char> live(static_cast<std::size_t>(m.count()), 0);
  for (std::size_t t = 0; t < cfg.inner_steps; ++t) {
    task.model.loss_and_grad(theta, task.batch, g);
    require_finite(theta, g, t);
    const Eigen::Index j = active_index(m, theta);
    ++run.activation_counts[static_cast<std::size_t>(j)];
    fmd_update(task.model, task.batch, m, cfg.eta, theta, g, j, tangent.z, live, cfg.fmd_mode, cfg.hessian_cap);
    tangent.step = t + 1;
    for (Eigen::Index i = 0; i < kappa; ++i) {
      const double r = m.raw()(j, i);
      theta[i] -= cfg.eta * (g[i] / (r * r));
    }
  }
  if (!theta.allFinite() || !tangent.z.allFinite()) {
    throw DivergenceInvalidError("inner loop produced non-finite values");
  }
  run.endpoints.theta_final = theta;
  run.bregman = bregman_div(m, theta, task.theta_init);

  const Vector dir = grad_phi(m, theta) - grad_phi(m, task.theta_init);
  const Vector flat = tangent.z.transpose() * dir;
  HyperGradientResult out;
  out.grad = assemble(m, run, reshape_blocks(flat, m.count(), kappa), cfg.k);
  out.run = std::move(run);
  return out;
}

HyperGradientResult rmd_hypergradient(const MetaTask& task, const DiagonalMahalanobisSet& m,
                                      const MetaConfig& cfg, std::size_t memory_cap) {
  check_task(task, m);
  const Eigen::Index kappa = m.kappa();
  if (static_cast<std::size_t>(kappa) * cfg.inner_steps > memory_cap) {
    throw CapacityError("rmd_hypergradient: kappa * T exceeds the memory cap");
  }
  InnerRunSummary run;
  run.activation_counts.assign(static_cast<std::size_t>(m.count()), 0);
  run.endpoints.theta_initial = task.theta_init;

  std::vector<Vector> thetas, grads;
  std::vector<Eigen::Index> actives;
  Vector theta = task.theta_init;
  Vector g;
  std::vector<char> live(static_cast<std::size_t>(m.count()), 0);
  for (std::size_t t = 0; t < cfg.inner_steps; ++t) {
    task.model.loss_and_grad(theta, task.batch, g);
    require_finite(theta, g, t);
    const Eigen::Index j = active_index(m, theta);
    ++run.activation_counts[static_cast<std::size_t>(j)];
    thetas.push_back(theta);
    grads.push_back(g);
    actives.push_back(j);
    for (Eigen::Index i = 0; i < kappa; ++i) {
      const double r = m.raw()(j, i);
      theta[i] -= cfg.eta * (g[i] / (r * r));
    }
  }
  if (!theta.allFinite()) throw DivergenceInvalidError("inner loop produced non-finite values");
  run.endpoints.theta_final = theta;
  run.bregman = bregman_div(m, theta, task.theta_init);

  Matrix indirect = Matrix::Zero(m.count(), kappa);
  Vector adj = grad_phi(m, theta) - grad_phi(m, task.theta_init);
  for (std::size_t t = cfg.inner_steps; t-- > 0;) {
    const Eigen::Index j = actives[t];
    Vector scaled(kappa);
    for (Eigen::Index i = 0; i < kappa; ++i) {
      const double r = m.raw()(j, i);
      indirect(j, i) += adj[i] * 2.0 * cfg.eta * grads[t][i] / (r * r * r);
      scaled[i] = cfg.eta * adj[i] / (r * r);
    }
    adj -= task.model.hvp(thetas[t], task.batch, scaled);
  }

  HyperGradientResult out;
  out.grad = assemble(m, run, std::move(indirect), cfg.k);
  out.run = std::move(run);
  return out;
}

OuterLoopResult outer_loop(const TaskSampler& sampler, const DiagonalMahalanobisSet& m_init,
                           const MetaConfig& cfg, const RngStream& rng, const OuterCallback& on_update) {
  cfg.validate();
  DiagonalMahalanobisSet m = m_init;
  MetaHistory history;
  const std::size_t n = cfg.meta_batch;

  for (std::size_t it = 0; it < cfg.outer_iters; ++it) {
    std::vector<HyperGradientResult> results(n);
    try {
      parallel_for(n, cfg.threads, [&](std::size_t s) {
        RngStream task_rng = rng.split(static_cast<std::uint64_t>(it * n + s));
        const MetaTask task = sampler(task_rng);
        results[s] = hypergradient(task, m, cfg);
      });
    } catch (const std::exception& e) {
      throw MetaTrainingAborted("meta-training aborted at outer iteration " + std::to_string(it) + ": " +
                                    e.what(),
                                std::move(history), m);
    }

    Matrix h = Matrix::Zero(m.count(), m.kappa());
    std::vector<TaskEndpoints> endpoints;
    std::vector<std::size_t> counts(static_cast<std::size_t>(m.count()), 0);
    for (const auto& r : results) {
      h += r.grad.total;
      endpoints.push_back(r.run.endpoints);
      for (std::size_t j = 0; j < counts.size(); ++j) counts[j] += r.run.activation_counts[j];
    }
    history.meta_objective.push_back(meta_objective(m, endpoints, cfg.k));
    history.lambda.push_back(lambda_strong_convexity(m));
    history.activation_counts.push_back(std::move(counts));

    Matrix updated = m.raw() - (cfg.outer_lr / static_cast<double>(n)) * h;
    if (!updated.allFinite()) {
      throw MetaTrainingAborted("meta-gradient became non-finite at outer iteration " + std::to_string(it),
                                std::move(history), m);
    }
    m = DiagonalMahalanobisSet(std::move(updated));
    m.clamp_magnitude(cfg.m_floor);
    if (on_update) on_update(it + 1, m);
  }
  return {std::move(m), std::move(history)};
}

}  // namespace metamd
