#include "metamd/optim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "metamd/errors.hpp"
#include "metamd/io.hpp"

namespace metamd {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void require_unit(double v, const char* name) {
  if (!(v >= 0.0 && v < 1.0)) throw ArgumentError(std::string(name) + " must lie in [0, 1)");
}

void require_positive(double v, const char* name) {
  if (!(v > 0.0)) throw ArgumentError(std::string(name) + " must be positive");
}

}  // namespace

void OptimizerSpec::validate() const {
  require_positive(learning_rate, "learning rate");
  if (!(weight_decay >= 0.0)) throw ArgumentError("weight decay must be non-negative");
  std::visit(Overloaded{
                 [](const Sgd&) {},
                 [](const SgdMomentum& k) { require_unit(k.mu, "momentum"); },
                 [](const Adam& k) {
                   require_unit(k.beta1, "beta1");
                   require_unit(k.beta2, "beta2");
                   require_positive(k.eps, "eps");
                 },
                 [](const RmsProp& k) {
                   require_unit(k.alpha, "alpha");
                   require_positive(k.eps, "eps");
                 },
                 [](const MetaMd& k) {
                   if (k.divergence.degenerate()) {
                     throw DivergenceInvalidError("metamd: divergence has a zero diagonal entry");
                   }
                 },
             },
             kind);
}

std::string OptimizerSpec::name() const {
  return std::visit(Overloaded{
                        [](const Sgd&) { return std::string("sgd"); },
                        [](const SgdMomentum&) { return std::string("sgd_momentum"); },
                        [](const Adam&) { return std::string("adam"); },
                        [](const RmsProp&) { return std::string("rmsprop"); },
                        [](const MetaMd&) { return std::string("metamd"); },
                    },
                    kind);
}

StepResult step(const OptimizerSpec& spec, OptimizerState& state, const Vector& theta, const Vector& g) {
  if (theta.size() != g.size()) throw ArgumentError("step: theta and gradient lengths differ");
  const double lr = spec.learning_rate;
  Vector base = theta;
  if (spec.weight_decay != 0.0) base *= (1.0 - lr * spec.weight_decay);
  ++state.steps;

  return std::visit(
      Overloaded{
          [&](const Sgd&) { return StepResult{base - lr * g, -1}; },
          [&](const SgdMomentum& k) {
            if (state.first.size() != g.size()) state.first = Vector::Zero(g.size());
            state.first = k.mu * state.first + g;
            return StepResult{base - lr * state.first, -1};
          },
          [&](const Adam& k) {
            if (state.first.size() != g.size()) {
              state.first = Vector::Zero(g.size());
              state.second = Vector::Zero(g.size());
            }
            state.first = k.beta1 * state.first + (1.0 - k.beta1) * g;
            state.second = k.beta2 * state.second + (1.0 - k.beta2) * g.cwiseProduct(g);
            const double t = static_cast<double>(state.steps);
            const double c1 = 1.0 - std::pow(k.beta1, t);
            const double c2 = 1.0 - std::pow(k.beta2, t);
            Vector out(g.size());
            for (Eigen::Index i = 0; i < g.size(); ++i) {
              const double m_hat = state.first[i] / c1;
              const double v_hat = state.second[i] / c2;
              out[i] = base[i] - lr * m_hat / (std::sqrt(v_hat) + k.eps);
            }
            return StepResult{std::move(out), -1};
          },
          [&](const RmsProp& k) {
            if (state.second.size() != g.size()) state.second = Vector::Zero(g.size());
            state.second = k.alpha * state.second + (1.0 - k.alpha) * g.cwiseProduct(g);
            Vector out(g.size());
            for (Eigen::Index i = 0; i < g.size(); ++i) {
              out[i] = base[i] - lr * g[i] / (std::sqrt(state.second[i]) + k.eps);
            }
            return StepResult{std::move(out), -1};
          },
          [&](const MetaMd& k) {
            auto r = mirror_step(k.divergence, MirrorStepConfig{lr}, base, g);
            return StepResult{std::move(r.theta), static_cast<int>(r.active)};
          },
      },
      spec.kind);
}

void StoppingCriteria::validate() const {
  if (plateau_window == 1) throw ArgumentError("plateau window must be >= 2 when enabled");
  if (plateau_window >= 2 && !(plateau_tol >= 0.0)) throw ArgumentError("plateau tolerance must be >= 0");
}

std::string to_string(StopReason r) {
  switch (r) {
    case StopReason::kGradEps: return "grad_eps";
    case StopReason::kPlateau: return "plateau";
    case StopReason::kMaxIters: return "max_iters";
  }
  return "unknown";
}

StopReason stop_reason_from_string(const std::string& s) {
  if (s == "grad_eps") return StopReason::kGradEps;
  if (s == "plateau") return StopReason::kPlateau;
  if (s == "max_iters") return StopReason::kMaxIters;
  throw ArgumentError("unknown stop reason '" + s + "'");
}

Batcher::Batcher(Batch data, std::size_t batch_size) : data_(std::move(data)), batch_size_(batch_size) {}

const Batch& Batcher::next(RngStream& rng) {
  if (full_batch()) return data_;
  const auto n = static_cast<std::size_t>(data_.size());
  // Partial Fisher-Yates over an index permutation.
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const std::size_t j = i + rng.uniform_index(n - i);
    std::swap(idx[i], idx[j]);
  }
  scratch_.inputs.resize(static_cast<Eigen::Index>(batch_size_), data_.inputs.cols());
  scratch_.labels.resize(batch_size_);
  for (std::size_t i = 0; i < batch_size_; ++i) {
    scratch_.inputs.row(static_cast<Eigen::Index>(i)) = data_.inputs.row(static_cast<Eigen::Index>(idx[i]));
    scratch_.labels[i] = data_.labels[idx[i]];
  }
  return scratch_;
}

Trajectory run_training(const BaseModel& model, Batcher& batcher, const OptimizerSpec& spec,
                        const StoppingCriteria& stop, const Vector& theta_init, RngStream& rng,
                        const TrainingOptions& options) {
  if (theta_init.size() != model.param_count()) {
    throw ArgumentError("run_training: initial theta does not match the model's parameter count");
  }
  spec.validate();
  stop.validate();
  const std::size_t thin = std::max<std::size_t>(1, options.thin_every);
  const auto* metamd = std::get_if<MetaMd>(&spec.kind);

  Trajectory traj;
  OptimizerState state;
  Vector theta = theta_init;
  Vector g;
  for (std::size_t it = 0;; ++it) {
    const Batch& batch = batcher.next(rng);
    const double loss = model.loss_and_grad(theta, batch, g);
    const double gn = g.norm();
    const bool snapshot = it % thin == 0;
    if (snapshot) {
      traj.theta_iters.push_back(it);
      traj.thetas.push_back(theta);
    }
    traj.losses.push_back(loss);
    traj.grad_norms.push_back(gn);
    traj.active_indices.push_back(metamd ? static_cast<int>(active_index(metamd->divergence, theta)) : -1);
    traj.iterations = it;

    if (!std::isfinite(loss) || !std::isfinite(gn) || !theta.allFinite()) {
      if (!snapshot) {
        traj.theta_iters.push_back(it);
        traj.thetas.push_back(theta);
      }
      throw TrainingDivergedError("training diverged at iteration " + std::to_string(it), std::move(traj));
    }

    std::optional<StopReason> reason;
    if (stop.grad_norm_eps > 0.0 && gn <= stop.grad_norm_eps) {
      reason = StopReason::kGradEps;
    } else if (stop.plateau_window >= 2 && traj.losses.size() >= stop.plateau_window) {
      const auto first = traj.losses.end() - static_cast<std::ptrdiff_t>(stop.plateau_window);
      const auto [lo, hi] = std::minmax_element(first, traj.losses.end());
      if (*hi - *lo <= stop.plateau_tol) reason = StopReason::kPlateau;
    }
    if (!reason && it >= stop.max_iters) reason = StopReason::kMaxIters;
    if (reason) {
      traj.stop_reason = *reason;
      if (!snapshot) {
        traj.theta_iters.push_back(it);
        traj.thetas.push_back(theta);
      }
      return traj;
    }
    theta = step(spec, state, theta, g).theta;
  }
}

std::string trajectory_to_csv(const Trajectory& t) {
  std::ostringstream os;
  os << "iteration,loss,grad_norm,active_index\n";
  for (std::size_t i = 0; i < t.losses.size(); ++i) {
    os << i << ',' << io::format_double(t.losses[i]) << ',' << io::format_double(t.grad_norms[i]) << ','
       << t.active_indices[i] << '\n';
  }
  return os.str();
}

std::string to_binary(const Trajectory& t) {
  io::ByteWriter w;
  w.bytes("MMDT");
  w.le<std::uint32_t>(1);
  const std::uint64_t kappa = t.thetas.empty() ? 0 : static_cast<std::uint64_t>(t.thetas.front().size());
  w.le<std::uint64_t>(kappa);
  w.le<std::uint64_t>(t.iterations);
  w.u8(static_cast<std::uint8_t>(t.stop_reason));
  w.le<std::uint64_t>(t.losses.size());
  for (std::size_t i = 0; i < t.losses.size(); ++i) {
    w.le<double>(t.losses[i]);
    w.le<double>(t.grad_norms[i]);
    w.le<std::int32_t>(t.active_indices[i]);
  }
  w.le<std::uint64_t>(t.thetas.size());
  for (std::size_t i = 0; i < t.thetas.size(); ++i) {
    w.le<std::uint64_t>(t.theta_iters[i]);
    for (Eigen::Index k = 0; k < t.thetas[i].size(); ++k) w.le<double>(t.thetas[i][k]);
  }
  return w.take();
}

Trajectory trajectory_from_binary(const std::string& bytes) {
  io::ByteReader r(bytes);
  r.expect("MMDT", "trajectory magic");
  if (r.le<std::uint32_t>("trajectory version") != 1) throw FormatError("unsupported trajectory version", 4);
  const auto kappa = r.le<std::uint64_t>("kappa");
  Trajectory t;
  t.iterations = r.le<std::uint64_t>("iterations");
  const auto reason = r.u8("stop reason");
  if (reason > 2) throw FormatError("bad stop reason", r.offset() - 1);
  t.stop_reason = static_cast<StopReason>(reason);
  const auto dense = r.le<std::uint64_t>("dense count");
  if (dense > r.remaining() / 20) throw FormatError("dense count exceeds payload", r.offset());
  for (std::uint64_t i = 0; i < dense; ++i) {
    t.losses.push_back(r.le<double>("loss"));
    t.grad_norms.push_back(r.le<double>("grad norm"));
    t.active_indices.push_back(r.le<std::int32_t>("active index"));
  }
  const auto snaps = r.le<std::uint64_t>("snapshot count");
  if (snaps > r.remaining() / (8 + 8 * std::max<std::uint64_t>(kappa, 0))) {
    throw FormatError("snapshot count exceeds payload", r.offset());
  }
  for (std::uint64_t i = 0; i < snaps; ++i) {
    t.theta_iters.push_back(r.le<std::uint64_t>("snapshot iteration"));
    Vector theta(static_cast<Eigen::Index>(kappa));
    for (std::uint64_t k = 0; k < kappa; ++k) theta[static_cast<Eigen::Index>(k)] = r.le<double>("theta");
    t.thetas.push_back(std::move(theta));
  }
  r.expect_end();
  return t;
}

}  // namespace metamd
