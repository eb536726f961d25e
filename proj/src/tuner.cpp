#include "metamd/tuner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "metamd/errors.hpp"
#include "metamd/io.hpp"
#include "metamd/parallel.hpp"

namespace metamd {

namespace {

constexpr double kFailed = -std::numeric_limits<double>::infinity();

void check_positive(const std::vector<double>& values, const char* what) {
  for (double v : values) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ArgumentError(std::string("search space: ") + what + " must be positive");
  }
}

void check_range(const std::optional<LogRange>& r, const char* what) {
  if (r && !(r->lo > 0.0 && r->hi >= r->lo && std::isfinite(r->hi))) {
    throw ArgumentError(std::string("search space: bad ") + what + " range");
  }
}

LogRange box_of(const std::vector<double>& values, const std::optional<LogRange>& range) {
  if (range) return *range;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return {*lo, *hi};
}

// True when a beats b: higher score, then smaller lr, then smaller wd.
bool better(const Evaluation& a, const Evaluation& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.point.lr != b.point.lr) return a.point.lr < b.point.lr;
  return a.point.wd < b.point.wd;
}

Evaluation run_objective(const Objective& evaluate, const HyperPoint& p) {
  Evaluation e{p, kFailed, {}};
  try {
    e.score = evaluate(p);
    if (std::isnan(e.score)) {
      e.score = kFailed;
      e.error = "objective returned NaN";
    }
  } catch (const std::exception& ex) {
    e.error = ex.what();
    if (e.error.empty()) e.error = "evaluation failed";
  }
  return e;
}

double radical_inverse(std::size_t i, unsigned base) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= base;
    r += f * static_cast<double>(i % base);
    i /= base;
  }
  return r;
}

}  // namespace

void SearchSpace::validate() const {
  if ((lr.empty() && !lr_range) || (wd.empty() && !wd_range)) throw ArgumentError("search space: empty");
  check_positive(lr, "learning rates");
  check_positive(wd, "weight decays");
  check_range(lr_range, "learning-rate");
  check_range(wd_range, "weight-decay");
}

std::vector<HyperPoint> SearchSpace::grid() const {
  if (lr.empty() || wd.empty()) throw ArgumentError("search space: grid needs explicit candidates");
  validate();
  std::vector<HyperPoint> out;
  for (double l : lr)
    for (double w : wd) out.push_back({l, w});
  return out;
}

LogRange SearchSpace::lr_box() const { return box_of(lr, lr_range); }
LogRange SearchSpace::wd_box() const { return box_of(wd, wd_range); }

SearchSpace SearchSpace::sgd_family() { return {{0.1, 0.05, 0.01, 0.005, 0.001}, {0.001, 0.0001, 0.0005}, {}, {}}; }
SearchSpace SearchSpace::adam() { return {{0.3, 0.2, 0.1, 0.01, 0.001}, {0.001, 0.0001, 0.0005}, {}, {}}; }

GridResult grid_search(const SearchSpace& space, const Objective& evaluate, std::size_t threads) {
  const auto points = space.grid();
  GridResult result;
  result.table.resize(points.size());
  parallel_for(points.size(), threads, [&](std::size_t i) { result.table[i] = run_objective(evaluate, points[i]); });
  const Evaluation* best = &result.table.front();
  for (const auto& e : result.table) {
    if (better(e, *best)) best = &e;
  }
  result.best = best->point;
  result.best_score = best->score;
  return result;
}

Eigen::Vector2d to_log_space(const HyperPoint& p) { return {std::log10(p.lr), std::log10(p.wd)}; }
HyperPoint from_log_space(const Eigen::Vector2d& x) { return {std::pow(10.0, x[0]), std::pow(10.0, x[1])}; }

void GpState::add(const HyperPoint& p, double score) {
  if (!std::isfinite(score)) throw ArgumentError("GpState: score must be finite");
  const Eigen::Vector2d x = to_log_space(p);
  for (const auto& seen : xs_) {
    if (seen == x) throw ArgumentError("GpState: point already observed");
  }
  xs_.push_back(x);
  ys_.push_back(score);
  refit();
}

void GpState::refit() {
  const auto n = static_cast<Eigen::Index>(xs_.size());
  y_mean_ = std::accumulate(ys_.begin(), ys_.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double y : ys_) var += (y - y_mean_) * (y - y_mean_);
  var /= static_cast<double>(n);
  y_scale_ = var > 0.0 ? std::sqrt(var) : 1.0;

  Matrix k(n, n);
  for (Eigen::Index a = 0; a < n; ++a)
    for (Eigen::Index b = 0; b < n; ++b) {
      const double d2 = (xs_[a] - xs_[b]).squaredNorm();
      k(a, b) = hyper_.signal_variance * std::exp(-0.5 * d2 / (hyper_.lengthscale * hyper_.lengthscale));
    }
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) y[i] = (ys_[i] - y_mean_) / y_scale_;

  double jitter = 0.0;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Matrix kk = k;
    kk.diagonal().array() += hyper_.noise_variance + jitter;
    Eigen::LLT<Matrix> llt(kk);
    if (llt.info() == Eigen::Success) {
      chol_l_ = llt.matrixL();
      alpha_ = llt.solve(y);
      return;
    }
    jitter = jitter == 0.0 ? 1e-10 : jitter * 10.0;
  }
  throw NumericalError("GpState: kernel matrix not positive definite after jitter escalation");
}

GpState::Prediction GpState::predict(const HyperPoint& p) const {
  if (xs_.empty()) return {0.0, hyper_.signal_variance};
  const Eigen::Vector2d x = to_log_space(p);
  const auto n = static_cast<Eigen::Index>(xs_.size());
  Vector ks(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    ks[i] = hyper_.signal_variance *
            std::exp(-0.5 * (xs_[i] - x).squaredNorm() / (hyper_.lengthscale * hyper_.lengthscale));
  }
  const Vector v = chol_l_.triangularView<Eigen::Lower>().solve(ks);
  const double var = std::max(0.0, hyper_.signal_variance - v.squaredNorm());
  return {y_mean_ + y_scale_ * ks.dot(alpha_), y_scale_ * y_scale_ * var};
}

HyperPoint ucb_suggest(const GpState& gp, const std::vector<HyperPoint>& pool, double beta) {
  if (pool.empty()) throw ArgumentError("ucb_suggest: empty candidate pool");
  if (gp.size() == 0) {
    Eigen::Vector2d centre = Eigen::Vector2d::Zero();
    for (const auto& p : pool) centre += to_log_space(p);
    centre /= static_cast<double>(pool.size());
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pool.size(); ++i) {
      const double d = (to_log_space(pool[i]) - centre).squaredNorm();
      if (d < best_d) {
        best = i;
        best_d = d;
      }
    }
    return pool[best];
  }
  std::size_t best = 0;
  double best_value = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto pr = gp.predict(pool[i]);
    const double value = pr.mean + beta * std::sqrt(pr.variance);
    if (value > best_value) {
      best = i;
      best_value = value;
    }
  }
  return pool[best];
}

std::vector<HyperPoint> halton_pool(const SearchSpace& space, std::size_t count, Eigen::Vector2d offset) {
  space.validate();
  const LogRange lr = space.lr_box(), wd = space.wd_box();
  const double l0 = std::log10(lr.lo), l1 = std::log10(lr.hi);
  const double w0 = std::log10(wd.lo), w1 = std::log10(wd.hi);
  std::vector<HyperPoint> out;
  out.reserve(count);
  for (std::size_t i = 1; i <= count; ++i) {
    const double u = std::fmod(radical_inverse(i, 2) + offset[0], 1.0);
    const double v = std::fmod(radical_inverse(i, 3) + offset[1], 1.0);
    out.push_back(from_log_space({l0 + u * (l1 - l0), w0 + v * (w1 - w0)}));
  }
  return out;
}

BayesResult bayes_opt(const SearchSpace& space, const Objective& evaluate, RngStream& rng,
                      const BayesOptions& options) {
  if (options.iters == 0) throw ArgumentError("bayes_opt: iters must be positive");
  if (options.pool_size < options.iters) throw ArgumentError("bayes_opt: pool smaller than the budget");
  const Eigen::Vector2d offset(rng.uniform(), rng.uniform());
  std::vector<HyperPoint> pool = halton_pool(space, options.pool_size + options.initial, offset);
  std::vector<HyperPoint> initial(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(options.initial));
  pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(options.initial));

  GpState gp(options.gp);
  BayesResult result;
  result.best_score = kFailed;
  for (std::size_t it = 0; it < options.iters; ++it) {
    HyperPoint p;
    if (it < initial.size()) {
      p = initial[it];
    } else {
      p = ucb_suggest(gp, pool, options.beta);
      pool.erase(std::find(pool.begin(), pool.end(), p));
    }
    Evaluation e = run_objective(evaluate, p);
    if (std::isfinite(e.score)) gp.add(p, e.score);
    if (result.history.empty() || better(e, {result.best, result.best_score, {}})) {
      result.best = p;
      result.best_score = e.score;
    }
    result.history.push_back({std::move(e), result.best_score});
  }
  return result;
}

std::string tuning_table_csv(const std::vector<Evaluation>& table, const std::vector<std::string>& comments) {
  std::vector<std::size_t> order(table.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return better(table[a], table[b]); });
  std::vector<std::size_t> rank(table.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r + 1;

  std::ostringstream out;
  for (const auto& c : comments) out << "# " << c << "\n";
  out << "lr,wd,score,rank\n";
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << io::format_double(table[i].point.lr) << "," << io::format_double(table[i].point.wd) << ","
        << (std::isfinite(table[i].score) ? io::format_double(table[i].score) : std::string("-inf")) << ","
        << rank[i] << "\n";
  }
  return out.str();
}

}  // namespace metamd
