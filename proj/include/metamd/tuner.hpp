#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "metamd/numerics.hpp"
#include "metamd/rng.hpp"

namespace metamd {

struct HyperPoint {
  double lr = 0.0;
  double wd = 0.0;

  bool operator==(const HyperPoint&) const = default;
};

/// Closed interval sampled in log10 space.
struct LogRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Candidate lists drive grid search; bayes_opt searches the log10 box
/// spanned by the explicit ranges, or by the candidate extremes if unset.
struct SearchSpace {
  std::vector<double> lr;
  std::vector<double> wd;
  std::optional<LogRange> lr_range;
  std::optional<LogRange> wd_range;

  void validate() const;
  std::vector<HyperPoint> grid() const;
  LogRange lr_box() const;
  LogRange wd_box() const;

  static SearchSpace sgd_family();
  static SearchSpace adam();
};

using Objective = std::function<double(const HyperPoint&)>;

struct Evaluation {
  HyperPoint point;
  double score = 0.0;
  std::string error;  // non-empty when the evaluation threw; score is -inf
};

struct GridResult {
  HyperPoint best;
  double best_score = 0.0;
  std::vector<Evaluation> table;  // in enumeration order
};

/// Evaluates every (lr, wd) pair once. Ties go to the smaller lr, then the
/// smaller wd, so the answer does not depend on candidate order.
GridResult grid_search(const SearchSpace& space, const Objective& evaluate, std::size_t threads = 1);

struct GpHyper {
  double lengthscale = 1.0;
  double signal_variance = 1.0;
  double noise_variance = 1e-6;
};

/// GP regression with an RBF kernel over (log10 lr, log10 wd). Scores are
/// standardized before fitting; predictions are reported in score units.
class GpState {
 public:
  explicit GpState(GpHyper hyper = {}) : hyper_(hyper) {}

  void add(const HyperPoint& p, double score);
  std::size_t size() const noexcept { return xs_.size(); }
  const GpHyper& hyper() const noexcept { return hyper_; }

  struct Prediction {
    double mean;
    double variance;
  };
  Prediction predict(const HyperPoint& p) const;

 private:
  void refit();

  GpHyper hyper_;
  std::vector<Eigen::Vector2d> xs_;
  std::vector<double> ys_;
  double y_mean_ = 0.0;
  double y_scale_ = 1.0;
  Matrix chol_l_;
  Vector alpha_;
};

Eigen::Vector2d to_log_space(const HyperPoint& p);
HyperPoint from_log_space(const Eigen::Vector2d& x);

/// Argmax of mean + beta * stddev over the pool, first index winning ties.
/// With no observations the pool point nearest the pool centroid is returned.
HyperPoint ucb_suggest(const GpState& gp, const std::vector<HyperPoint>& pool, double beta = 2.0);

/// Halton points (bases 2 and 3) in the log10 box, shifted by `offset`
/// modulo one.
std::vector<HyperPoint> halton_pool(const SearchSpace& space, std::size_t count, Eigen::Vector2d offset);

struct BayesOptions {
  std::size_t iters = 25;
  std::size_t initial = 5;
  std::size_t pool_size = 1024;
  double beta = 2.0;
  GpHyper gp;
};

struct BayesStep {
  Evaluation eval;
  double incumbent = 0.0;
};

struct BayesResult {
  HyperPoint best;
  double best_score = 0.0;
  std::vector<BayesStep> history;
};

BayesResult bayes_opt(const SearchSpace& space, const Objective& evaluate, RngStream& rng,
                      const BayesOptions& options = {});

/// Rows `lr,wd,score,rank`, rank 1 best; failed evaluations rank last.
/// Each header line in `comments` is written first, prefixed with '#'.
std::string tuning_table_csv(const std::vector<Evaluation>& table, const std::vector<std::string>& comments = {});

}  // namespace metamd
