// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "metamd/bounds.hpp"
#include "metamd/bregman.hpp"
#include "metamd/cli.hpp"
#include "metamd/errors.hpp"
#include "metamd/io.hpp"
#include "metamd/metatrain.hpp"
#include "metamd/models.hpp"
#include "metamd/optim.hpp"
#include "metamd/tasks.hpp"
#include "metamd/tuner.hpp"
#include "oracles.hpp"

using namespace metamd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

fs::path work_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "metamd_acceptance" / name;
  fs::remove_all(dir);
  return dir;
}

json read_json(const fs::path& p) { return json::parse(io::read_file(p)); }

Vector normal_vector(RngStream& rng, Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

DiagonalMahalanobisSet uniform_set(RngStream& rng, Eigen::Index n, Eigen::Index kappa, double lo, double hi) {
  Matrix raw(n, kappa);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < kappa; ++i) raw(j, i) = rng.uniform(lo, hi);
  return DiagonalMahalanobisSet(raw);
}

double relative_gap(const DiagonalMahalanobisSet& m, const Vector& theta) {
  return oracle::activation_gap(m, theta) / std::max(theta.squaredNorm(), 1e-300);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome closed_form_mirror_step() {
  RngStream rng(101);
  double worst = 0.0;
  int instances = 0, rejected = 0;
  while (instances < 10) {
    const auto m = uniform_set(rng, 3, 5, 0.5, 2.0);
    const Vector theta = normal_vector(rng, 5), g = normal_vector(rng, 5);
    const double eta = 0.1;
    const auto step = mirror_step(m, {eta}, theta, g);
    // Keep instances whose step stays inside one piece of the mixture.
    if (relative_gap(m, theta) < 1e-2 || relative_gap(m, step.theta) < 1e-2 ||
        active_index(m, step.theta) != step.active) {
      ++rejected;
      continue;
    }
    const Vector numeric = oracle::numeric_mirror_argmin(m, eta, theta, g);
    worst = std::max(worst, (numeric - step.theta).cwiseAbs().maxCoeff());
    ++instances;
  }
  return {worst <= 1e-8, "max |closed form - numeric argmin| = " + sci(worst) + " over 10 instances (" +
                             std::to_string(rejected) + " boundary draws redrawn), tolerance 1e-8"};
}

Outcome hypergradient_correctness() {
  RngStream rng(202);
  MetaConfig cfg;
  cfg.inner_steps = 20;
  cfg.eta = 0.1;
  cfg.k = 0.05;
  double worst_fd = 0.0;
  for (Eigen::Index n : {1, 2}) {
    int checked = 0;
    while (checked < 5) {
      const QuadraticTask q = sample_quadratic(rng, 1.0, 2.0);
      const MetaTask task{q.model(), {}, normal_vector(rng, 2)};
      const auto m = uniform_set(rng, n, 2, 0.8, 1.6);
      Vector theta = task.theta_init;
      double gap = INFINITY;
      for (std::size_t t = 0; t <= cfg.inner_steps; ++t) {
        gap = std::min(gap, relative_gap(m, theta));
        if (t < cfg.inner_steps) theta = mirror_step(m, {cfg.eta}, theta, q.model().grad(theta, {})).theta;
      }
      if (gap < 1e-2) continue;
      const auto h = hypergradient(task, m, cfg).grad.total;
      worst_fd = std::max(worst_fd, oracle::rel_error(h, oracle::fd_hypergradient(task, m, cfg)));
      ++checked;
    }
  }
  MetaConfig short_cfg = cfg;
  short_cfg.inner_steps = 10;
  double worst_rmd = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const QuadraticTask q = sample_quadratic(rng, 1.0, 2.0);
    const MetaTask task{q.model(), {}, normal_vector(rng, 2)};
    const auto m = uniform_set(rng, 2, 2, 0.8, 1.6);
    const auto f = hypergradient(task, m, short_cfg).grad.total;
    const auto r = rmd_hypergradient(task, m, short_cfg).grad.total;
    worst_rmd = std::max(worst_rmd, (f - r).cwiseAbs().maxCoeff());
  }
  return {worst_fd <= 1e-4 && worst_rmd <= 1e-9,
          "FMD vs central FD rel err " + sci(worst_fd) + " (<= 1e-4, N in {1,2}, T=20); FMD vs RMD max diff " +
              sci(worst_rmd) + " (<= 1e-9, kappa=2, T=10)"};
}

Outcome theorem1_empirical() {
  RngStream rng(303);
  int held = 0;
  double tightest = INFINITY;
  for (int i = 0; i < 100; ++i) {
    RngStream task_rng = rng.split(static_cast<std::uint64_t>(i));
    const QuadraticTask q = sample_quadratic(task_rng, QuadraticFamily{});
    const auto n = static_cast<Eigen::Index>(1 + task_rng.uniform_index(3));
    const auto m = uniform_set(task_rng, n, 2, 0.2, 3.0);
    const double eta = task_rng.uniform(0.1, 0.9) * lambda_strong_convexity(m) /
                       (2.0 * q.q.eigenvalues().real().maxCoeff());
    Batcher batcher{Batch{}};
    StoppingCriteria stop;
    stop.max_iters = 3000;
    const Vector start = normal_vector(task_rng, 2);
    const auto traj = run_training(q.model(), batcher, OptimizerSpec::metamd(m, eta), stop, start, task_rng);
    const auto report = check_regret_bounds("q" + std::to_string(i), m, q.theta_star, q.min_loss(), traj, eta);
    held += report.thm1_satisfied;
    tightest = std::min(tightest, report.thm1.total - report.lhs_empirical);
  }
  return {held == 100, std::to_string(held) + "/100 sampled convex quadratics satisfy regret <= bound (N in {1,2,3}, "
                                                "random M and eta); smallest slack " + sci(tightest)};
}

struct QuadraticRun {
  fs::path train_dir;
  json report;
  double seconds = 0;
  bool ok = false;
  std::string error;
};

QuadraticRun run_quadratic_experiment() {
  QuadraticRun run;
  const auto t0 = std::chrono::steady_clock::now();
  cli::DemoOptions d = cli::quad_demo_defaults();
  d.train.common.out = work_dir("quadratic/meta-train");
  cli::CompareOptions c = d.compare;
  c.common = d.train.common;
  c.common.out = work_dir("quadratic/compare");
  c.quad = d.train.quad;
  c.quad.task_pool = 0;
  c.divergence = d.train.common.out / "divergence.bin";
  c.eta = d.train.meta.eta;
  c.optimizers = {"metamd", "sgd"};
  std::ostringstream log;
  if (cli::cmd_meta_train(d.train, log) != 0 || cli::cmd_compare(c, log) != 0) {
    run.error = log.str();
    return run;
  }
  run.train_dir = d.train.common.out;
  run.report = read_json(c.common.out / "report.json");
  run.seconds = seconds_since(t0);
  run.ok = true;
  return run;
}

Outcome quadratic_speedup(const QuadraticRun& run) {
  if (!run.ok) return {false, "experiment failed: " + run.error};
  const auto& vs = run.report.at("metamd_vs").at("sgd");
  const std::size_t faster = vs.at("metamd_faster").get<std::size_t>();
  const double speedup = vs.at("median_speedup").get<double>();
  const auto& s = run.report.at("summary");
  std::ostringstream os;
  os << "MetaMD faster than grid-tuned SGD on " << faster << "/100 held-out tasks (>= 80), median speedup "
     << sci(speedup) << "x (>= 2); median iterations MetaMD " << s["metamd"]["median_iterations"] << " vs SGD "
     << s["sgd"]["median_iterations"] << "; " << sci(run.seconds) << " s (< 300 s)";
  return {faster >= 80 && speedup >= 2.0 && run.seconds < 300.0, os.str()};
}

Outcome gradient_infrastructure() {
  RngStream rng(505);
  const BaseModel model = BaseModel::mlp({3, 3, 2}, Activation::kTanh);
  Batch batch{Matrix(12, 3), {}};
  for (Eigen::Index r = 0; r < 12; ++r) {
    for (Eigen::Index c = 0; c < 3; ++c) batch.inputs(r, c) = rng.normal();
    batch.labels.push_back(static_cast<int>(rng.uniform_index(2)));
  }
  double grad_err = 0, hvp_err = 0, mode_err = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const Vector theta = model.init_params(rng) + 0.3 * normal_vector(rng, model.param_count());
    const auto loss = [&](const Vector& x) { return model.loss(x, batch); };
    grad_err = std::max(grad_err, oracle::rel_error(model.grad(theta, batch), oracle::fd_gradient(loss, theta, 1e-5)));
    const Vector v = normal_vector(rng, model.param_count());
    const double h = 1e-5;
    const Vector fd = (model.grad(theta + h * v, batch) - model.grad(theta - h * v, batch)) / (2 * h);
    hvp_err = std::max(hvp_err, oracle::rel_error(model.hvp(theta, batch, v), fd));
    MetaConfig cfg;
    cfg.inner_steps = 10;
    cfg.eta = 0.2;
    cfg.k = 0.01;
    const auto m = uniform_set(rng, 2, model.param_count(), 0.7, 1.4);
    const MetaTask task{model, batch, theta};
    cfg.fmd_mode = FmdMode::kDenseHessian;
    const Matrix dense = hypergradient(task, m, cfg).grad.total;
    cfg.fmd_mode = FmdMode::kHvpColumns;
    const Matrix cols = hypergradient(task, m, cfg).grad.total;
    mode_err = std::max(mode_err, oracle::rel_error(cols, dense));
  }
  return {model.param_count() == 20 && grad_err <= 1e-5 && hvp_err <= 1e-4 && mode_err <= 1e-10,
          "20-parameter tanh MLP: grad vs FD " + sci(grad_err) + " (<= 1e-5), HVP vs FD " + sci(hvp_err) +
              " (<= 1e-4), dense vs HVP-column FMD " + sci(mode_err) + " (<= 1e-10)"};
}

Outcome mixture_properties() {
  RngStream rng(606);
  int invariant = 0, total = 0;
  for (int draw = 0; draw < 100; ++draw) {
    const auto m = uniform_set(rng, 3, 5, 0.1, 3.0);
    const Vector theta = normal_vector(rng, 5);
    const auto base = active_index(m, theta);
    for (double c : {0.1, 1.0, 10.0}) {
      ++total;
      invariant += active_index(DiagonalMahalanobisSet(c * m.raw()), theta) == base;
    }
  }
  double min_div = INFINITY;
  for (int draw = 0; draw < 1000; ++draw) {
    const auto m = uniform_set(rng, 3, 4, -3.0, 3.0);
    min_div = std::min(min_div, bregman_div(m, 3.0 * normal_vector(rng, 4), 3.0 * normal_vector(rng, 4)));
  }
  int exact = 0;
  for (int draw = 0; draw < 100; ++draw) {
    const auto m = uniform_set(rng, 1, 6, -2.0, 2.0);
    const Vector a = normal_vector(rng, 6), b = normal_vector(rng, 6);
    double s = 0;
    for (Eigen::Index i = 0; i < 6; ++i) s += m.raw()(0, i) * m.raw()(0, i) * (a[i] - b[i]) * (a[i] - b[i]);
    exact += bregman_div(m, a, b) == 0.5 * s;
  }
  return {invariant == total && min_div >= 0.0 && exact == 100,
          "active index scale-invariant on " + std::to_string(invariant) + "/" + std::to_string(total) +
              " draws; min Bregman divergence over 1000 draws " + sci(min_div) + " (>= 0); N=1 identity exact on " +
              std::to_string(exact) + "/100"};
}

Outcome theorem3_calculator() {
  RngStream rng(707);
  double worst = 0.0;
  bool monotone = true;
  for (int set = 0; set < 20; ++set) {
    BoundInputs in;
    in.eta = rng.uniform(0.01, 1.0);
    in.lambda = rng.uniform(0.1, 2.0);
    in.horizon = std::floor(rng.uniform(10, 500));
    in.lipschitz = rng.uniform(0.1, 10);
    in.c = rng.uniform(0.5, 5);
    in.r = rng.uniform(0.5, 5);
    in.delta = rng.uniform(0.01, 0.5);
    in.n_tasks = std::floor(rng.uniform(5, 1000));
    in.n_matrices = std::floor(rng.uniform(1, 5));
    in.mean_bregman = rng.uniform(0.0, 5.0);
    const BoundValue v = generalization_bound(in);
    const std::vector<double> expected = {
        in.mean_bregman / in.eta, in.eta * in.horizon * in.lipschitz * in.lipschitz / (2 * in.lambda),
        in.n_matrices * in.c * in.c * in.r * in.r / (2 * std::sqrt(in.n_tasks)),
        3 * std::sqrt(in.c * in.r * std::log(2 / in.delta) / (8 * in.n_tasks))};
    if (v.terms.size() != expected.size()) return {false, "calculator reports " + std::to_string(v.terms.size()) +
                                                              " terms, expected 4"};
    double sum = 0;
    for (std::size_t t = 0; t < expected.size(); ++t) {
      worst = std::max(worst, std::abs(v.terms[t].value - expected[t]) / std::max(1.0, std::abs(expected[t])));
      sum += expected[t];
    }
    worst = std::max(worst, std::abs(v.total - sum) / std::max(1.0, sum));
    const auto bumped = [&](const std::function<void(BoundInputs&)>& f) {
      BoundInputs b = in;
      f(b);
      return generalization_bound(b).total;
    };
    monotone = monotone && bumped([](BoundInputs& b) { b.n_tasks *= 2; }) < v.total &&
               bumped([](BoundInputs& b) { b.c *= 1.5; }) > v.total &&
               bumped([](BoundInputs& b) { b.r *= 1.5; }) > v.total &&
               bumped([](BoundInputs& b) { b.n_matrices += 1; }) > v.total;
  }
  return {worst <= 1e-12 && monotone, "max relative deviation from independent recomputation " + sci(worst) +
                                          " over 20 input sets (<= 1e-12); monotone in n, C, r, N: " +
                                          (monotone ? "yes" : "no")};
}

Outcome neural_meta_test() {
  const auto t0 = std::chrono::steady_clock::now();
  double md_sum = 0, sgd_sum = 0, init_sum = 0;
  std::ostringstream seeds;
  for (std::uint64_t seed : {1, 2, 3}) {
    cli::MetaTrainOptions t;
    t.common.seed = seed;
    t.common.out = work_dir("blobs/seed" + std::to_string(seed) + "/meta-train");
    t.family = "blobs";
    t.domains.domains = 3;
    t.domains.dim = 64;
    t.domains.hidden = 4;
    t.domains.activation = "tanh";
    t.n_matrices = 3;
    t.meta.inner_steps = 50;
    t.meta.outer_lr = 0.01;
    t.meta.outer_iters = 20;
    t.meta.meta_batch = 2;
    t.eta_candidates = {0.1, 0.3, 1.0, 3.0, 10.0};
    t.eta_select_iters = 500;
    t.eta_select_tasks = 4;
    std::ostringstream log;
    if (cli::cmd_meta_train(t, log) != 0) return {false, "meta-train failed: " + log.str()};
    const double eta = read_json(t.common.out / "summary.json").at("eta").get<double>();

    cli::CompareOptions c;
    c.common.seed = seed;
    c.common.out = work_dir("blobs/seed" + std::to_string(seed) + "/compare");
    c.family = "blobs";
    c.domains = t.domains;
    c.divergence = t.common.out / "divergence.bin";
    c.eta = eta;
    c.optimizers = {"metamd", "sgd"};
    c.n_tasks = 1;
    c.grad_eps = 0.0;
    c.max_iters = 500;
    if (cli::cmd_compare(c, log) != 0) return {false, "compare failed: " + log.str()};
    const auto summary = read_json(c.common.out / "report.json").at("summary");
    const double md = summary["metamd"]["mean_final_loss"].get<double>();
    const double sgd = summary["sgd"]["mean_final_loss"].get<double>();

    // Same eta with the untrained divergence, for reference.
    cli::CompareOptions ref = c;
    ref.common.out = work_dir("blobs/seed" + std::to_string(seed) + "/reference");
    ref.divergence = ref.common.out.string() + ".bin";
    const auto kappa = read_json(t.common.out / "summary.json").at("kappa").get<Eigen::Index>();
    save_divergence(DiagonalMahalanobisSet::ones(3, kappa), ref.divergence);
    ref.optimizers = {"metamd"};
    if (cli::cmd_compare(ref, log) != 0) return {false, "reference compare failed: " + log.str()};
    const double init = read_json(ref.common.out / "report.json")["summary"]["metamd"]["mean_final_loss"].get<double>();

    md_sum += md;
    sgd_sum += sgd;
    init_sum += init;
    seeds << " seed " << seed << ": eta=" << sci(eta) << " MetaMD " << sci(md) << " SGD " << sci(sgd)
          << " (untrained M " << sci(init) << ");";
  }
  const double secs = seconds_since(t0);
  return {md_sum / 3 <= sgd_sum / 3 && secs < 600.0,
          "final training loss at 500 iterations on the held-out domain, mean over 3 seeds: MetaMD " +
              sci(md_sum / 3) + " vs grid-tuned SGD " + sci(sgd_sum / 3) + " (untrained M " + sci(init_sum / 3) +
              ");" + seeds.str() + " " + sci(secs) + " s (< 600 s)"};
}

Outcome idx_round_trip() {
  RngStream rng(909);
  DomainDataset d;
  d.width = d.height = 8;
  d.provenance = Provenance::kIdxFile;
  d.images = Matrix(20, 64);
  for (Eigen::Index r = 0; r < 20; ++r) {
    for (Eigen::Index c = 0; c < 64; ++c) d.images(r, c) = static_cast<double>(rng.uniform_index(256)) / 255.0;
    d.labels.push_back(static_cast<int>(rng.uniform_index(10)));
  }
  const std::string images = encode_idx_images(d), labels = encode_idx_labels(d);
  const DomainDataset back = decode_idx(images, labels);
  const bool identical = encode_idx_images(back) == images && encode_idx_labels(back) == labels &&
                         write_idx(parse_idx(images)) == images && write_idx(parse_idx(labels)) == labels;
  int rejected = 0, tried = 0;
  for (const std::string* file : {&labels, &images}) {
    for (std::size_t pos = 0; pos < 8; ++pos) {
      for (int value = 0; value < 256; ++value) {
        if (static_cast<unsigned char>((*file)[pos]) == value) continue;
        std::string mutated = *file;
        mutated[pos] = static_cast<char>(value);
        ++tried;
        try {
          if (file == &labels) {
            decode_idx(images, mutated);
          } else {
            decode_idx(mutated, labels);
          }
        } catch (const FormatError&) {
          ++rejected;
        }
      }
    }
  }
  return {identical && rejected == tried,
          std::string("round trip byte-identical: ") + (identical ? "yes" : "no") + "; " + std::to_string(rejected) +
              "/" + std::to_string(tried) + " single-byte mutations of the 8 leading header bytes rejected"};
}

Outcome tuner_protocol() {
  const auto sgd = SearchSpace::sgd_family().grid().size();
  const auto adam = SearchSpace::adam().grid().size();
  SearchSpace box;
  box.lr_range = LogRange{1e-4, 1.0};
  box.wd_range = LogRange{1e-5, 1e-1};
  const auto f = [](const HyperPoint& p) {
    const double a = std::log10(p.lr) + 2, b = std::log10(p.wd) + 3;
    return -a * a - b * b;
  };
  int calls = 0;
  RngStream rng(2024);
  const auto r = bayes_opt(box, [&](const HyperPoint& p) {
    ++calls;
    return f(p);
  }, rng);
  // The objective spans [-8, 0] over the box.
  const double gap = 0.0 - r.best_score;
  return {sgd == 15 && adam == 15 && calls == 25 && gap <= 0.05 * 8,
          "grid sizes SGD " + std::to_string(sgd) + ", Adam " + std::to_string(adam) + "; bayes evaluations " +
              std::to_string(calls) + ", best " + sci(r.best_score) + " at lr=" + sci(r.best.lr) +
              " wd=" + sci(r.best.wd) + " (optimum 0, within " + sci(gap / 8 * 100) + "% of range, <= 5%)"};
}

Outcome activation_frequencies(const QuadraticRun& run) {
  if (!run.ok) return {false, "experiment failed: " + run.error};
  const auto summary = read_json(run.train_dir / "summary.json");
  const auto config = read_json(run.train_dir / "config.json");
  std::vector<double> totals;
  for (const auto& c : summary.at("activation_totals")) totals.push_back(c.get<double>());
  const double sum = std::accumulate(totals.begin(), totals.end(), 0.0);
  const double expected_steps = config["meta"]["outer_iters"].get<double>() * config["meta"]["meta_batch"].get<double>() *
                                config["meta"]["inner_T"].get<double>();
  const double mean = sum / static_cast<double>(totals.size());
  double chi2 = 0;
  for (double t : totals) chi2 += (t - mean) * (t - mean) / mean;
  std::ostringstream os;
  os << "N=" << totals.size() << " seed " << config["common"]["seed"] << " activation totals [";
  for (std::size_t j = 0; j < totals.size(); ++j) os << (j ? ", " : "") << static_cast<long long>(totals[j]);
  os << "], sum " << static_cast<long long>(sum) << " = outer_iters x meta_batch x T = "
     << static_cast<long long>(expected_steps) << "; chi-square vs uniform " << sci(chi2) << " (> 5.99)";
  return {totals.size() == 3 && sum == expected_steps && chi2 > 5.99, os.str()};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    std::string name;
    double budget;
    std::function<Outcome()> check;
  };
  QuadraticRun quadratic;
  bool quadratic_done = false;
  const auto ensure_quadratic = [&]() -> const QuadraticRun& {
    if (!quadratic_done) {
      quadratic = run_quadratic_experiment();
      quadratic_done = true;
    }
    return quadratic;
  };
  const std::vector<Criterion> criteria = {
      {1, "closed-form mirror step", 5, closed_form_mirror_step},
      {2, "hypergradient correctness", 30, hypergradient_correctness},
      {3, "regret bound holds empirically", 60, theorem1_empirical},
      {4, "flat-quadratic meta-test speedup", 300, [&] { return quadratic_speedup(ensure_quadratic()); }},
      {5, "gradient infrastructure", 60, gradient_infrastructure},
      {6, "mixture properties", 60, mixture_properties},
      {7, "generalization bound calculator", 60, theorem3_calculator},
      {8, "desk-scale neural meta-test", 600, neural_meta_test},
      {9, "IDX round trip and header mutations", 60, idx_round_trip},
      {10, "tuner protocol", 60, tuner_protocol},
      {11, "activation frequencies", 300, [&] { return activation_frequencies(ensure_quadratic()); }},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    const bool in_time = secs < c.budget;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
              << sci(secs) << " s, budget " << c.budget << " s" << (in_time ? "" : ", OVER BUDGET") << "]"
              << std::endl;
  }
  std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
