#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>

#include "metamd/bounds.hpp"
#include "metamd/cli.hpp"
#include "metamd/errors.hpp"
#include "metamd/io.hpp"
#include "metamd/parallel.hpp"

namespace metamd::cli {

namespace {

using nlohmann::json;

// Child streams of the root seed.
enum Stream : std::uint64_t { kMetaTrain = 1, kMetaTest = 2, kData = 3, kPool = 4, kTune = 5, kSplit = 6, kEtaSelect = 7 };

std::string fmt(double x) { return std::isfinite(x) ? io::format_double(x) : (x > 0 ? "inf" : (x < 0 ? "-inf" : "nan")); }

json num(double x) { return std::isfinite(x) ? json(x) : json(fmt(x)); }

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path root) : root_(std::move(root)) {}
  void write(const std::filesystem::path& rel, std::string_view bytes) const { io::write_file(root_ / rel, bytes); }
  void write_json(const std::filesystem::path& rel, const json& j) const { write(rel, j.dump(2) + "\n"); }
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

void validate_common(const CommonOptions& c) { require(c.threads >= 1, "threads must be at least 1"); }

void validate_quad(const QuadraticOptions& q) {
  require(q.q00 > 0 && q.q11 > 0, "quadratic means must be positive");
  require(q.offdiag_std >= 0 && q.diag_rel_std >= 0 && q.init_std >= 0, "quadratic spreads must be non-negative");
}

void validate_domains(const DomainOptions& d) {
  require(d.domains >= 2 || !d.manifest.empty(), "need at least two domains");
  require(d.dim >= 1 && d.classes >= 2 && d.samples_per_class >= 2, "bad synthetic domain sizes");
  require(d.hidden >= 0, "hidden width must be non-negative");
  require(d.val_fraction > 0 && d.val_fraction < 1, "val_fraction must lie in (0, 1)");
  require(d.image_width >= 1, "image_width must be positive");
  activation_from_string(d.activation);
}

void validate_family(const std::string& family, bool allow_rosenbrock) {
  require(family == "quadratic" || family == "blobs" || family == "idx" ||
              (allow_rosenbrock && family == "rosenbrock"),
          "unknown task family '" + family + "'");
}

json quad_json(const QuadraticOptions& q) {
  return {{"q00", q.q00},           {"q11", q.q11},           {"offdiag_std", q.offdiag_std},
          {"diag_rel_std", q.diag_rel_std}, {"init_std", q.init_std}, {"task_pool", q.task_pool}};
}

json domains_json(const DomainOptions& d) {
  return {{"domains", d.domains},     {"held_out", d.held_out},       {"dim", d.dim},
          {"classes", d.classes},     {"samples_per_class", d.samples_per_class},
          {"hidden", d.hidden},       {"activation", d.activation},   {"val_fraction", d.val_fraction},
          {"manifest", d.manifest},   {"rotations", d.rotations},     {"image_width", d.image_width}};
}

json rosen_json(const RosenbrockOptions& r) {
  return {{"start_x", r.start_x}, {"start_y", r.start_y}, {"init_std", r.init_std}};
}

json common_json(const CommonOptions& c) { return {{"seed", c.seed}, {"out", c.out.string()}, {"threads", c.threads}}; }

json meta_json(const MetaConfig& m) {
  return {{"outer_lr", m.outer_lr},     {"k", m.k},
          {"inner_T", m.inner_steps},   {"eta", m.eta},
          {"meta_batch", m.meta_batch}, {"outer_iters", m.outer_iters},
          {"fmd_mode", to_string(m.fmd_mode)}, {"m_floor", m.m_floor},
          {"hessian_cap", m.hessian_cap}};
}

QuadraticFamily quad_family(const QuadraticOptions& q) {
  QuadraticFamily f;
  f.mean_q00 = q.q00;
  f.mean_q11 = q.q11;
  f.offdiag_std = q.offdiag_std;
  f.diag_rel_std = q.diag_rel_std;
  return f;
}

Vector gaussian_start(RngStream& rng, Eigen::Index n, double std) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = std * rng.normal();
  return v;
}

// ---------------------------------------------------------------------------
// Classification domains

struct DomainSet {
  BaseModel model = BaseModel::rosenbrock();
  std::vector<TrainValidation> train;  // meta-train domains
  TrainValidation test;                // held-out domain
  std::vector<std::string> train_tags;
  std::string test_tag;
};

std::vector<DomainDataset> raw_domains(const std::string& family, const DomainOptions& d, const RngStream& root) {
  if (family == "blobs") {
    RngStream rng = root.split(kData);
    return synthetic_domains(rng, d.domains, d.classes, d.dim, d.samples_per_class);
  }
  const auto manifest_path = std::filesystem::path(d.manifest).is_absolute()
                                 ? std::filesystem::path(d.manifest)
                                 : data_root() / d.manifest;
  const auto entries = read_manifest(manifest_path, data_root());
  require(!entries.empty(), "manifest lists no domains");
  std::vector<DomainDataset> out;
  if (!d.rotations.empty()) {
    DomainDataset base = load_idx(entries.front().images, entries.front().labels, entries.front().tag);
    if (base.width != d.image_width) base = downsample(base, d.image_width);
    for (double angle : d.rotations) out.push_back(rotate_dataset(base, angle));
  } else {
    for (const auto& e : entries) {
      DomainDataset ds = load_idx(e.images, e.labels, e.tag);
      if (ds.width != d.image_width) ds = downsample(ds, d.image_width);
      out.push_back(std::move(ds));
    }
  }
  return out;
}

DomainSet load_domain_set(const std::string& family, const DomainOptions& d, const RngStream& root) {
  auto all = raw_domains(family, d, root);
  require(all.size() >= 2, "need at least two domains");
  const int held = d.held_out < 0 ? static_cast<int>(all.size()) - 1 : d.held_out;
  require(held < static_cast<int>(all.size()), "held_out index out of range");
  int classes = 0;
  for (const auto& ds : all) classes = std::max(classes, ds.class_count());
  const int in = static_cast<int>(all.front().images.cols());
  DomainSet set;
  set.model = d.hidden > 0 ? BaseModel::mlp({in, d.hidden, classes}, activation_from_string(d.activation))
                           : BaseModel::linear(in, classes);
  for (std::size_t i = 0; i < all.size(); ++i) {
    RngStream split_rng = root.split(kSplit).split(i);
    auto tv = split_validation(all[i], d.val_fraction, split_rng);
    if (static_cast<int>(i) == held) {
      set.test = std::move(tv);
      set.test_tag = all[i].tag;
    } else {
      set.train.push_back(std::move(tv));
      set.train_tags.push_back(all[i].tag);
    }
  }
  return set;
}

// ---------------------------------------------------------------------------
// Meta-training task samplers

struct Sampler {
  TaskSampler sample;
  Eigen::Index kappa = 0;
  json describe;
};

Sampler make_sampler(const MetaTrainOptions& opt, const RngStream& root) {
  Sampler s;
  if (opt.family == "quadratic") {
    const QuadraticFamily fam = quad_family(opt.quad);
    auto pool = std::make_shared<std::vector<QuadraticTask>>();
    RngStream pool_rng = root.split(kPool);
    for (std::size_t i = 0; i < opt.quad.task_pool; ++i) pool->push_back(sample_quadratic(pool_rng, fam));
    const double init_std = opt.quad.init_std;
    s.sample = [fam, pool, init_std](RngStream& rng) {
      const QuadraticTask q = pool->empty() ? sample_quadratic(rng, fam) : (*pool)[rng.uniform_index(pool->size())];
      return MetaTask{q.model(), {}, gaussian_start(rng, 2, init_std)};
    };
    s.kappa = 2;
    s.describe = {{"family", "quadratic"}, {"pool", pool->size()}};
  } else if (opt.family == "rosenbrock") {
    const auto r = opt.rosen;
    s.sample = [r](RngStream& rng) {
      Vector start(2);
      start << r.start_x + r.init_std * rng.normal(), r.start_y + r.init_std * rng.normal();
      return MetaTask{BaseModel::rosenbrock(), {}, start};
    };
    s.kappa = 2;
    s.describe = {{"family", "rosenbrock"}};
  } else {
    auto set = std::make_shared<DomainSet>(load_domain_set(opt.family, opt.domains, root));
    s.sample = [set](RngStream& rng) {
      const auto& d = set->train[rng.uniform_index(set->train.size())];
      return MetaTask{set->model, d.train.as_batch(), set->model.init_params(rng)};
    };
    s.kappa = set->model.param_count();
    s.describe = {{"family", opt.family},
                  {"model", set->model.describe()},
                  {"train_domains", set->train_tags},
                  {"held_out", set->test_tag}};
  }
  return s;
}

std::string history_csv(const MetaHistory& h) {
  std::ostringstream os;
  os << "iteration,meta_objective,lambda\n";
  for (std::size_t i = 0; i < h.meta_objective.size(); ++i) {
    os << i << ',' << fmt(h.meta_objective[i]) << ',' << fmt(h.lambda[i]) << '\n';
  }
  return os.str();
}

std::string activation_csv(const MetaHistory& h, int n_matrices) {
  std::ostringstream os;
  os << "iteration";
  for (int j = 0; j < n_matrices; ++j) os << ",m" << j;
  os << '\n';
  for (std::size_t i = 0; i < h.activation_counts.size(); ++i) {
    os << i;
    for (auto c : h.activation_counts[i]) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

std::vector<std::size_t> activation_totals(const MetaHistory& h, int n_matrices) {
  std::vector<std::size_t> totals(static_cast<std::size_t>(n_matrices), 0);
  for (const auto& row : h.activation_counts)
    for (std::size_t j = 0; j < row.size(); ++j) totals[j] += row[j];
  return totals;
}

// ---------------------------------------------------------------------------
// Comparison tasks

struct EvalTask {
  BaseModel model = BaseModel::rosenbrock();
  Batch batch;
  Batch validation;
  Vector theta_init;
  bool convex = false;
  std::optional<Vector> theta_star;
  std::optional<double> l_star;
  json describe;
};

std::vector<EvalTask> make_eval_tasks(const CompareOptions& opt, const RngStream& root) {
  std::vector<EvalTask> tasks;
  const RngStream test = root.split(kMetaTest);
  if (opt.family == "quadratic") {
    const QuadraticFamily fam = quad_family(opt.quad);
    for (std::size_t i = 0; i < opt.n_tasks; ++i) {
      RngStream rng = test.split(i);
      const QuadraticTask q = sample_quadratic(rng, fam);
      EvalTask t;
      t.model = q.model();
      t.theta_init = gaussian_start(rng, 2, opt.quad.init_std);
      t.convex = true;
      t.theta_star = q.theta_star;
      t.l_star = q.min_loss();
      t.describe = {{"c", {{q.c(0, 0), q.c(0, 1)}, {q.c(1, 0), q.c(1, 1)}}},
                    {"q", {{q.q(0, 0), q.q(0, 1)}, {q.q(1, 0), q.q(1, 1)}}},
                    {"b", to_std(q.b)},
                    {"theta_star", to_std(q.theta_star)},
                    {"l_star", q.min_loss()}};
      tasks.push_back(std::move(t));
    }
  } else if (opt.family == "rosenbrock") {
    for (std::size_t i = 0; i < opt.n_tasks; ++i) {
      RngStream rng = test.split(i);
      EvalTask t;
      t.model = BaseModel::rosenbrock();
      t.theta_init = Vector(2);
      t.theta_init << opt.rosen.start_x, opt.rosen.start_y;
      if (i > 0) t.theta_init += gaussian_start(rng, 2, opt.rosen.init_std);
      t.theta_star = Vector::Ones(2);
      t.l_star = 0.0;
      t.describe = {{"theta_star", {1.0, 1.0}}, {"l_star", 0.0}};
      tasks.push_back(std::move(t));
    }
  } else {
    const DomainSet set = load_domain_set(opt.family, opt.domains, root);
    for (std::size_t i = 0; i < opt.n_tasks; ++i) {
      RngStream rng = test.split(i);
      EvalTask t;
      t.model = set.model;
      t.batch = set.test.train.as_batch();
      t.validation = set.test.validation.as_batch();
      t.theta_init = set.model.init_params(rng);
      t.describe = {{"domain", set.test_tag}, {"model", set.model.describe()}, {"train_rows", t.batch.size()}};
      tasks.push_back(std::move(t));
    }
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    tasks[i].describe["index"] = i;
    tasks[i].describe["family"] = opt.family;
    tasks[i].describe["convex"] = tasks[i].convex;
    tasks[i].describe["theta_init"] = to_std(tasks[i].theta_init);
  }
  return tasks;
}

OptimizerSpec baseline_spec(const std::string& name, double lr, double wd) {
  if (name == "sgd") return OptimizerSpec::sgd(lr, wd);
  if (name == "sgd_momentum") return OptimizerSpec::sgd_momentum(lr, 0.9, wd);
  if (name == "adam") return OptimizerSpec::adam(lr, wd);
  if (name == "rmsprop") return OptimizerSpec::rmsprop(lr, wd);
  throw ConfigError("unknown optimizer '" + name + "'");
}

SearchSpace baseline_space(const std::string& name) {
  return (name == "adam" || name == "rmsprop") ? SearchSpace::adam() : SearchSpace::sgd_family();
}

StoppingCriteria stopping(const CompareOptions& opt) {
  StoppingCriteria s;
  s.grad_norm_eps = opt.grad_eps;
  s.max_iters = opt.max_iters;
  s.plateau_window = opt.plateau_window;
  s.plateau_tol = opt.plateau_tol;
  return s;
}

struct RunOutcome {
  Trajectory traj;
  bool diverged = false;
};

RunOutcome train_once(const EvalTask& task, const OptimizerSpec& spec, const CompareOptions& opt, std::uint64_t stream) {
  Batcher batcher(task.batch, opt.batch_size);
  RngStream rng = RngStream(opt.common.seed).split(kMetaTest).split(stream);
  TrainingOptions topt;
  topt.thin_every = opt.thin_every;
  try {
    return {run_training(task.model, batcher, spec, stopping(opt), task.theta_init, rng, topt), false};
  } catch (const TrainingDivergedError& e) {
    return {e.trajectory(), true};
  }
}

// Higher is better: converged runs by iteration count, otherwise by how far
// they got; fixed-budget runs (grad_eps disabled) by final loss.
double run_score(const RunOutcome& r, const CompareOptions& opt) {
  if (r.diverged) return -std::numeric_limits<double>::infinity();
  if (opt.grad_eps > 0) {
    if (r.traj.stop_reason == StopReason::kGradEps) return -static_cast<double>(r.traj.iterations);
    return -static_cast<double>(opt.max_iters + 1) - std::log1p(r.traj.grad_norms.back());
  }
  return -r.traj.losses.back();
}

struct Row {
  std::size_t task = 0;
  std::string optimizer;
  double lr = 0, wd = 0;
  RunOutcome run;
  double metric = 0;
};

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string task_file(std::size_t task, const std::string& optimizer) {
  std::ostringstream os;
  os << "task" << std::setw(3) << std::setfill('0') << task << "_" << optimizer;
  return os.str();
}

struct EtaChoice {
  double eta = 0.0;
  std::string table;
};

EtaChoice select_eta(const MetaTrainOptions& opt, const Sampler& sampler, const DiagonalMahalanobisSet& init,
                     const RngStream& root) {
  std::vector<MetaTask> tasks;
  for (std::size_t s = 0; s < opt.eta_select_tasks; ++s) {
    RngStream rng = root.split(kEtaSelect).split(s);
    tasks.push_back(sampler.sample(rng));
  }
  StoppingCriteria stop;
  stop.grad_norm_eps = 0.0;
  stop.max_iters = opt.eta_select_iters;
  std::ostringstream table;
  table << "eta,mean_final_loss,loss_increases\n";
  EtaChoice best{0.0, ""};
  double best_loss = std::numeric_limits<double>::infinity();
  bool best_monotone = false;
  for (double eta : opt.eta_candidates) {
    double sum = 0.0;
    std::size_t increases = 0;
    for (const auto& t : tasks) {
      Batcher batcher(t.batch);
      RngStream rng = root.split(kEtaSelect).split(1000);
      try {
        const auto traj = run_training(t.model, batcher, OptimizerSpec::metamd(init, eta), stop, t.theta_init, rng);
        sum += traj.losses.back();
        for (std::size_t i = 1; i < traj.losses.size(); ++i) {
          increases += traj.losses[i] > traj.losses[i - 1] * (1.0 + 1e-12);
        }
      } catch (const TrainingDivergedError&) {
        sum = std::numeric_limits<double>::infinity();
      }
    }
    const double mean = sum / static_cast<double>(tasks.size());
    table << fmt(eta) << ',' << fmt(mean) << ',' << increases << '\n';
    const bool monotone = increases == 0 && std::isfinite(mean);
    if ((monotone && !best_monotone) || (monotone == best_monotone && mean < best_loss)) {
      best_loss = mean;
      best.eta = eta;
      best_monotone = monotone;
    }
  }
  if (!(best.eta > 0.0)) throw NumericalError("every eta candidate diverged");
  best.table = table.str();
  return best;
}

int report_failure(std::ostream& log, const std::string& cmd, const std::exception& e, int code) {
  log << cmd << ": error: " << e.what() << "\n";
  return code;
}

}  // namespace

std::filesystem::path data_root() {
  const char* env = std::getenv("METAMD_DATA_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::current_path();
}

// ---------------------------------------------------------------------------
// Validation

void MetaTrainOptions::validate() const {
  validate_common(common);
  validate_family(family, true);
  validate_quad(quad);
  if (family == "blobs" || family == "idx") validate_domains(domains);
  if (family == "idx") require(!domains.manifest.empty(), "family idx needs a manifest");
  require(n_matrices >= 1, "n_matrices must be at least 1");
  require(m_init != 0.0 && std::isfinite(m_init), "m_init must be non-zero");
  for (double e : eta_candidates) require(e > 0 && std::isfinite(e), "eta candidates must be positive");
  require(eta_candidates.empty() || (eta_select_iters >= 1 && eta_select_tasks >= 1),
          "eta selection needs at least one task and one iteration");
  try {
    meta.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
}

void CompareOptions::validate() const {
  validate_common(common);
  validate_family(family, true);
  validate_quad(quad);
  if (family == "blobs" || family == "idx") validate_domains(domains);
  require(!optimizers.empty(), "no optimizers to compare");
  for (const auto& o : optimizers) {
    require(o == "metamd" || o == "sgd" || o == "sgd_momentum" || o == "adam" || o == "rmsprop",
            "unknown optimizer '" + o + "'");
  }
  if (std::count(optimizers.begin(), optimizers.end(), "metamd")) {
    require(!divergence.empty(), "comparing metamd needs a divergence snapshot");
    require(eta > 0, "eta must be positive");
  }
  require(baseline_tuning == "grid" || baseline_tuning == "fixed", "baseline_tuning must be grid or fixed");
  require(baseline_lr > 0 && baseline_wd >= 0, "bad fixed baseline hyperparameters");
  require(n_tasks >= 1, "n_tasks must be at least 1");
  require(plateau_window != 1, "plateau_window must be 0 or at least 2");
  require(thin_every >= 1, "thin_every must be at least 1");
}

void BoundsOptions::validate() const {
  validate_common(common);
  require(!run.empty(), "bounds needs --run pointing at a compare output directory");
  require(delta > 0 && delta < 1, "delta must lie in (0, 1)");
  require(frobenius == "effective" || frobenius == "raw", "frobenius must be effective or raw");
}

void TuneOptions::validate() const {
  validate_common(common);
  require(family == "blobs" || family == "idx" || family == "quadratic", "tune supports blobs, idx and quadratic");
  validate_quad(quad);
  if (family != "quadratic") validate_domains(domains);
  require(optimizer == "sgd" || optimizer == "sgd_momentum" || optimizer == "adam" || optimizer == "rmsprop",
          "unknown optimizer '" + optimizer + "'");
  require(mode == "grid" || mode == "bayes", "mode must be grid or bayes");
  require(iters >= 1 && max_iters >= 1, "iters and max_iters must be positive");
  require(beta >= 0, "beta must be non-negative");
}

// ---------------------------------------------------------------------------
// meta-train

int cmd_meta_train(const MetaTrainOptions& opt, std::ostream& log) {
  Sampler sampler;
  const RngStream root(opt.common.seed);
  try {
    opt.validate();
    sampler = make_sampler(opt, root);
  } catch (const std::exception& e) {
    return report_failure(log, "meta-train", e, 2);
  }
  const OutputDir out(opt.common.out);
  MetaConfig cfg = opt.meta;
  cfg.threads = opt.common.threads;
  const json config = {{"command", "meta-train"}, {"common", common_json(opt.common)},
                       {"family", opt.family},    {"quadratic", quad_json(opt.quad)},
                       {"domains", domains_json(opt.domains)}, {"rosenbrock", rosen_json(opt.rosen)},
                       {"n_matrices", opt.n_matrices}, {"m_init", opt.m_init},
                       {"meta", meta_json(cfg)},  {"snapshot_every", opt.snapshot_every},
                       {"eta_candidates", opt.eta_candidates}, {"eta_select_iters", opt.eta_select_iters},
                       {"eta_select_tasks", opt.eta_select_tasks},
                       {"tasks", sampler.describe}};
  try {
    out.write_json("config.json", config);
    const DiagonalMahalanobisSet init(Matrix::Constant(opt.n_matrices, sampler.kappa, opt.m_init));
    if (!opt.eta_candidates.empty()) {
      const EtaChoice choice = select_eta(opt, sampler, init, root);
      out.write("eta_selection.csv", choice.table);
      cfg.eta = choice.eta;
      log << "meta-train: selected eta=" << fmt(cfg.eta) << "\n";
    }
    const auto on_update = [&](std::size_t it, const DiagonalMahalanobisSet& m) {
      if (opt.snapshot_every > 0 && it % opt.snapshot_every == 0) {
        std::ostringstream name;
        name << "snapshots/divergence_" << std::setw(6) << std::setfill('0') << it << ".bin";
        out.write(name.str(), to_binary(m));
      }
    };
    log << "meta-train: " << opt.family << ", N=" << opt.n_matrices << ", kappa=" << sampler.kappa
        << ", T=" << cfg.inner_steps << ", outer_iters=" << cfg.outer_iters << "\n";
    OuterLoopResult result = [&] {
      try {
        return outer_loop(sampler.sample, init, cfg, root.split(kMetaTrain), on_update);
      } catch (const MetaTrainingAborted& e) {
        out.write("meta_objective.csv", history_csv(e.history()));
        out.write("activation.csv", activation_csv(e.history(), opt.n_matrices));
        save_divergence(e.last(), out.root() / "divergence_last.bin");
        throw;
      }
    }();
    const auto& h = result.history;
    save_divergence(result.divergence, out.root() / "divergence.bin");
    save_divergence(result.divergence, out.root() / "divergence.json");
    out.write("meta_objective.csv", history_csv(h));
    out.write("activation.csv", activation_csv(h, opt.n_matrices));
    const auto totals = activation_totals(h, opt.n_matrices);
    json summary = {{"n_matrices", opt.n_matrices},
                    {"kappa", sampler.kappa},
                    {"eta", cfg.eta},
                    {"outer_iters", cfg.outer_iters},
                    {"total_inner_steps", cfg.outer_iters * cfg.meta_batch * cfg.inner_steps},
                    {"activation_totals", totals},
                    {"lambda_final", lambda_strong_convexity(result.divergence)},
                    {"frobenius_effective", to_std(frobenius_norms(result.divergence))}};
    if (!h.meta_objective.empty()) {
      summary["meta_objective_first"] = num(h.meta_objective.front());
      summary["meta_objective_last"] = num(h.meta_objective.back());
    }
    out.write_json("summary.json", summary);
    log << "meta-train: wrote " << out.root().string() << "\n";
    return 0;
  } catch (const MetaTrainingAborted& e) {
    return report_failure(log, "meta-train", e, 3);
  } catch (const std::exception& e) {
    return report_failure(log, "meta-train", e, 1);
  }
}

// ---------------------------------------------------------------------------
// compare

int cmd_compare(const CompareOptions& opt, std::ostream& log) {
  std::vector<EvalTask> tasks;
  std::optional<DiagonalMahalanobisSet> divergence;
  const RngStream root(opt.common.seed);
  try {
    opt.validate();
    tasks = make_eval_tasks(opt, root);
    if (std::count(opt.optimizers.begin(), opt.optimizers.end(), "metamd")) {
      require(std::filesystem::exists(opt.divergence), "divergence snapshot '" + opt.divergence.string() + "' not found");
      divergence = load_divergence(opt.divergence);
      require(divergence->kappa() == tasks.front().model.param_count(),
              "divergence kappa " + std::to_string(divergence->kappa()) + " does not match the model's " +
                  std::to_string(tasks.front().model.param_count()) + " parameters");
    }
  } catch (const std::exception& e) {
    return report_failure(log, "compare", e, 2);
  }

  try {
    const OutputDir out(opt.common.out);
    json config = {{"command", "compare"},      {"common", common_json(opt.common)},
                   {"family", opt.family},      {"quadratic", quad_json(opt.quad)},
                   {"domains", domains_json(opt.domains)}, {"rosenbrock", rosen_json(opt.rosen)},
                   {"divergence", opt.divergence.string()}, {"eta", opt.eta},
                   {"optimizers", opt.optimizers},         {"baseline_tuning", opt.baseline_tuning},
                   {"baseline_lr", opt.baseline_lr},       {"baseline_wd", opt.baseline_wd},
                   {"n_tasks", opt.n_tasks},               {"grad_eps", opt.grad_eps},
                   {"max_iters", opt.max_iters},           {"plateau_window", opt.plateau_window},
                   {"plateau_tol", opt.plateau_tol},       {"batch_size", opt.batch_size},
                   {"thin_every", opt.thin_every}};
    out.write_json("config.json", config);
    if (divergence) save_divergence(*divergence, out.root() / "divergence.bin");
    json task_list = json::array();
    for (const auto& t : tasks) task_list.push_back(t.describe);
    out.write_json("tasks.json", task_list);

    // Work items: (task, optimizer). Each owns its output slot.
    const std::size_t n_opt = opt.optimizers.size();
    std::vector<Row> rows(tasks.size() * n_opt);
    parallel_for(rows.size(), opt.common.threads, [&](std::size_t w) {
      const std::size_t ti = w / n_opt, oi = w % n_opt;
      const EvalTask& task = tasks[ti];
      const std::string& name = opt.optimizers[oi];
      const std::uint64_t stream = static_cast<std::uint64_t>(ti) * 16 + oi + 1;
      Row row;
      row.task = ti;
      row.optimizer = name;
      if (name == "metamd") {
        row.lr = opt.eta;
        row.run = train_once(task, OptimizerSpec::metamd(*divergence, opt.eta), opt, stream);
      } else if (opt.baseline_tuning == "fixed") {
        row.lr = opt.baseline_lr;
        row.wd = opt.baseline_wd;
        row.run = train_once(task, baseline_spec(name, row.lr, row.wd), opt, stream);
      } else {
        const auto grid = grid_search(baseline_space(name), [&](const HyperPoint& p) {
          return run_score(train_once(task, baseline_spec(name, p.lr, p.wd), opt, stream), opt);
        });
        row.lr = grid.best.lr;
        row.wd = grid.best.wd;
        row.run = train_once(task, baseline_spec(name, row.lr, row.wd), opt, stream);
      }
      if (!task.validation.empty()) {
        row.metric = row.run.diverged ? 0.0 : task.model.accuracy(row.run.traj.final_theta(), task.validation);
      } else {
        row.metric = row.run.traj.losses.back() - task.l_star.value_or(0.0);
      }
      rows[w] = std::move(row);
    });

    std::ostringstream csv;
    csv << "task,optimizer,lr,wd,iterations,stop_reason,diverged,final_loss,final_grad_norm,metric\n";
    json jrows = json::array();
    for (const auto& r : rows) {
      const auto& t = r.run.traj;
      const std::string stop = r.run.diverged ? "diverged" : to_string(t.stop_reason);
      csv << r.task << ',' << r.optimizer << ',' << fmt(r.lr) << ',' << fmt(r.wd) << ',' << t.iterations << ','
          << stop << ',' << (r.run.diverged ? 1 : 0) << ',' << fmt(t.losses.back()) << ','
          << fmt(t.grad_norms.back()) << ',' << fmt(r.metric) << '\n';
      jrows.push_back({{"task", r.task},
                       {"optimizer", r.optimizer},
                       {"lr", r.lr},
                       {"wd", r.wd},
                       {"iterations", t.iterations},
                       {"stop_reason", stop},
                       {"final_loss", num(t.losses.back())},
                       {"final_grad_norm", num(t.grad_norms.back())},
                       {"metric", num(r.metric)},
                       {"trajectory", "trajectories/" + task_file(r.task, r.optimizer) + ".csv"}});
      out.write("trajectories/" + task_file(r.task, r.optimizer) + ".csv", trajectory_to_csv(t));
      out.write("trajectories/" + task_file(r.task, r.optimizer) + ".bin", to_binary(t));
    }
    out.write("report.csv", csv.str());

    // Per-optimizer aggregates and head-to-head against metamd.
    json summary = json::object();
    std::map<std::string, std::vector<const Row*>> by_opt;
    for (const auto& r : rows) by_opt[r.optimizer].push_back(&r);
    for (const auto& [name, list] : by_opt) {
      std::vector<double> iters, losses, metrics;
      std::size_t converged = 0;
      for (const Row* r : list) {
        iters.push_back(static_cast<double>(r->run.traj.iterations));
        losses.push_back(r->run.traj.losses.back());
        metrics.push_back(r->metric);
        converged += !r->run.diverged && r->run.traj.stop_reason == StopReason::kGradEps;
      }
      summary[name] = {{"median_iterations", median(iters)},
                       {"mean_iterations", std::accumulate(iters.begin(), iters.end(), 0.0) / iters.size()},
                       {"mean_final_loss", num(std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size())},
                       {"mean_metric", num(std::accumulate(metrics.begin(), metrics.end(), 0.0) / metrics.size())},
                       {"converged", converged},
                       {"tasks", list.size()}};
    }
    json head_to_head = json::object();
    if (by_opt.count("metamd")) {
      for (const auto& [name, list] : by_opt) {
        if (name == "metamd") continue;
        std::size_t wins = 0;
        std::vector<double> speedups;
        for (std::size_t i = 0; i < list.size(); ++i) {
          const Row& md = *by_opt["metamd"][i];
          const Row& b = *list[i];
          const bool md_conv = !md.run.diverged && md.run.traj.stop_reason == StopReason::kGradEps;
          const bool b_conv = !b.run.diverged && b.run.traj.stop_reason == StopReason::kGradEps;
          const double mi = static_cast<double>(md.run.traj.iterations);
          const double bi = b_conv ? static_cast<double>(b.run.traj.iterations) : INFINITY;
          if (md_conv && mi < bi) ++wins;
          speedups.push_back(md_conv ? bi / std::max(mi, 1.0) : 0.0);
        }
        head_to_head[name] = {{"metamd_faster", wins}, {"median_speedup", num(median(speedups))}};
      }
    }
    out.write_json("report.json", {{"config", config}, {"rows", jrows}, {"summary", summary},
                                   {"metamd_vs", head_to_head}});
    log << "compare: " << tasks.size() << " tasks x " << n_opt << " optimizers -> " << out.root().string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    return report_failure(log, "compare", e, 1);
  }
}

// ---------------------------------------------------------------------------
// bounds

int cmd_bounds(const BoundsOptions& opt, std::ostream& log) {
  json config, tasks;
  DiagonalMahalanobisSet m = DiagonalMahalanobisSet::ones(1, 1);
  std::vector<Trajectory> trajs;
  try {
    opt.validate();
    const auto report_path = opt.run / "report.json";
    const auto tasks_path = opt.run / "tasks.json";
    for (const auto& p : {report_path, tasks_path, opt.run / "divergence.bin"}) {
      require(std::filesystem::exists(p), "missing file '" + p.string() + "'");
    }
    config = json::parse(io::read_file(report_path)).at("config");
    tasks = json::parse(io::read_file(tasks_path));
    require(config.value("family", "") == "quadratic" || std::all_of(tasks.begin(), tasks.end(), [](const json& t) {
              return t.value("convex", false);
            }),
            "the regret bound is only certified for convex tasks; family '" + config.value("family", "") +
                "' is not convex");
    m = load_divergence(opt.run / "divergence.bin");
    for (const auto& t : tasks) {
      const auto path = opt.run / "trajectories" / (task_file(t.at("index").get<std::size_t>(), "metamd") + ".bin");
      require(std::filesystem::exists(path), "missing trajectory file '" + path.string() + "'");
      trajs.push_back(trajectory_from_binary(io::read_file(path)));
    }
  } catch (const std::exception& e) {
    return report_failure(log, "bounds", e, 2);
  }

  try {
    const double eta = config.at("eta").get<double>();
    json reports = json::array();
    std::size_t violations = 0, lipschitz_violations = 0;
    double sum_bregman = 0, r_max = 0, l_max = 0, t_max = 0;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      const Vector star = to_vector(tasks[i].at("theta_star").get<std::vector<double>>());
      const double l_star = tasks[i].at("l_star").get<double>();
      const auto rep = check_regret_bounds("task" + std::to_string(i), m, star, l_star, trajs[i], eta, opt.tolerance);
      violations += !rep.thm1_satisfied;
      lipschitz_violations += !rep.lipschitz_satisfied;
      sum_bregman += bregman_div(m, star, trajs[i].initial());
      r_max = std::max(r_max, (trajs[i].initial() - star).norm());
      l_max = std::max(l_max, rep.lipschitz_constant);
      t_max = std::max(t_max, static_cast<double>(trajs[i].grad_norms.size()));
      reports.push_back(to_json(rep));
    }
    BoundInputs in;
    in.eta = eta;
    in.lambda = lambda_strong_convexity(m);
    in.horizon = t_max;
    in.lipschitz = l_max;
    in.c = frobenius_norms(m, opt.frobenius == "raw" ? FrobeniusMode::kRaw : FrobeniusMode::kEffective).maxCoeff();
    in.r = r_max;
    in.delta = opt.delta;
    in.n_tasks = static_cast<double>(trajs.size());
    in.n_matrices = static_cast<double>(m.count());
    in.mean_bregman = sum_bregman / static_cast<double>(trajs.size());
    const BoundValue thm3 = generalization_bound(in);
    const OutputDir out(opt.common.out);
    out.write_json("bounds.json", {{"run", opt.run.string()},
                                   {"delta", opt.delta},
                                   {"frobenius", opt.frobenius},
                                   {"tasks", reports},
                                   {"theorem1_violations", violations},
                                   {"lipschitz_violations", lipschitz_violations},
                                   {"theorem3", {{"inputs", to_json(in)}, {"value", to_json(thm3)}}}});
    log << "bounds: " << trajs.size() << " tasks, " << violations << " regret-bound violations\n";
    return 0;
  } catch (const std::exception& e) {
    return report_failure(log, "bounds", e, 1);
  }
}

// ---------------------------------------------------------------------------
// tune

int cmd_tune(const TuneOptions& opt, std::ostream& log) {
  const RngStream root(opt.common.seed);
  std::optional<DomainSet> set;
  std::optional<QuadraticTask> quad;
  Vector start;
  try {
    opt.validate();
    RngStream rng = root.split(kTune);
    if (opt.family == "quadratic") {
      quad = sample_quadratic(rng, quad_family(opt.quad));
      start = gaussian_start(rng, 2, opt.quad.init_std);
    } else {
      set = load_domain_set(opt.family, opt.domains, root);
      start = set->model.init_params(rng);
    }
  } catch (const std::exception& e) {
    return report_failure(log, "tune", e, 2);
  }

  try {
    const Objective evaluate = [&](const HyperPoint& p) {
      StoppingCriteria stop;
      stop.grad_norm_eps = opt.grad_eps;
      stop.max_iters = opt.max_iters;
      RngStream rng = root.split(kTune).split(1);
      if (quad) {
        Batcher b{Batch{}};
        const auto t = run_training(quad->model(), b, baseline_spec(opt.optimizer, p.lr, p.wd), stop, start, rng);
        return t.stop_reason == StopReason::kGradEps ? -static_cast<double>(t.iterations)
                                                     : -static_cast<double>(opt.max_iters + 1);
      }
      Batcher b(set->test.train.as_batch());
      const auto t = run_training(set->model, b, baseline_spec(opt.optimizer, p.lr, p.wd), stop, start, rng);
      return set->model.accuracy(t.final_theta(), set->test.validation.as_batch());
    };
    const OutputDir out(opt.common.out);
    const SearchSpace space = baseline_space(opt.optimizer);
    const std::vector<std::string> header = {
        "optimizer=" + opt.optimizer, "mode=" + opt.mode, "seed=" + std::to_string(opt.common.seed),
        "gp_lengthscale=1 gp_signal_variance=1 gp_noise_variance=1e-06 space=log10",
        "ucb_beta=" + fmt(opt.beta),
        std::string("score=") + (quad ? "negative iterations to convergence" : "validation accuracy")};
    json best;
    if (opt.mode == "grid") {
      const auto r = grid_search(space, evaluate, opt.common.threads);
      out.write("tuning.csv", tuning_table_csv(r.table, header));
      best = {{"lr", r.best.lr}, {"wd", r.best.wd}, {"score", num(r.best_score)}, {"evaluations", r.table.size()}};
    } else {
      RngStream rng = root.split(kTune).split(2);
      BayesOptions bo;
      bo.iters = opt.iters;
      bo.beta = opt.beta;
      const auto r = bayes_opt(space, evaluate, rng, bo);
      std::vector<Evaluation> table;
      std::ostringstream hist;
      hist << "iteration,lr,wd,score,incumbent\n";
      for (std::size_t i = 0; i < r.history.size(); ++i) {
        const auto& s = r.history[i];
        table.push_back(s.eval);
        hist << i << ',' << fmt(s.eval.point.lr) << ',' << fmt(s.eval.point.wd) << ',' << fmt(s.eval.score) << ','
             << fmt(s.incumbent) << '\n';
      }
      out.write("tuning.csv", tuning_table_csv(table, header));
      out.write("history.csv", hist.str());
      best = {{"lr", r.best.lr}, {"wd", r.best.wd}, {"score", num(r.best_score)}, {"evaluations", r.history.size()}};
    }
    best["optimizer"] = opt.optimizer;
    best["mode"] = opt.mode;
    out.write_json("best.json", best);
    log << "tune: " << opt.mode << " search for " << opt.optimizer << " -> lr=" << best["lr"] << " wd=" << best["wd"]
        << "\n";
    return 0;
  } catch (const std::exception& e) {
    return report_failure(log, "tune", e, 1);
  }
}

// ---------------------------------------------------------------------------
// demos

DemoOptions quad_demo_defaults() {
  DemoOptions d;
  d.train.common.seed = 7;
  d.train.family = "quadratic";
  d.train.quad.task_pool = 50;
  d.train.n_matrices = 3;
  d.train.meta.eta = 0.04;
  d.train.meta.inner_steps = 101;
  d.train.meta.k = 0.0;
  d.train.meta.outer_lr = 3e-4;
  d.train.meta.outer_iters = 4000;
  d.train.meta.meta_batch = 50;
  d.compare.family = "quadratic";
  d.compare.optimizers = {"metamd", "sgd", "sgd_momentum", "adam"};
  d.compare.n_tasks = 100;
  d.compare.max_iters = 10000;
  return d;
}

DemoOptions rosenbrock_demo_defaults() {
  DemoOptions d;
  d.train.family = "rosenbrock";
  d.train.n_matrices = 3;
  d.train.meta.eta = 0.0005;
  d.train.meta.inner_steps = 50;
  d.train.meta.outer_lr = 0.01;
  d.train.meta.outer_iters = 200;
  d.train.meta.meta_batch = 16;
  d.compare.family = "rosenbrock";
  d.compare.n_tasks = 1;
  d.compare.max_iters = 20000;
  return d;
}

namespace {

int run_demo(const DemoOptions& opt, std::ostream& log, const char* name) {
  MetaTrainOptions train = opt.train;
  CompareOptions compare = opt.compare;
  const auto root = opt.train.common.out;
  train.common.out = root / "meta-train";
  compare.common = opt.train.common;
  compare.common.out = root / "compare";
  compare.eta = train.meta.eta;
  compare.quad = train.quad;
  compare.quad.task_pool = 0;
  compare.rosen = train.rosen;
  compare.divergence = train.common.out / "divergence.bin";
  try {
    train.validate();
    compare.divergence = train.common.out / "divergence.bin";
    CompareOptions probe = compare;
    probe.validate();
  } catch (const std::exception& e) {
    return report_failure(log, name, e, 2);
  }
  if (int rc = cmd_meta_train(train, log); rc != 0) return rc;
  try {
    compare.eta = json::parse(io::read_file(train.common.out / "summary.json")).at("eta").get<double>();
  } catch (const std::exception& e) {
    return report_failure(log, name, e, 1);
  }
  if (int rc = cmd_compare(compare, log); rc != 0) return rc;
  try {
    const json report = json::parse(io::read_file(compare.common.out / "report.json"));
    OutputDir(root).write_json("summary.json", {{"demo", name},
                                                {"summary", report.at("summary")},
                                                {"metamd_vs", report.at("metamd_vs")}});
    return 0;
  } catch (const std::exception& e) {
    return report_failure(log, name, e, 1);
  }
}

}  // namespace

int cmd_quad_demo(const DemoOptions& opt, std::ostream& log) { return run_demo(opt, log, "quad-demo"); }
int cmd_rosenbrock_demo(const DemoOptions& opt, std::ostream& log) { return run_demo(opt, log, "rosenbrock-demo"); }

}  // namespace metamd::cli
