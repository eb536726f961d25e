#include <CLI11.hpp>

#include <ostream>

#include "metamd/cli.hpp"
#include "metamd/errors.hpp"

namespace metamd::cli {

namespace {

void add_common(CLI::App* app, CommonOptions& c) {
  app->add_option("--seed", c.seed, "Root random seed");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
}

void add_family(CLI::App* app, std::string& family) {
  app->add_option("--family", family, "Task family")
      ->check(CLI::IsMember({"quadratic", "rosenbrock", "blobs", "idx"}));
}

void add_quadratic(CLI::App* app, QuadraticOptions& q) {
  app->add_option("--q00", q.q00, "Mean of Q[0,0]");
  app->add_option("--q11", q.q11, "Mean of Q[1,1]");
  app->add_option("--offdiag-std", q.offdiag_std);
  app->add_option("--diag-rel-std", q.diag_rel_std);
  app->add_option("--init-std", q.init_std, "Spread of the starting point");
  app->add_option("--task-pool", q.task_pool, "Fixed number of meta-training tasks (0: fresh draws)");
}

void add_domains(CLI::App* app, DomainOptions& d) {
  app->add_option("--domains", d.domains, "Number of synthetic domains");
  app->add_option("--held-out", d.held_out, "Index of the meta-test domain (-1: last)");
  app->add_option("--dim", d.dim, "Synthetic input dimension");
  app->add_option("--classes", d.classes);
  app->add_option("--samples-per-class", d.samples_per_class);
  app->add_option("--hidden", d.hidden, "Hidden width (0: linear classifier)");
  app->add_option("--activation", d.activation)->check(CLI::IsMember({"tanh", "relu"}));
  app->add_option("--val-fraction", d.val_fraction);
  app->add_option("--manifest", d.manifest, "IDX manifest, relative to METAMD_DATA_DIR");
  app->add_option("--rotations", d.rotations, "Rotate the first manifest entry by these angles");
  app->add_option("--image-width", d.image_width);
}

void add_rosenbrock(CLI::App* app, RosenbrockOptions& r) {
  app->add_option("--start-x", r.start_x);
  app->add_option("--start-y", r.start_y);
  app->add_option("--start-std", r.init_std);
}

void add_fmd_mode(CLI::App* app, FmdMode& mode) {
  app->add_option_function<std::string>(
         "--fmd-mode", [&mode](const std::string& s) { mode = fmd_mode_from_string(s); },
         "dense_hessian or hvp_columns")
      ->check(CLI::IsMember({"dense_hessian", "hvp_columns"}));
}

void add_meta_train(CLI::App* app, MetaTrainOptions& o) {
  add_common(app, o.common);
  add_family(app, o.family);
  add_quadratic(app, o.quad);
  add_domains(app, o.domains);
  add_rosenbrock(app, o.rosen);
  app->add_option("--n-matrices", o.n_matrices, "Number of diagonal matrices N");
  app->add_option("--m-init", o.m_init, "Initial value of every raw entry");
  app->add_option("--eta", o.meta.eta, "Inner mirror step size");
  app->add_option("--k", o.meta.k, "Weight of the k / lambda term");
  app->add_option("--inner-T", o.meta.inner_steps, "Inner steps per task");
  app->add_option("--outer-lr", o.meta.outer_lr, "Outer learning rate rho");
  app->add_option("--meta-batch", o.meta.meta_batch, "Tasks per outer step");
  app->add_option("--outer-iters", o.meta.outer_iters);
  app->add_option("--m-floor", o.meta.m_floor);
  app->add_option("--hessian-cap", o.meta.hessian_cap);
  app->add_option("--snapshot-every", o.snapshot_every, "Write a snapshot every k outer steps (0: never)");
  add_fmd_mode(app, o.meta.fmd_mode);
  app->add_option("--eta-candidates", o.eta_candidates, "Pick eta from these before meta-training");
  app->add_option("--eta-select-iters", o.eta_select_iters);
  app->add_option("--eta-select-tasks", o.eta_select_tasks);
}

void add_compare(CLI::App* app, CompareOptions& o) {
  add_common(app, o.common);
  add_family(app, o.family);
  add_quadratic(app, o.quad);
  add_domains(app, o.domains);
  add_rosenbrock(app, o.rosen);
  app->add_option("--divergence", o.divergence, "Divergence snapshot from meta-train");
  app->add_option("--eta", o.eta, "MetaMD step size");
  app->add_option("--optimizers", o.optimizers)
      ->check(CLI::IsMember({"metamd", "sgd", "sgd_momentum", "adam", "rmsprop"}));
  app->add_option("--baseline-tuning", o.baseline_tuning)->check(CLI::IsMember({"grid", "fixed"}));
  app->add_option("--baseline-lr", o.baseline_lr);
  app->add_option("--baseline-wd", o.baseline_wd);
  app->add_option("--n-tasks", o.n_tasks);
  app->add_option("--grad-eps", o.grad_eps, "Stop when the gradient norm is at most this (0: off)");
  app->add_option("--max-iters", o.max_iters);
  app->add_option("--plateau-window", o.plateau_window);
  app->add_option("--plateau-tol", o.plateau_tol);
  app->add_option("--batch-size", o.batch_size, "Mini-batch size (0: full batch)");
  app->add_option("--thin-every", o.thin_every, "Keep every k-th parameter snapshot");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta Mirror Descent: learn a mirror map across tasks, then optimize with it"};
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "Configuration file with one [section] per command");
  app.set_version_flag("--version", "metamd 1.0.0");

  MetaTrainOptions mt;
  CompareOptions cmp;
  BoundsOptions bnd;
  TuneOptions tune;
  DemoOptions quad = quad_demo_defaults();
  DemoOptions rosen = rosenbrock_demo_defaults();

  auto* c_mt = app.add_subcommand("meta-train", "Learn the divergence parameters on a task family");
  add_meta_train(c_mt, mt);

  auto* c_cmp = app.add_subcommand("compare", "Race MetaMD against tuned baselines on held-out tasks");
  add_compare(c_cmp, cmp);

  auto* c_bnd = app.add_subcommand("bounds", "Check the regret and generalization bounds of a compare run");
  add_common(c_bnd, bnd.common);
  c_bnd->add_option("--run", bnd.run, "Output directory of a compare run");
  c_bnd->add_option("--delta", bnd.delta);
  c_bnd->add_option("--frobenius", bnd.frobenius)->check(CLI::IsMember({"effective", "raw"}));
  c_bnd->add_option("--tolerance", bnd.tolerance);

  auto* c_tune = app.add_subcommand("tune", "Grid or Bayesian search of baseline hyperparameters");
  add_common(c_tune, tune.common);
  c_tune->add_option("--family", tune.family)->check(CLI::IsMember({"quadratic", "blobs", "idx"}));
  add_quadratic(c_tune, tune.quad);
  add_domains(c_tune, tune.domains);
  c_tune->add_option("--optimizer", tune.optimizer)
      ->check(CLI::IsMember({"sgd", "sgd_momentum", "adam", "rmsprop"}));
  c_tune->add_option("--mode", tune.mode)->check(CLI::IsMember({"grid", "bayes"}));
  c_tune->add_option("--iters", tune.iters, "Bayesian evaluation budget");
  c_tune->add_option("--beta", tune.beta, "UCB exploration weight");
  c_tune->add_option("--max-iters", tune.max_iters, "Training steps per evaluation");
  c_tune->add_option("--grad-eps", tune.grad_eps);

  auto* c_qd = app.add_subcommand("quad-demo", "meta-train then compare on the quadratic family");
  add_meta_train(c_qd, quad.train);
  c_qd->add_option("--n-tasks", quad.compare.n_tasks);
  c_qd->add_option("--max-iters", quad.compare.max_iters);

  auto* c_rd = app.add_subcommand("rosenbrock-demo", "meta-train then compare on Rosenbrock");
  add_meta_train(c_rd, rosen.train);
  c_rd->add_option("--max-iters", rosen.compare.max_iters);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "metamd: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "metamd: " << e.what() << "\n";
    return 2;
  }

  if (c_mt->parsed()) return cmd_meta_train(mt, err);
  if (c_cmp->parsed()) return cmd_compare(cmp, err);
  if (c_bnd->parsed()) return cmd_bounds(bnd, err);
  if (c_tune->parsed()) return cmd_tune(tune, err);
  if (c_qd->parsed()) return cmd_quad_demo(quad, err);
  if (c_rd->parsed()) return cmd_rosenbrock_demo(rosen, err);
  return 2;
}

}  // namespace metamd::cli
