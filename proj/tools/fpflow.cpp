// Command-line front end: configure and run characteristic solves, training,
// grid evaluation, Monte-Carlo comparisons, and the invariant suite.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "fpflow/checks.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitCheckFailed = 4;

struct CliState {
  std::string config_file;
  std::vector<std::string> sets;
  // common shortcuts, applied after --set
  std::string problem, out, mode;
  int dim = -1;
  long long seed = -1;

  fpflow::run::RunConfig resolve() const {
    fpflow::run::KeyValues kv;
    if (!config_file.empty()) kv.parse_file(config_file);
    for (const auto& s : sets) {
      if (!kv.parse_line(s)) throw fpflow::ConfigError("bad --set '" + s + "' (want key=value)");
    }
    if (!problem.empty()) kv.set("problem", problem);
    if (!out.empty()) kv.set("out", out);
    if (!mode.empty()) kv.set("eval.mode", mode);
    if (dim >= 0) kv.set("dim", std::to_string(dim));
    if (seed >= 0) kv.set("train.seed", std::to_string(seed));
    return fpflow::run::RunConfig::from(kv);
  }
};

void add_common(CLI::App* cmd, CliState& st) {
  cmd->add_option("-c,--config", st.config_file, "key = value configuration file");
  cmd->add_option("--set", st.sets, "override a config key (key=value), repeatable");
  cmd->add_option("--problem", st.problem, "problem name: toy | tfp-gauss | sfp-ou");
  cmd->add_option("--dim", st.dim, "spatial dimension");
  cmd->add_option("--seed", st.seed, "training / sampling seed");
  cmd->add_option("--out", st.out, "output directory");
  cmd->add_option("--mode", st.mode, "prediction mode: net | ode | both");
}

void print_report(const fpflow::run::EvalReport& rep, bool has_net, bool has_ode) {
  if (has_net && rep.net.used > 0)
    std::printf("net : MAPE %.6g%%  max rel %.6g%%  mse(log p) %.6g  (%d points)\n",
                rep.net.mape, rep.net.max_rel, rep.net.mse_log, rep.net.used);
  if (has_ode && rep.ode.used > 0)
    std::printf("ode : MAPE %.6g%%  max rel %.6g%%  mse(log p) %.6g  (%d points)\n",
                rep.ode.mape, rep.ode.max_rel, rep.ode.mse_log, rep.ode.used);
  if (rep.failed_points > 0)
    std::printf("warning: %d grid points flagged (solver divergence)\n", rep.failed_points);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fokker-Planck solver library: characteristics + normalizing flows"};
  app.require_subcommand(1);

  CliState st_solve, st_train, st_eval, st_mc, st_check;
  std::string eval_ckpt, mc_ckpt;

  CLI::App* solve = app.add_subcommand(
      "solve", "solve a zero-diffusion problem on a grid (no training)");
  add_common(solve, st_solve);

  CLI::App* tr = app.add_subcommand("train", "train the log-density model for a problem");
  add_common(tr, st_train);

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a grid");
  add_common(ev, st_eval);
  ev->add_option("--checkpoint", eval_ckpt, "model checkpoint path");

  CLI::App* mc = app.add_subcommand(
      "mc-compare", "Euler-Maruyama simulation vs analytic density (dim <= 2)");
  add_common(mc, st_mc);
  mc->add_option("--checkpoint", mc_ckpt, "overlay a trained model (dim 1)");

  CLI::App* ck = app.add_subcommand("check", "run the machine-verified invariant suite");
  (void)st_check;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (solve->parsed()) {
      fpflow::run::RunConfig cfg = st_solve.resolve();
      auto rep = fpflow::run::cmd_solve_zero_diffusion(cfg);
      fpflow::run::write_csv_with_sidecar(cfg.out_dir + "/solve.csv", rep.to_csv(), cfg,
                                          rep.summary());
      print_report(rep, false, true);
      std::printf("wrote %s\n", (cfg.out_dir + "/solve.csv").c_str());
    } else if (tr->parsed()) {
      fpflow::run::RunConfig cfg = st_train.resolve();
      auto out = fpflow::run::cmd_train(cfg, [](int iter, const fpflow::train::TrainTrace& t) {
        if ((iter + 1) % 100 == 0)
          std::fprintf(stderr, "iter %6d  loss %.6g  (%.0f ms)\n", iter + 1, t.loss.back(),
                       t.wall_ms.back());
      });
      std::printf("trained %zu iterations (skipped %zu), final loss %.6g\n",
                  out.trace.loss.size(), out.trace.skipped.size(), out.trace.last_loss());
      std::printf("wrote %s and %s\n", out.checkpoint_path.c_str(), out.trace_path.c_str());
    } else if (ev->parsed()) {
      fpflow::run::RunConfig cfg = st_eval.resolve();
      if (!eval_ckpt.empty()) cfg.checkpoint = eval_ckpt;
      auto rep = fpflow::run::cmd_eval(cfg);
      fpflow::run::write_csv_with_sidecar(cfg.out_dir + "/eval.csv", rep.to_csv(), cfg,
                                          rep.summary());
      print_report(rep, cfg.mode != "ode", cfg.mode != "net");
      std::printf("wrote %s\n", (cfg.out_dir + "/eval.csv").c_str());
    } else if (mc->parsed()) {
      fpflow::run::RunConfig cfg = st_mc.resolve();
      std::unique_ptr<fpflow::io::LoadedModel> loaded;
      const fpflow::nets::LogDensityModel* model = nullptr;
      if (!mc_ckpt.empty()) {
        loaded = std::make_unique<fpflow::io::LoadedModel>(fpflow::io::load_checkpoint(mc_ckpt));
        model = loaded->model();
      }
      auto rep = fpflow::run::cmd_mc_compare(cfg, model);
      fpflow::run::write_csv_with_sidecar(
          cfg.out_dir + "/mc.csv", rep.to_csv(), cfg,
          {{"sup_err", rep.sup_err},
           {"l1_err", rep.l1_err},
           {"within_3sigma", rep.within_bounds},
           {"particles", rep.particles},
           {"t", rep.sim_time}});
      std::printf("mc vs analytic: sup %.6g  L1 %.6g  within 3-sigma bounds: %s\n", rep.sup_err,
                  rep.l1_err, rep.within_bounds ? "yes" : "no");
      std::printf("wrote %s\n", (cfg.out_dir + "/mc.csv").c_str());
      if (!rep.within_bounds) return kExitCheckFailed;
    } else if (ck->parsed()) {
      bool all = true;
      for (const auto& r : fpflow::run::run_all_checks()) {
        std::printf("%-38s %s   (worst %.3g, bound %.3g)\n", r.name.c_str(),
                    r.pass ? "PASS" : "FAIL", r.worst, r.bound);
        all = all && r.pass;
      }
      if (!all) return kExitCheckFailed;
    }
  } catch (const fpflow::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const fpflow::ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return kExitConfig;
  } catch (const fpflow::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  }
  return kExitOk;
}
