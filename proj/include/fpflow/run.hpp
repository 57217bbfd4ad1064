#pragma once

#include "fpflow/checkpoint.hpp"
#include "fpflow/report.hpp"

namespace fpflow::run {

// ---------------------------------------------------------------------------
// Command bodies shared by the CLI and the acceptance suite.
// ---------------------------------------------------------------------------

inline bench::Benchmark benchmark_for(const RunConfig& cfg) {
  return bench::make_benchmark(cfg.problem, cfg.dim, cfg.a, cfg.sigma, cfg.horizon);
}

/// Batched network densities at a shared time.
inline RowVec net_density(const nets::LogDensityModel& model, const Mat& pts, double t) {
  ad::Graph g(true);
  int logp = model.emit_logp(g, g.constant(pts), g.constant(Mat::Constant(1, 1, t)));
  return g.val(g.exp(logp)).row(0);
}

/// One backward characteristic solve (x', t') -> (x0, dlogp); the density
/// estimate is p0(x0) shifted by the accumulated log-density change.
inline double ode_density(const fp::FPProblem& problem, const nets::LogDensityModel* model,
                          const Vec& x, double t, const ode::SolverConfig& solver,
                          bool* failed = nullptr) {
  if (failed) *failed = false;
  if (t == 0.0) return std::exp(problem.p0->logp(x));
  try {
    auto dyn = ode::make_dynamics(problem, model);
    ode::AugState s = ode::ode_solve(dyn, {x, 0.0}, t, 0.0, solver);
    return std::exp(problem.p0->logp(s.x) - s.logp);
  } catch (const NumericError&) {
    if (failed) {
      *failed = true;
      return std::numeric_limits<double>::quiet_NaN();
    }
    throw;
  }
}

/// Grid solve for zero-diffusion problems (no training, Alg.-1 style).
inline EvalReport cmd_solve_zero_diffusion(const RunConfig& cfg) {
  bench::Benchmark b = benchmark_for(cfg);
  if (!b.problem.zero_diffusion())
    throw ConfigError("solve handles zero-diffusion problems; use train/eval otherwise");
  b.problem.validate();
  const Mat pts = cfg.grid.points(cfg.dim);
  EvalReport rep;
  rep.rows.reserve(pts.cols());
  for (Eigen::Index k = 0; k < pts.cols(); ++k) {
    EvalRow row;
    row.x = pts.col(k);
    row.t = cfg.eval_time;
    bool failed = false;
    row.p_ode = ode_density(b.problem, nullptr, row.x, row.t, cfg.predict, &failed);
    row.ode_failed = failed;
    row.p_exact = std::exp(b.solution->logp(row.x, row.t));
    rep.rows.push_back(std::move(row));
  }
  rep.compute_aggregates();
  return rep;
}

struct TrainOutputs {
  train::TrainTrace trace;
  std::string checkpoint_path;
  std::string trace_path;
};

inline std::string trace_csv(const train::TrainTrace& trace) {
  std::string csv = "iteration,loss,wall_ms\n";
  char buf[96];
  for (size_t i = 0; i < trace.loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", trace.iteration[i], trace.loss[i],
                  trace.wall_ms[i]);
    csv += buf;
  }
  return csv;
}

/// Trains the model matching the problem type and persists the checkpoint,
/// loss trace, and config sidecar under cfg.out_dir.
inline TrainOutputs cmd_train(const RunConfig& cfg,
                              const train::IterationCallback& progress = {}) {
  bench::Benchmark b = benchmark_for(cfg);
  b.problem.validate();
  std::filesystem::create_directories(cfg.out_dir);
  TrainOutputs out;
  out.checkpoint_path = cfg.out_dir + "/checkpoint.json";
  out.trace_path = cfg.out_dir + "/trace.csv";

  nlohmann::json meta{{"problem", cfg.problem}, {"config", cfg.echo()}};

  if (b.problem.steady_state) {
    nets::CouplingFlowConfig fc;
    fc.dim = cfg.dim;
    fc.layers = cfg.model_layers;
    fc.hidden = cfg.model_hidden;
    fc.init_scale = cfg.model_init_scale;
    fc.s_clamp = cfg.model_s_clamp;
    fc.seed = cfg.model_seed;
    nets::CouplingFlow flow(fc);
    auto cb = [&](int iter, const train::TrainTrace& tr) {
      if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0)
        io::save_checkpoint(flow, out.checkpoint_path, meta);
      if (progress) progress(iter, tr);
    };
    out.trace = train::train_sfp(b.problem, flow, cfg.train, cfg.solver, cb);
    io::save_checkpoint(flow, out.checkpoint_path, meta);
  } else {
    nets::PotentialNetConfig pc;
    pc.dim = cfg.dim;
    pc.layers = cfg.model_layers;
    pc.width = cfg.model_width;
    pc.init_scale = cfg.model_init_scale;
    pc.seed = cfg.model_seed;
    nets::TfpLogDensity model(*b.problem.p0, pc);
    auto cb = [&](int iter, const train::TrainTrace& tr) {
      if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0)
        io::save_checkpoint(model, out.checkpoint_path, meta);
      if (progress) progress(iter, tr);
    };
    out.trace = train::train_tfp(b.problem, model, cfg.train, cfg.solver, cb);
    io::save_checkpoint(model, out.checkpoint_path, meta);
  }
  write_csv_with_sidecar(out.trace_path, trace_csv(out.trace), cfg,
                         {{"final_loss", out.trace.last_loss()},
                          {"iterations_recorded", out.trace.loss.size()},
                          {"iterations_skipped", out.trace.skipped.size()}});
  return out;
}

/// Evaluates a trained model on the grid: direct network densities and, for
/// time-dependent problems, characteristic-transport densities.
inline EvalReport cmd_eval(const RunConfig& cfg, nets::LogDensityModel& model) {
  bench::Benchmark b = benchmark_for(cfg);
  b.problem.validate();
  if (model.dim() != cfg.dim) throw ConfigError("checkpoint dimension != problem dimension");
  const bool want_net = cfg.mode != "ode";
  bool want_ode = cfg.mode != "net";
  if (b.problem.steady_state) {
    if (cfg.mode == "ode")
      throw ConfigError("steady-state problems have no transport prediction mode");
    want_ode = false;
  }

  const Mat pts = cfg.grid.points(cfg.dim);
  const double t = b.problem.steady_state ? 0.0 : cfg.eval_time;
  EvalReport rep;
  rep.rows.resize(pts.cols());

  RowVec pnet;
  if (want_net) pnet = net_density(model, pts, t);
  for (Eigen::Index k = 0; k < pts.cols(); ++k) {
    EvalRow& row = rep.rows[k];
    row.x = pts.col(k);
    row.t = t;
    if (want_net) row.p_net = pnet[k];
    if (want_ode) {
      bool failed = false;
      row.p_ode = ode_density(b.problem, &model, row.x, t, cfg.predict, &failed);
      row.ode_failed = failed;
    }
    if (b.solution) row.p_exact = std::exp(b.solution->logp(row.x, t));
  }
  rep.compute_aggregates();
  return rep;
}

inline EvalReport cmd_eval(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval needs checkpoint=<path>");
  io::LoadedModel loaded = io::load_checkpoint(cfg.checkpoint);
  return cmd_eval(cfg, *loaded.model());
}

// ---------------------------------------------------------------------------
// Monte-Carlo comparison: Euler-Maruyama particles vs the analytic density
// (and optionally a trained model) on a histogram.
// ---------------------------------------------------------------------------

struct McReport {
  bench::Histogram hist;
  Vec analytic;        // density at bin centers
  Vec model_density;   // empty unless a checkpoint was given
  double sup_err = 0, l1_err = 0;
  double sup_bound = 0;  // largest violated-or-not 3-sigma band
  bool within_bounds = true;
  double sim_time = 0;
  Eigen::Index particles = 0;

  std::string to_csv() const {
    std::string out = "bin_center,density,analytic";
    if (model_density.size() > 0) out += ",model";
    out += "\n";
    char buf[128];
    for (Eigen::Index i = 0; i < hist.centers0.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", hist.centers0[i],
                    hist.density(i, 0), analytic[i]);
      out += buf;
      if (model_density.size() > 0) {
        std::snprintf(buf, sizeof(buf), ",%.17g", model_density[i]);
        out += buf;
      }
      out += "\n";
    }
    return out;
  }
};

inline McReport cmd_mc_compare(const RunConfig& cfg, const nets::LogDensityModel* model = nullptr) {
  bench::Benchmark b = benchmark_for(cfg);
  if (cfg.dim > 2) throw ConfigError("mc-compare needs dim <= 2 for the histogram");
  if (cfg.mc_particles < 1) throw ConfigError("mc.particles must be >= 1");

  // TFP problems start from p0 and run to the horizon; the steady-state
  // benchmark starts wide and runs long enough to equilibrate.
  const double t1 = cfg.mc_time >= 0 ? cfg.mc_time
                                     : (b.problem.steady_state ? 10.0 : b.problem.horizon);
  bench::ParticleCloud cloud;
  cloud.seed = cfg.train.seed;
  Rng rng = make_rng(mix_seed(cloud.seed, 0x4DC0));
  if (b.problem.p0) {
    cloud.positions = b.problem.p0->sample(cfg.mc_particles, rng);
  } else {
    cloud.positions = 2.0 * randn(cfg.dim, cfg.mc_particles, rng);  // N(0, 4 I)
  }
  cloud = bench::euler_maruyama(b.problem, std::move(cloud), cfg.mc_dt, t1);

  McReport rep;
  rep.sim_time = t1;
  rep.particles = cloud.positions.cols();
  rep.hist = bench::histogram_density(cloud, cfg.mc_bins, cfg.mc_min, cfg.mc_max);

  // the histogram marginalizes the other coordinates; the benchmarks are
  // product densities, so the marginal is the one-dimensional instance
  bench::Benchmark marginal = bench::make_benchmark(cfg.problem, 1, cfg.a, cfg.sigma,
                                                    b.problem.horizon);
  const double w = (cfg.mc_max - cfg.mc_min) / cfg.mc_bins;
  rep.analytic.resize(cfg.mc_bins);
  if (model && cfg.dim == 1) rep.model_density.resize(cfg.mc_bins);
  for (int i = 0; i < cfg.mc_bins; ++i) {
    Vec x1(1);
    x1[0] = rep.hist.centers0[i];
    rep.analytic[i] = std::exp(marginal.solution->logp(x1, t1));
    if (model && cfg.dim == 1) rep.model_density[i] = std::exp(model->logp(x1, t1));
  }
  // 3-sigma Poisson band per bin plus a small discretization allowance
  // (O(dt) weak error and O(w^2) binning curvature).
  constexpr double bias_allowance = 2e-3;
  for (int i = 0; i < cfg.mc_bins; ++i) {
    const double err = std::abs(rep.hist.density(i, 0) - rep.analytic[i]);
    const double bound =
        3.0 * std::sqrt(rep.analytic[i] / (static_cast<double>(rep.particles) * w)) +
        bias_allowance;
    rep.sup_err = std::max(rep.sup_err, err);
    rep.sup_bound = std::max(rep.sup_bound, bound);
    rep.l1_err += err * w;
    if (err > bound) rep.within_bounds = false;
  }
  return rep;
}

}  // namespace fpflow::run
