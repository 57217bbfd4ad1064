#pragma once

#include <chrono>

#include "fpflow/bench.hpp"

namespace fpflow::train {

// ---------------------------------------------------------------------------
// Adam with bias correction. The epsilon in the denominator is scaled by
// sqrt(1 - beta2^t) so the first step is exactly -lr * g / (|g| + eps *
// sqrt(1 - beta2)); it converges to the plain epsilon as t grows.
// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (lr <= 0) throw ConfigError("learning rate must be positive");
  }

  int64_t timestep() const { return t_; }

  void step(VariableSet& params, const GradBuf& grads) {
    if (m_.slots.empty()) {
      m_ = params.make_grad_buffer();
      v_ = params.make_grad_buffer();
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const double eps_t = eps_ * std::sqrt(bc2);
    for (size_t i = 0; i < params.size(); ++i) {
      const Mat& g = grads.slots[i];
      if (!g.allFinite())
        throw NumericError("non-finite gradient", params.name(static_cast<uint32_t>(i)));
      Mat& m = m_.slots[i];
      Mat& v = v_.slots[i];
      m = b1_ * m + (1.0 - b1_) * g;
      v = b2_ * v.array().matrix() + (1.0 - b2_) * g.array().square().matrix();
      params.value(static_cast<uint32_t>(i)).array() -=
          lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_t);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  GradBuf m_, v_;
};

// ---------------------------------------------------------------------------
// Self-supervised training loops (time-dependent and steady-state).
// ---------------------------------------------------------------------------

struct TrainConfig {
  int iterations = 500;
  double lr = 0.01;
  int batch = 2000;
  double horizon = 0.0;  // 0: use the problem's horizon
  uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  bool detach_ode_target = false;  // train against a frozen ODE branch
  bool per_sample_times = false;   // one t per sample instead of per batch
  int abort_after_failures = 5;
  int chunk = 0;                      // lanes per graph; 0 = auto from memory budget
  size_t memory_budget_mb = 1024;     // auto-chunk target

  void validate() const {
    if (iterations < 0) throw ConfigError("train.iterations must be >= 0");
    if (lr <= 0) throw ConfigError("train.lr must be positive");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
  }
};

struct TrainTrace {
  std::vector<int> iteration;
  std::vector<double> loss;
  std::vector<double> wall_ms;
  std::vector<int> skipped;  // iterations whose solve diverged

  double first_loss() const { return loss.empty() ? 0.0 : loss.front(); }
  double last_loss() const { return loss.empty() ? 0.0 : loss.back(); }
};

using IterationCallback = std::function<void(int iter, const TrainTrace&)>;

namespace detail {

/// Lanes per chunk so one unrolled graph (values + adjoints) stays inside the
/// memory budget; probes one dynamics stage to measure bytes per lane.
inline int auto_chunk(const fp::GraphDynamics& dyn, int batch, int max_stages,
                      const TrainConfig& cfg) {
  if (cfg.chunk > 0) return std::min(cfg.chunk, batch);
  constexpr int probe_lanes = 8;
  ad::Graph probe;
  int x = probe.constant(Mat::Zero(dyn.problem().dim, probe_lanes));
  dyn.emit(probe, x, Mat::Constant(1, 1, 0.5));
  const double per_lane_stage = static_cast<double>(probe.bytes()) / probe_lanes;
  // values for all stages, plus transient adjoints during backward
  const double per_lane = per_lane_stage * (max_stages + 2) * 2.2;
  const double budget = static_cast<double>(cfg.memory_budget_mb) * 1024.0 * 1024.0;
  int chunk = static_cast<int>(budget / std::max(per_lane, 1.0));
  // keep one stage's working set near cache size
  constexpr double cache_target = 24.0 * 1024 * 1024;
  chunk = std::min(chunk, static_cast<int>(cache_target / std::max(per_lane_stage, 1.0)));
  chunk = std::clamp(chunk, 32, batch);
  // prefer a divisor of the batch so every chunk graph has the same shape
  for (int c = chunk; c >= std::max(32, chunk / 2); --c)
    if (batch % c == 0) return c;
  return chunk;
}

struct StepResult {
  double loss = 0.0;
  bool ok = false;
};

template <class BuildChunk>
StepResult accumulate_chunks(int batch, int chunk, GradBuf& grads, BuildChunk&& build) {
  double total = 0.0;
  for (int c0 = 0; c0 < batch; c0 += chunk) {
    const int nc = std::min(chunk, batch - c0);
    total += build(c0, nc, grads);
  }
  const double inv = 1.0 / batch;
  for (auto& m : grads.slots) m *= inv;
  return {total * inv, true};
}

}  // namespace detail

/// Alg.-2-style loop: sample t_k and x0 ~ p0, transport (x, log p) along the
/// effective-drift characteristics, and fit the network to its own
/// transported prediction by MSE on log-densities.
inline TrainTrace train_tfp(const fp::FPProblem& problem, nets::TfpLogDensity& model,
                            const TrainConfig& cfg, const ode::SolverConfig& solver,
                            const IterationCallback& callback = {}) {
  cfg.validate();
  solver.validate();
  if (!problem.p0) throw ConfigError("train_tfp: problem has no initial density");
  if (problem.steady_state) throw ConfigError("train_tfp: problem is steady-state");
  if ((problem.p0->mean - model.p0().mean).norm() != 0.0 ||
      problem.p0->variance != model.p0().variance)
    throw ConfigError("train_tfp: model initial density differs from the problem's");

  const double T = cfg.horizon > 0 ? cfg.horizon : problem.horizon;
  fp::GraphDynamics dyn(problem, &model);
  VariableSet& vars = *model.variables();
  Adam adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  Rng rng = make_rng(cfg.seed);
  const int chunk = detail::auto_chunk(dyn, cfg.batch, 4 * solver.steps_for(0, T), cfg);

  TrainTrace trace;
  int consecutive_failures = 0;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    auto tic = std::chrono::steady_clock::now();
    // shared batch time by default, per-lane times behind the flag
    RowVec t_k(cfg.per_sample_times ? cfg.batch : 1);
    for (int i = 0; i < t_k.size(); ++i) t_k[i] = T * uniform01_closed(rng);
    Mat X0 = problem.p0->sample(cfg.batch, rng);

    GradBuf grads = vars.make_grad_buffer();
    detail::StepResult res;
    try {
      res = detail::accumulate_chunks(
          cfg.batch, chunk, grads, [&](int c0, int nc, GradBuf& gacc) {
            ad::Graph g;
            const Mat x0c = X0.middleCols(c0, nc);
            RowVec lp0(nc);
            for (int i = 0; i < nc; ++i) lp0[i] = problem.p0->logp(x0c.col(i));
            int x0n = g.constant(x0c);
            int lp0n = g.constant(Mat(lp0));
            const RowVec tc =
                cfg.per_sample_times ? t_k.segment(c0, nc).eval() : t_k;

            ode::GraphSolveResult sol;
            if (cfg.per_sample_times) {
              int scale_row = g.constant(Mat(tc));
              auto emit = [&](ad::Graph& gg, int x, double tau) {
                fp::StageNodes sn = dyn.emit(gg, x, tau * tc);
                return fp::StageNodes{gg.mul(sn.mu, scale_row),
                                      gg.mul(sn.neg_div, scale_row)};
              };
              sol = ode::rk4_graph_solve(g, emit, x0n, lp0n, 0.0, 1.0,
                                         solver.steps_for(0, T));
            } else {
              auto emit = [&](ad::Graph& gg, int x, double t) {
                return dyn.emit(gg, x, Mat::Constant(1, 1, t));
              };
              sol = ode::rk4_graph_solve(g, emit, x0n, lp0n, 0.0, t_k[0],
                                         solver.steps_for(0, t_k[0]));
            }
            int xf = sol.x, lode = sol.logp;
            if (cfg.detach_ode_target) {
              xf = g.constant(g.val(xf));
              lode = g.constant(g.val(lode));
            }
            int lnet = model.emit_logp(g, xf, g.constant(Mat(tc)));
            int partial = g.sum_all(g.square(g.sub(lode, lnet)));
            const double value = g.val(partial)(0, 0);
            if (!std::isfinite(value))
              throw NumericError("non-finite loss", "iteration " + std::to_string(iter));
            g.backward_scalar(partial, 1.0, /*free_memory=*/true);
            g.accumulate_param_grads(vars, gacc);
            return value;
          });
    } catch (const NumericError&) {
      trace.skipped.push_back(iter);
      if (++consecutive_failures >= cfg.abort_after_failures)
        throw NumericError("training aborted after consecutive solver failures",
                           "iteration " + std::to_string(iter));
      continue;
    }
    consecutive_failures = 0;
    adam.step(vars, grads);
    auto toc = std::chrono::steady_clock::now();
    trace.iteration.push_back(iter);
    trace.loss.push_back(res.loss);
    trace.wall_ms.push_back(std::chrono::duration<double, std::milli>(toc - tic).count());
    if (callback) callback(iter, trace);
  }
  return trace;
}

/// Alg.-3-style loop: push base samples through the flow, transport along the
/// unit interval, and fit the flow's backward log-density to the transported
/// one. Fresh base samples every iteration.
inline TrainTrace train_sfp(const fp::FPProblem& problem, nets::CouplingFlow& flow,
                            const TrainConfig& cfg, const ode::SolverConfig& solver,
                            const IterationCallback& callback = {}) {
  cfg.validate();
  solver.validate();
  if (!problem.steady_state) throw ConfigError("train_sfp: problem is not steady-state");
  if (problem.dim != flow.dim()) throw ShapeError("train_sfp: flow dimension != problem");

  const double T = cfg.horizon > 0 ? cfg.horizon : 1.0;
  fp::GraphDynamics dyn(problem, &flow);
  VariableSet& vars = *flow.variables();
  Adam adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  Rng rng = make_rng(cfg.seed);
  const int d = problem.dim;
  const double lpG0 = -0.5 * d * std::log(2 * M_PI);
  const int chunk = detail::auto_chunk(dyn, cfg.batch, 4 * solver.steps_for(0, T) + 8, cfg);

  TrainTrace trace;
  int consecutive_failures = 0;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    auto tic = std::chrono::steady_clock::now();
    Mat Z = randn(d, cfg.batch, rng);

    GradBuf grads = vars.make_grad_buffer();
    detail::StepResult res;
    try {
      res = detail::accumulate_chunks(
          cfg.batch, chunk, grads, [&](int c0, int nc, GradBuf& gacc) {
            ad::Graph g;
            const Mat zc = Z.middleCols(c0, nc);
            RowVec lpz = RowVec::Constant(nc, lpG0);
            lpz -= 0.5 * zc.colwise().squaredNorm();
            int zn = g.constant(zc);
            int lpzn = g.constant(Mat(lpz));
            auto [x0n, lp0n] = flow.emit_forward(g, zn, lpzn);

            auto emit = [&](ad::Graph& gg, int x, double t) {
              return dyn.emit(gg, x, Mat::Constant(1, 1, t));
            };
            auto sol =
                ode::rk4_graph_solve(g, emit, x0n, lp0n, 0.0, T, solver.steps_for(0, T));
            int xf = sol.x, lode = sol.logp;
            if (cfg.detach_ode_target) {
              xf = g.constant(g.val(xf));
              lode = g.constant(g.val(lode));
            }
            int lnet = flow.emit_backward_flow(g, xf).second;
            int partial = g.sum_all(g.square(g.sub(lode, lnet)));
            const double value = g.val(partial)(0, 0);
            if (!std::isfinite(value))
              throw NumericError("non-finite loss", "iteration " + std::to_string(iter));
            g.backward_scalar(partial, 1.0, /*free_memory=*/true);
            g.accumulate_param_grads(vars, gacc);
            return value;
          });
    } catch (const NumericError&) {
      trace.skipped.push_back(iter);
      if (++consecutive_failures >= cfg.abort_after_failures)
        throw NumericError("training aborted after consecutive solver failures",
                           "iteration " + std::to_string(iter));
      continue;
    }
    consecutive_failures = 0;
    adam.step(vars, grads);
    auto toc = std::chrono::steady_clock::now();
    trace.iteration.push_back(iter);
    trace.loss.push_back(res.loss);
    trace.wall_ms.push_back(std::chrono::duration<double, std::milli>(toc - tic).count());
    if (callback) callback(iter, trace);
  }
  return trace;
}

}  // namespace fpflow::train
