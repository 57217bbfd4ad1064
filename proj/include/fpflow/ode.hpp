#pragma once

#include "fpflow/fp.hpp"

namespace fpflow::ode {

// ---------------------------------------------------------------------------
// Integration of the augmented characteristic state (x, log p). Two modes:
// fixed-step RK4 (deterministic, differentiable through the graph form) and
// adaptive Dormand-Prince 5(4) for prediction. Backward-in-time integration
// is allowed in both.
// ---------------------------------------------------------------------------

struct SolverConfig {
  enum class Method { Rk4Fixed, Dopri5 };
  Method method = Method::Rk4Fixed;
  int steps = 20;         // fixed mode: steps over a unit-length interval (scaled by |t1-t0|)
  double rtol = 1e-6;     // adaptive mode
  double atol = 1e-8;
  int max_steps = 100000;

  void validate() const {
    if (steps < 1) throw ConfigError("solver.steps must be >= 1");
    if (rtol <= 0 || atol <= 0) throw ConfigError("solver tolerances must be positive");
    if (max_steps < 1) throw ConfigError("solver.max_steps must be >= 1");
  }

  /// Step count proportional to the interval length (at least one step).
  int steps_for(double t0, double t1) const {
    double len = std::abs(t1 - t0);
    return std::max(1, static_cast<int>(std::ceil(steps * len)));
  }
};

struct AugState {
  Vec x;
  double logp = 0.0;
};

/// dynamics(x, logp, t) -> (dx, dlogp)
using Dynamics = std::function<fp::AugDeriv(const Vec& x, double logp, double t)>;

inline Dynamics make_dynamics(const fp::FPProblem& problem, const nets::LogDensityModel* model) {
  return [&problem, model](const Vec& x, double, double t) {
    return fp::augmented_dynamics(problem, model, x, t);
  };
}

namespace detail {
inline void check_state(const Vec& x, double logp, double t) {
  if (!x.allFinite() || !std::isfinite(logp))
    throw NumericError("non-finite state during integration", "t=" + std::to_string(t));
}
}  // namespace detail

inline AugState rk4_solve(const Dynamics& f, AugState s, double t0, double t1, int steps) {
  const double h = (t1 - t0) / steps;
  Vec x = std::move(s.x);
  double lp = s.logp;
  for (int n = 0; n < steps; ++n) {
    const double t = t0 + n * h;
    fp::AugDeriv k1 = f(x, lp, t);
    fp::AugDeriv k2 = f(x + 0.5 * h * k1.dx, lp + 0.5 * h * k1.dlogp, t + 0.5 * h);
    fp::AugDeriv k3 = f(x + 0.5 * h * k2.dx, lp + 0.5 * h * k2.dlogp, t + 0.5 * h);
    fp::AugDeriv k4 = f(x + h * k3.dx, lp + h * k3.dlogp, t + h);
    x += (h / 6.0) * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx);
    lp += (h / 6.0) * (k1.dlogp + 2.0 * k2.dlogp + 2.0 * k3.dlogp + k4.dlogp);
    detail::check_state(x, lp, t + h);
  }
  return {std::move(x), lp};
}

// Dormand-Prince 5(4) with PI-free standard step control and FSAL.
inline AugState dopri5_solve(const Dynamics& f, AugState s, double t0, double t1,
                             const SolverConfig& cfg) {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                          a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                          a64 = 49.0 / 176, a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                          b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                          e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

  if (t0 == t1) return s;
  const int d = static_cast<int>(s.x.size());
  const double dir = t1 > t0 ? 1.0 : -1.0;
  double t = t0;
  double h = dir * std::max(1e-12, std::abs(t1 - t0) / 100.0);

  // work in the augmented vector y = (x, logp)
  Vec y(d + 1);
  y << s.x, s.logp;
  auto eval = [&](const Vec& yv, double tv) {
    fp::AugDeriv dv = f(yv.head(d), yv[d], tv);
    Vec out(d + 1);
    out << dv.dx, dv.dlogp;
    return out;
  };

  Vec k1 = eval(y, t);
  for (int step = 0; step < cfg.max_steps; ++step) {
    if (dir * (t + h - t1) > 0) h = t1 - t;
    Vec k2 = eval(y + h * a21 * k1, t + c2 * h);
    Vec k3 = eval(y + h * (a31 * k1 + a32 * k2), t + c3 * h);
    Vec k4 = eval(y + h * (a41 * k1 + a42 * k2 + a43 * k3), t + c4 * h);
    Vec k5 = eval(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), t + c5 * h);
    Vec k6 = eval(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), t + h);
    Vec ynew = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    Vec k7 = eval(ynew, t + h);
    if (!ynew.allFinite())
      throw NumericError("non-finite state during adaptive integration",
                         "t=" + std::to_string(t));

    Vec err_v = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    double err = 0.0;
    for (int i = 0; i <= d; ++i) {
      const double sc = cfg.atol + cfg.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      const double r = err_v[i] / sc;
      err += r * r;
    }
    err = std::sqrt(err / (d + 1));

    if (err <= 1.0) {
      t += h;
      y = std::move(ynew);
      k1 = std::move(k7);  // FSAL
      if (std::abs(t - t1) <= 1e-14 * std::max(1.0, std::abs(t1))) {
        return {y.head(d), y[d]};
      }
    }
    const double fac = std::clamp(0.9 * std::pow(std::max(err, 1e-10), -0.2), 0.2, 5.0);
    h *= fac;
    if (std::abs(h) < 1e-14 * std::max(1.0, std::abs(t1 - t0)))
      throw SolverDivergence("adaptive step size underflow", t);
  }
  throw SolverDivergence("adaptive solver exceeded max_steps", t);
}

/// Integrates the augmented dynamics from t0 to t1 (either direction).
inline AugState ode_solve(const Dynamics& f, AugState s0, double t0, double t1,
                          const SolverConfig& cfg) {
  cfg.validate();
  if (t0 == t1) return s0;
  if (cfg.method == SolverConfig::Method::Dopri5) return dopri5_solve(f, s0, t0, t1, cfg);
  return rk4_solve(f, s0, t0, t1, cfg.steps_for(t0, t1));
}

// ---------------------------------------------------------------------------
// Graph-mode fixed-step RK4: the whole unrolled solve becomes graph nodes, so
// parameter gradients flow through every step ("discretize then optimize").
// ---------------------------------------------------------------------------

struct GraphSolveResult {
  int x = -1;     // (d,B)
  int logp = -1;  // (1,B)
};

template <class Emitter>
GraphSolveResult rk4_graph_solve(ad::Graph& g, Emitter&& emit, int x0, int logp0, double t0,
                                 double t1, int steps) {
  const double h = (t1 - t0) / steps;
  int X = x0, L = logp0;
  for (int n = 0; n < steps; ++n) {
    const double t = t0 + n * h;
    fp::StageNodes k1 = emit(g, X, t);
    fp::StageNodes k2 = emit(g, g.add(X, g.scale(k1.mu, 0.5 * h)), t + 0.5 * h);
    fp::StageNodes k3 = emit(g, g.add(X, g.scale(k2.mu, 0.5 * h)), t + 0.5 * h);
    fp::StageNodes k4 = emit(g, g.add(X, g.scale(k3.mu, h)), t + h);
    int sum_x = g.add(g.add(k1.mu, g.scale(g.add(k2.mu, k3.mu), 2.0)), k4.mu);
    int sum_l =
        g.add(g.add(k1.neg_div, g.scale(g.add(k2.neg_div, k3.neg_div), 2.0)), k4.neg_div);
    X = g.add(X, g.scale(sum_x, h / 6.0));
    L = g.add(L, g.scale(sum_l, h / 6.0));
    if (!g.val(X).allFinite() || !g.val(L).allFinite())
      throw NumericError("non-finite state during unrolled integration",
                         "t=" + std::to_string(t + h));
  }
  return {X, L};
}

// ---------------------------------------------------------------------------
// ode_solve with a gradient handle: runs the fixed-step solver through a
// graph and answers gradient queries of scalar functions of the final state
// with respect to the model parameters.
// ---------------------------------------------------------------------------

class UnrolledSolve {
 public:
  UnrolledSolve(const fp::GraphDynamics& dyn, const AugState& s0, double t0, double t1,
                const SolverConfig& cfg)
      : graph_(false) {
    cfg.validate();
    const int steps = cfg.steps_for(t0, t1);
    x0_ = graph_.constant(Mat(s0.x));
    logp0_ = graph_.constant(Mat::Constant(1, 1, s0.logp));
    if (t0 == t1) {
      res_ = {x0_, logp0_};
    } else {
      auto emit = [&dyn](ad::Graph& g, int x, double t) {
        return dyn.emit(g, x, Mat::Constant(1, 1, t));
      };
      res_ = rk4_graph_solve(graph_, emit, x0_, logp0_, t0, t1, steps);
    }
  }

  AugState result() const {
    return {graph_.val(res_.x).col(0), graph_.val(res_.logp)(0, 0)};
  }

  ad::Graph& graph() { return graph_; }
  const GraphSolveResult& nodes() const { return res_; }

  /// Gradient of seed_x . x(t1) + seed_logp * logp(t1) w.r.t. vars.
  GradBuf gradient(const Vec& seed_x, double seed_logp, const VariableSet& vars) {
    const VariableSet* sets[] = {&vars};
    graph_.require_vars_registered(sets);
    std::pair<int, Mat> seeds[] = {{res_.x, Mat(seed_x)},
                                   {res_.logp, Mat::Constant(1, 1, seed_logp)}};
    graph_.backward(seeds);
    GradBuf out = vars.make_grad_buffer();
    graph_.accumulate_param_grads(vars, out);
    return out;
  }

 private:
  ad::Graph graph_;
  int x0_ = -1, logp0_ = -1;
  GraphSolveResult res_;
};

}  // namespace fpflow::ode
