#pragma once

#include "fpflow/run.hpp"

namespace fpflow::run {

// ---------------------------------------------------------------------------
// Machine-verified invariant suite behind the `check` command. Every entry
// prints one pass/fail line; the CLI exits nonzero if any fails.
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  bool pass = false;
  double worst = 0.0;
  double bound = 0.0;
};

namespace detail {

/// Random expression over the supported primitives, scalar-valued.
inline int random_expr(ad::Graph& g, int x, int d, Rng& rng, int depth = 0) {
  std::uniform_int_distribution<int> pick(0, 9);
  std::uniform_int_distribution<int> coord(0, d - 1);
  std::uniform_real_distribution<double> cval(-1.5, 1.5);
  if (depth >= 4 || pick(rng) == 0) {
    if (pick(rng) < 7) return g.row_slice(x, coord(rng), 1);
    return g.constant(cval(rng));
  }
  switch (pick(rng)) {
    case 0:
    case 1: return g.add(random_expr(g, x, d, rng, depth + 1), random_expr(g, x, d, rng, depth + 1));
    case 2: return g.sub(random_expr(g, x, d, rng, depth + 1), random_expr(g, x, d, rng, depth + 1));
    case 3: return g.mul(random_expr(g, x, d, rng, depth + 1), random_expr(g, x, d, rng, depth + 1));
    case 4:  // division with a denominator bounded away from zero
      return g.div(random_expr(g, x, d, rng, depth + 1),
                   g.affine(g.square(random_expr(g, x, d, rng, depth + 1)), 1.0, 1.5));
    case 5: return g.tanh(random_expr(g, x, d, rng, depth + 1));
    case 6: return g.sigma(random_expr(g, x, d, rng, depth + 1));
    case 7: return g.exp(g.scale(random_expr(g, x, d, rng, depth + 1), 0.3));
    case 8: return g.log(g.affine(g.square(random_expr(g, x, d, rng, depth + 1)), 1.0, 1.0));
    default: return g.square(random_expr(g, x, d, rng, depth + 1));
  }
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1e-12, std::abs(want));
}

}  // namespace detail

/// Engine gradients against central finite differences on random expressions.
inline CheckResult check_gradient_fd(int n_expr = 100, uint64_t seed = 2024) {
  Rng rng = make_rng(seed);
  const int d = 4;
  double worst = 0.0;
  for (int k = 0; k < n_expr; ++k) {
    const uint64_t expr_seed = rng();
    Vec x = Vec::NullaryExpr(d, [&](Eigen::Index) {
      return std::uniform_real_distribution<double>(-2, 2)(rng);
    });
    auto build = [&](ad::Graph& g, int xn) {
      Rng er = make_rng(expr_seed);
      return detail::random_expr(g, xn, d, er);
    };
    Vec grad = ad::input_gradient(build, x);
    Vec fd = ad::fd::gradient(
        [&](const Vec& xx) {
          ad::Graph g;
          return g.val(build(g, g.constant(Mat(xx))))(0, 0);
        },
        x);
    const double scale = std::max(1.0, fd.norm());
    worst = std::max(worst, (grad - fd).norm() / scale);
  }
  return {"gradient-vs-finite-difference", worst < 1e-5, worst, 1e-5};
}

/// hessian_trace(g) against divergence(grad g) on random scalar fields.
inline CheckResult check_div_hess_consistency(int n = 20, uint64_t seed = 11) {
  Rng rng = make_rng(seed);
  const int d = 4;
  double worst = 0.0;
  for (int k = 0; k < n; ++k) {
    const uint64_t expr_seed = rng();
    Vec x = Vec::NullaryExpr(d, [&](Eigen::Index) {
      return std::uniform_real_distribution<double>(-1.5, 1.5)(rng);
    });
    auto build = [&](ad::Graph& g, int xn) {
      Rng er = make_rng(expr_seed);
      return detail::random_expr(g, xn, d, er);
    };
    const double tr = ad::hessian_trace(build, x);
    auto grad_field = [&](ad::Graph& g, int xn) {
      int f = build(g, xn);
      const int wrt[] = {xn};
      return g.emit_backward(f, wrt)[0];
    };
    const double div = ad::divergence(grad_field, x);
    worst = std::max(worst, detail::rel_err(tr, div));
  }
  return {"divergence-hessian-trace-consistency", worst < 1e-10, worst, 1e-10};
}

/// backward(forward(z)) identity and log-determinant antisymmetry.
inline CheckResult check_flow_roundtrip(uint64_t seed = 5) {
  double worst = 0.0;
  Rng rng = make_rng(seed);
  for (int d : {2, 5, 8}) {
    nets::CouplingFlowConfig fc;
    fc.dim = d;
    fc.layers = 4;
    fc.hidden = 16;
    fc.init_scale = 0.4;
    fc.seed = rng();
    nets::CouplingFlow flow(fc);
    VariableSet& vs = *flow.variables();
    for (uint32_t i = 0; i < vs.size(); ++i)
      if (vs.name(i).find(".W3") != std::string::npos || vs.name(i).find(".b3") != std::string::npos)
        vs.value(i) = 0.3 * randn(vs.value(i).rows(), vs.value(i).cols(), rng);
    nets::IsoGaussian base{Vec::Zero(d), 1.0};
    for (int k = 0; k < 50; ++k) {
      Vec z = randn(d, 1, rng).col(0);
      const double lpz = base.logp(z);
      nets::FlowPoint fwd = nets::flow_forward(flow, z, lpz);
      nets::FlowPoint bwd = nets::flow_backward(flow, fwd.x);
      worst = std::max(worst, (bwd.x - z).cwiseAbs().maxCoeff());
      // forward and backward log-determinants cancel along the same pair
      const double ld_fwd = fwd.logp - lpz;
      const double ld_bwd = bwd.logp - base.logp(bwd.x);
      worst = std::max(worst, std::abs(ld_fwd - ld_bwd));
    }
  }
  return {"flow-round-trip", worst < 1e-10, worst, 1e-10};
}

/// phi(x, 0) == log p0(x) bit-for-bit for random parameters and points.
inline CheckResult check_hard_constraint(uint64_t seed = 6) {
  Rng rng = make_rng(seed);
  double worst = 0.0;
  for (int d : {1, 3, 10}) {
    nets::PotentialNetConfig pc;
    pc.dim = d;
    pc.layers = 3;
    pc.width = 16;
    pc.init_scale = 0.5;
    pc.seed = rng();
    nets::IsoGaussian p0{randn(d, 1, rng).col(0), 1.0};
    nets::TfpLogDensity model(p0, pc);
    for (int k = 0; k < 334; ++k) {
      Vec x = 3.0 * randn(d, 1, rng).col(0);
      worst = std::max(worst, std::abs(model.logp(x, 0.0) - p0.logp(x)));
    }
  }
  return {"hard-initial-constraint", worst == 0.0, worst, 0.0};
}

/// PDE residual of each closed-form solution, evaluated by the engine.
inline CheckResult check_analytic_pde(uint64_t seed = 7) {
  Rng rng = make_rng(seed);
  double worst = 0.0;
  auto residual = [&](const bench::Benchmark& b, const Vec& x, double t) {
    const int d = b.problem.dim;
    const double alpha =
        b.problem.zero_diffusion() ? 0.0 : b.problem.diffusion.alpha;
    ad::Graph g(true);
    int xn = g.leaf(Mat(x));
    int tn = g.leaf(Mat::Constant(1, 1, t));
    int logp = b.solution->emit_logp(g, xn, tn);
    int p = g.exp(logp);
    // time derivative
    g.backward_scalar(p);
    const double dpdt = g.adjoint(tn)(0, 0);
    // divergence of the probability flux p * mu
    int F = g.mul(b.problem.drift_emit(g, xn, tn), p);
    double divF = 0.0;
    for (int i = 0; i < d; ++i) {
      Mat seedv = Mat::Zero(d, 1);
      seedv(i, 0) = 1.0;
      std::pair<int, Mat> sd{F, seedv};
      g.backward(std::span<const std::pair<int, Mat>>(&sd, 1));
      divF += g.adjoint(xn)(i, 0);
    }
    // isotropic diffusion term alpha * lap p
    double lapP = 0.0;
    if (alpha != 0.0) {
      const int wrt[] = {xn};
      int gp = g.emit_backward(p, wrt)[0];
      for (int i = 0; i < d; ++i) {
        Mat seedv = Mat::Zero(d, 1);
        seedv(i, 0) = 1.0;
        std::pair<int, Mat> sd{xn, seedv};
        auto tm = g.jvp(std::span<const std::pair<int, Mat>>(&sd, 1), gp);
        lapP += g.jvp_value(tm, gp)(i, 0);
      }
    }
    return dpdt + divF - alpha * lapP;
  };
  std::uniform_real_distribution<double> ux(-2, 2), ut(0.05, 1.0);
  for (int d : {1, 2, 3}) {
    bench::Benchmark cases[] = {bench::toy_problem(d), bench::tfp_gauss_problem(d),
                                bench::sfp_ou_problem(d, 1.0, 1.0),
                                bench::sfp_ou_problem(d, 0.7, 1.3)};
    for (auto& b : cases) {
      for (int k = 0; k < 25; ++k) {
        Vec x = Vec::NullaryExpr(d, [&](Eigen::Index) { return ux(rng); });
        worst = std::max(worst, std::abs(residual(b, x, ut(rng))));
      }
    }
  }
  return {"analytic-solutions-satisfy-pde", worst < 1e-6, worst, 1e-6};
}

/// Effective drift and transported log-density derivative are unchanged when
/// the model density is scaled by c > 0.
inline CheckResult check_scale_invariance(uint64_t seed = 8) {
  Rng rng = make_rng(seed);
  double worst = 0.0;
  {
    auto b = bench::tfp_gauss_problem(3);
    nets::PotentialNetConfig pc;
    pc.dim = 3;
    pc.layers = 3;
    pc.width = 16;
    pc.init_scale = 0.3;
    pc.seed = 17;
    nets::TfpLogDensity model(*b.problem.p0, pc);
    for (double c : {1.0, 7.5, std::exp(1.0)}) {
      for (int k = 0; k < 20; ++k) {
        Vec x = 2.0 * randn(3, 1, rng).col(0);
        auto [dmu, ddiv] = fp::scale_invariance_check(
            b.problem, model, c, x, std::uniform_real_distribution<double>(0, 1)(rng));
        worst = std::max({worst, dmu, ddiv});
      }
    }
  }
  {
    auto b = bench::sfp_ou_problem(4, 1.0, 1.0);
    nets::CouplingFlowConfig fc;
    fc.dim = 4;
    fc.layers = 2;
    fc.hidden = 8;
    fc.init_scale = 0.4;
    fc.seed = 23;
    nets::CouplingFlow flow(fc);
    for (double c : {7.5, 0.02}) {
      for (int k = 0; k < 20; ++k) {
        Vec x = 2.0 * randn(4, 1, rng).col(0);
        auto [dmu, ddiv] = fp::scale_invariance_check(b.problem, flow, c, x, 0.0);
        worst = std::max({worst, dmu, ddiv});
      }
    }
  }
  return {"scale-invariance-of-dynamics", worst < 1e-12, worst, 1e-12};
}

/// Observed RK4 convergence order on dx/dt = x.
inline CheckResult check_rk4_order() {
  auto dyn = [](const Vec& x, double, double) {
    return fp::AugDeriv{x, 0.0};
  };
  auto err = [&](int steps) {
    ode::AugState s{Vec::Ones(1), 0.0};
    s = ode::rk4_solve(dyn, std::move(s), 0.0, 1.0, steps);
    return std::abs(s.x[0] - std::exp(1.0));
  };
  double order = std::numeric_limits<double>::infinity();
  for (int n : {8, 16, 32}) order = std::min(order, std::log2(err(n) / err(2 * n)));
  return {"rk4-observed-order", order >= 3.9, order, 3.9};
}

/// Two identically-seeded short training runs produce bit-identical traces.
inline CheckResult check_seeded_determinism() {
  auto run_tfp = [&]() {
    auto b = bench::tfp_gauss_problem(2);
    nets::PotentialNetConfig pc;
    pc.dim = 2;
    pc.layers = 2;
    pc.width = 8;
    pc.seed = 3;
    nets::TfpLogDensity model(*b.problem.p0, pc);
    train::TrainConfig tc;
    tc.iterations = 3;
    tc.batch = 64;
    tc.seed = 1234;
    ode::SolverConfig sc;
    sc.steps = 4;
    auto tr = train::train_tfp(b.problem, model, tc, sc);
    Vec th = model.variables()->flatten();
    return std::pair{tr.loss, th};
  };
  auto run_sfp = [&]() {
    auto b = bench::sfp_ou_problem(3, 1.0, 1.0);
    nets::CouplingFlowConfig fc;
    fc.dim = 3;
    fc.layers = 2;
    fc.hidden = 8;
    fc.seed = 3;
    nets::CouplingFlow flow(fc);
    train::TrainConfig tc;
    tc.iterations = 3;
    tc.batch = 64;
    tc.seed = 77;
    ode::SolverConfig sc;
    sc.steps = 4;
    auto tr = train::train_sfp(b.problem, flow, tc, sc);
    Vec th = flow.variables()->flatten();
    return std::pair{tr.loss, th};
  };
  auto bits_equal = [](const auto& a, const auto& b) {
    if (a.first.size() != b.first.size() || a.second.size() != b.second.size()) return false;
    for (size_t i = 0; i < a.first.size(); ++i)
      if (std::memcmp(&a.first[i], &b.first[i], sizeof(double)) != 0) return false;
    for (Eigen::Index i = 0; i < a.second.size(); ++i)
      if (std::memcmp(&a.second[i], &b.second[i], sizeof(double)) != 0) return false;
    return true;
  };
  const bool ok = bits_equal(run_tfp(), run_tfp()) && bits_equal(run_sfp(), run_sfp());
  return {"seeded-bit-determinism", ok, ok ? 0.0 : 1.0, 0.0};
}

inline std::vector<CheckResult> run_all_checks() {
  return {check_gradient_fd(),      check_div_hess_consistency(), check_flow_roundtrip(),
          check_hard_constraint(),  check_analytic_pde(),         check_scale_invariance(),
          check_rk4_order(),        check_seeded_determinism()};
}

}  // namespace fpflow::run
