#pragma once

#include "fpflow/graph.hpp"

namespace fpflow::ad {

// ---------------------------------------------------------------------------
// Differentiation queries on top of Graph. Builders compose a computation
// given the graph and the input node; the engine owns the passes.
// ---------------------------------------------------------------------------

/// Builds a (1,B) scalar-per-lane node from a (d,B) input node.
using ScalarFieldBuilder = std::function<int(Graph&, int x)>;
/// Builds a (d,B) vector-field node from a (d,B) input node.
using VectorFieldBuilder = std::function<int(Graph&, int x)>;

/// d f / d params for a scalar node already built on `g`. Every tracked
/// variable leaf must belong to `vars`.
inline GradBuf gradient(Graph& g, int f, const VariableSet& vars) {
  const VariableSet* sets[] = {&vars};
  g.require_vars_registered(sets);
  g.backward_scalar(f);
  GradBuf out = vars.make_grad_buffer();
  g.accumulate_param_grads(vars, out);
  return out;
}

/// d f / d x at a point, one reverse pass.
inline Vec input_gradient(const ScalarFieldBuilder& f, const Vec& x) {
  Graph g(true);
  int xn = g.leaf(x);
  int fn = f(g, xn);
  if (g.val(fn).size() != 1) throw ShapeError("input_gradient: builder must return a scalar");
  g.backward_scalar(fn);
  return g.adjoint(xn).col(0);
}

/// Exact divergence sum_i dF_i/dx_i: one reverse pass per component, each
/// identical to the gradient path for that component.
inline double divergence(const VectorFieldBuilder& F, const Vec& x) {
  Graph g(true);
  int xn = g.leaf(x);
  int Fn = F(g, xn);
  const int d = static_cast<int>(x.size());
  if (g.val(Fn).rows() != d || g.val(Fn).cols() != 1)
    throw ShapeError("divergence: field dimension does not match the point");
  double s = 0.0;
  for (int i = 0; i < d; ++i) {
    Mat seed = Mat::Zero(d, 1);
    seed(i, 0) = 1.0;
    std::pair<int, Mat> sd{Fn, seed};
    g.backward(std::span<const std::pair<int, Mat>>(&sd, 1));
    s += g.adjoint(xn)(i, 0);
  }
  return s;
}

/// Hutchinson estimate of the divergence with Rademacher probes (forward
/// tangent passes).
inline double divergence_hutchinson(const VectorFieldBuilder& F, const Vec& x, int probes,
                                    Rng& rng) {
  if (probes < 1) throw ConfigError("divergence_hutchinson: probe count must be >= 1");
  Graph g(true);
  int xn = g.leaf(x);
  int Fn = F(g, xn);
  const int d = static_cast<int>(x.size());
  std::uniform_int_distribution<int> coin(0, 1);
  double acc = 0.0;
  for (int p = 0; p < probes; ++p) {
    Mat v(d, 1);
    for (int i = 0; i < d; ++i) v(i, 0) = coin(rng) ? 1.0 : -1.0;
    std::pair<int, Mat> sd{xn, v};
    auto tm = g.jvp(std::span<const std::pair<int, Mat>>(&sd, 1), Fn);
    acc += (g.jvp_value(tm, Fn).col(0).transpose() * v)(0, 0);
  }
  return acc / probes;
}

/// Laplacian of a scalar field via d Hessian-vector products
/// (forward tangent pass over the emitted reverse pass).
inline double hessian_trace(const ScalarFieldBuilder& f, const Vec& x) {
  Graph g(true);
  int xn = g.leaf(x);
  int fn = f(g, xn);
  if (g.val(fn).size() != 1) throw ShapeError("hessian_trace: builder must return a scalar");
  const int wrt[] = {xn};
  const int gn = g.emit_backward(fn, wrt)[0];
  const int d = static_cast<int>(x.size());
  double tr = 0.0;
  for (int i = 0; i < d; ++i) {
    Mat seed = Mat::Zero(d, 1);
    seed(i, 0) = 1.0;
    std::pair<int, Mat> sd{xn, seed};
    auto tm = g.jvp(std::span<const std::pair<int, Mat>>(&sd, 1), gn);
    tr += g.jvp_value(tm, gn)(i, 0);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Central finite differences. Diagnostic fallback for tests and the check
// suite; never used on a solution path.
// ---------------------------------------------------------------------------

namespace fd {

template <class F>
Vec gradient(F&& f, const Vec& x, double h = 1e-5) {
  Vec g(x.size());
  Vec xp = x;
  for (int i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    xp[i] = xi + h;
    const double fp = f(xp);
    xp[i] = xi - h;
    const double fm = f(xp);
    xp[i] = xi;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

template <class F>
double divergence(F&& field, const Vec& x, double h = 1e-5) {
  double s = 0.0;
  Vec xp = x;
  for (int i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    xp[i] = xi + h;
    const Vec fp = field(xp);
    xp[i] = xi - h;
    const Vec fm = field(xp);
    xp[i] = xi;
    s += (fp[i] - fm[i]) / (2 * h);
  }
  return s;
}

template <class F>
double hessian_trace(F&& f, const Vec& x, double h = 1e-4) {
  double s = 0.0;
  const double f0 = f(x);
  Vec xp = x;
  for (int i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    xp[i] = xi + h;
    const double fp = f(xp);
    xp[i] = xi - h;
    const double fm = f(xp);
    xp[i] = xi;
    s += (fp - 2 * f0 + fm) / (h * h);
  }
  return s;
}

}  // namespace fd

}  // namespace fpflow::ad
