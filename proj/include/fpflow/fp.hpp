#pragma once

#include <optional>

#include "fpflow/nets.hpp"

namespace fpflow::fp {

using ad::Graph;

// ---------------------------------------------------------------------------
// Diffusion matrix D(x,t) = 1/2 sigma sigma^T. Constant forms carry exact
// closed-form row divergences (zero); the state-dependent form must supply
// graph emitters so the effective drift stays exactly differentiable.
// ---------------------------------------------------------------------------

struct Diffusion {
  enum class Kind { Zero, Isotropic, Diagonal, ConstMatrix, General };
  Kind kind = Kind::Zero;
  double alpha = 0.0;  // Isotropic: D = alpha * I
  Vec diag;            // Diagonal
  Mat matrix;          // ConstMatrix
  // General: block-column emitter, (d, d*B) with block j = D(:,j) per lane,
  // plus the row divergence (div D)_j = sum_i d_i D_ij as a (d,B) node.
  std::function<int(Graph&, int x, int t_row)> matrix_emit;
  std::function<int(Graph&, int x, int t_row)> row_div_emit;

  static Diffusion zero() { return {}; }
  static Diffusion isotropic(double a) {
    Diffusion d;
    d.kind = Kind::Isotropic;
    d.alpha = a;
    return d;
  }
  static Diffusion diagonal(Vec v) {
    Diffusion d;
    d.kind = Kind::Diagonal;
    d.diag = std::move(v);
    return d;
  }
  static Diffusion const_matrix(Mat m) {
    if (!m.isApprox(m.transpose()))
      throw ConfigError("diffusion matrix must be symmetric");
    Diffusion d;
    d.kind = Kind::ConstMatrix;
    d.matrix = std::move(m);
    return d;
  }

  bool is_zero() const { return kind == Kind::Zero; }

  Mat dense(int d) const {
    switch (kind) {
      case Kind::Zero: return Mat::Zero(d, d);
      case Kind::Isotropic: return alpha * Mat::Identity(d, d);
      case Kind::Diagonal: return Mat(diag.asDiagonal());
      case Kind::ConstMatrix: return matrix;
      default: throw ConfigError("dense(): state-dependent diffusion has no constant matrix");
    }
  }
};

// ---------------------------------------------------------------------------
// One Fokker-Planck equation instance. Drift is supplied as a graph emitter
// (batched, differentiable); plain closures are derived from it. The drift
// divergence takes a closed form for the built-ins.
// ---------------------------------------------------------------------------

struct FPProblem {
  std::string name;
  int dim = 1;
  double horizon = 1.0;       // stop time T (time-dependent problems)
  bool steady_state = false;  // solved on a unit transport interval
  std::function<int(Graph&, int x, int t_row)> drift_emit;      // (d,B)
  std::function<int(Graph&, int x, int t_row)> drift_div_emit;  // (1,B)
  Diffusion diffusion;
  std::optional<nets::IsoGaussian> p0;  // initial density (absent for SFP)

  bool zero_diffusion() const { return diffusion.is_zero(); }

  Vec drift(const Vec& x, double t) const {
    Graph g(true);
    int xn = g.constant(Mat(x));
    return g.val(drift_emit(g, xn, g.constant(t))).col(0);
  }
  double drift_div(const Vec& x, double t) const {
    Graph g(true);
    int xn = g.constant(Mat(x));
    return g.val(drift_div_emit(g, xn, g.constant(t)))(0, 0);
  }

  void validate() const {
    if (dim < 1) throw ConfigError("problem dimension must be >= 1");
    if (!drift_emit || !drift_div_emit) throw ConfigError("problem is missing drift closures");
    if (!steady_state && !p0) throw ConfigError("time-dependent problem needs an initial density");
  }
};

// Broadcasts a scalar time node to the lane count of x when needed.
inline int expand_time(Graph& g, int x, int t_row) {
  const int lanes = static_cast<int>(g.val(x).cols());
  if (g.val(t_row).cols() == lanes && g.val(t_row).rows() == 1) return t_row;
  if (g.val(t_row).size() != 1) throw ShapeError("time node has wrong lane count");
  return g.constant(Mat::Constant(1, lanes, g.val(t_row)(0, 0)));
}

// ---------------------------------------------------------------------------
// Effective drift mu* = mu - (grad log p) D - div D, the characteristic
// velocity field of the transport form. Component j:
//   mu_j - sum_i (d_i log p) D_ij - (div D)_j.
// ---------------------------------------------------------------------------

inline Vec effective_drift(const FPProblem& problem, const nets::LogDensityModel* model,
                           const Vec& x, double t) {
  Vec mu = problem.drift(x, t);
  if (problem.zero_diffusion()) return mu;
  if (!model) throw ConfigError("effective drift with nonzero diffusion needs a log-density model");

  Graph g(true);
  int xn = g.constant(Mat(x));
  int tn = g.constant(t);
  auto gl = model->emit_logp_grad_lap(g, xn, tn);
  Vec grad = g.val(gl.grad).col(0);

  switch (problem.diffusion.kind) {
    case Diffusion::Kind::Isotropic: return mu - problem.diffusion.alpha * grad;
    case Diffusion::Kind::Diagonal: return mu - grad.cwiseProduct(problem.diffusion.diag);
    case Diffusion::Kind::ConstMatrix: return mu - problem.diffusion.matrix.transpose() * grad;
    case Diffusion::Kind::General: {
      Graph gg(true);
      int xg = gg.constant(Mat(x));
      int tg = gg.constant(t);
      Mat D(x.size(), x.size());
      const Mat blocks = gg.val(problem.diffusion.matrix_emit(gg, xg, tg));
      for (int j = 0; j < x.size(); ++j) D.col(j) = blocks.col(j);
      Vec rd = gg.val(problem.diffusion.row_div_emit(gg, xg, tg)).col(0);
      return mu - D.transpose() * grad - rd;
    }
    default: return mu;
  }
}

// ---------------------------------------------------------------------------
// Augmented characteristic dynamics on (x, log p):
//   dx/dt = mu*(x,t),   dlogp/dt = -div mu*(x,t),
// with the divergence taken at fixed model parameters.
// ---------------------------------------------------------------------------

struct AugDeriv {
  Vec dx;
  double dlogp;
};

namespace detail {

/// Emits the mu* field for constant-matrix / general diffusion, with the
/// model gradient present as graph nodes so the field divergence is exact.
inline int emit_mu_star_general(Graph& g, const FPProblem& problem,
                                const nets::LogDensityModel& model, int xn, int tn) {
  const int d = problem.dim;
  int logp = model.emit_logp(g, xn, tn);
  const int wrt[] = {xn};
  int grad = g.emit_backward(logp, wrt)[0];  // (d,1)
  int mu = problem.drift_emit(g, xn, tn);
  switch (problem.diffusion.kind) {
    case Diffusion::Kind::Isotropic:
      return g.sub(mu, g.scale(grad, problem.diffusion.alpha));
    case Diffusion::Kind::Diagonal:
      return g.sub(mu, g.mul(grad, g.constant(Mat(problem.diffusion.diag))));
    case Diffusion::Kind::ConstMatrix:
      return g.sub(mu, g.matmul(g.constant(Mat(problem.diffusion.matrix.transpose())), grad));
    case Diffusion::Kind::General: {
      if (!problem.diffusion.matrix_emit || !problem.diffusion.row_div_emit)
        throw ConfigError("state-dependent diffusion needs matrix_emit/row_div_emit");
      int blocks = problem.diffusion.matrix_emit(g, xn, tn);
      int gD = g.blocks_to_rows(g.col_sum(g.mul_blocks(blocks, grad)), d);
      return g.sub(g.sub(mu, gD), problem.diffusion.row_div_emit(g, xn, tn));
    }
    default: return mu;
  }
}

}  // namespace detail

inline AugDeriv augmented_dynamics(const FPProblem& problem, const nets::LogDensityModel* model,
                                   const Vec& x, double t) {
  const int d = problem.dim;

  if (problem.zero_diffusion()) {
    return {problem.drift(x, t), -problem.drift_div(x, t)};
  }
  if (!model) throw ConfigError("augmented dynamics with nonzero diffusion needs a model");

  if (problem.diffusion.kind == Diffusion::Kind::Isotropic) {
    // div mu* = div mu - alpha * lap log p (constant isotropic D)
    Graph g(true);
    int xn = g.constant(Mat(x));
    int tn = g.constant(t);
    auto gl = model->emit_logp_grad_lap(g, xn, tn);
    const double a = problem.diffusion.alpha;
    Vec mu = g.val(problem.drift_emit(g, xn, tn)).col(0);
    double divmu = g.val(problem.drift_div_emit(g, xn, tn))(0, 0);
    Vec dx = mu - a * g.val(gl.grad).col(0);
    double div_star = divmu - a * g.val(gl.lap)(0, 0);
    return {dx, -div_star};
  }

  // Constant-matrix or state-dependent diffusion: divergence of the emitted
  // mu* field, one reverse pass per component.
  Graph g(true);
  int xn = g.leaf(Mat(x));
  int tn = g.constant(t);
  int field = detail::emit_mu_star_general(g, problem, *model, xn, tn);
  Vec dx = g.val(field).col(0);
  double div = 0.0;
  for (int i = 0; i < d; ++i) {
    Mat seed = Mat::Zero(d, 1);
    seed(i, 0) = 1.0;
    std::pair<int, Mat> sd{field, seed};
    g.backward(std::span<const std::pair<int, Mat>>(&sd, 1));
    div += g.adjoint(xn)(i, 0);
  }
  return {dx, -div};
}

/// Max-norm differences of (effective drift, div mu*) between a model and the
/// same model shifted by log c. Both are zero to roundoff for any c > 0.
inline std::pair<double, double> scale_invariance_check(const FPProblem& problem,
                                                        const nets::LogDensityModel& model,
                                                        double c, const Vec& x, double t) {
  if (c <= 0) throw ConfigError("scale factor must be positive");
  nets::ShiftedModel shifted(model, std::log(c));
  Vec mu_a = effective_drift(problem, &model, x, t);
  Vec mu_b = effective_drift(problem, &shifted, x, t);
  AugDeriv da = augmented_dynamics(problem, &model, x, t);
  AugDeriv db = augmented_dynamics(problem, &shifted, x, t);
  return {(mu_a - mu_b).cwiseAbs().maxCoeff(), std::abs(da.dlogp - db.dlogp)};
}

// ---------------------------------------------------------------------------
// Batched, differentiable dynamics emission for training. Supports zero and
// constant isotropic diffusion (all built-in benchmarks); other forms go
// through the per-point value path above.
// ---------------------------------------------------------------------------

struct StageNodes {
  int mu = -1;       // (d,B)
  int neg_div = -1;  // (1,B)
};

class GraphDynamics {
 public:
  GraphDynamics(const FPProblem& problem, const nets::LogDensityModel* model)
      : problem_(problem), model_(model) {
    if (problem.zero_diffusion()) return;
    if (!model) throw ConfigError("training dynamics with diffusion need a model");
    if (problem.diffusion.kind != Diffusion::Kind::Isotropic)
      throw ConfigError(
          "trainable dynamics support zero or constant isotropic diffusion; "
          "use the per-point dynamics for other forms");
  }

  const FPProblem& problem() const { return problem_; }
  const nets::LogDensityModel* model() const { return model_; }

  /// t_vals is (1,1) for a shared time or (1,B) for per-lane times.
  StageNodes emit(Graph& g, int x, const Mat& t_vals) const {
    int tn = g.constant(t_vals);
    int mu = problem_.drift_emit(g, x, tn);
    int divmu = problem_.drift_div_emit(g, x, tn);
    if (problem_.zero_diffusion()) return {mu, g.neg(divmu)};
    auto gl = model_->emit_logp_grad_lap(g, x, tn);
    const double a = problem_.diffusion.alpha;
    int mu_star = g.sub(mu, g.scale(gl.grad, a));
    int neg_div = g.neg(g.sub(divmu, g.scale(gl.lap, a)));
    return {mu_star, neg_div};
  }

 private:
  const FPProblem& problem_;
  const nets::LogDensityModel* model_;
};

}  // namespace fpflow::fp
