#pragma once

#include <memory>

#include "fpflow/ode.hpp"

namespace fpflow::bench {

using ad::Graph;

// ---------------------------------------------------------------------------
// Closed-form solutions of the benchmark problems. All three are isotropic
// Gaussians with time profiles c(t) (mean along the all-ones direction) and
// v(t) (variance): log p = -d/2 log(2 pi v) - ||x - c(t) 1||^2 / (2 v).
// ---------------------------------------------------------------------------

class GaussianProfileSolution final : public nets::LogDensityModel {
 public:
  using ProfileEmit = std::function<int(Graph&, int t_row)>;  // (1,B) node

  GaussianProfileSolution(int dim, ProfileEmit mean_coef, ProfileEmit variance)
      : dim_(dim), mean_coef_(std::move(mean_coef)), variance_(std::move(variance)) {}

  int dim() const override { return dim_; }

  int emit_logp(Graph& g, int x, int t_row) const override {
    return parts(g, x, t_row).logp;
  }

  nets::GradLapNodes emit_logp_grad_lap(Graph& g, int x, int t_row) const override {
    Parts p = parts(g, x, t_row);
    nets::GradLapNodes out;
    out.value = p.logp;
    out.grad = g.div(g.neg(p.xm), p.v);
    out.lap = g.div(g.constant(Mat::Constant(1, g.val(x).cols(), -double(dim_))), p.v);
    return out;
  }

 private:
  struct Parts {
    int logp, xm, v;
  };
  Parts parts(Graph& g, int x, int t_row) const {
    const int lanes = static_cast<int>(g.val(x).cols());
    int tn = fp::expand_time(g, x, t_row);
    int c = mean_coef_(g, tn);
    int v = variance_(g, tn);
    int mean = g.mul(g.constant(Mat::Ones(dim_, lanes)), c);
    int xm = g.sub(x, mean);
    int ssq = g.col_sum(g.square(xm));
    int logp = g.add(g.affine(g.log(v), -0.5 * dim_, -0.5 * dim_ * std::log(2 * M_PI)),
                     g.neg(g.div(ssq, g.scale(v, 2.0))));
    return {logp, xm, v};
  }

  int dim_;
  ProfileEmit mean_coef_, variance_;
};

// ---------------------------------------------------------------------------
// Benchmark registry
// ---------------------------------------------------------------------------

struct Benchmark {
  fp::FPProblem problem;
  std::shared_ptr<nets::LogDensityModel> solution;
};

/// dp/dt + 2t div(p 1) = 0, p0 = N(-1, I). Zero diffusion; the density is
/// transported rigidly: p(x,t) = p0(x - t^2 1).
inline Benchmark toy_problem(int d) {
  fp::FPProblem p;
  p.name = "toy";
  p.dim = d;
  p.horizon = 1.0;
  p.diffusion = fp::Diffusion::zero();
  p.p0 = nets::IsoGaussian{Vec::Constant(d, -1.0), 1.0};
  p.drift_emit = [d](Graph& g, int x, int t_row) {
    const int lanes = static_cast<int>(g.val(x).cols());
    int tn = fp::expand_time(g, x, t_row);
    return g.mul(g.constant(Mat::Ones(d, lanes)), g.scale(tn, 2.0));
  };
  p.drift_div_emit = [](Graph& g, int x, int) {
    return g.constant(Mat::Zero(1, g.val(x).cols()));
  };
  auto sol = std::make_shared<GaussianProfileSolution>(
      d, [](Graph& g, int t) { return g.affine(g.square(t), 1.0, -1.0); },
      [](Graph& g, int t) { return g.affine(t, 0.0, 1.0); });
  return {std::move(p), std::move(sol)};
}

/// dp/dt - 1/2 lap p + 2 div(p 1) = 0, p0 = N(0, I). Exact solution
/// N(2t 1, (t+1) I).
inline Benchmark tfp_gauss_problem(int d) {
  fp::FPProblem p;
  p.name = "tfp-gauss";
  p.dim = d;
  p.horizon = 1.0;
  p.diffusion = fp::Diffusion::isotropic(0.5);
  p.p0 = nets::IsoGaussian{Vec::Zero(d), 1.0};
  p.drift_emit = [d](Graph& g, int x, int) {
    return g.constant(Mat::Constant(d, g.val(x).cols(), 2.0));
  };
  p.drift_div_emit = [](Graph& g, int x, int) {
    return g.constant(Mat::Zero(1, g.val(x).cols()));
  };
  auto sol = std::make_shared<GaussianProfileSolution>(
      d, [](Graph& g, int t) { return g.scale(t, 2.0); },
      [](Graph& g, int t) { return g.affine(t, 1.0, 1.0); });
  return {std::move(p), std::move(sol)};
}

/// Steady state of dX = -aX dt + sigma dW: stationary density
/// N(0, sigma^2/(2a) I), solved on the unit transport interval.
inline Benchmark sfp_ou_problem(int d, double a = 1.0, double sigma = 1.0) {
  if (a <= 0 || sigma <= 0) throw ConfigError("sfp-ou needs a > 0 and sigma > 0");
  fp::FPProblem p;
  p.name = "sfp-ou";
  p.dim = d;
  p.steady_state = true;
  p.diffusion = fp::Diffusion::isotropic(0.5 * sigma * sigma);
  p.drift_emit = [a](Graph& g, int x, int) { return g.scale(x, -a); };
  p.drift_div_emit = [a, d](Graph& g, int x, int) {
    return g.constant(Mat::Constant(1, g.val(x).cols(), -a * d));
  };
  const double var = sigma * sigma / (2 * a);
  auto sol = std::make_shared<GaussianProfileSolution>(
      d, [](Graph& g, int t) { return g.scale(t, 0.0); },
      [var](Graph& g, int t) { return g.affine(t, 0.0, var); });
  return {std::move(p), std::move(sol)};
}

/// Name-keyed registry used by the CLI. Parameters beyond the problem's own
/// are ignored by problems that do not use them.
inline Benchmark make_benchmark(const std::string& name, int d, double a = 1.0,
                                double sigma = 1.0, double horizon = 1.0) {
  Benchmark b;
  if (name == "toy") {
    b = toy_problem(d);
  } else if (name == "tfp-gauss") {
    b = tfp_gauss_problem(d);
  } else if (name == "sfp-ou") {
    b = sfp_ou_problem(d, a, sigma);
  } else {
    throw ConfigError("unknown problem '" + name + "' (known: toy, tfp-gauss, sfp-ou)");
  }
  if (!b.problem.steady_state) b.problem.horizon = horizon;
  return b;
}

// ---------------------------------------------------------------------------
// Euler-Maruyama oracle: simulates the defining SDE with sigma_sde = sqrt(2D)
// and deterministic per-block RNG streams.
// ---------------------------------------------------------------------------

struct ParticleCloud {
  Mat positions;  // (d, N)
  double time = 0.0;
  uint64_t seed = 0;
};

namespace detail {

// Vectorized Box-Muller; plain std::normal_distribution is too slow for
// O(1e10) draws.
inline void fill_randn(Mat& out, Rng& rng) {
  const Eigen::Index n = out.size();
  double* p = out.data();
  const double two_pi = 2.0 * M_PI;
  Eigen::ArrayXd u1((n + 1) / 2), u2((n + 1) / 2);
  for (Eigen::Index i = 0; i < u1.size(); ++i) {
    u1[i] = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
    u2[i] = (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
  }
  Eigen::ArrayXd r = (-2.0 * u1.log()).sqrt();
  Eigen::ArrayXd c = (two_pi * u2).cos();
  Eigen::ArrayXd s = (two_pi * u2).sin();
  for (Eigen::Index i = 0; i < u1.size(); ++i) {
    p[2 * i] = r[i] * c[i];
    if (2 * i + 1 < n) p[2 * i + 1] = r[i] * s[i];
  }
}

}  // namespace detail

inline ParticleCloud euler_maruyama(const fp::FPProblem& problem, ParticleCloud cloud,
                                    double dt, double t1) {
  if (dt <= 0) throw ConfigError("euler_maruyama: dt must be positive");
  if (cloud.positions.cols() < 1) throw ConfigError("euler_maruyama: empty particle cloud");
  const int d = problem.dim;
  if (cloud.positions.rows() != d) throw ShapeError("particle dimension != problem dimension");

  // sigma_sde = sqrt(2 D) for the constant diffusion forms
  Vec noise_scale;
  switch (problem.diffusion.kind) {
    case fp::Diffusion::Kind::Zero: noise_scale = Vec::Zero(d); break;
    case fp::Diffusion::Kind::Isotropic:
      noise_scale = Vec::Constant(d, std::sqrt(2.0 * problem.diffusion.alpha));
      break;
    case fp::Diffusion::Kind::Diagonal:
      noise_scale = (2.0 * problem.diffusion.diag.array()).sqrt();
      break;
    default:
      throw ConfigError("euler_maruyama supports zero/isotropic/diagonal diffusion");
  }

  const Eigen::Index n = cloud.positions.cols();
  const Eigen::Index block = 8192;
  const double t_start = cloud.time;
  for (Eigen::Index b0 = 0, bi = 0; b0 < n; b0 += block, ++bi) {
    const Eigen::Index nb = std::min(block, n - b0);
    Rng rng = make_rng(mix_seed(cloud.seed, static_cast<uint64_t>(bi)));
    Mat x = cloud.positions.middleCols(b0, nb);
    Mat xi(d, nb);
    double t = t_start;
    while (t < t1 - 1e-15) {
      const double h = std::min(dt, t1 - t);
      Graph g;
      Vec mu_dummy;
      int xn = g.constant(x);
      const Mat& mu = g.val(problem.drift_emit(g, xn, g.constant(t)));
      detail::fill_randn(xi, rng);
      const double sh = std::sqrt(h);
      x += h * mu + sh * (noise_scale.asDiagonal() * xi);
      if (!x.allFinite()) {
        for (Eigen::Index j = 0; j < nb; ++j)
          if (!x.col(j).allFinite())
            throw NumericError("non-finite particle",
                               "particle " + std::to_string(b0 + j));
      }
      t += h;
    }
    cloud.positions.middleCols(b0, nb) = x;
  }
  cloud.time = t1;
  return cloud;
}

// ---------------------------------------------------------------------------
// Histogram density estimate over one or two selected coordinates.
// ---------------------------------------------------------------------------

struct Histogram {
  std::vector<int> axes;
  Vec centers0, centers1;  // centers1 empty in 1-D
  Mat density;             // (bins0, bins1) or (bins0, 1)
  double bin_volume = 0.0;
  Eigen::Index total = 0;
};

inline Histogram histogram_density(const ParticleCloud& cloud, int bins, double lo, double hi,
                                   std::vector<int> axes = {0}) {
  if (cloud.positions.cols() < 1) throw ConfigError("histogram: zero particles");
  if (bins < 1 || hi <= lo) throw ConfigError("histogram: bad bin spec");
  if (axes.empty() || axes.size() > 2) throw ConfigError("histogram: select 1 or 2 axes");
  for (int a : axes)
    if (a < 0 || a >= cloud.positions.rows()) throw ConfigError("histogram: axis out of range");

  const double w = (hi - lo) / bins;
  Histogram h;
  h.axes = axes;
  h.total = cloud.positions.cols();
  h.centers0 = Vec::LinSpaced(bins, lo + 0.5 * w, hi - 0.5 * w);
  const bool two = axes.size() == 2;
  if (two) h.centers1 = h.centers0;
  h.density = Mat::Zero(bins, two ? bins : 1);
  h.bin_volume = two ? w * w : w;

  for (Eigen::Index j = 0; j < cloud.positions.cols(); ++j) {
    const double a = cloud.positions(axes[0], j);
    if (a < lo || a >= hi) continue;
    int ia = std::min(bins - 1, static_cast<int>((a - lo) / w));
    int ib = 0;
    if (two) {
      const double bcoord = cloud.positions(axes[1], j);
      if (bcoord < lo || bcoord >= hi) continue;
      ib = std::min(bins - 1, static_cast<int>((bcoord - lo) / w));
    }
    h.density(ia, ib) += 1.0;
  }
  h.density /= static_cast<double>(h.total) * h.bin_volume;
  return h;
}

}  // namespace fpflow::bench
