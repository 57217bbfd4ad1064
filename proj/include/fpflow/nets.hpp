#pragma once

#include <memory>

#include "fpflow/engine.hpp"

namespace fpflow::nets {

using ad::Graph;

/// Node triple produced by forward-Laplacian emission: the scalar value per
/// lane (1,B), its spatial gradient (d,B), and its Laplacian (1,B).
struct GradLapNodes {
  int value = -1;
  int grad = -1;
  int lap = -1;
};

// ---------------------------------------------------------------------------
// Log-density model interface shared by the two trained parameterizations
// and the closed-form benchmark solutions.
// ---------------------------------------------------------------------------

class LogDensityModel {
 public:
  virtual ~LogDensityModel() = default;

  virtual int dim() const = 0;
  /// Emits log p(x, t) as a (1,B) node. x is (d,B); t_row is a (1,B) node.
  virtual int emit_logp(Graph& g, int x, int t_row) const = 0;
  /// Emits (log p, grad_x log p, lap_x log p) via forward-Laplacian
  /// propagation. Same values as emit_logp + engine queries, fewer passes.
  virtual GradLapNodes emit_logp_grad_lap(Graph& g, int x, int t_row) const = 0;
  /// Trainable parameters; nullptr for closed-form models.
  virtual const VariableSet* variables() const { return nullptr; }
  virtual VariableSet* variables() { return nullptr; }

  double logp(const Vec& x, double t) const {
    Graph g(true);
    int xn = g.constant(Mat(x));
    int tn = g.constant(Mat::Constant(1, 1, t));
    return g.val(emit_logp(g, xn, tn))(0, 0);
  }

  /// Exact spatial gradient (reverse pass through the emitted graph).
  Vec grad_logp(const Vec& x, double t) const {
    return ad::input_gradient(
        [&](Graph& g, int xn) { return emit_logp(g, xn, g.constant(Mat::Constant(1, 1, t))); },
        x);
  }

  double lap_logp(const Vec& x, double t) const {
    return ad::hessian_trace(
        [&](Graph& g, int xn) { return emit_logp(g, xn, g.constant(Mat::Constant(1, 1, t))); },
        x);
  }
};

/// model + log c: same densities up to scale. Gradients and Laplacians are
/// unchanged, which is the assertable form of the scale-invariance claim.
class ShiftedModel final : public LogDensityModel {
 public:
  ShiftedModel(const LogDensityModel& base, double log_shift)
      : base_(base), shift_(log_shift) {}
  int dim() const override { return base_.dim(); }
  int emit_logp(Graph& g, int x, int t_row) const override {
    return g.add(base_.emit_logp(g, x, t_row), g.constant(shift_));
  }
  GradLapNodes emit_logp_grad_lap(Graph& g, int x, int t_row) const override {
    GradLapNodes n = base_.emit_logp_grad_lap(g, x, t_row);
    n.value = g.add(n.value, g.constant(shift_));
    return n;
  }

 private:
  const LogDensityModel& base_;
  double shift_;
};

// ---------------------------------------------------------------------------
// Isotropic Gaussian density (initial conditions, flow base).
// ---------------------------------------------------------------------------

struct IsoGaussian {
  Vec mean;
  double variance = 1.0;

  int dim() const { return static_cast<int>(mean.size()); }

  double logp(const Vec& x) const {
    const double d = static_cast<double>(mean.size());
    return -0.5 * d * std::log(2 * M_PI * variance) -
           (x - mean).squaredNorm() / (2 * variance);
  }
  Vec grad(const Vec& x) const { return (mean - x) / variance; }
  double lap() const { return -static_cast<double>(mean.size()) / variance; }

  Mat sample(int n, Rng& rng) const {
    Mat z = randn(mean.size(), n, rng) * std::sqrt(variance);
    z.colwise() += mean;
    return z;
  }

  int emit_logp(Graph& g, int x) const {
    const double d = static_cast<double>(mean.size());
    int xm = g.sub(x, g.constant(Mat(mean)));
    return g.affine(g.col_sum(g.square(xm)), -1.0 / (2 * variance),
                    -0.5 * d * std::log(2 * M_PI * variance));
  }
  GradLapNodes emit_logp_grad_lap(Graph& g, int x) const {
    const int lanes = static_cast<int>(g.val(x).cols());
    GradLapNodes out;
    int xm = g.sub(x, g.constant(Mat(mean)));
    out.value = g.affine(g.col_sum(g.square(xm)), -1.0 / (2 * variance),
                         -0.5 * dim() * std::log(2 * M_PI * variance));
    out.grad = g.scale(xm, -1.0 / variance);
    out.lap = g.constant(Mat::Constant(1, lanes, lap()));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Quadratic-potential ResNet: u(s) = w^T N(s) + 1/2 s^T (A^T A) s + b^T s + c
// over space-time input s = (x, t), with an (L+1)-layer residual network N
// using sigma(x) = log(e^x + e^-x). Step size h = 1/L.
// ---------------------------------------------------------------------------

struct PotentialNetConfig {
  int dim = 2;          // spatial dimension d; network input is d+1
  int layers = 4;       // L
  int width = 32;       // m
  double init_scale = 0.01;
  uint64_t seed = 1;
};

class PotentialNet {
 public:
  explicit PotentialNet(const PotentialNetConfig& cfg) : cfg_(cfg) {
    const int d1 = cfg.dim + 1;
    const int m = cfg.width;
    const int r = std::min(10, d1);
    Rng rng = make_rng(mix_seed(cfg.seed, 0xF1));
    auto init = [&](int rows, int cols) -> Mat { return cfg.init_scale * randn(rows, cols, rng); };
    w_ = vars_.add("w", init(1, m));
    k_.push_back(vars_.add("K0", init(m, d1)));
    bk_.push_back(vars_.add("b0", init(m, 1)));
    for (int l = 1; l <= cfg.layers; ++l) {
      k_.push_back(vars_.add("K" + std::to_string(l), init(m, m)));
      bk_.push_back(vars_.add("b" + std::to_string(l), init(m, 1)));
    }
    a_ = vars_.add("A", init(r, d1));
    b_ = vars_.add("b", init(d1, 1));
    c_ = vars_.add("c", Mat::Zero(1, 1));
  }

  PotentialNet(const PotentialNet&) = delete;
  PotentialNet& operator=(const PotentialNet&) = delete;
  PotentialNet(PotentialNet&&) = default;

  const PotentialNetConfig& config() const { return cfg_; }
  int rank() const { return std::min(10, cfg_.dim + 1); }
  double step_size() const { return 1.0 / cfg_.layers; }
  VariableSet& variables() { return vars_; }
  const VariableSet& variables() const { return vars_; }

  /// u at a batch of space-time points; s is a (d+1,B) node.
  int emit_u(Graph& g, int s) const {
    const double h = step_size();
    int K0 = g.param(vars_, k_[0]);
    int a = g.sigma(g.add(g.matmul(K0, s), g.param(vars_, bk_[0])));
    for (int l = 1; l <= cfg_.layers; ++l) {
      int z = g.add(g.matmul(g.param(vars_, k_[l]), a), g.param(vars_, bk_[l]));
      a = g.add(a, g.scale(g.sigma(z), h));
    }
    int lin = g.matmul(g.param(vars_, w_), a);
    int As = g.matmul(g.param(vars_, a_), s);
    int quad = g.scale(g.col_sum(g.square(As)), 0.5);
    int bs = g.matmul(g.transpose(g.param(vars_, b_)), s);
    return g.add(g.add(g.add(lin, quad), bs), g.param(vars_, c_));
  }

  /// u together with its gradient and Laplacian w.r.t. the spatial part of
  /// s = (x, t). x is (d,B), t_row is (1,B).
  GradLapNodes emit_u_grad_lap(Graph& g, int x, int t_row) const {
    const int d = cfg_.dim;
    const int lanes = static_cast<int>(g.val(x).cols());
    const double h = step_size();
    int s = g.concat_rows(x, t_row);

    int K0 = g.param(vars_, k_[0]);
    int K0x = g.col_slice(K0, 0, d);
    int z = g.add(g.matmul(K0, s), g.param(vars_, bk_[0]));
    int T = g.tanh(z);
    int S2 = g.affine(g.square(T), -1.0, 1.0);
    int a = g.sigma(z);
    int J = g.mul_blocks(g.tile_cols(K0x, lanes), T);
    int lap = g.mul(S2, g.row_sum(g.square(K0x)));

    for (int l = 1; l <= cfg_.layers; ++l) {
      int K = g.param(vars_, k_[l]);
      z = g.add(g.matmul(K, a), g.param(vars_, bk_[l]));
      T = g.tanh(z);
      S2 = g.affine(g.square(T), -1.0, 1.0);
      int Jz = g.matmul(K, J);
      int lz = g.matmul(K, lap);
      a = g.add(a, g.scale(g.sigma(z), h));
      lap = g.add(lap,
                  g.scale(g.add(g.mul(T, lz), g.mul(S2, g.sum_blocks_dot(Jz, Jz, d))), h));
      J = g.add_mul_blocks(J, Jz, g.scale(T, h));
    }

    int wn = g.param(vars_, w_);
    int An = g.param(vars_, a_);
    int bn = g.param(vars_, b_);
    int As = g.matmul(An, s);

    GradLapNodes out;
    out.value = g.add(g.add(g.add(g.matmul(wn, a), g.scale(g.col_sum(g.square(As)), 0.5)),
                            g.matmul(g.transpose(bn), s)),
                      g.param(vars_, c_));
    int Jw = g.blocks_to_rows(g.col_sum(g.mul(J, g.transpose(wn))), d);
    int gq = g.row_slice(g.matmul(g.transpose(An), As), 0, d);
    out.grad = g.add(g.add(Jw, gq), g.row_slice(bn, 0, d));
    out.lap = g.add(g.matmul(wn, lap), g.sum_all(g.square(g.col_slice(An, 0, d))));
    return out;
  }

  double u(const Vec& x, double t) const {
    Graph g(true);
    Vec s(x.size() + 1);
    s << x, t;
    return g.val(emit_u(g, g.constant(Mat(s)))) (0, 0);
  }

 private:
  PotentialNetConfig cfg_;
  VariableSet vars_;
  VarHandle w_, a_, b_, c_;
  std::vector<VarHandle> k_, bk_;
};

// ---------------------------------------------------------------------------
// Time-dependent log-density with the hard initial condition
// phi(x,t) = log p0(x) + t * u(x,t). At t = 0 this is log p0 exactly,
// independent of the parameters.
// ---------------------------------------------------------------------------

class TfpLogDensity final : public LogDensityModel {
 public:
  TfpLogDensity(IsoGaussian p0, PotentialNetConfig cfg) : p0_(std::move(p0)), net_(cfg) {
    if (p0_.dim() != cfg.dim) throw ShapeError("initial density dimension != network dimension");
  }

  int dim() const override { return net_.config().dim; }
  const IsoGaussian& p0() const { return p0_; }
  PotentialNet& net() { return net_; }
  const PotentialNet& net() const { return net_; }
  const VariableSet* variables() const override { return &net_.variables(); }
  VariableSet* variables() override { return &net_.variables(); }

  int emit_logp(Graph& g, int x, int t_row) const override {
    int t_full = expand_t(g, x, t_row);
    int u = net_.emit_u(g, g.concat_rows(x, t_full));
    return g.add(p0_.emit_logp(g, x), g.mul(u, t_full));
  }

  GradLapNodes emit_logp_grad_lap(Graph& g, int x, int t_row) const override {
    int t_full = expand_t(g, x, t_row);
    GradLapNodes base = p0_.emit_logp_grad_lap(g, x);
    GradLapNodes un = net_.emit_u_grad_lap(g, x, t_full);
    GradLapNodes out;
    out.value = g.add(base.value, g.mul(un.value, t_full));
    out.grad = g.add(base.grad, g.mul(un.grad, t_full));
    out.lap = g.add(base.lap, g.mul(un.lap, t_full));
    return out;
  }

 private:
  // Broadcast a shared scalar time to the lane count if needed.
  int expand_t(Graph& g, int x, int t_row) const {
    const int lanes = static_cast<int>(g.val(x).cols());
    if (g.val(t_row).cols() == lanes) return t_row;
    if (g.val(t_row).size() != 1) throw ShapeError("time row has wrong lane count");
    return g.constant(Mat::Constant(1, lanes, g.val(t_row)(0, 0)));
  }

  IsoGaussian p0_;
  PotentialNet net_;
};

// ---------------------------------------------------------------------------
// Real NVP coupling flow: L affine coupling layers with alternating
// half-coordinate masks; s,t are 3-layer tanh MLPs. Backward direction maps
// a sample to the standard-Gaussian base and accumulates log-determinants,
// which yields the model log-density.
// ---------------------------------------------------------------------------

struct CouplingFlowConfig {
  int dim = 2;
  int layers = 4;       // coupling layers
  int hidden = 32;      // s,t MLP hidden width
  double init_scale = 0.01;
  double s_clamp = 0.0;  // 0 disables clamping of the log-scale output
  uint64_t seed = 1;
};

class CouplingFlow final : public LogDensityModel {
 public:
  explicit CouplingFlow(const CouplingFlowConfig& cfg) : cfg_(cfg) {
    if (cfg.dim < 2) throw ConfigError("coupling flow needs dim >= 2 to partition coordinates");
    Rng rng = make_rng(mix_seed(cfg.seed, 0xF2));
    const int d = cfg.dim, hdn = cfg.hidden;
    auto init = [&](int rows, int cols) -> Mat { return cfg.init_scale * randn(rows, cols, rng); };
    const int half = (d + 1) / 2;
    for (int l = 0; l < cfg.layers; ++l) {
      Layer lay;
      // alternating first-half / second-half masks; kept coordinates form a
      // contiguous range so the layer works on row slices
      if (l % 2 == 0) {
        lay.k0 = 0, lay.nk = half, lay.u0 = half, lay.nu = d - half;
      } else {
        lay.k0 = half, lay.nk = d - half, lay.u0 = 0, lay.nu = half;
      }
      const std::string p = "L" + std::to_string(l);
      for (auto [net, tag] : {std::pair{&lay.s, "s"}, std::pair{&lay.t, "t"}}) {
        net->W1 = vars_.add(p + "." + tag + ".W1", init(hdn, d));
        net->b1 = vars_.add(p + "." + tag + ".b1", init(hdn, 1));
        net->W2 = vars_.add(p + "." + tag + ".W2", init(hdn, hdn));
        net->b2 = vars_.add(p + "." + tag + ".b2", init(hdn, 1));
        // zero final layer: the flow starts as the identity map
        net->W3 = vars_.add(p + "." + tag + ".W3", Mat::Zero(d, hdn));
        net->b3 = vars_.add(p + "." + tag + ".b3", Mat::Zero(d, 1));
      }
      layers_.push_back(std::move(lay));
    }
  }

  CouplingFlow(const CouplingFlow&) = delete;
  CouplingFlow& operator=(const CouplingFlow&) = delete;
  CouplingFlow(CouplingFlow&&) = default;

  int dim() const override { return cfg_.dim; }
  const CouplingFlowConfig& config() const { return cfg_; }
  int layer_count() const { return static_cast<int>(layers_.size()); }
  /// Binary keep-mask of a layer (1 = coordinate passes through unchanged).
  Vec mask(int layer) const {
    Vec m = Vec::Zero(cfg_.dim);
    m.segment(layers_[layer].k0, layers_[layer].nk).setOnes();
    return m;
  }
  const VariableSet* variables() const override { return &vars_; }
  VariableSet* variables() override { return &vars_; }

  /// Forward pass z -> x through all layers; returns (x node, logp node)
  /// given base-sample node (d,B) and its log-density node (1,B).
  std::pair<int, int> emit_forward(Graph& g, int z, int logp) const {
    int x = z;
    for (const Layer& lay : layers_) {
      int xk = g.row_slice(x, lay.k0, lay.nk);
      int xu = g.row_slice(x, lay.u0, lay.nu);
      int s = emit_mlp(g, lay, lay.s, xk);
      int t = emit_mlp(g, lay, lay.t, xk);
      int yu = g.add(g.mul(xu, g.exp(s)), t);
      x = lay.k0 == 0 ? g.concat_rows(xk, yu) : g.concat_rows(yu, xk);
      logp = g.sub(logp, g.col_sum(s));
    }
    return {x, logp};
  }

  /// Backward pass x -> z; returns (z node, logp node) where logp is the
  /// model's log-density of x.
  std::pair<int, int> emit_backward_flow(Graph& g, int x) const {
    const int lanes = static_cast<int>(g.val(x).cols());
    int v = x;
    int ld = g.constant(Mat::Zero(1, lanes));
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      const Layer& lay = *it;
      int vk = g.row_slice(v, lay.k0, lay.nk);
      int vu = g.row_slice(v, lay.u0, lay.nu);
      int s = emit_mlp(g, lay, lay.s, vk);
      int t = emit_mlp(g, lay, lay.t, vk);
      int xu = g.mul(g.sub(vu, t), g.exp(g.neg(s)));
      v = lay.k0 == 0 ? g.concat_rows(vk, xu) : g.concat_rows(xu, vk);
      ld = g.sub(ld, g.col_sum(s));
    }
    IsoGaussian base{Vec::Zero(cfg_.dim), 1.0};
    return {v, g.add(base.emit_logp(g, v), ld)};
  }

  int emit_logp(Graph& g, int x, int /*t_row*/) const override {
    return emit_backward_flow(g, x).second;
  }

  GradLapNodes emit_logp_grad_lap(Graph& g, int x, int /*t_row*/) const override {
    const int d = cfg_.dim;
    const int lanes = static_cast<int>(g.val(x).cols());

    int v = x;
    int J = g.constant(identity_blocks(d, lanes));
    int lap = g.constant(Mat::Zero(d, lanes));
    int LD = g.constant(Mat::Zero(1, lanes));
    int GLD = g.constant(Mat::Zero(d, lanes));
    int LLD = g.constant(Mat::Zero(1, lanes));

    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      const Layer& lay = *it;
      int vk = g.row_slice(v, lay.k0, lay.nk);
      int Jk = g.row_slice(J, lay.k0, lay.nk);
      int lk = g.row_slice(lap, lay.k0, lay.nk);
      int vu = g.row_slice(v, lay.u0, lay.nu);
      int Ju = g.row_slice(J, lay.u0, lay.nu);
      int lu = g.row_slice(lap, lay.u0, lay.nu);

      auto [s, Js, ls] = emit_mlp_fl(g, lay, lay.s, vk, Jk, lk, d);
      auto [t, Jt, lt] = emit_mlp_fl(g, lay, lay.t, vk, Jk, lk, d);

      int E = g.exp(g.neg(s));
      int U = g.sub(vu, t);
      int W = g.mul(U, E);

      // d(U e^-s) = (dU - U ds) e^-s
      int JU = g.sub(Ju, Jt);
      int JW = g.mul_blocks(g.sub(JU, g.mul_blocks(Js, U)), E);
      // lap(U e^-s) = e^-s [ lap U + U (|ds|^2 - lap s) - 2 dU . ds ]
      int lE_core = g.mul(U, g.sub(g.sum_blocks_dot(Js, Js, d), ls));
      int cross = g.scale(g.sum_blocks_dot(JU, Js, d), -2.0);
      int lW = g.mul(g.add(g.add(g.sub(lu, lt), lE_core), cross), E);

      v = lay.k0 == 0 ? g.concat_rows(vk, W) : g.concat_rows(W, vk);
      J = lay.k0 == 0 ? g.concat_rows(Jk, JW) : g.concat_rows(JW, Jk);
      lap = lay.k0 == 0 ? g.concat_rows(lk, lW) : g.concat_rows(lW, lk);

      LD = g.sub(LD, g.col_sum(s));
      GLD = g.sub(GLD, g.blocks_to_rows(g.col_sum(Js), d));
      LLD = g.sub(LLD, g.col_sum(ls));
    }

    GradLapNodes out;
    const double c0 = -0.5 * d * std::log(2 * M_PI);
    out.value = g.add(g.affine(g.col_sum(g.square(v)), -0.5, c0), LD);
    int Jtz = g.blocks_to_rows(g.col_sum(g.mul_blocks(J, v)), d);
    out.grad = g.add(g.neg(Jtz), GLD);
    out.lap = g.add(g.sub(g.neg(g.col_sum(g.sum_blocks_dot(J, J, d))),
                          g.col_sum(g.mul(v, lap))),
                    LLD);
    return out;
  }

  /// Batched forward transform of base samples; returns (x, logp_x).
  std::pair<Mat, RowVec> forward(const Mat& z, const RowVec& logp_z) const {
    Graph g(true);
    auto [xn, ln] = emit_forward(g, g.constant(z), g.constant(Mat(logp_z)));
    return {g.val(xn), g.val(ln).row(0)};
  }

  /// Batched inverse transform; returns (z, logp_x).
  std::pair<Mat, RowVec> backward(const Mat& x) const {
    Graph g(true);
    auto [zn, ln] = emit_backward_flow(g, g.constant(x));
    return {g.val(zn), g.val(ln).row(0)};
  }

 private:
  struct Mlp {
    VarHandle W1, b1, W2, b2, W3, b3;
  };
  struct Layer {
    int k0 = 0, nk = 0;  // kept (pass-through) coordinate range
    int u0 = 0, nu = 0;  // transformed coordinate range
    Mlp s, t;
  };

  static Mat identity_blocks(int d, int lanes) {
    Mat out = Mat::Zero(d, d * lanes);
    for (int j = 0; j < d; ++j) out.row(j).segment(j * lanes, lanes).setOnes();
    return out;
  }

  // s,t evaluated on the kept slice; only the transformed-coordinate rows of
  // the output are produced (the rest never enter the transform).
  int emit_mlp(Graph& g, const Layer& lay, const Mlp& net, int in_kept) const {
    int W1k = g.col_slice(g.param(vars_, net.W1), lay.k0, lay.nk);
    int a1 = g.tanh(g.add(g.matmul(W1k, in_kept), g.param(vars_, net.b1)));
    int a2 = g.tanh(g.add(g.matmul(g.param(vars_, net.W2), a1), g.param(vars_, net.b2)));
    int W3u = g.row_slice(g.param(vars_, net.W3), lay.u0, lay.nu);
    int b3u = g.row_slice(g.param(vars_, net.b3), lay.u0, lay.nu);
    int out = g.add(g.matmul(W3u, a2), b3u);
    if (cfg_.s_clamp > 0.0)
      out = g.scale(g.tanh(g.scale(out, 1.0 / cfg_.s_clamp)), cfg_.s_clamp);
    return out;
  }

  // Forward-Laplacian through the sliced 3-layer MLP: (value, J, lap). The
  // activation Jacobian scaling is fused into the next layer's GEMM, so only
  // the pre-activation Jacobians are materialized.
  std::tuple<int, int, int> emit_mlp_fl(Graph& g, const Layer& lay, const Mlp& net,
                                        int in_kept, int Jin, int lin, int d) const {
    auto act_parts = [&](int z, int Jz, int lz) {
      int T = g.tanh(z);
      int S2 = g.affine(g.square(T), -1.0, 1.0);
      int d2 = g.mul(g.scale(T, -2.0), S2);
      int lt = g.add(g.mul(S2, lz), g.mul(d2, g.sum_blocks_dot(Jz, Jz, d)));
      return std::tuple{T, S2, lt};
    };
    int W1k = g.col_slice(g.param(vars_, net.W1), lay.k0, lay.nk);
    int Jz1 = g.matmul(W1k, Jin);
    auto [a1, S21, l1] = act_parts(g.add(g.matmul(W1k, in_kept), g.param(vars_, net.b1)),
                                   Jz1, g.matmul(W1k, lin));
    int W2 = g.param(vars_, net.W2);
    int Jz2 = g.matmul_block_scaled(W2, Jz1, S21);
    auto [a2, S22, l2] = act_parts(g.add(g.matmul(W2, a1), g.param(vars_, net.b2)),
                                   Jz2, g.matmul(W2, l1));
    int W3u = g.row_slice(g.param(vars_, net.W3), lay.u0, lay.nu);
    int b3u = g.row_slice(g.param(vars_, net.b3), lay.u0, lay.nu);
    int a3 = g.add(g.matmul(W3u, a2), b3u);
    int J3 = g.matmul_block_scaled(W3u, Jz2, S22);
    int l3 = g.matmul(W3u, l2);
    if (cfg_.s_clamp > 0.0) {
      // y = c*tanh(a/c): y' = S2, y'' = -2 T S2 / c with T = tanh(a/c)
      int T = g.tanh(g.scale(a3, 1.0 / cfg_.s_clamp));
      int S2 = g.affine(g.square(T), -1.0, 1.0);
      int y = g.scale(T, cfg_.s_clamp);
      int Jy = g.mul_blocks(J3, S2);
      int d2 = g.scale(g.mul(T, S2), -2.0 / cfg_.s_clamp);
      int ly = g.add(g.mul(S2, l3), g.mul(d2, g.sum_blocks_dot(J3, J3, d)));
      return {y, Jy, ly};
    }
    return {a3, J3, l3};
  }

  CouplingFlowConfig cfg_;
  VariableSet vars_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Free-function forms of the flow transforms (single point).
// ---------------------------------------------------------------------------

struct FlowPoint {
  Vec x;
  double logp;
};

inline FlowPoint flow_forward(const CouplingFlow& flow, const Vec& z, double logp_z) {
  RowVec l(1);
  l << logp_z;
  auto [x, lp] = flow.forward(Mat(z), l);
  return {x.col(0), lp(0)};
}

inline FlowPoint flow_backward(const CouplingFlow& flow, const Vec& x) {
  auto [z, lp] = flow.backward(Mat(x));
  return {z.col(0), lp(0)};
}

}  // namespace fpflow::nets
