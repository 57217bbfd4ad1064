#pragma once

#include <cstring>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>

#include "fpflow/core.hpp"

namespace fpflow::ad {

// ---------------------------------------------------------------------------
// Eagerly-evaluated computation graph over matrix-valued nodes.
//
// Nodes carry a full matrix payload so that a batch of evaluation points (the
// "lane" dimension, one column per point) shares a single graph. Three passes
// are supported:
//   * backward()       - reverse-mode accumulation of value adjoints
//   * emit_backward()  - reverse pass emitted as new graph nodes, so the
//                        adjoint computation itself stays differentiable
//   * jvp()            - forward-mode tangent values along a seed direction
//
// Jacobian batches for forward-Laplacian propagation use the block layout
// (rows, d*B): block j = middleCols(j*B, B) holds the partial w.r.t. input
// coordinate j for all B lanes.
// ---------------------------------------------------------------------------

enum class Op : uint8_t {
  Leaf,         // tracked input (parameter or state)
  Const,        // untracked constant
  Add, Sub, Mul, Div,  // elementwise; rhs may broadcast (1x1, mx1, 1xn)
  Neg,
  Affine,       // ca * x + cb elementwise
  MatMul,
  Transpose,
  Tanh, Sigma, Exp, Log, Square,
  SumAll,       // -> 1x1
  ColSum,       // (m,n) -> (1,n)
  RowSum,       // (m,n) -> (m,1)
  RowSlice,     // rows [i0, i0+i1)
  ColSlice,     // cols [i0, i0+i1)
  ConcatRows,
  TileCols,     // (m,d) -> (m,d*B): block j replicates column j, i1 = B
  RowSumBlocks, // (m,d*B) -> (m,d): column j = rowwise sum of block j
  SumBlocks,    // (m,d*B) -> (m,B) summing the d blocks, i0 = d
  TileBlocks,   // (m,B) -> (m,d*B) replicating, i0 = d
  MulBlocks,    // (m,d*B) with each block multiplied elementwise by (m,B)
  SumBlocksDot, // (m,d*B) x (m,d*B) -> (m,B): sum_j a_j .* b_j
  BlocksToRows, // (1,d*B) -> (d,B): row j = block j
  RowsToBlocks, // (d,B) -> (1,d*B)
  MatMulBlockScaled,  // W (p,m) x [J (m,d*B) blockwise .* S (m,B)] -> (p,d*B)
  AddMulBlocks,       // J (m,d*B) + [Z (m,d*B) blockwise .* S (m,B)]
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Affine: return "affine";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Tanh: return "tanh";
    case Op::Sigma: return "sigma";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Square: return "square";
    case Op::SumAll: return "sum";
    case Op::ColSum: return "colsum";
    case Op::RowSum: return "rowsum";
    case Op::RowSlice: return "rowslice";
    case Op::ColSlice: return "colslice";
    case Op::ConcatRows: return "concatrows";
    case Op::TileCols: return "tilecols";
    case Op::RowSumBlocks: return "rowsumblocks";
    case Op::SumBlocks: return "sumblocks";
    case Op::TileBlocks: return "tileblocks";
    case Op::MulBlocks: return "mulblocks";
    case Op::SumBlocksDot: return "sumblocksdot";
    case Op::BlocksToRows: return "blockstorows";
    case Op::RowsToBlocks: return "rowstoblocks";
    case Op::MatMulBlockScaled: return "matmulblockscaled";
    case Op::AddMulBlocks: return "addmulblocks";
  }
  return "?";
}

class Graph {
 public:
  struct Node {
    Op op = Op::Const;
    int32_t a = -1, b = -1, c = -1;
    int32_t i0 = 0, i1 = 0;     // slice offsets / block counts / tile widths
    double ca = 0.0, cb = 0.0;  // affine coefficients
    VarHandle var;              // Leaf only
    bool tracked = false;       // participates in differentiation
    Mat val;
    Mat adj;
    uint32_t adj_pass = 0;      // lazy adjoint zeroing
  };

  explicit Graph(bool guard = false) : guard_(guard) {}

  /// When set, every emitted node is checked for NaN/Inf.
  void set_guard(bool g) { guard_ = g; }

  size_t size() const { return nodes_.size(); }
  size_t bytes() const { return bytes_; }
  const Mat& val(int id) const { return nodes_[id].val; }
  bool tracked(int id) const { return nodes_[id].tracked; }

  void clear() {
    nodes_.clear();
    param_cache_.clear();
    bytes_ = 0;
    pass_ = 0;
  }

  // --- node constructors ----------------------------------------------------

  int leaf(Mat v, VarHandle var = {}) {
    Node n;
    n.op = Op::Leaf;
    n.var = var;
    n.tracked = true;
    n.val = std::move(v);
    return push(std::move(n));
  }
  int constant(Mat v) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(v);
    return push(std::move(n));
  }
  int constant(double v) { return constant(Mat::Constant(1, 1, v)); }

  /// Leaf bound to a VariableSet entry (copies the current value). Repeated
  /// requests for the same entry in one graph reuse the node.
  int param(const VariableSet& set, VarHandle h) {
    const uint64_t key = (static_cast<uint64_t>(h.set) << 32) | h.index;
    auto it = param_cache_.find(key);
    if (it != param_cache_.end()) return it->second;
    int id = leaf(set.value(h), h);
    param_cache_.emplace(key, id);
    return id;
  }

  int add(int a, int b) { return binary(Op::Add, a, b); }
  int sub(int a, int b) { return binary(Op::Sub, a, b); }
  int mul(int a, int b) { return binary(Op::Mul, a, b); }
  int div(int a, int b) { return binary(Op::Div, a, b); }

  int neg(int a) { return unary(Op::Neg, a); }
  int affine(int a, double ca, double cb) {
    Node n = unary_node(Op::Affine, a);
    n.ca = ca;
    n.cb = cb;
    return push(std::move(n));
  }
  int scale(int a, double c) { return affine(a, c, 0.0); }

  int matmul(int a, int b) {
    if (nodes_[a].val.cols() != nodes_[b].val.rows())
      throw ShapeError("matmul: inner dimensions disagree");
    return push(binary_node(Op::MatMul, a, b));
  }
  int transpose(int a) { return unary(Op::Transpose, a); }

  int tanh(int a) { return unary(Op::Tanh, a); }
  int sigma(int a) { return unary(Op::Sigma, a); }
  int exp(int a) { return unary(Op::Exp, a); }
  int log(int a) { return unary(Op::Log, a); }
  int square(int a) { return unary(Op::Square, a); }

  int sum_all(int a) { return unary(Op::SumAll, a); }
  int col_sum(int a) { return unary(Op::ColSum, a); }
  int row_sum(int a) { return unary(Op::RowSum, a); }

  int row_slice(int a, int r0, int len) {
    Node n = unary_node(Op::RowSlice, a);
    n.i0 = r0;
    n.i1 = len;
    return push(std::move(n));
  }
  int col_slice(int a, int c0, int len) {
    Node n = unary_node(Op::ColSlice, a);
    n.i0 = c0;
    n.i1 = len;
    return push(std::move(n));
  }
  int concat_rows(int a, int b) {
    if (nodes_[a].val.cols() != nodes_[b].val.cols())
      throw ShapeError("concat_rows: column counts disagree");
    return push(binary_node(Op::ConcatRows, a, b));
  }

  int tile_cols(int a, int lanes) {
    Node n = unary_node(Op::TileCols, a);
    n.i1 = lanes;
    return push(std::move(n));
  }
  int row_sum_blocks(int a, int blocks) {
    Node n = unary_node(Op::RowSumBlocks, a);
    n.i0 = blocks;
    return push(std::move(n));
  }
  int sum_blocks(int a, int blocks) {
    Node n = unary_node(Op::SumBlocks, a);
    n.i0 = blocks;
    return push(std::move(n));
  }
  int tile_blocks(int a, int blocks) {
    Node n = unary_node(Op::TileBlocks, a);
    n.i0 = blocks;
    return push(std::move(n));
  }
  int mul_blocks(int a, int b) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    if (A.rows() != B.rows() || B.cols() == 0 || A.cols() % B.cols() != 0)
      throw ShapeError("mul_blocks: incompatible shapes");
    Node n = binary_node(Op::MulBlocks, a, b);
    n.i0 = static_cast<int>(A.cols() / B.cols());
    return push(std::move(n));
  }
  /// sum over blocks of a_j .* b_j; b may be the same node as a (squares).
  int sum_blocks_dot(int a, int b, int blocks) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    if (A.rows() != B.rows() || A.cols() != B.cols())
      throw ShapeError("sum_blocks_dot: shapes disagree");
    Node n = binary_node(Op::SumBlocksDot, a, b);
    n.i0 = blocks;
    return push(std::move(n));
  }
  int blocks_to_rows(int a, int blocks) {
    Node n = unary_node(Op::BlocksToRows, a);
    n.i0 = blocks;
    return push(std::move(n));
  }
  int rows_to_blocks(int a) { return unary(Op::RowsToBlocks, a); }

  /// W * (J blockwise .* S) without materializing the scaled Jacobian.
  int matmul_block_scaled(int w, int j, int s) {
    const Mat& W = nodes_[w].val;
    const Mat& J = nodes_[j].val;
    const Mat& S = nodes_[s].val;
    if (W.cols() != J.rows() || S.rows() != J.rows() || J.cols() % S.cols() != 0)
      throw ShapeError("matmul_block_scaled: incompatible shapes");
    Node n;
    n.op = Op::MatMulBlockScaled;
    n.a = w;
    n.b = j;
    n.c = s;
    n.i0 = static_cast<int>(J.cols() / S.cols());
    n.tracked = nodes_[w].tracked || nodes_[j].tracked || nodes_[s].tracked;
    return push(std::move(n));
  }

  /// A + (Z blockwise .* S), fused.
  int add_mul_blocks(int a, int z, int s) {
    const Mat& A = nodes_[a].val;
    const Mat& Z = nodes_[z].val;
    const Mat& S = nodes_[s].val;
    if (A.rows() != Z.rows() || A.cols() != Z.cols() || S.rows() != Z.rows() ||
        Z.cols() % S.cols() != 0)
      throw ShapeError("add_mul_blocks: incompatible shapes");
    Node n;
    n.op = Op::AddMulBlocks;
    n.a = a;
    n.b = z;
    n.c = s;
    n.i0 = static_cast<int>(Z.cols() / S.cols());
    n.tracked = nodes_[a].tracked || nodes_[z].tracked || nodes_[s].tracked;
    return push(std::move(n));
  }

  // --- reverse pass (value adjoints) -----------------------------------------

  /// Reverse-mode sweep from seeded nodes. Seeds are (node, adjoint) pairs; a
  /// scalar loss typically seeds with a 1x1 matrix. With free_memory set,
  /// interior values/adjoints are released as the sweep passes them
  /// (single-use training graphs).
  void backward(std::span<const std::pair<int, Mat>> seeds, bool free_memory = false) {
    ++pass_;
    int top = -1;
    for (auto& [id, seed] : seeds) {
      Node& n = nodes_[id];
      if (seed.rows() != n.val.rows() || seed.cols() != n.val.cols())
        throw ShapeError("backward: seed shape mismatch");
      if (!n.tracked) continue;
      touch_adj(n) += seed;
      top = std::max(top, id);
    }
    for (int i = top; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.adj_pass != pass_ || !n.tracked) continue;
      pull_adjoint(i);
      if (free_memory && n.op != Op::Leaf && n.op != Op::Const) {
        n.val.resize(0, 0);
        n.adj.resize(0, 0);
        n.adj_pass = 0;
      }
    }
  }

  void backward_scalar(int f, double seed = 1.0, bool free_memory = false) {
    if (nodes_[f].val.size() != 1) throw ShapeError("backward_scalar: node is not 1x1");
    std::pair<int, Mat> s{f, Mat::Constant(1, 1, seed)};
    backward(std::span<const std::pair<int, Mat>>(&s, 1), free_memory);
  }

  /// Adjoint of a node after backward(); zero if the pass never reached it.
  Mat adjoint(int id) const {
    const Node& n = nodes_[id];
    if (n.adj_pass == pass_) return n.adj;
    return Mat::Zero(n.val.rows(), n.val.cols());
  }

  /// Adds adjoints of all leaves bound to `set` into `out`.
  void accumulate_param_grads(const VariableSet& set, GradBuf& out) const {
    for (auto& n : nodes_) {
      if (n.op == Op::Leaf && n.var.valid() && n.var.set == set.id() && n.adj_pass == pass_)
        out.slots[n.var.index] += n.adj;
    }
  }

  /// Fails if the graph references a variable outside the given sets.
  void require_vars_registered(std::span<const VariableSet* const> sets) const {
    for (auto& n : nodes_) {
      if (n.op == Op::Leaf && n.var.valid()) {
        bool ok = false;
        for (auto* s : sets) ok = ok || (s->id() == n.var.set);
        if (!ok)
          throw ConfigError("computation references a variable outside the queried sets");
      }
    }
  }

  // --- reverse pass emitted as nodes -----------------------------------------

  /// Emits the adjoint computation of scalar node `f` (seed 1) as new graph
  /// nodes and returns, per `wrt` entry, the node holding df/d(wrt). The
  /// result participates in further passes.
  std::vector<int> emit_backward(int f, std::span<const int> wrt) {
    if (nodes_[f].val.size() != 1) throw ShapeError("emit_backward: node is not 1x1");
    std::vector<int> adj_of(nodes_.size(), -1);
    adj_of[f] = constant(Mat::Ones(1, 1));
    for (int i = f; i >= 0; --i) {
      if (adj_of[i] < 0 || !nodes_[i].tracked) continue;
      emit_node_adjoint(i, adj_of);
    }
    std::vector<int> out;
    out.reserve(wrt.size());
    for (int w : wrt) {
      if (adj_of[w] >= 0) {
        out.push_back(adj_of[w]);
      } else {
        out.push_back(constant(Mat::Zero(nodes_[w].val.rows(), nodes_[w].val.cols())));
      }
    }
    return out;
  }

  // --- forward tangent pass ---------------------------------------------------

  struct TangentMap {
    std::unordered_map<int, Mat> t;
  };

  /// Propagates tangents seeded at leaves through the graph (values only).
  TangentMap jvp(std::span<const std::pair<int, Mat>> seeds, int up_to = -1) const {
    TangentMap tm;
    for (auto& [id, tv] : seeds) tm.t[id] = tv;
    int last = up_to < 0 ? static_cast<int>(nodes_.size()) - 1 : up_to;
    for (int i = 0; i <= last; ++i) {
      const Node& n = nodes_[i];
      if (n.op == Op::Leaf || n.op == Op::Const || !n.tracked) continue;
      push_tangent(i, tm);
    }
    return tm;
  }

  Mat jvp_value(const TangentMap& tm, int id) const {
    auto it = tm.t.find(id);
    if (it != tm.t.end()) return it->second;
    return Mat::Zero(nodes_[id].val.rows(), nodes_[id].val.cols());
  }

 private:
  Node unary_node(Op op, int a) {
    Node n;
    n.op = op;
    n.a = a;
    n.tracked = nodes_[a].tracked;
    return n;
  }
  Node binary_node(Op op, int a, int b) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.tracked = nodes_[a].tracked || nodes_[b].tracked;
    return n;
  }
  int unary(Op op, int a) { return push(unary_node(op, a)); }
  int binary(Op op, int a, int b) {
    const Mat& A = nodes_[a].val;
    const Mat& B = nodes_[b].val;
    if (!broadcast_ok(A, B))
      throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(A) +
                       " vs " + shape_str(B));
    return push(binary_node(op, a, b));
  }

  static bool broadcast_ok(const Mat& a, const Mat& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return true;
    if (b.size() == 1) return true;
    if (b.cols() == 1 && b.rows() == a.rows()) return true;
    if (b.rows() == 1 && b.cols() == a.cols()) return true;
    return false;
  }
  static std::string shape_str(const Mat& m) {
    return "(" + std::to_string(m.rows()) + "," + std::to_string(m.cols()) + ")";
  }

  int push(Node n) {
    if (n.op != Op::Leaf && n.op != Op::Const) compute(n);
    if (guard_ && !n.val.allFinite())
      throw NumericError("non-finite value produced", op_name(n.op));
    bytes_ += static_cast<size_t>(n.val.size()) * sizeof(double);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }


  // Broadcast B to A's shape and combine elementwise.
  template <class F>
  static Mat bcast(const Mat& A, const Mat& B, F&& f) {
    if (A.rows() == B.rows() && A.cols() == B.cols())
      return f(A.array(), B.array()).matrix();
    if (B.size() == 1) return f(A.array(), B(0, 0)).matrix();
    if (B.cols() == 1)
      return f(A.array(), B.col(0).replicate(1, A.cols()).array()).matrix();
    return f(A.array(), B.row(0).replicate(A.rows(), 1).array()).matrix();
  }
  // Reduce g (shaped like the op output) back to B's broadcast shape.
  static Mat reduce_to(const Mat& g, const Mat& B) {
    if (g.rows() == B.rows() && g.cols() == B.cols()) return g;
    if (B.size() == 1) return Mat::Constant(1, 1, g.sum());
    if (B.cols() == 1) return g.rowwise().sum();
    return g.colwise().sum();
  }

  void compute(Node& n) {
    const Mat& A = nodes_[n.a].val;
    switch (n.op) {
      case Op::Add:
        n.val = bcast(A, nodes_[n.b].val, [](auto&& x, auto&& y) { return x + y; });
        break;
      case Op::Sub:
        n.val = bcast(A, nodes_[n.b].val, [](auto&& x, auto&& y) { return x - y; });
        break;
      case Op::Mul:
        n.val = bcast(A, nodes_[n.b].val, [](auto&& x, auto&& y) { return x * y; });
        break;
      case Op::Div:
        n.val = bcast(A, nodes_[n.b].val, [](auto&& x, auto&& y) { return x / y; });
        break;
      case Op::Neg: n.val = -A; break;
      case Op::Affine: n.val = (n.ca * A.array() + n.cb).matrix(); break;
      case Op::MatMul: n.val.noalias() = A * nodes_[n.b].val; break;
      case Op::Transpose: n.val = A.transpose(); break;
      case Op::Tanh: fast_tanh(A, n.val); break;
      case Op::Sigma: fast_sigma(A, n.val); break;
      case Op::Exp: n.val = A.array().exp(); break;
      case Op::Log: n.val = A.array().log(); break;
      case Op::Square: n.val = A.array().square(); break;
      case Op::SumAll: n.val = Mat::Constant(1, 1, A.sum()); break;
      case Op::ColSum: n.val = A.colwise().sum(); break;
      case Op::RowSum: n.val = A.rowwise().sum(); break;
      case Op::RowSlice: n.val = A.middleRows(n.i0, n.i1); break;
      case Op::ColSlice: n.val = A.middleCols(n.i0, n.i1); break;
      case Op::ConcatRows: {
        const Mat& B = nodes_[n.b].val;
        n.val.resize(A.rows() + B.rows(), A.cols());
        n.val.topRows(A.rows()) = A;
        n.val.bottomRows(B.rows()) = B;
        break;
      }
      case Op::TileCols: {
        const int B = n.i1;
        n.val.resize(A.rows(), A.cols() * B);
        for (int j = 0; j < A.cols(); ++j) n.val.middleCols(j * B, B).colwise() = A.col(j);
        break;
      }
      case Op::RowSumBlocks: {
        const int d = n.i0, B = static_cast<int>(A.cols()) / n.i0;
        n.val.resize(A.rows(), d);
        for (int j = 0; j < d; ++j) n.val.col(j) = A.middleCols(j * B, B).rowwise().sum();
        break;
      }
      case Op::SumBlocks: {
        const int d = n.i0, B = static_cast<int>(A.cols()) / n.i0;
        n.val = A.leftCols(B);
        for (int j = 1; j < d; ++j) n.val += A.middleCols(j * B, B);
        break;
      }
      case Op::TileBlocks: n.val = A.replicate(1, n.i0); break;
      case Op::MulBlocks: {
        const Mat& B = nodes_[n.b].val;
        const int w = static_cast<int>(B.cols());
        n.val.resize(A.rows(), A.cols());
        for (int j = 0; j < n.i0; ++j)
          n.val.middleCols(j * w, w) = A.middleCols(j * w, w).cwiseProduct(B);
        break;
      }
      case Op::SumBlocksDot: {
        const Mat& B = nodes_[n.b].val;
        const int d = n.i0, w = static_cast<int>(A.cols()) / n.i0;
        n.val = A.leftCols(w).cwiseProduct(B.leftCols(w));
        for (int j = 1; j < d; ++j)
          n.val += A.middleCols(j * w, w).cwiseProduct(B.middleCols(j * w, w));
        break;
      }
      case Op::BlocksToRows: {
        const int d = n.i0, B = static_cast<int>(A.cols()) / n.i0;
        n.val.resize(d, B);
        for (int j = 0; j < d; ++j) n.val.row(j) = A.middleCols(j * B, B);
        break;
      }
      case Op::RowsToBlocks: {
        const int d = static_cast<int>(A.rows()), B = static_cast<int>(A.cols());
        n.val.resize(1, d * B);
        for (int j = 0; j < d; ++j) n.val.middleCols(j * B, B) = A.row(j);
        break;
      }
      case Op::MatMulBlockScaled: {
        const Mat& J = nodes_[n.b].val;
        const Mat& S = nodes_[n.c].val;
        const int w = static_cast<int>(S.cols());
        Mat& tmp = scratch();
        tmp.resize(J.rows(), J.cols());
        for (int j = 0; j < n.i0; ++j)
          tmp.middleCols(j * w, w) = J.middleCols(j * w, w).cwiseProduct(S);
        n.val.noalias() = A * tmp;
        break;
      }
      case Op::AddMulBlocks: {
        const Mat& Z = nodes_[n.b].val;
        const Mat& S = nodes_[n.c].val;
        const int w = static_cast<int>(S.cols());
        n.val.resize(A.rows(), A.cols());
        for (int j = 0; j < n.i0; ++j)
          n.val.middleCols(j * w, w) =
              A.middleCols(j * w, w) + Z.middleCols(j * w, w).cwiseProduct(S);
        break;
      }
      default: throw ConfigError("compute: not an evaluable op");
    }
  }

  Mat& touch_adj(Node& n) {
    if (n.adj_pass != pass_) {
      n.adj.setZero(n.val.rows(), n.val.cols());
      n.adj_pass = pass_;
    }
    return n.adj;
  }
  template <class Expr>
  void add_adj(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.tracked) return;
    if (n.adj_pass != pass_) {
      n.adj = g;
      n.adj_pass = pass_;
    } else {
      n.adj += g;
    }
  }

  void pull_adjoint(int id) {
    Node& n = nodes_[id];
    const Mat& g = n.adj;
    const Mat& A = nodes_[n.a >= 0 ? n.a : id].val;
    switch (n.op) {
      case Op::Leaf:
      case Op::Const: return;
      case Op::Add: {
        add_adj(n.a, g);
        if (nodes_[n.b].tracked) add_adj(n.b, reduce_to(g, nodes_[n.b].val));
        return;
      }
      case Op::Sub: {
        add_adj(n.a, g);
        if (nodes_[n.b].tracked) add_adj(n.b, -reduce_to(g, nodes_[n.b].val));
        return;
      }
      case Op::Mul: {
        const Mat& B = nodes_[n.b].val;
        if (nodes_[n.a].tracked)
          add_adj(n.a, bcast(g, B, [](auto&& x, auto&& y) { return x * y; }));
        if (nodes_[n.b].tracked)
          add_adj(n.b, reduce_to(g.cwiseProduct(A), B));
        return;
      }
      case Op::Div: {
        const Mat& B = nodes_[n.b].val;
        if (nodes_[n.a].tracked)
          add_adj(n.a, bcast(g, B, [](auto&& x, auto&& y) { return x / y; }));
        if (nodes_[n.b].tracked) {
          // d/dB (A/B) = -A/B^2 = -val/B
          Mat t = bcast(g.cwiseProduct(n.val), B, [](auto&& x, auto&& y) { return x / y; });
          add_adj(n.b, -reduce_to(t, B));
        }
        return;
      }
      case Op::Neg: add_adj(n.a, -g); return;
      case Op::Affine: add_adj(n.a, n.ca * g); return;
      case Op::MatMul: {
        const Mat& B = nodes_[n.b].val;
        if (nodes_[n.a].tracked) add_adj(n.a, g * B.transpose());
        if (nodes_[n.b].tracked) add_adj(n.b, A.transpose() * g);
        return;
      }
      case Op::Transpose: add_adj(n.a, g.transpose()); return;
      case Op::Tanh:
        add_adj(n.a, g.cwiseProduct((1.0 - n.val.array().square()).matrix()));
        return;
      case Op::Sigma: {
        Mat t;
        fast_tanh(A, t);
        add_adj(n.a, g.cwiseProduct(t));
        return;
      }
      case Op::Exp: add_adj(n.a, g.cwiseProduct(n.val)); return;
      case Op::Log: add_adj(n.a, g.cwiseQuotient(A)); return;
      case Op::Square: add_adj(n.a, 2.0 * g.cwiseProduct(A)); return;
      case Op::SumAll: add_adj(n.a, Mat::Constant(A.rows(), A.cols(), g(0, 0))); return;
      case Op::ColSum: add_adj(n.a, g.replicate(A.rows(), 1)); return;
      case Op::RowSum: add_adj(n.a, g.replicate(1, A.cols())); return;
      case Op::RowSlice: {
        Mat t = Mat::Zero(A.rows(), A.cols());
        t.middleRows(n.i0, n.i1) = g;
        add_adj(n.a, t);
        return;
      }
      case Op::ColSlice: {
        Mat t = Mat::Zero(A.rows(), A.cols());
        t.middleCols(n.i0, n.i1) = g;
        add_adj(n.a, t);
        return;
      }
      case Op::ConcatRows: {
        if (nodes_[n.a].tracked) add_adj(n.a, g.topRows(A.rows()));
        if (nodes_[n.b].tracked) add_adj(n.b, g.bottomRows(nodes_[n.b].val.rows()));
        return;
      }
      case Op::TileCols: {
        const int B = n.i1;
        Mat t(A.rows(), A.cols());
        for (int j = 0; j < A.cols(); ++j) t.col(j) = g.middleCols(j * B, B).rowwise().sum();
        add_adj(n.a, t);
        return;
      }
      case Op::RowSumBlocks: {
        const int d = n.i0, B = static_cast<int>(A.cols()) / n.i0;
        Mat t(A.rows(), A.cols());
        for (int j = 0; j < d; ++j) t.middleCols(j * B, B).colwise() = g.col(j);
        add_adj(n.a, t);
        return;
      }
      case Op::SumBlocks: add_adj(n.a, g.replicate(1, n.i0)); return;
      case Op::TileBlocks: {
        const int B = static_cast<int>(A.cols());
        Mat t = g.leftCols(B);
        for (int j = 1; j < n.i0; ++j) t += g.middleCols(j * B, B);
        add_adj(n.a, t);
        return;
      }
      case Op::MulBlocks: {
        const Mat& B = nodes_[n.b].val;
        const int w = static_cast<int>(B.cols());
        if (nodes_[n.a].tracked) {
          Mat t(A.rows(), A.cols());
          for (int j = 0; j < n.i0; ++j)
            t.middleCols(j * w, w) = g.middleCols(j * w, w).cwiseProduct(B);
          add_adj(n.a, std::move(t));
        }
        if (nodes_[n.b].tracked) {
          Mat t = g.leftCols(w).cwiseProduct(A.leftCols(w));
          for (int j = 1; j < n.i0; ++j)
            t += g.middleCols(j * w, w).cwiseProduct(A.middleCols(j * w, w));
          add_adj(n.b, std::move(t));
        }
        return;
      }
      case Op::SumBlocksDot: {
        const Mat& B = nodes_[n.b].val;
        const int w = static_cast<int>(g.cols());
        const bool same = n.a == n.b;
        if (nodes_[n.a].tracked) {
          Mat t(A.rows(), A.cols());
          for (int j = 0; j < n.i0; ++j)
            t.middleCols(j * w, w) = g.cwiseProduct(B.middleCols(j * w, w));
          if (same) t *= 2.0;
          add_adj(n.a, std::move(t));
        }
        if (!same && nodes_[n.b].tracked) {
          Mat t(A.rows(), A.cols());
          for (int j = 0; j < n.i0; ++j)
            t.middleCols(j * w, w) = g.cwiseProduct(A.middleCols(j * w, w));
          add_adj(n.b, std::move(t));
        }
        return;
      }
      case Op::BlocksToRows: {
        const int d = n.i0, B = static_cast<int>(g.cols());
        Mat t(1, d * B);
        for (int j = 0; j < d; ++j) t.middleCols(j * B, B) = g.row(j);
        add_adj(n.a, t);
        return;
      }
      case Op::RowsToBlocks: {
        const int d = static_cast<int>(A.rows()), B = static_cast<int>(A.cols());
        Mat t(d, B);
        for (int j = 0; j < d; ++j) t.row(j) = g.middleCols(j * B, B);
        add_adj(n.a, t);
        return;
      }
      case Op::MatMulBlockScaled: {
        const Mat& J = nodes_[n.b].val;
        const Mat& S = nodes_[n.c].val;
        const int w = static_cast<int>(S.cols());
        const bool tw = nodes_[n.a].tracked, tj = nodes_[n.b].tracked,
                   ts = nodes_[n.c].tracked;
        if (tw) {
          Mat& tmp = scratch();
          tmp.resize(J.rows(), J.cols());
          for (int j = 0; j < n.i0; ++j)
            tmp.middleCols(j * w, w) = J.middleCols(j * w, w).cwiseProduct(S);
          add_adj(n.a, g * tmp.transpose());
        }
        if (tj || ts) {
          Mat& wtg = scratch();
          wtg.resize(J.rows(), J.cols());
          wtg.noalias() = A.transpose() * g;
          if (ts) {
            Mat as = wtg.leftCols(w).cwiseProduct(J.leftCols(w));
            for (int j = 1; j < n.i0; ++j)
              as += wtg.middleCols(j * w, w).cwiseProduct(J.middleCols(j * w, w));
            add_adj(n.c, std::move(as));
          }
          if (tj) {
            for (int j = 0; j < n.i0; ++j)
              wtg.middleCols(j * w, w) = wtg.middleCols(j * w, w).cwiseProduct(S);
            add_adj(n.b, wtg);
          }
        }
        return;
      }
      case Op::AddMulBlocks: {
        const Mat& Z = nodes_[n.b].val;
        const Mat& S = nodes_[n.c].val;
        const int w = static_cast<int>(S.cols());
        add_adj(n.a, g);
        if (nodes_[n.b].tracked) {
          Mat t(Z.rows(), Z.cols());
          for (int j = 0; j < n.i0; ++j)
            t.middleCols(j * w, w) = g.middleCols(j * w, w).cwiseProduct(S);
          add_adj(n.b, std::move(t));
        }
        if (nodes_[n.c].tracked) {
          Mat t = g.leftCols(w).cwiseProduct(Z.leftCols(w));
          for (int j = 1; j < n.i0; ++j)
            t += g.middleCols(j * w, w).cwiseProduct(Z.middleCols(j * w, w));
          add_adj(n.c, std::move(t));
        }
        return;
      }
    }
  }

  // Emitted adjoints: same rules as pull_adjoint but producing nodes.
  void emit_node_adjoint(int id, std::vector<int>& adj_of) {
    const Node nd = nodes_[id];  // copy: nodes_ may reallocate while emitting
    const int g = adj_of[id];
    auto give = [&](int target, int contrib) {
      if (!nodes_[target].tracked) return;
      adj_of[target] = adj_of[target] < 0 ? contrib : add(adj_of[target], contrib);
    };
    auto reduce_like = [&](int gnode, int target) {
      const Mat& G = nodes_[gnode].val;
      const Mat& B = nodes_[target].val;
      if (G.rows() == B.rows() && G.cols() == B.cols()) return gnode;
      if (B.size() == 1) return sum_all(gnode);
      if (B.cols() == 1) return row_sum(gnode);
      return col_sum(gnode);
    };
    switch (nd.op) {
      case Op::Leaf:
      case Op::Const: return;
      case Op::Add:
        give(nd.a, g);
        if (nodes_[nd.b].tracked) give(nd.b, reduce_like(g, nd.b));
        return;
      case Op::Sub:
        give(nd.a, g);
        if (nodes_[nd.b].tracked) give(nd.b, neg(reduce_like(g, nd.b)));
        return;
      case Op::Mul:
        if (nodes_[nd.a].tracked) give(nd.a, mul(g, nd.b));
        if (nodes_[nd.b].tracked) give(nd.b, reduce_like(mul(g, nd.a), nd.b));
        return;
      case Op::Div:
        if (nodes_[nd.a].tracked) give(nd.a, div(g, nd.b));
        if (nodes_[nd.b].tracked) give(nd.b, neg(reduce_like(div(mul(g, id), nd.b), nd.b)));
        return;
      case Op::Neg: give(nd.a, neg(g)); return;
      case Op::Affine: give(nd.a, scale(g, nd.ca)); return;
      case Op::MatMul:
        if (nodes_[nd.a].tracked) give(nd.a, matmul(g, transpose(nd.b)));
        if (nodes_[nd.b].tracked) give(nd.b, matmul(transpose(nd.a), g));
        return;
      case Op::Transpose: give(nd.a, transpose(g)); return;
      case Op::Tanh: give(nd.a, mul(g, affine(square(id), -1.0, 1.0))); return;
      case Op::Sigma: give(nd.a, mul(g, tanh(nd.a))); return;
      case Op::Exp: give(nd.a, mul(g, id)); return;
      case Op::Log: give(nd.a, div(g, nd.a)); return;
      case Op::Square: give(nd.a, mul(g, scale(nd.a, 2.0))); return;
      case Op::SumAll: {
        const Mat& A = nodes_[nd.a].val;
        give(nd.a, mul(constant(Mat::Ones(A.rows(), A.cols())), g));
        return;
      }
      case Op::ColSum: {
        const Mat& A = nodes_[nd.a].val;
        give(nd.a, mul(constant(Mat::Ones(A.rows(), A.cols())), g));
        return;
      }
      case Op::RowSum: {
        const Mat& A = nodes_[nd.a].val;
        give(nd.a, mul(constant(Mat::Ones(A.rows(), A.cols())), g));
        return;
      }
      case Op::RowSlice: {
        const Mat& A = nodes_[nd.a].val;
        int above = nd.i0, below = static_cast<int>(A.rows()) - nd.i0 - nd.i1;
        int padded = g;
        if (above > 0) padded = concat_rows(constant(Mat::Zero(above, A.cols())), padded);
        if (below > 0) padded = concat_rows(padded, constant(Mat::Zero(below, A.cols())));
        give(nd.a, padded);
        return;
      }
      case Op::ColSlice: {
        // transpose, pad rows, transpose back (cold path)
        const Mat& A = nodes_[nd.a].val;
        int left = nd.i0, right = static_cast<int>(A.cols()) - nd.i0 - nd.i1;
        int padded = transpose(g);
        if (left > 0) padded = concat_rows(constant(Mat::Zero(left, A.rows())), padded);
        if (right > 0) padded = concat_rows(padded, constant(Mat::Zero(right, A.rows())));
        give(nd.a, transpose(padded));
        return;
      }
      case Op::ConcatRows: {
        const Mat& A = nodes_[nd.a].val;
        if (nodes_[nd.a].tracked) give(nd.a, row_slice(g, 0, static_cast<int>(A.rows())));
        if (nodes_[nd.b].tracked)
          give(nd.b, row_slice(g, static_cast<int>(A.rows()),
                               static_cast<int>(nodes_[nd.b].val.rows())));
        return;
      }
      case Op::TileCols: give(nd.a, row_sum_blocks(g, static_cast<int>(nodes_[nd.a].val.cols()))); return;
      case Op::RowSumBlocks: give(nd.a, tile_cols(g, static_cast<int>(nodes_[nd.a].val.cols()) / nd.i0)); return;
      case Op::SumBlocks: give(nd.a, tile_blocks(g, nd.i0)); return;
      case Op::TileBlocks: give(nd.a, sum_blocks(g, nd.i0)); return;
      case Op::MulBlocks:
        if (nodes_[nd.a].tracked) give(nd.a, mul_blocks(g, nd.b));
        if (nodes_[nd.b].tracked) give(nd.b, sum_blocks(mul(g, nd.a), nd.i0));
        return;
      case Op::SumBlocksDot: {
        if (nd.a == nd.b) {
          if (nodes_[nd.a].tracked)
            give(nd.a, scale(mul(tile_blocks(g, nd.i0), nd.b), 2.0));
          return;
        }
        if (nodes_[nd.a].tracked) give(nd.a, mul(tile_blocks(g, nd.i0), nd.b));
        if (nodes_[nd.b].tracked) give(nd.b, mul(tile_blocks(g, nd.i0), nd.a));
        return;
      }
      case Op::BlocksToRows: give(nd.a, rows_to_blocks(g)); return;
      case Op::RowsToBlocks: give(nd.a, blocks_to_rows(g, static_cast<int>(nodes_[nd.a].val.rows()))); return;
      case Op::MatMulBlockScaled: {
        if (nodes_[nd.a].tracked)
          give(nd.a, matmul(g, transpose(mul_blocks(nd.b, nd.c))));
        if (nodes_[nd.b].tracked || nodes_[nd.c].tracked) {
          int wtg = matmul(transpose(nd.a), g);
          if (nodes_[nd.b].tracked) give(nd.b, mul_blocks(wtg, nd.c));
          if (nodes_[nd.c].tracked) give(nd.c, sum_blocks_dot(wtg, nd.b, nd.i0));
        }
        return;
      }
      case Op::AddMulBlocks: {
        give(nd.a, g);
        if (nodes_[nd.b].tracked) give(nd.b, mul_blocks(g, nd.c));
        if (nodes_[nd.c].tracked) give(nd.c, sum_blocks_dot(g, nd.b, nd.i0));
        return;
      }
    }
  }

  void push_tangent(int i, TangentMap& tm) const {
    const Node& n = nodes_[i];
    auto get = [&](int id) -> const Mat* {
      auto it = tm.t.find(id);
      return it == tm.t.end() ? nullptr : &it->second;
    };
    const Mat* ta = n.a >= 0 ? get(n.a) : nullptr;
    const Mat* tb = n.b >= 0 ? get(n.b) : nullptr;
    const Mat* tc = n.c >= 0 ? get(n.c) : nullptr;
    if (!ta && !tb && !tc) return;  // zero tangent, skip
    const Mat& A = nodes_[n.a].val;
    Mat t;
    switch (n.op) {
      case Op::Add: {
        if (ta && tb) t = bcast(*ta, *tb, [](auto&& x, auto&& y) { return x + y; });
        else if (ta) t = *ta;
        else {
          t = bcast(Mat::Zero(n.val.rows(), n.val.cols()), *tb,
                    [](auto&& x, auto&& y) { return x + y; });
        }
        break;
      }
      case Op::Sub: {
        if (ta && tb) t = bcast(*ta, *tb, [](auto&& x, auto&& y) { return x - y; });
        else if (ta) t = *ta;
        else {
          t = bcast(Mat::Zero(n.val.rows(), n.val.cols()), *tb,
                    [](auto&& x, auto&& y) { return x - y; });
        }
        break;
      }
      case Op::Mul: {
        const Mat& B = nodes_[n.b].val;
        t = Mat::Zero(n.val.rows(), n.val.cols());
        if (ta) t += bcast(*ta, B, [](auto&& x, auto&& y) { return x * y; });
        if (tb) t += bcast(A, *tb, [](auto&& x, auto&& y) { return x * y; });
        break;
      }
      case Op::Div: {
        const Mat& B = nodes_[n.b].val;
        t = Mat::Zero(n.val.rows(), n.val.cols());
        if (ta) t += bcast(*ta, B, [](auto&& x, auto&& y) { return x / y; });
        if (tb) t -= bcast(n.val, B, [](auto&& x, auto&& y) { return x / y; })
                         .cwiseProduct(bcast(Mat::Ones(n.val.rows(), n.val.cols()), *tb,
                                             [](auto&& x, auto&& y) { return x * y; }));
        break;
      }
      case Op::Neg: t = -*ta; break;
      case Op::Affine: t = n.ca * *ta; break;
      case Op::MatMul: {
        const Mat& B = nodes_[n.b].val;
        t = Mat::Zero(n.val.rows(), n.val.cols());
        if (ta) t.noalias() += *ta * B;
        if (tb) t.noalias() += A * *tb;
        break;
      }
      case Op::Transpose: t = ta->transpose(); break;
      case Op::Tanh: t = ta->cwiseProduct((1.0 - n.val.array().square()).matrix()); break;
      case Op::Sigma: {
        Mat th;
        fast_tanh(A, th);
        t = ta->cwiseProduct(th);
        break;
      }
      case Op::Exp: t = ta->cwiseProduct(n.val); break;
      case Op::Log: t = ta->cwiseQuotient(A); break;
      case Op::Square: t = 2.0 * ta->cwiseProduct(A); break;
      case Op::SumAll: t = Mat::Constant(1, 1, ta->sum()); break;
      case Op::ColSum: t = ta->colwise().sum(); break;
      case Op::RowSum: t = ta->rowwise().sum(); break;
      case Op::RowSlice: t = ta->middleRows(n.i0, n.i1); break;
      case Op::ColSlice: t = ta->middleCols(n.i0, n.i1); break;
      case Op::ConcatRows: {
        const Mat& B = nodes_[n.b].val;
        t.setZero(n.val.rows(), n.val.cols());
        if (ta) t.topRows(A.rows()) = *ta;
        if (tb) t.bottomRows(B.rows()) = *tb;
        break;
      }
      case Op::TileCols: {
        const int B = n.i1;
        t.resize(n.val.rows(), n.val.cols());
        for (int j = 0; j < A.cols(); ++j) t.middleCols(j * B, B).colwise() = ta->col(j);
        break;
      }
      case Op::RowSumBlocks: {
        const int d = n.i0, B = static_cast<int>(A.cols()) / n.i0;
        t.resize(A.rows(), d);
        for (int j = 0; j < d; ++j) t.col(j) = ta->middleCols(j * B, B).rowwise().sum();
        break;
      }
      case Op::SumBlocks: {
        const int d = n.i0, B = static_cast<int>(A.cols()) / n.i0;
        t = ta->leftCols(B);
        for (int j = 1; j < d; ++j) t += ta->middleCols(j * B, B);
        break;
      }
      case Op::TileBlocks: t = ta->replicate(1, n.i0); break;
      case Op::MulBlocks: {
        const Mat& B = nodes_[n.b].val;
        const int w = static_cast<int>(B.cols());
        t = Mat::Zero(n.val.rows(), n.val.cols());
        if (ta)
          for (int j = 0; j < n.i0; ++j)
            t.middleCols(j * w, w) += ta->middleCols(j * w, w).cwiseProduct(B);
        if (tb)
          for (int j = 0; j < n.i0; ++j)
            t.middleCols(j * w, w) += A.middleCols(j * w, w).cwiseProduct(*tb);
        break;
      }
      case Op::SumBlocksDot: {
        const Mat& B = nodes_[n.b].val;
        const int d = n.i0, w = static_cast<int>(A.cols()) / n.i0;
        t = Mat::Zero(n.val.rows(), n.val.cols());
        if (ta)
          for (int j = 0; j < d; ++j)
            t += ta->middleCols(j * w, w).cwiseProduct(B.middleCols(j * w, w));
        if (tb && n.a != n.b)
          for (int j = 0; j < d; ++j)
            t += A.middleCols(j * w, w).cwiseProduct(tb->middleCols(j * w, w));
        if (n.a == n.b) t *= 2.0;
        break;
      }
      case Op::BlocksToRows: {
        const int d = n.i0, B = static_cast<int>(A.cols()) / n.i0;
        t.resize(d, B);
        for (int j = 0; j < d; ++j) t.row(j) = ta->middleCols(j * B, B);
        break;
      }
      case Op::RowsToBlocks: {
        const int d = static_cast<int>(A.rows()), B = static_cast<int>(A.cols());
        t.resize(1, d * B);
        for (int j = 0; j < d; ++j) t.middleCols(j * B, B) = ta->row(j);
        break;
      }
      case Op::MatMulBlockScaled: {
        const Mat& J = nodes_[n.b].val;
        const Mat& S = nodes_[n.c].val;
        const int w = static_cast<int>(S.cols());
        t.setZero(n.val.rows(), n.val.cols());
        Mat tmp(J.rows(), w);
        for (int j = 0; j < n.i0; ++j) {
          auto Jj = J.middleCols(j * w, w);
          if (ta) {
            tmp = Jj.cwiseProduct(S);
            t.middleCols(j * w, w).noalias() += *ta * tmp;
          }
          if (tb) {
            tmp = tb->middleCols(j * w, w).cwiseProduct(S);
            t.middleCols(j * w, w).noalias() += A * tmp;
          }
          if (tc) {
            tmp = Jj.cwiseProduct(*tc);
            t.middleCols(j * w, w).noalias() += A * tmp;
          }
        }
        break;
      }
      case Op::AddMulBlocks: {
        const Mat& Z = nodes_[n.b].val;
        const Mat& S = nodes_[n.c].val;
        const int w = static_cast<int>(S.cols());
        t.setZero(n.val.rows(), n.val.cols());
        if (ta) t = *ta;
        for (int j = 0; j < n.i0; ++j) {
          if (tb) t.middleCols(j * w, w) += tb->middleCols(j * w, w).cwiseProduct(S);
          if (tc) t.middleCols(j * w, w) += Z.middleCols(j * w, w).cwiseProduct(*tc);
        }
        break;
      }
      default: return;
    }
    tm.t.emplace(i, std::move(t));
  }

  static Mat& scratch() {
    thread_local Mat buf;
    return buf;
  }

  std::vector<Node> nodes_;
  std::unordered_map<uint64_t, int> param_cache_;
  size_t bytes_ = 0;
  uint32_t pass_ = 0;
  bool guard_ = false;
};

}  // namespace fpflow::ad
