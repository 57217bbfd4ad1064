#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fpflow {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto distinct exit codes.
// ---------------------------------------------------------------------------

/// Invalid configuration, registration, or usage error.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dimension / shape mismatch between operands.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf produced during a computation; carries the offending context
/// (primitive name, parameter name, or trajectory time).
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& msg, std::string where)
      : std::runtime_error(msg + " [" + where + "]"), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

/// Adaptive solver exceeded its step budget; carries the last good time.
class SolverDivergence : public NumericError {
 public:
  SolverDivergence(const std::string& msg, double last_good_time)
      : NumericError(msg, "t=" + std::to_string(last_good_time)),
        last_good_time_(last_good_time) {}
  double last_good_time() const { return last_good_time_; }

 private:
  double last_good_time_;
};

// ---------------------------------------------------------------------------
// Deterministic RNG helpers
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed (block-split RNG).
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x51409f1a2c8b3dULL));
}

inline Rng make_rng(uint64_t seed) { return Rng(splitmix64(seed)); }

inline Mat randn(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n01(rng);
  return m;
}

/// Uniform on the closed interval [0, 1].
inline double uniform01_closed(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, std::nextafter(1.0, 2.0));
  return u(rng);
}

// ---------------------------------------------------------------------------
// Bit-exact double <-> hex encoding (checkpoint container)
// ---------------------------------------------------------------------------

inline void append_double_hex(std::string& out, double v) {
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(bits));
  out.append(buf, 16);
}

inline double parse_double_hex(const char* s) {
  uint64_t bits = std::strtoull(std::string(s, 16).c_str(), nullptr, 16);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

// ---------------------------------------------------------------------------
// VariableSet: a named, ordered collection of parameter matrices. Gradient
// queries resolve against exactly one set; handles are stable for the
// lifetime of the set.
// ---------------------------------------------------------------------------

struct VarHandle {
  uint32_t set = UINT32_MAX;
  uint32_t index = UINT32_MAX;
  bool valid() const { return set != UINT32_MAX; }
};

/// Per-set gradient accumulator, shaped like the set's entries.
struct GradBuf {
  std::vector<Mat> slots;

  void add_scaled(const GradBuf& other, double a) {
    for (size_t i = 0; i < slots.size(); ++i) slots[i] += a * other.slots[i];
  }
  void set_zero() {
    for (auto& m : slots) m.setZero();
  }
  double squared_norm() const {
    double s = 0;
    for (auto& m : slots) s += m.squaredNorm();
    return s;
  }
};

class VariableSet {
 public:
  VariableSet() : id_(next_id_.fetch_add(1)) {}

  VarHandle add(std::string name, Mat init) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(init));
    return {id_, static_cast<uint32_t>(values_.size() - 1)};
  }

  uint32_t id() const { return id_; }
  size_t size() const { return values_.size(); }

  const std::string& name(uint32_t i) const { return names_[i]; }
  Mat& value(uint32_t i) { return values_[i]; }
  const Mat& value(uint32_t i) const { return values_[i]; }
  Mat& value(VarHandle h) { return values_[check(h)]; }
  const Mat& value(VarHandle h) const { return values_[check(h)]; }

  int find(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return static_cast<int>(i);
    return -1;
  }

  size_t total_scalars() const {
    size_t n = 0;
    for (auto& m : values_) n += static_cast<size_t>(m.size());
    return n;
  }

  GradBuf make_grad_buffer() const {
    GradBuf g;
    g.slots.reserve(values_.size());
    for (auto& m : values_) g.slots.push_back(Mat::Zero(m.rows(), m.cols()));
    return g;
  }

  /// Flattened copy of all values (row-major per entry, entries in order).
  Vec flatten() const {
    Vec out(total_scalars());
    Eigen::Index k = 0;
    for (auto& m : values_) {
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) out[k++] = m(i, j);
    }
    return out;
  }
  void unflatten(const Vec& in) {
    Eigen::Index k = 0;
    for (auto& m : values_) {
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = in[k++];
    }
  }
  static Vec flatten_grad(const GradBuf& g) {
    Eigen::Index n = 0;
    for (auto& m : g.slots) n += m.size();
    Vec out(n);
    Eigen::Index k = 0;
    for (auto& m : g.slots)
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) out[k++] = m(i, j);
    return out;
  }

 private:
  uint32_t check(VarHandle h) const {
    if (h.set != id_ || h.index >= values_.size())
      throw ConfigError("gradient query names a variable not registered in this set");
    return h.index;
  }

  static inline std::atomic<uint32_t> next_id_{0};
  uint32_t id_;
  std::vector<std::string> names_;
  std::vector<Mat> values_;
};

// ---------------------------------------------------------------------------
// Fast vectorized activations. sigma(x) = log(e^x + e^-x) is evaluated as
// |x| + log(1 + exp(-2|x|)) so it cannot overflow; its derivative is tanh.
// tanh goes through exp to use SIMD (std::tanh is scalar for double).
// ---------------------------------------------------------------------------

inline void fast_tanh(const Mat& x, Mat& out) {
  out = (-2.0 * x.array().abs()).exp();
  out.array() = x.array().sign() * (1.0 - out.array()) / (1.0 + out.array());
}

inline void fast_sigma(const Mat& x, Mat& out) {
  out = (-2.0 * x.array().abs()).exp();
  out.array() = x.array().abs() + (1.0 + out.array()).log();
}

}  // namespace fpflow
