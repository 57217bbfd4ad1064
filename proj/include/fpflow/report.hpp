#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "fpflow/train.hpp"

namespace fpflow::run {

// ---------------------------------------------------------------------------
// Layered configuration: documented key = value file, overridden by
// command-line assignments. Unknown keys are rejected (all at once).
// ---------------------------------------------------------------------------

class KeyValues {
 public:
  void parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (!parse_line(line))
        throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
  }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  bool parse_line(const std::string& raw) {
    std::string line = raw.substr(0, raw.find('#'));
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      size_t b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      size_t e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) return true;
    size_t eq = line.find('=');
    if (eq == std::string::npos) return false;
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) return false;
    kv_[key] = val;
    return true;
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& dflt) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
  }
  double get(const std::string& key, double dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
      size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("");
      return v;
    } catch (...) {
      errors_.push_back("key '" + key + "': '" + it->second + "' is not a number");
      return dflt;
    }
  }
  int get(const std::string& key, int dflt) const {
    double v = get(key, static_cast<double>(dflt));
    return static_cast<int>(v);
  }
  bool get(const std::string& key, bool dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    if (it->second == "true" || it->second == "1" || it->second == "on") return true;
    if (it->second == "false" || it->second == "0" || it->second == "off") return false;
    errors_.push_back("key '" + key + "': '" + it->second + "' is not a boolean");
    return dflt;
  }

  void mark_known(const std::string& key) const { known_.insert(key); }
  /// Collects every validation problem and reports them together.
  void finish_validation() const {
    std::vector<std::string> errs = errors_;
    for (auto& [k, v] : kv_)
      if (!known_.count(k)) errs.push_back("unknown config key '" + k + "'");
    if (!errs.empty()) {
      std::string msg = "configuration errors:";
      for (auto& e : errs) msg += "\n  - " + e;
      throw ConfigError(msg);
    }
  }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
  mutable std::vector<std::string> errors_;
  mutable std::set<std::string> known_;
};

// ---------------------------------------------------------------------------
// Run configuration: problem, model, training, solver, grid, outputs.
// ---------------------------------------------------------------------------

struct GridSpec {
  int axis0 = 0;
  double min0 = -5, max0 = 5;
  int count0 = 50;
  int axis1 = 1;  // used when count1 > 0
  double min1 = -5, max1 = 5;
  int count1 = 50;
  double fill = 0.0;  // value of the remaining coordinates

  /// Grid points as columns, sweeping axis0 fastest.
  Mat points(int dim) const {
    if (count0 < 2 || (count1 != 0 && count1 < 2))
      throw ConfigError("grid counts must be >= 2 per swept axis");
    if (axis0 < 0 || axis0 >= dim || (count1 > 0 && (axis1 < 0 || axis1 >= dim)))
      throw ConfigError("grid axis out of range");
    if (count1 > 0 && axis0 == axis1) throw ConfigError("grid axes must differ");
    const int n = count0 * std::max(1, count1);
    Mat pts = Mat::Constant(dim, n, fill);
    int k = 0;
    for (int j = 0; j < std::max(1, count1); ++j) {
      for (int i = 0; i < count0; ++i, ++k) {
        pts(axis0, k) = min0 + (max0 - min0) * i / (count0 - 1);
        if (count1 > 0) pts(axis1, k) = min1 + (max1 - min1) * j / (count1 - 1);
      }
    }
    return pts;
  }
};

struct RunConfig {
  std::string problem = "toy";
  int dim = 1;
  double a = 1.0, sigma = 1.0, horizon = 1.0;

  int model_layers = 4;        // residual / coupling layers
  int model_width = 32;        // potential-net hidden width m
  int model_hidden = 32;       // s,t MLP hidden width
  double model_init_scale = 0.01;
  double model_s_clamp = 0.0;
  uint64_t model_seed = 1;

  train::TrainConfig train;
  ode::SolverConfig solver;
  ode::SolverConfig predict;  // used by eval/solve (adaptive by default)

  double eval_time = 1.0;
  std::string mode = "both";  // net | ode | both
  GridSpec grid;

  int mc_particles = 100000;
  double mc_dt = 1e-3;
  double mc_time = -1.0;  // <0: problem horizon (TFP) or 10 (SFP)
  int mc_bins = 100;
  double mc_min = -5, mc_max = 5;

  std::string out_dir = "out";
  std::string checkpoint;  // eval / mc overlay input

  static RunConfig from(const KeyValues& kv) {
    RunConfig c;
    auto S = [&](const char* k, std::string& v) { kv.mark_known(k); v = kv.get(k, v); };
    auto D = [&](const char* k, double& v) { kv.mark_known(k); v = kv.get(k, v); };
    auto I = [&](const char* k, int& v) { kv.mark_known(k); v = kv.get(k, v); };
    auto B = [&](const char* k, bool& v) { kv.mark_known(k); v = kv.get(k, v); };

    S("problem", c.problem);
    I("dim", c.dim);
    D("a", c.a);
    D("sigma", c.sigma);
    D("horizon", c.horizon);

    I("model.layers", c.model_layers);
    I("model.width", c.model_width);
    I("model.hidden", c.model_hidden);
    D("model.init-scale", c.model_init_scale);
    D("model.s-clamp", c.model_s_clamp);
    int mseed = static_cast<int>(c.model_seed);
    I("model.seed", mseed);
    c.model_seed = static_cast<uint64_t>(mseed);

    I("train.iterations", c.train.iterations);
    D("train.lr", c.train.lr);
    I("train.batch", c.train.batch);
    int tseed = static_cast<int>(c.train.seed);
    I("train.seed", tseed);
    c.train.seed = static_cast<uint64_t>(tseed);
    D("train.horizon", c.train.horizon);
    B("train.detach-ode-target", c.train.detach_ode_target);
    B("train.per-sample-times", c.train.per_sample_times);
    I("train.chunk", c.train.chunk);
    kv.mark_known("train.checkpoint-every");
    c.checkpoint_every = kv.get("train.checkpoint-every", c.checkpoint_every);

    std::string method = "rk4";
    S("solver.method", method);
    if (method == "rk4") {
      c.solver.method = ode::SolverConfig::Method::Rk4Fixed;
    } else if (method == "dopri5") {
      c.solver.method = ode::SolverConfig::Method::Dopri5;
    } else {
      throw ConfigError("solver.method must be rk4 or dopri5");
    }
    I("solver.steps", c.solver.steps);
    D("solver.rtol", c.solver.rtol);
    D("solver.atol", c.solver.atol);
    I("solver.max-steps", c.solver.max_steps);

    c.predict.method = ode::SolverConfig::Method::Dopri5;
    std::string pmethod = "dopri5";
    S("predict.method", pmethod);
    if (pmethod == "rk4") c.predict.method = ode::SolverConfig::Method::Rk4Fixed;
    I("predict.steps", c.predict.steps);
    D("predict.rtol", c.predict.rtol);
    D("predict.atol", c.predict.atol);
    I("predict.max-steps", c.predict.max_steps);

    D("eval.time", c.eval_time);
    S("eval.mode", c.mode);
    if (c.mode != "net" && c.mode != "ode" && c.mode != "both")
      throw ConfigError("eval.mode must be net, ode, or both");

    I("grid.axis0", c.grid.axis0);
    D("grid.min0", c.grid.min0);
    D("grid.max0", c.grid.max0);
    I("grid.count0", c.grid.count0);
    I("grid.axis1", c.grid.axis1);
    D("grid.min1", c.grid.min1);
    D("grid.max1", c.grid.max1);
    I("grid.count1", c.grid.count1);
    D("grid.fill", c.grid.fill);

    I("mc.particles", c.mc_particles);
    D("mc.dt", c.mc_dt);
    D("mc.t", c.mc_time);
    I("mc.bins", c.mc_bins);
    D("mc.min", c.mc_min);
    D("mc.max", c.mc_max);

    S("out", c.out_dir);
    S("checkpoint", c.checkpoint);
    kv.finish_validation();
    return c;
  }

  int checkpoint_every = 0;

  nlohmann::json echo() const {
    return {{"problem", problem},
            {"dim", dim},
            {"a", a},
            {"sigma", sigma},
            {"horizon", horizon},
            {"model",
             {{"layers", model_layers},
              {"width", model_width},
              {"hidden", model_hidden},
              {"init_scale", model_init_scale},
              {"s_clamp", model_s_clamp},
              {"seed", model_seed}}},
            {"train",
             {{"iterations", train.iterations},
              {"lr", train.lr},
              {"batch", train.batch},
              {"seed", train.seed},
              {"horizon", train.horizon},
              {"detach_ode_target", train.detach_ode_target},
              {"per_sample_times", train.per_sample_times},
              {"checkpoint_every", checkpoint_every},
              {"chunk", train.chunk}}},
            {"solver",
             {{"method", solver.method == ode::SolverConfig::Method::Rk4Fixed ? "rk4" : "dopri5"},
              {"steps", solver.steps},
              {"rtol", solver.rtol},
              {"atol", solver.atol},
              {"max_steps", solver.max_steps}}},
            {"predict",
             {{"method", predict.method == ode::SolverConfig::Method::Rk4Fixed ? "rk4" : "dopri5"},
              {"steps", predict.steps},
              {"rtol", predict.rtol},
              {"atol", predict.atol},
              {"max_steps", predict.max_steps}}},
            {"eval", {{"time", eval_time}, {"mode", mode}}},
            {"grid",
             {{"axis0", grid.axis0},
              {"min0", grid.min0},
              {"max0", grid.max0},
              {"count0", grid.count0},
              {"axis1", grid.axis1},
              {"min1", grid.min1},
              {"max1", grid.max1},
              {"count1", grid.count1},
              {"fill", grid.fill}}},
            {"mc",
             {{"particles", mc_particles},
              {"dt", mc_dt},
              {"t", mc_time},
              {"bins", mc_bins},
              {"min", mc_min},
              {"max", mc_max}}},
            {"out", out_dir},
            {"checkpoint", checkpoint}};
  }
};

// ---------------------------------------------------------------------------
// SHA-1 (git blob convention) for sidecar content hashes.
// ---------------------------------------------------------------------------

namespace detail {

class Sha1 {
 public:
  void update(const uint8_t* data, size_t len) {
    total_ += len;
    while (len > 0) {
      size_t take = std::min(len, size_t(64) - fill_);
      std::memcpy(buf_ + fill_, data, take);
      fill_ += take;
      data += take;
      len -= take;
      if (fill_ == 64) {
        block();
        fill_ = 0;
      }
    }
  }
  std::string hex() {
    uint64_t bits = total_ * 8;
    uint8_t pad = 0x80;
    update(&pad, 1);
    uint8_t zero = 0;
    while (fill_ != 56) update(&zero, 1);
    uint8_t lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<uint8_t>(bits >> (56 - 8 * i));
    update(lenb, 8);
    char out[41];
    for (int i = 0; i < 5; ++i) std::snprintf(out + 8 * i, 9, "%08x", h_[i]);
    return std::string(out, 40);
  }

 private:
  static uint32_t rol(uint32_t x, int s) { return (x << s) | (x >> (32 - s)); }
  void block() {
    uint32_t w[80];
    for (int i = 0; i < 16; ++i)
      w[i] = (uint32_t(buf_[4 * i]) << 24) | (uint32_t(buf_[4 * i + 1]) << 16) |
             (uint32_t(buf_[4 * i + 2]) << 8) | uint32_t(buf_[4 * i + 3]);
    for (int i = 16; i < 80; ++i) w[i] = rol(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);
    uint32_t a = h_[0], b = h_[1], c = h_[2], d = h_[3], e = h_[4];
    for (int i = 0; i < 80; ++i) {
      uint32_t f, k;
      if (i < 20) {
        f = (b & c) | (~b & d);
        k = 0x5a827999;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ed9eba1;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8f1bbcdc;
      } else {
        f = b ^ c ^ d;
        k = 0xca62c1d6;
      }
      uint32_t t = rol(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rol(b, 30);
      b = a;
      a = t;
    }
    h_[0] += a;
    h_[1] += b;
    h_[2] += c;
    h_[3] += d;
    h_[4] += e;
  }

  uint32_t h_[5] = {0x67452301, 0xefcdab89, 0x98badcfe, 0x10325476, 0xc3d2e1f0};
  uint8_t buf_[64];
  size_t fill_ = 0;
  uint64_t total_ = 0;
};

}  // namespace detail

/// Hash of a byte string using the git blob convention.
inline std::string git_blob_sha1(const std::string& content) {
  detail::Sha1 h;
  std::string header = "blob " + std::to_string(content.size());
  h.update(reinterpret_cast<const uint8_t*>(header.data()), header.size() + 1);  // incl. NUL
  h.update(reinterpret_cast<const uint8_t*>(content.data()), content.size());
  return h.hex();
}

// ---------------------------------------------------------------------------
// Evaluation report: per-point predictions against the exact density with
// recomputable aggregates. Grid points whose exact density is below 1e-300
// are excluded from relative-error aggregates.
// ---------------------------------------------------------------------------

inline constexpr double kExactFloor = 1e-300;

struct EvalRow {
  Vec x;
  double t = 0.0;
  double p_exact = std::numeric_limits<double>::quiet_NaN();
  double p_net = std::numeric_limits<double>::quiet_NaN();
  double p_ode = std::numeric_limits<double>::quiet_NaN();
  bool ode_failed = false;
};

struct Aggregates {
  double mape = std::numeric_limits<double>::quiet_NaN();     // percent
  double max_rel = std::numeric_limits<double>::quiet_NaN();  // percent
  double mse_log = std::numeric_limits<double>::quiet_NaN();
  int used = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  int failed_points = 0;
  Aggregates net, ode;

  static Aggregates aggregate(const std::vector<EvalRow>& rows, bool use_ode) {
    Aggregates a;
    double sum_rel = 0, max_rel = 0, sum_sq = 0;
    int n = 0;
    for (const auto& r : rows) {
      const double pred = use_ode ? r.p_ode : r.p_net;
      if (!(r.p_exact > kExactFloor) || !std::isfinite(pred)) continue;
      const double rel = std::abs(pred - r.p_exact) / r.p_exact;
      sum_rel += rel;
      max_rel = std::max(max_rel, rel);
      if (pred > 0) {
        const double dlog = std::log(pred) - std::log(r.p_exact);
        sum_sq += dlog * dlog;
      }
      ++n;
    }
    if (n > 0) {
      a.mape = 100.0 * sum_rel / n;
      a.max_rel = 100.0 * max_rel;
      a.mse_log = sum_sq / n;
      a.used = n;
    }
    return a;
  }

  void compute_aggregates() {
    net = aggregate(rows, false);
    ode = aggregate(rows, true);
    failed_points = 0;
    for (auto& r : rows) failed_points += r.ode_failed ? 1 : 0;
  }

  std::string to_csv() const {
    if (rows.empty()) return "";
    const int d = static_cast<int>(rows.front().x.size());
    std::string out;
    for (int i = 0; i < d; ++i) out += "x" + std::to_string(i) + ",";
    out += "t,p_exact,p_net,p_ode,abs_err_net,rel_err_net,abs_err_ode,rel_err_ode,ode_failed\n";
    char buf[64];
    auto put = [&](double v, char sep) {
      std::snprintf(buf, sizeof(buf), "%.17g%c", v, sep);
      out += buf;
    };
    for (const auto& r : rows) {
      for (int i = 0; i < d; ++i) put(r.x[i], ',');
      put(r.t, ',');
      put(r.p_exact, ',');
      put(r.p_net, ',');
      put(r.p_ode, ',');
      const bool ex = r.p_exact > kExactFloor;
      put(ex ? std::abs(r.p_net - r.p_exact) : std::numeric_limits<double>::quiet_NaN(), ',');
      put(ex ? std::abs(r.p_net - r.p_exact) / r.p_exact
             : std::numeric_limits<double>::quiet_NaN(),
          ',');
      put(ex ? std::abs(r.p_ode - r.p_exact) : std::numeric_limits<double>::quiet_NaN(), ',');
      put(ex ? std::abs(r.p_ode - r.p_exact) / r.p_exact
             : std::numeric_limits<double>::quiet_NaN(),
          ',');
      out += r.ode_failed ? "1\n" : "0\n";
    }
    return out;
  }

  static EvalReport from_csv(const std::string& csv) {
    EvalReport rep;
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("empty report CSV");
    int d = 0;
    {
      std::istringstream hs(line);
      std::string col;
      while (std::getline(hs, col, ',')) {
        if (col.size() > 1 && col[0] == 'x') ++d;
      }
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string cell;
      EvalRow r;
      r.x.resize(d);
      auto next = [&]() {
        if (!std::getline(ls, cell, ',')) throw ConfigError("short report row");
        return std::strtod(cell.c_str(), nullptr);
      };
      for (int i = 0; i < d; ++i) r.x[i] = next();
      r.t = next();
      r.p_exact = next();
      r.p_net = next();
      r.p_ode = next();
      next();
      next();
      next();
      next();  // derived error columns
      r.ode_failed = next() != 0.0;
      rep.rows.push_back(std::move(r));
    }
    rep.compute_aggregates();
    return rep;
  }

  nlohmann::json summary() const {
    auto agg = [](const Aggregates& a) {
      return nlohmann::json{
          {"mape_percent", a.mape}, {"max_rel_percent", a.max_rel}, {"mse_log", a.mse_log},
          {"points_used", a.used}};
    };
    return {{"net", agg(net)}, {"ode", agg(ode)}, {"failed_points", failed_points},
            {"rows", rows.size()}};
  }
};

inline void write_text(const std::string& path, const std::string& content) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  f << content;
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Writes a CSV and its JSON sidecar (config echo + content hash).
inline void write_csv_with_sidecar(const std::string& path, const std::string& csv,
                                   const RunConfig& cfg, nlohmann::json extra = {}) {
  write_text(path, csv);
  nlohmann::json side{{"file", std::filesystem::path(path).filename().string()},
                      {"content_sha1", git_blob_sha1(csv)},
                      {"config", cfg.echo()}};
  if (!extra.is_null() && !extra.empty()) side["result"] = std::move(extra);
  write_text(path + ".meta.json", side.dump(1) + "\n");
}

}  // namespace fpflow::run
