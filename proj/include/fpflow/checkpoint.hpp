#pragma once

#include <fstream>
#include <memory>

#include <json.hpp>

#include "fpflow/nets.hpp"

namespace fpflow::io {

// ---------------------------------------------------------------------------
// Model checkpoints: a versioned JSON container holding the architecture and
// a flat list of named parameter arrays. Array payloads are hex-encoded IEEE
// bit patterns (column-major), so a save/load round trip is bit-exact.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline std::string encode_mat(const Mat& m) {
  std::string out;
  out.reserve(static_cast<size_t>(m.size()) * 16);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) append_double_hex(out, m(i, j));
  return out;
}

inline Mat decode_mat(const std::string& hex, Eigen::Index rows, Eigen::Index cols) {
  if (hex.size() != static_cast<size_t>(rows * cols) * 16)
    throw ConfigError("checkpoint: array payload has wrong length");
  Mat m(rows, cols);
  const char* p = hex.data();
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i, p += 16) m(i, j) = parse_double_hex(p);
  return m;
}

inline nlohmann::json params_to_json(const VariableSet& vars) {
  nlohmann::json arr = nlohmann::json::array();
  for (uint32_t i = 0; i < vars.size(); ++i) {
    const Mat& v = vars.value(i);
    arr.push_back({{"name", vars.name(i)},
                   {"rows", v.rows()},
                   {"cols", v.cols()},
                   {"data", encode_mat(v)}});
  }
  return arr;
}

inline void params_from_json(const nlohmann::json& arr, VariableSet& vars) {
  if (arr.size() != vars.size())
    throw ConfigError("checkpoint: parameter count does not match the architecture");
  for (const auto& e : arr) {
    const std::string name = e.at("name");
    int idx = vars.find(name);
    if (idx < 0) throw ConfigError("checkpoint: unknown parameter '" + name + "'");
    Mat& dst = vars.value(static_cast<uint32_t>(idx));
    if (dst.rows() != e.at("rows").get<Eigen::Index>() ||
        dst.cols() != e.at("cols").get<Eigen::Index>())
      throw ConfigError("checkpoint: shape mismatch for '" + name + "'");
    dst = decode_mat(e.at("data"), dst.rows(), dst.cols());
  }
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f << j.dump(1) << "\n";
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  return nlohmann::json::parse(f);
}

inline void save_checkpoint(const nets::TfpLogDensity& model, const std::string& path,
                            nlohmann::json extra = {}) {
  const auto& cfg = model.net().config();
  nlohmann::json j{
      {"format", "fpflow-checkpoint"},
      {"version", kCheckpointVersion},
      {"kind", "tfp"},
      {"arch",
       {{"dim", cfg.dim},
        {"layers", cfg.layers},
        {"width", cfg.width},
        {"rank", model.net().rank()},
        {"p0_mean", encode_mat(Mat(model.p0().mean))},
        {"p0_variance", model.p0().variance}}},
      {"params", params_to_json(model.net().variables())}};
  if (!extra.is_null() && !extra.empty()) j["meta"] = std::move(extra);
  write_json(j, path);
}

inline void save_checkpoint(const nets::CouplingFlow& flow, const std::string& path,
                            nlohmann::json extra = {}) {
  const auto& cfg = flow.config();
  nlohmann::json j{{"format", "fpflow-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"kind", "sfp"},
                   {"arch",
                    {{"dim", cfg.dim},
                     {"layers", cfg.layers},
                     {"hidden", cfg.hidden},
                     {"s_clamp", cfg.s_clamp},
                     {"mask_pattern", "alternating-halves"}}},
                   {"params", params_to_json(*flow.variables())}};
  if (!extra.is_null() && !extra.empty()) j["meta"] = std::move(extra);
  write_json(j, path);
}

struct LoadedModel {
  std::string kind;  // "tfp" | "sfp"
  std::unique_ptr<nets::TfpLogDensity> tfp;
  std::unique_ptr<nets::CouplingFlow> sfp;
  nlohmann::json meta;

  nets::LogDensityModel* model() {
    if (tfp) return tfp.get();
    return sfp.get();
  }
};

inline LoadedModel load_checkpoint(const std::string& path) {
  nlohmann::json j = read_json(path);
  if (j.value("format", "") != "fpflow-checkpoint")
    throw ConfigError(path + " is not an fpflow checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version");
  LoadedModel out;
  out.kind = j.at("kind");
  out.meta = j.value("meta", nlohmann::json());
  const auto& arch = j.at("arch");
  if (out.kind == "tfp") {
    nets::PotentialNetConfig cfg;
    cfg.dim = arch.at("dim");
    cfg.layers = arch.at("layers");
    cfg.width = arch.at("width");
    Mat mean = decode_mat(arch.at("p0_mean"), cfg.dim, 1);
    nets::IsoGaussian p0{mean.col(0), arch.at("p0_variance").get<double>()};
    out.tfp = std::make_unique<nets::TfpLogDensity>(std::move(p0), cfg);
    params_from_json(j.at("params"), out.tfp->net().variables());
  } else if (out.kind == "sfp") {
    nets::CouplingFlowConfig cfg;
    cfg.dim = arch.at("dim");
    cfg.layers = arch.at("layers");
    cfg.hidden = arch.at("hidden");
    cfg.s_clamp = arch.value("s_clamp", 0.0);
    out.sfp = std::make_unique<nets::CouplingFlow>(cfg);
    params_from_json(j.at("params"), *out.sfp->variables());
  } else {
    throw ConfigError("unknown checkpoint kind '" + out.kind + "'");
  }
  return out;
}

}  // namespace fpflow::io
