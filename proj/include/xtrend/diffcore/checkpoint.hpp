#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "xtrend/diffcore/graph.hpp"

namespace xtrend::ad {

inline constexpr const char* kCheckpointFormat = "xtrend-params";
inline constexpr int kCheckpointVersion = 1;

/// Checkpoint layout:
///   {"format": "xtrend-params", "version": 1, "config": {...},
///    "params": [{"name": ..., "rows": R, "cols": C, "values": [row-major R*C numbers]}]}
/// Parameters appear in registration order.
template <typename T>
nlohmann::json checkpoint_to_json(const ParamStore<T>& store, const nlohmann::json& config = nlohmann::json::object()) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : store) {
    std::vector<double> values(static_cast<std::size_t>(p.value.size()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) values[static_cast<std::size_t>(i)] = static_cast<double>(p.value.data()[i]);
    params.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}, {"values", values}});
  }
  return {{"format", kCheckpointFormat}, {"version", kCheckpointVersion}, {"config", config}, {"params", params}};
}

/// Loads values into an already-built store; names and shapes must match exactly.
template <typename T>
void load_checkpoint_json(const nlohmann::json& j, ParamStore<T>& store) {
  if (j.value("format", "") != kCheckpointFormat) throw ParseError("not an xtrend parameter checkpoint");
  if (j.value("version", 0) != kCheckpointVersion) throw ParseError("unsupported checkpoint version");
  const auto& params = j.at("params");
  if (params.size() != store.size()) throw ValidationError("checkpoint parameter count differs from model");
  for (const auto& e : params) {
    auto& p = store[e.at("name").get<std::string>()];
    const auto rows = e.at("rows").get<Eigen::Index>(), cols = e.at("cols").get<Eigen::Index>();
    if (rows != p.value.rows() || cols != p.value.cols()) throw ValidationError("checkpoint shape mismatch for '" + p.name + "'");
    const auto values = e.at("values").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != rows * cols) throw ParseError("checkpoint value count mismatch for '" + p.name + "'");
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<T>(values[static_cast<std::size_t>(i)]);
  }
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, const nlohmann::json& config = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(store, config).dump() << "\n";
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("invalid JSON in '" + path + "': " + e.what());
  }
}

}  // namespace xtrend::ad
