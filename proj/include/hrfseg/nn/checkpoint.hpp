#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/nn/layers.hpp"

namespace hrfseg::nn {

// File layout:
//   8 bytes   magic "HRFCKPT\0"
//   8 bytes   little-endian u64 header length
//   n bytes   JSON header {format_version, dtype, graphs:[{name, topology}], meta}
//   rest      little-endian f64 parameter data, graphs in order, parameters in
//             declaration order
inline constexpr int kCheckpointVersion = 1;

struct NamedGraph {
  std::string name;
  const Graph* graph;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedGraph>& graphs,
                     const nlohmann::json& meta = nlohmann::json::object());

struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Graph>> graphs;

  const Graph& graph(const std::string& name) const;
  Graph take(const std::string& name);
};

// Throws FormatError on bad magic, version mismatch, truncation or trailing data.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies parameter values from `source` into `target`; topologies must match.
void copy_parameters(const Graph& source, const Graph& target);

}  // namespace hrfseg::nn
