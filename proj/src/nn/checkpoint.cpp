#include "hrfseg/nn/checkpoint.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "hrfseg/error.hpp"
#include "hrfseg/io/binary.hpp"

namespace hrfseg::nn {

namespace {

constexpr std::array<char, 8> kMagic = {'H', 'R', 'F', 'C', 'K', 'P', 'T', '\0'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedGraph>& graphs,
                     const nlohmann::json& meta) {
  nlohmann::json listing = nlohmann::json::array();
  for (const auto& g : graphs) listing.push_back({{"name", g.name}, {"topology", g.graph->topology()}});
  const nlohmann::json header = {
      {"format_version", kCheckpointVersion}, {"dtype", "f64le"}, {"graphs", listing}, {"meta", meta}};
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write checkpoint " + path.string());
  os.write(kMagic.data(), kMagic.size());
  io::write_le<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& g : graphs) {
    for (const auto& p : g.graph->parameters()) io::write_array_le<double>(os, p->value.values());
  }
  if (!os) throw FormatError("failed writing checkpoint " + path.string());
}

const Graph& Checkpoint::graph(const std::string& name) const {
  for (const auto& [n, g] : graphs) {
    if (n == name) return g;
  }
  throw FormatError("checkpoint has no graph '" + name + "'");
}

Graph Checkpoint::take(const std::string& name) {
  for (auto& [n, g] : graphs) {
    if (n == name) return std::move(g);
  }
  throw FormatError("checkpoint has no graph '" + name + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string where = "checkpoint " + path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + where);
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError(where + ": bad magic bytes");
  const auto length = io::read_le<std::uint64_t>(is, where);
  if (length > (1ull << 30)) throw FormatError(where + ": implausible header length");
  std::string text(length, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(length))) throw FormatError(where + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": malformed header: " + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointVersion) {
    throw FormatError(where + ": unsupported format version " + header.value("format_version", nlohmann::json()).dump());
  }
  if (header.value("dtype", std::string()) != "f64le") throw FormatError(where + ": unsupported dtype");

  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("graphs")) {
    Graph g = Graph::from_topology(entry.at("topology"));
    for (const auto& p : g.parameters()) io::read_array_le<double>(is, p->value.values(), where);
    ckpt.graphs.emplace_back(entry.at("name").get<std::string>(), std::move(g));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(where + ": trailing bytes after parameters");
  return ckpt;
}

void copy_parameters(const Graph& source, const Graph& target) {
  if (source.topology() != target.topology()) throw ShapeError("copy_parameters: graph topologies differ");
  auto src = source.parameters();
  auto dst = target.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
}

}  // namespace hrfseg::nn
