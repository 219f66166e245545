#include "hrfseg/lrp.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "hrfseg/error.hpp"
#include "hrfseg/io/binary.hpp"

namespace hrfseg::lrp {

RelevanceMap relevance_map(const models::Model& model, const Tensor& raw, double eps) {
  if (!model.calibrated()) {
    throw StateError("relevance map requested from a model without training statistics");
  }
  if (raw.rank() != 2) throw ShapeError("relevance map: expected a [rows, cols] image");
  return model.relevance(raw, eps);
}

double conservation_error(const RelevanceMap& m) {
  double total = 0.0;
  for (double v : m.map.storage()) total += v;
  return std::abs(total + m.absorbed - m.source);
}

namespace {
std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}
}  // namespace

void write_relevance(const std::filesystem::path& stem, const RelevanceMap& m, const std::string& model_id) {
  const auto rel = with_suffix(stem, ".rel");
  std::ofstream os(rel, std::ios::binary);
  if (!os) throw ArgumentError(rel.string() + ": cannot open for writing");
  for (double v : m.map.storage()) io::write_le(os, static_cast<float>(v));
  if (!os) throw ArgumentError(rel.string() + ": write failed");

  const nlohmann::json side = {{"rows", m.map.dim(0)},
                               {"cols", m.map.dim(1)},
                               {"dtype", "float32le"},
                               {"source", m.source},
                               {"absorbed", m.absorbed},
                               {"model_id", model_id}};
  std::ofstream js(with_suffix(stem, ".json"));
  js << side.dump(2) << '\n';
}

RelevanceMap read_relevance(const std::filesystem::path& stem) {
  const auto jpath = with_suffix(stem, ".json");
  std::ifstream js(jpath);
  if (!js) throw FormatError(jpath.string() + ": missing sidecar");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(jpath.string() + ": " + e.what());
  }
  const auto rows = side.at("rows").get<std::size_t>();
  const auto cols = side.at("cols").get<std::size_t>();
  RelevanceMap m;
  m.map = Tensor({rows, cols});
  m.source = side.at("source").get<double>();
  m.absorbed = side.at("absorbed").get<double>();

  const auto rel = with_suffix(stem, ".rel");
  std::ifstream is(rel, std::ios::binary);
  if (!is) throw FormatError(rel.string() + ": cannot open");
  for (double& v : m.map.storage()) v = io::read_le<float>(is, rel.string());
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(rel.string() + ": trailing bytes");
  return m;
}

}  // namespace hrfseg::lrp
