#include "hrfseg/run_config.hpp"

#include <fstream>
#include <sstream>

#include "hrfseg/error.hpp"

namespace hrfseg::cli {
namespace {

using nlohmann::json;

json cct_defaults() {
  json c = models::CCTConfig::desk().to_json();
  c.erase("rows");  // taken from the data
  c.erase("cols");
  return c;
}

json train_defaults(models::ModelKind m) {
  json t = train::TrainConfig::desk(m).to_json();
  t.erase("seed");
  return t;
}

const char* type_name(const json& v) {
  if (v.is_boolean()) return "a boolean";
  if (v.is_number_unsigned()) return "a non-negative integer";
  if (v.is_number()) return "a number";
  if (v.is_string()) return "a string";
  if (v.is_array()) return "an array";
  return "an object";
}

bool same_kind(const json& def, const json& v) {
  if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  if (def.is_number()) return v.is_number();
  if (def.is_array()) {
    if (!v.is_array()) return false;
    for (const auto& e : v) {
      if (!def.empty() && !same_kind(def.front(), e)) return false;
    }
    return true;
  }
  return def.type() == v.type();
}

// Checks `user` against `def` key by key, appends every problem and returns
// `user` without the offending entries so later checks can still run.
json check_keys(const std::string& prefix, const json& def, const json& user, std::vector<std::string>& errors) {
  if (!user.is_object()) {
    errors.push_back((prefix.empty() ? "config" : prefix) + ": expected an object");
    return json::object();
  }
  json clean = json::object();
  for (const auto& [key, value] : user.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (!def.contains(key)) {
      errors.push_back(name + ": unknown key");
    } else if (def.at(key).is_object()) {
      clean[key] = check_keys(name, def.at(key), value, errors);
    } else if (!same_kind(def.at(key), value)) {
      errors.push_back(name + ": expected " + std::string(type_name(def.at(key))));
    } else {
      clean[key] = value;
    }
  }
  return clean;
}

json schema() {
  RunConfig c;
  json j = c.to_json();
  j["train"] = train_defaults(models::ModelKind::Cct);
  j["cct"] = cct_defaults();
  return j;
}

template <typename F>
void attempt(const std::string& what, std::vector<std::string>& errors, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    errors.push_back(msg.rfind(what, 0) == 0 ? msg : what + ": " + msg);
  }
}

}  // namespace

json RunConfig::to_json() const {
  json g = gen.to_json();
  g.erase("seed");
  return {{"seed", seed},
          {"out", out},
          {"segmenter", segmenter},
          {"gen", g},
          {"cct", cct},
          {"mil", mil.to_json()},
          {"train", train},
          {"iterate", iterate.to_json()},
          {"eval", {{"iterations", eval_iterations}}},
          {"gridsearch", {{"crops", grid_crops}, {"boxes", grid_boxes}}}};
}

RunConfig RunConfig::from_json(const json& user) {
  std::vector<std::string> errors;
  const json j = check_keys("", schema(), user, errors);
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.out = j.value("out", c.out);
  c.segmenter = j.value("segmenter", c.segmenter);
  attempt("gen", errors, [&] {
    json g = c.gen.to_json();
    if (j.contains("gen")) g.update(j["gen"]);
    c.gen = synth::GenParams::from_json(g);
    c.gen.validate();
  });
  if (j.contains("cct")) c.cct = j["cct"];
  if (j.contains("train")) c.train = j["train"];
  attempt("cct", errors, [&] { models::CCTConfig::from_json(c.cct); });
  attempt("train", errors, [&] {
    c.train_config(models::ModelKind::Cct).validate();
    c.train_config(models::ModelKind::Mil).validate();
  });
  attempt("mil", errors, [&] { c.mil = models::MILConfig::from_json(j.value("mil", json::object())); });
  attempt("iterate", errors, [&] {
    c.iterate = iterate::IterConfig::from_json(j.value("iterate", json::object()), c.iterate);
    c.iterate.validate();
  });
  if (j.contains("eval")) c.eval_iterations = j["eval"].value("iterations", c.eval_iterations);
  if (j.contains("gridsearch")) {
    c.grid_crops = j["gridsearch"].value("crops", c.grid_crops);
    c.grid_boxes = j["gridsearch"].value("boxes", c.grid_boxes);
  }
  if (c.eval_iterations.empty()) errors.push_back("eval.iterations: must not be empty");
  for (auto k : c.eval_iterations) {
    if (k == 0) errors.push_back("eval.iterations: counts must be >= 1");
  }
  if (c.grid_crops.empty() || c.grid_boxes.empty()) errors.push_back("gridsearch: crops and boxes must not be empty");
  if (c.out.empty()) errors.push_back("out: must not be empty");
  if (c.segmenter != "builtin" && c.segmenter.rfind("bridge:", 0) != 0) {
    errors.push_back("segmenter: expected builtin or bridge:<url>");
  }
  if (!errors.empty()) {
    std::string msg = "invalid config";
    for (const auto& e : errors) msg += "; " + e;
    throw ArgumentError(msg);
  }
  c.gen.seed = c.seed;
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ArgumentError(path.string() + ": cannot open config");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

models::CCTConfig RunConfig::cct_config(std::size_t rows, std::size_t cols) const {
  json c = models::CCTConfig::desk(rows, cols).to_json();
  c.update(cct);
  c["rows"] = rows;
  c["cols"] = cols;
  return models::CCTConfig::from_json(c);
}

train::TrainConfig RunConfig::train_config(models::ModelKind m) const {
  train::TrainConfig t = train::TrainConfig::from_json(train, train::TrainConfig::desk(m));
  t.seed = seed;
  return t;
}

std::filesystem::path RunConfig::checkpoint(models::ModelKind m, models::HeadKind h) const {
  return model_dir() / (std::string(models::model_name(m)) + "_" + std::string(models::head_name(h)) + ".ckpt");
}

namespace {

void describe(const std::string& prefix, const json& node, const json& mil_train, std::ostringstream& os) {
  for (const auto& [key, value] : node.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      describe(name, value, mil_train, os);
      continue;
    }
    os << "  " << name << " = " << value.dump();
    if (prefix == "train" && mil_train.at(key) != value) os << "  (mil: " << mil_train.at(key).dump() << ")";
    os << "\n";
  }
}

}  // namespace

std::string describe_keys() {
  std::ostringstream os;
  describe("", schema(), train_defaults(models::ModelKind::Mil), os);
  return os.str();
}

}  // namespace hrfseg::cli
