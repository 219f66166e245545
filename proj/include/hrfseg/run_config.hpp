#pragma once

// Experiment configuration shared by every command-line subcommand.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hrfseg/iterate.hpp"
#include "hrfseg/models.hpp"
#include "hrfseg/synth.hpp"
#include "hrfseg/train.hpp"

namespace hrfseg::cli {

struct RunConfig {
  std::uint64_t seed = 7;  // drives data generation, initialization and sampling
  std::string out = "run";
  std::string segmenter = "builtin";
  synth::GenParams gen;
  nlohmann::json cct = nlohmann::json::object();    // overrides on the desk CCT
  nlohmann::json train = nlohmann::json::object();  // overrides on the per-model desk schedule
  models::MILConfig mil;
  iterate::IterConfig iterate;
  std::vector<std::size_t> eval_iterations = {1, 6};
  std::vector<std::size_t> grid_crops = {32, 48, 64, 80, 96, 128};
  std::vector<std::size_t> grid_boxes = {2, 4, 8, 16};

  nlohmann::json to_json() const;
  // Every problem in `j` (unknown keys, wrong types, invalid values) is
  // collected and reported in a single ArgumentError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  models::CCTConfig cct_config(std::size_t rows, std::size_t cols) const;
  train::TrainConfig train_config(models::ModelKind m) const;

  std::filesystem::path data_dir() const { return std::filesystem::path(out) / "data"; }
  std::filesystem::path model_dir() const { return std::filesystem::path(out) / "models"; }
  std::filesystem::path checkpoint(models::ModelKind m, models::HeadKind h) const;
};

// One "key = default" line per configuration key.
std::string describe_keys();

}  // namespace hrfseg::cli
