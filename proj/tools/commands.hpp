#pragma once

// Subcommand implementations, callable in-process.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include "hrfseg/eval.hpp"
#include "hrfseg/io/png.hpp"
#include "hrfseg/iterate.hpp"
#include "hrfseg/prompt.hpp"
#include "hrfseg/run_config.hpp"

namespace hrfseg::cli {

// `log` receives human-readable progress; nullptr silences it.
std::filesystem::path cmd_gen(const RunConfig& c, std::ostream* log = nullptr);
std::filesystem::path cmd_train(const RunConfig& c, models::ModelKind model, models::HeadKind task,
                                std::ostream* log = nullptr);
// With no checkpoints, every *.ckpt under the model directory is evaluated.
eval::Report cmd_eval(const RunConfig& c, std::vector<std::filesystem::path> checkpoints = {},
                      std::ostream* log = nullptr);

struct InferResult {
  iterate::DetectionSet detections;
  std::vector<std::filesystem::path> files;
};
InferResult cmd_infer(const RunConfig& c, const std::filesystem::path& checkpoint, const std::filesystem::path& image,
                      const std::optional<std::filesystem::path>& ground_truth = std::nullopt);
prompt::GridResult cmd_gridsearch(const RunConfig& c, std::ostream* log = nullptr);

// Grayscale image with the prediction filled in red and the ground truth
// outlined in green.
io::Raster overlay(const Tensor& image, const Mask& predicted, const Mask* truth);

}  // namespace hrfseg::cli
