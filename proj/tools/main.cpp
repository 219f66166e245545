#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "commands.hpp"
#include "hrfseg/error.hpp"

namespace {

using namespace hrfseg;

const char* kind_of(const std::exception& e) {
  if (dynamic_cast<const ArgumentError*>(&e)) return "argument";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const StateError*>(&e)) return "state";
  if (dynamic_cast<const MetricError*>(&e)) return "metric";
  if (dynamic_cast<const DivergenceError*>(&e)) return "divergence";
  if (dynamic_cast<const SegmenterError*>(&e)) return "segmenter";
  return "internal";
}

int exit_code(const std::string& kind) {
  if (kind == "argument" || kind == "usage") return 2;
  if (kind == "format" || kind == "shape") return 3;
  if (kind == "segmenter") return 4;
  return 1;
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return exit_code(kind);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic OCT hyperreflective-foci segmentation from classifier relevance maps", "hrfseg"};
  app.require_subcommand(1);
  app.footer("Config keys (JSON file, nested by section) and their defaults:\n" + cli::describe_keys() +
             "Command-line flags override the file.");

  std::string config_path, out, segmenter;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for data, initialization and sampling");
  app.add_option("--out", out, "Output directory");
  app.add_option("--segmenter", segmenter, "builtin or bridge:<url>");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen", "Generate the synthetic dataset");
  auto* train = app.add_subcommand("train", "Train one model/task combination");
  std::string model_name, task_name;
  train->add_option("--model", model_name, "cct or mil")->required()->check(CLI::IsMember({"cct", "mil"}));
  train->add_option("--task", task_name, "binary, three_class or regression")
      ->required()
      ->check(CLI::IsMember({"binary", "three_class", "regression"}));
  auto* evalc = app.add_subcommand("eval", "Evaluate checkpoints and write report.csv / report.txt");
  std::vector<std::string> eval_ckpts;
  evalc->add_option("--checkpoint", eval_ckpts, "Checkpoint(s); default: all under <out>/models")
      ->check(CLI::ExistingFile);
  auto* infer = app.add_subcommand("infer", "Iteratively segment one image");
  std::string ckpt, image, gt;
  infer->add_option("--checkpoint", ckpt, "Trained checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--image", image, "Image (.png or dataset .img)")->required()->check(CLI::ExistingFile);
  infer->add_option("--gt", gt, "Optional ground truth (.png or dataset .msk) for the overlay")
      ->check(CLI::ExistingFile);
  auto* grid = app.add_subcommand("gridsearch", "Crop / box grid search on training foci");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
      j = cli::RunConfig::load(config_path).to_json();
    }
    if (seed) j["seed"] = *seed;
    if (!out.empty()) j["out"] = out;
    if (!segmenter.empty()) j["segmenter"] = segmenter;
    const cli::RunConfig c = cli::RunConfig::from_json(j);

    if (*gen) {
      cli::cmd_gen(c, &std::cout);
    } else if (*train) {
      cli::cmd_train(c, models::model_from_name(model_name), models::head_from_name(task_name), &std::cout);
    } else if (*evalc) {
      cli::cmd_eval(c, {eval_ckpts.begin(), eval_ckpts.end()}, &std::cout);
    } else if (*infer) {
      std::optional<std::filesystem::path> truth;
      if (!gt.empty()) truth = gt;
      const auto r = cli::cmd_infer(c, ckpt, image, truth);
      std::cout << r.detections.detections.size() << " mask(s)";
      for (const auto& f : r.files) std::cout << "\n  " << f.string();
      std::cout << "\n";
    } else if (*grid) {
      cli::cmd_gridsearch(c, &std::cout);
    }
  } catch (const std::exception& e) {
    return fail(kind_of(e), e.what());
  }
  return 0;
}
