#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>

#include "hrfseg/error.hpp"
#include "hrfseg/io/png.hpp"
#include "hrfseg/synth.hpp"
#include "hrfseg/train.hpp"

namespace hrfseg::cli {
namespace fs = std::filesystem;

namespace {

synth::Dataset load_data(const RunConfig& c) {
  if (!fs::exists(c.data_dir() / "manifest.json")) {
    throw ArgumentError(c.data_dir().string() + ": no dataset, run gen first");
  }
  return synth::load_dataset(c.data_dir());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ArgumentError(path.string() + ": cannot open for writing");
  os << text;
}

Tensor read_any_image(const fs::path& path) {
  if (!fs::exists(path)) throw ArgumentError(path.string() + ": no such file");
  if (path.extension() != ".png") return synth::read_image(path);
  std::ifstream is(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const io::Raster r = io::decode_png(bytes);
  Tensor t({r.rows, r.cols});
  for (std::size_t p = 0; p < r.rows * r.cols; ++p) t[p] = r.data[p * r.channels] / 255.0;
  return t;
}

Mask read_any_mask(const fs::path& path) {
  if (!fs::exists(path)) throw ArgumentError(path.string() + ": no such file");
  if (path.extension() != ".png") return synth::read_masks(path).all();
  std::ifstream is(path, std::ios::binary);
  return io::decode_mask_png(std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>()));
}

}  // namespace

fs::path cmd_gen(const RunConfig& c, std::ostream* log) {
  const synth::Dataset d = synth::generate(c.gen);
  synth::save_dataset(d, c.data_dir());
  if (log) {
    *log << "generated " << d.scans.size() << " scans in " << d.volumes.size() << " volumes ("
         << d.split.train.size() << " train / " << d.split.val.size() << " val / " << d.split.test.size()
         << " test volumes) -> " << c.data_dir().string() << "\n";
    for (const auto& w : d.warnings) *log << "warning: " << w << "\n";
  }
  return c.data_dir();
}

fs::path cmd_train(const RunConfig& c, models::ModelKind kind, models::HeadKind task, std::ostream* log) {
  const synth::Dataset d = load_data(c);
  std::vector<train::Example> examples;
  for (const auto* s : d.scans_in(d.split.train)) examples.push_back({&s->image, s->annotation.count()});
  const train::TrainConfig tc = c.train_config(kind);

  std::unique_ptr<models::Model> model;
  if (kind == models::ModelKind::Cct) {
    model = std::make_unique<models::CCTModel>(c.cct_config(d.params.rows, d.params.cols), task, c.seed);
  } else {
    model = std::make_unique<models::MILModel>(c.mil, task, c.seed);
  }
  train::TrainHooks hooks;
  if (log) {
    hooks.on_log = [&](const train::LogEntry& e) {
      *log << "step " << e.step << " loss " << e.loss << " lr " << e.lr << "\n" << std::flush;
    };
  }
  const fs::path ckpt = c.checkpoint(kind, task);
  fs::create_directories(ckpt.parent_path());
  const nlohmann::json meta = {{"seed", c.seed}, {"train", tc.to_json()}, {"data", c.gen.to_json()}};
  if (tc.checkpoint_every > 0) {
    hooks.on_checkpoint = [&](std::size_t step) {
      fs::path p = ckpt;
      p.replace_extension(".step" + std::to_string(step) + ".ckpt");
      model->save(p, meta);
    };
  }
  const train::TrainResult r = train::train(*model, examples, tc, hooks);
  model->save(ckpt, meta);
  fs::path loss = ckpt;
  loss.replace_extension(".loss.csv");
  std::ofstream os(loss);
  train::write_loss_csv(os, r.log);
  if (log) *log << "wrote " << ckpt.string() << "\n";
  return ckpt;
}

eval::Report cmd_eval(const RunConfig& c, std::vector<fs::path> checkpoints, std::ostream* log) {
  const synth::Dataset d = load_data(c);
  if (checkpoints.empty() && fs::is_directory(c.model_dir())) {
    for (const auto& e : fs::directory_iterator(c.model_dir())) {
      const auto name = e.path().filename().string();
      if (e.path().extension() == ".ckpt" && name.find(".step") == std::string::npos) checkpoints.push_back(e.path());
    }
  }
  if (checkpoints.empty()) throw ArgumentError(c.model_dir().string() + ": no checkpoints to evaluate");
  std::sort(checkpoints.begin(), checkpoints.end());
  std::vector<std::unique_ptr<models::Model>> owned;
  std::vector<const models::Model*> models;
  for (const auto& p : checkpoints) {
    owned.push_back(models::load_model(p));
    models.push_back(owned.back().get());
  }
  auto seg = prompt::make_segmenter(c.segmenter);
  const eval::ReportConfig rc{c.eval_iterations, c.iterate};
  const eval::Report r = eval::build_report(models, d.scans_in(d.split.val), d.scans_in(d.split.test), *seg, rc);
  fs::create_directories(c.out);
  eval::write_report_csv(fs::path(c.out) / "report.csv", r);
  eval::write_report_txt(fs::path(c.out) / "report.txt", r);
  if (log) *log << "wrote " << (fs::path(c.out) / "report.csv").string() << " and report.txt\n";
  return r;
}

io::Raster overlay(const Tensor& image, const Mask& predicted, const Mask* truth) {
  io::Raster r = io::gray_to_rgb(image);
  const std::size_t rows = r.rows, cols = r.cols;
  for (std::size_t i = 0; i < rows * cols; ++i) {
    if (!predicted.data[i]) continue;
    std::uint8_t* px = &r.data[3 * i];
    px[0] = static_cast<std::uint8_t>((px[0] + 255) / 2);
    px[1] = static_cast<std::uint8_t>(px[1] / 2);
    px[2] = static_cast<std::uint8_t>(px[2] / 2);
  }
  if (truth) {
    for (std::size_t y = 0; y < rows; ++y) {
      for (std::size_t x = 0; x < cols; ++x) {
        if (!(*truth)(y, x)) continue;
        const bool edge = y == 0 || x == 0 || y + 1 == rows || x + 1 == cols || !(*truth)(y - 1, x) ||
                          !(*truth)(y + 1, x) || !(*truth)(y, x - 1) || !(*truth)(y, x + 1);
        if (!edge) continue;
        std::uint8_t* px = &r.data[3 * (y * cols + x)];
        px[0] = 0;
        px[1] = 255;
        px[2] = 0;
      }
    }
  }
  return r;
}

InferResult cmd_infer(const RunConfig& c, const fs::path& checkpoint, const fs::path& image,
                      const std::optional<fs::path>& ground_truth) {
  const auto model = models::load_model(checkpoint);
  const Tensor img = read_any_image(image);
  std::optional<Mask> gt;
  if (ground_truth) {
    gt = read_any_mask(*ground_truth);
    if (gt->rows != image_rows(img) || gt->cols != image_cols(img)) {
      throw ShapeError("infer: ground truth and image sizes differ");
    }
  }
  auto seg = prompt::make_segmenter(c.segmenter);
  InferResult out;
  out.detections = iterate::run_iterative(img, *model, *seg, c.iterate);
  if (out.detections.error) throw SegmenterError(out.detections.error_message);

  const fs::path dir = fs::path(c.out) / "infer";
  fs::create_directories(dir);
  const std::string stem = image.stem().string();
  const Mask all = out.detections.combined(image_rows(img), image_cols(img));
  nlohmann::json summary = {{"image", image.string()},
                            {"checkpoint", checkpoint.string()},
                            {"positivity", out.detections.scores},
                            {"detections", nlohmann::json::array()}};
  for (std::size_t k = 0; k < out.detections.detections.size(); ++k) {
    const auto& det = out.detections.detections[k];
    const fs::path p = dir / (stem + "_mask" + std::to_string(k + 1) + ".png");
    write_text(p, io::encode_mask_png(det.mask));
    out.files.push_back(p);
    summary["detections"].push_back(
        {{"prompt", {det.prompt.row, det.prompt.col}}, {"positivity", det.score}, {"area", det.mask.count()}});
  }
  if (gt) summary["dice"] = eval::dice(all, *gt);
  const fs::path combined = dir / (stem + "_mask.png");
  write_text(combined, io::encode_mask_png(all));
  const fs::path ov = dir / (stem + "_overlay.png");
  io::write_png(ov, overlay(img, all, gt ? &*gt : nullptr));
  const fs::path js = dir / (stem + "_detections.json");
  write_text(js, summary.dump(2) + "\n");
  out.files.insert(out.files.end(), {combined, ov, js});
  return out;
}

prompt::GridResult cmd_gridsearch(const RunConfig& c, std::ostream* log) {
  const synth::Dataset d = load_data(c);
  auto seg = prompt::make_segmenter(c.segmenter);
  const prompt::GridResult g = prompt::gridsearch_crop_box(d.scans_in(d.split.train), *seg, c.grid_crops, c.grid_boxes);
  fs::create_directories(c.out);
  std::ofstream os(fs::path(c.out) / "gridsearch.csv");
  os.precision(17);
  os << "crop,box,mean_dice\n";
  for (std::size_t i = 0; i < g.crops.size(); ++i) {
    for (std::size_t j = 0; j < g.boxes.size(); ++j) {
      os << g.crops[i] << ',' << g.boxes[j] << ',';
      if (std::isnan(g.dice[i][j])) {
        os << "nan\n";
      } else {
        os << g.dice[i][j] << '\n';
      }
    }
  }
  if (log) {
    *log << g.foci << " training foci; best crop " << g.best_crop << ", box " << g.best_box << " -> "
         << (fs::path(c.out) / "gridsearch.csv").string() << "\n";
  }
  return g;
}

}  // namespace hrfseg::cli
