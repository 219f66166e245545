#pragma once

// Classification and segmentation metrics, relevance-threshold ablation and
// the summary report.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "hrfseg/image.hpp"
#include "hrfseg/iterate.hpp"
#include "hrfseg/models.hpp"
#include "hrfseg/prompt.hpp"
#include "hrfseg/synth.hpp"

namespace hrfseg::eval {

// Mann-Whitney form; ties count one half. Throws MetricError unless both
// classes are present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);
// Sum over distinct descending score levels of (R_k - R_{k-1}) * P_k.
// Throws MetricError without positives.
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);
// F1 of (score >= threshold) against (label > 0). With no predicted and no
// actual positives the value is 1 and `degenerate` is set.
double f1_binarized(const std::vector<double>& scores, const std::vector<int>& labels, double threshold = 0.5,
                    bool* degenerate = nullptr);

// Empty/empty is 1, empty against non-empty is 0.
double dice(const Mask& pred, const Mask& gt);
double pixel_recall(const Mask& pred, const Mask& gt);
double pixel_precision(const Mask& pred, const Mask& gt);

inline constexpr std::size_t kThresholdCandidates = 200;

// Log-spaced candidates between the smallest and largest positive relevance
// over all maps. Empty when no map has a positive value.
std::vector<double> threshold_grid(const std::vector<const Tensor*>& maps, std::size_t n = kThresholdCandidates);

// Dice of (map >= t) against gt for every t in `grid`.
std::vector<double> dice_curve(const Tensor& map, const Mask& gt, const std::vector<double>& grid);

struct Calibration {
  double threshold = 0.0;
  double dice = 0.0;  // mean over the calibration set
};

// Grid point maximizing mean Dice; ties go to the larger threshold.
Calibration calibrate_global_threshold(const std::vector<const Tensor*>& maps, const std::vector<const Mask*>& gts,
                                       const std::vector<double>& grid);
inline Calibration calibrate_global_threshold(const std::vector<const Tensor*>& maps,
                                              const std::vector<const Mask*>& gts) {
  return calibrate_global_threshold(maps, gts, threshold_grid(maps));
}

double mean_threshold_dice(const std::vector<const Tensor*>& maps, const std::vector<const Mask*>& gts, double t);
// Mean over samples of each sample's best Dice on `grid`.
double oracle_threshold_dice(const std::vector<const Tensor*>& maps, const std::vector<const Mask*>& gts,
                             const std::vector<double>& grid);

struct Classification {
  double auroc = 0.0;
  double ap = 0.0;
  double f1 = 0.0;
};

struct Segmentation {
  std::size_t iterations = 0;
  double dice_positive = 0.0;  // mean over scans with foci
  double dice_all = 0.0;       // mean over every scan
  double recall = 0.0;         // mean over scans with foci
  double precision = 0.0;      // mean over scans with foci
};

struct ThresholdAblation {
  double threshold = 0.0;
  double val_dice = 0.0;
  double test_dice = 0.0;
  double oracle_dice = 0.0;
  double segmenter_dice = 0.0;
};

struct ModelReport {
  std::string model;  // "cct" / "mil"
  std::string task;   // head name
  Classification classification;
  std::vector<Segmentation> segmentation;  // one per iteration count
  ThresholdAblation ablation;
  std::size_t segmenter_errors = 0;
};

struct Report {
  std::vector<ModelReport> rows;
  std::size_t test_scans = 0;
  std::size_t val_scans = 0;
};

struct ReportConfig {
  std::vector<std::size_t> iterations = {1, 6};
  iterate::IterConfig iterate;
};

// Relevance maps are computed once per scan; positives-only sets drive the
// threshold ablation.
ModelReport evaluate_model(const models::Model& model, const std::vector<const synth::Scan*>& val,
                           const std::vector<const synth::Scan*>& test, prompt::Segmenter& segmenter,
                           const ReportConfig& config = {});

Report build_report(const std::vector<const models::Model*>& models, const std::vector<const synth::Scan*>& val,
                    const std::vector<const synth::Scan*>& test, prompt::Segmenter& segmenter,
                    const ReportConfig& config = {});

// One row per model / task / block / metric.
void write_report_csv(const std::filesystem::path& path, const Report& r);
// Aligned tables, with published full-scale reference values alongside.
void write_report_txt(const std::filesystem::path& path, const Report& r);

}  // namespace hrfseg::eval
