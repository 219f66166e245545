#include "hrfseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "hrfseg/error.hpp"
#include "hrfseg/lrp.hpp"

namespace hrfseg::eval {

namespace {

void require_sizes(const std::vector<double>& s, const std::vector<int>& l) {
  if (s.size() != l.size()) throw ArgumentError("metric: scores and labels differ in length");
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require_sizes(scores, labels);
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Rank-sum with midranks for tied groups; sums stay in integer halves.
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 1);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] > 0) {
        pos_rank_sum += mid;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw MetricError("AUROC needs both classes (positives " + std::to_string(pos) + ", negatives " + std::to_string(neg) + ")");
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  require_sizes(scores, labels);
  std::size_t total_pos = 0;
  for (int l : labels) total_pos += l > 0;
  if (total_pos == 0) throw MetricError("average precision needs at least one positive");
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) tp += labels[idx[j++]] > 0;
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    ap += (recall - prev_recall) * (static_cast<double>(tp) / static_cast<double>(j));
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double f1_binarized(const std::vector<double>& scores, const std::vector<int>& labels, double threshold,
                    bool* degenerate) {
  require_sizes(scores, labels);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool p = scores[i] >= threshold, a = labels[i] > 0;
    tp += p && a;
    fp += p && !a;
    fn += !p && a;
  }
  if (degenerate) *degenerate = tp + fp + fn == 0;
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

double dice(const Mask& pred, const Mask& gt) {
  const std::size_t a = pred.count(), b = gt.count();
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(intersection_count(pred, gt)) / static_cast<double>(a + b);
}

double pixel_recall(const Mask& pred, const Mask& gt) {
  const std::size_t b = gt.count();
  if (b == 0) return pred.count() == 0 ? 1.0 : 0.0;
  return static_cast<double>(intersection_count(pred, gt)) / static_cast<double>(b);
}

double pixel_precision(const Mask& pred, const Mask& gt) {
  const std::size_t a = pred.count();
  if (a == 0) return gt.count() == 0 ? 1.0 : 0.0;
  return static_cast<double>(intersection_count(pred, gt)) / static_cast<double>(a);
}

std::vector<double> threshold_grid(const std::vector<const Tensor*>& maps, std::size_t n) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const Tensor* m : maps) {
    for (double v : m->storage()) {
      if (v > 0.0) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!(hi > 0.0) || n == 0) return {};
  if (n == 1 || lo == hi) return {hi};
  std::vector<double> grid(n);
  const double llo = std::log(lo), lhi = std::log(hi);
  for (std::size_t i = 0; i < n; ++i) {
    grid[i] = std::exp(llo + (lhi - llo) * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  grid.front() = lo;
  grid.back() = hi;
  return grid;
}

std::vector<double> dice_curve(const Tensor& map, const Mask& gt, const std::vector<double>& grid) {
  if (map.size() != gt.data.size()) throw ShapeError("dice_curve: map and mask differ in size");
  std::vector<std::pair<double, std::uint8_t>> px(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) px[i] = {map[i], gt.data[i]};
  std::sort(px.begin(), px.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> hits(px.size() + 1, 0);
  for (std::size_t i = 0; i < px.size(); ++i) hits[i + 1] = hits[i] + px[i].second;
  const std::size_t g = hits.back();
  std::vector<double> out;
  out.reserve(grid.size());
  for (double t : grid) {
    // Number of pixels with value >= t.
    const auto k = static_cast<std::size_t>(
        std::partition_point(px.begin(), px.end(), [t](const auto& p) { return p.first >= t; }) - px.begin());
    out.push_back(k + g == 0 ? 1.0 : 2.0 * static_cast<double>(hits[k]) / static_cast<double>(k + g));
  }
  return out;
}

namespace {

void require_pairs(const std::vector<const Tensor*>& maps, const std::vector<const Mask*>& gts) {
  if (maps.size() != gts.size()) throw ArgumentError("threshold metrics: maps and masks differ in count");
  if (maps.empty()) throw ArgumentError("threshold metrics: empty set");
}

}  // namespace

Calibration calibrate_global_threshold(const std::vector<const Tensor*>& maps, const std::vector<const Mask*>& gts,
                                       const std::vector<double>& grid) {
  require_pairs(maps, gts);
  if (grid.empty()) throw MetricError("threshold calibration: no positive relevance on the calibration set");
  std::vector<double> sum(grid.size(), 0.0);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto curve = dice_curve(*maps[i], *gts[i], grid);
    for (std::size_t k = 0; k < grid.size(); ++k) sum[k] += curve[k];
  }
  Calibration c;
  std::size_t best = 0;
  for (std::size_t k = 1; k < grid.size(); ++k) {
    const bool larger = grid[k] > grid[best];
    if (sum[k] > sum[best] || (sum[k] == sum[best] && larger)) best = k;
  }
  c.threshold = grid[best];
  c.dice = sum[best] / static_cast<double>(maps.size());
  return c;
}

double mean_threshold_dice(const std::vector<const Tensor*>& maps, const std::vector<const Mask*>& gts, double t) {
  require_pairs(maps, gts);
  double s = 0.0;
  for (std::size_t i = 0; i < maps.size(); ++i) s += dice_curve(*maps[i], *gts[i], {t})[0];
  return s / static_cast<double>(maps.size());
}

double oracle_threshold_dice(const std::vector<const Tensor*>& maps, const std::vector<const Mask*>& gts,
                             const std::vector<double>& grid) {
  require_pairs(maps, gts);
  if (grid.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const auto curve = dice_curve(*maps[i], *gts[i], grid);
    s += *std::max_element(curve.begin(), curve.end());
  }
  return s / static_cast<double>(maps.size());
}

namespace {

struct ScanRelevance {
  std::vector<Tensor> maps;
  std::vector<Mask> gts;
};

ScanRelevance positive_relevance(const models::Model& model, const std::vector<const synth::Scan*>& scans, double eps) {
  ScanRelevance r;
  for (const auto* s : scans) {
    if (!s->positive()) continue;
    r.maps.push_back(lrp::relevance_map(model, s->image, eps).map);
    r.gts.push_back(s->annotation.all());
  }
  return r;
}

template <typename T>
std::vector<const T*> pointers(const std::vector<T>& v) {
  std::vector<const T*> out;
  for (const auto& x : v) out.push_back(&x);
  return out;
}

}  // namespace

ModelReport evaluate_model(const models::Model& model, const std::vector<const synth::Scan*>& val,
                           const std::vector<const synth::Scan*>& test, prompt::Segmenter& segmenter,
                           const ReportConfig& config) {
  if (config.iterations.empty()) throw ArgumentError("report: no iteration counts");
  ModelReport out;
  out.model = std::string(models::model_name(model.kind()));
  out.task = std::string(models::head_name(model.head()));

  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto* s : test) {
    scores.push_back(model.predict(s->image).positivity);
    labels.push_back(s->positive() ? 1 : 0);
  }
  // Regression positivity is a count; one focus is the natural cut.
  const double cut = model.head() == models::HeadKind::Regression ? 1.0 : 0.5;
  out.classification = {auroc(scores, labels), average_precision(scores, labels), f1_binarized(scores, labels, cut)};

  // Masks accumulate, so the prefix of the longest run is the shorter run.
  const std::size_t kmax = *std::max_element(config.iterations.begin(), config.iterations.end());
  iterate::IterConfig ic = config.iterate;
  ic.max_iter = kmax;
  std::vector<iterate::DetectionSet> runs;
  for (const auto* s : test) {
    runs.push_back(iterate::run_iterative(s->image, model, segmenter, ic));
    out.segmenter_errors += runs.back().error;
  }
  for (std::size_t k : config.iterations) {
    Segmentation seg;
    seg.iterations = k;
    std::size_t npos = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto* s = test[i];
      Mask pred(s->annotation.rows, s->annotation.cols);
      const auto& det = runs[i].detections;
      for (std::size_t d = 0; d < std::min(k, det.size()); ++d) merge_into(pred, det[d].mask);
      const Mask gt = s->annotation.all();
      const double d = dice(pred, gt);
      seg.dice_all += d;
      if (s->positive()) {
        ++npos;
        seg.dice_positive += d;
        seg.recall += pixel_recall(pred, gt);
        seg.precision += pixel_precision(pred, gt);
      }
    }
    seg.dice_all /= static_cast<double>(std::max<std::size_t>(test.size(), 1));
    const double np = static_cast<double>(std::max<std::size_t>(npos, 1));
    seg.dice_positive /= np;
    seg.recall /= np;
    seg.precision /= np;
    out.segmentation.push_back(seg);
  }

  const ScanRelevance vr = positive_relevance(model, val, ic.eps);
  const ScanRelevance tr = positive_relevance(model, test, ic.eps);
  const auto vmaps = pointers(vr.maps), tmaps = pointers(tr.maps);
  const auto vgts = pointers(vr.gts), tgts = pointers(tr.gts);
  const Calibration cal = calibrate_global_threshold(vmaps, vgts);
  out.ablation.threshold = cal.threshold;
  out.ablation.val_dice = cal.dice;
  out.ablation.test_dice = mean_threshold_dice(tmaps, tgts, cal.threshold);
  out.ablation.oracle_dice = oracle_threshold_dice(tmaps, tgts, threshold_grid(tmaps));
  for (std::size_t j = 0; j < config.iterations.size(); ++j) {
    if (config.iterations[j] == kmax) out.ablation.segmenter_dice = out.segmentation[j].dice_positive;
  }
  return out;
}

Report build_report(const std::vector<const models::Model*>& models, const std::vector<const synth::Scan*>& val,
                    const std::vector<const synth::Scan*>& test, prompt::Segmenter& segmenter,
                    const ReportConfig& config) {
  Report r;
  r.val_scans = val.size();
  r.test_scans = test.size();
  for (const auto* m : models) r.rows.push_back(evaluate_model(*m, val, test, segmenter, config));
  return r;
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Published full-scale values: classification (AUROC, AP, F1), segmentation
// after 1 and 6 iterations (Dice, recall, precision), and threshold ablation
// (threshold, val, test, oracle, segmenter Dice).
struct Reference {
  double cls[3];
  double seg1[3];
  double seg6[3];
  double abl[5];
};

const std::map<std::pair<std::string, std::string>, Reference>& references() {
  static const std::map<std::pair<std::string, std::string>, Reference> refs = {
      {{"cct", "binary"}, {{0.90, 0.70, 0.64}, {0.33, 0.35, 0.47}, {0.33, 0.42, 0.37}, {0.0037, 0.16, 0.16, 0.35, 0.33}}},
      {{"cct", "three_class"}, {{0.92, 0.74, 0.65}, {0.29, 0.30, 0.41}, {0.31, 0.40, 0.36}, {0.0065, 0.14, 0.11, 0.31, 0.31}}},
      {{"cct", "regression"}, {{0.90, 0.58, 0.60}, {0.22, 0.25, 0.29}, {0.21, 0.35, 0.22}, {0.0001, 0.06, 0.06, 0.21, 0.21}}},
      {{"mil", "binary"}, {{0.86, 0.58, 0.53}, {0.11, 0.09, 0.23}, {0.13, 0.12, 0.23}, {0.0025, 0.11, 0.11, 0.19, 0.13}}},
      {{"mil", "three_class"}, {{0.86, 0.58, 0.51}, {0.08, 0.06, 0.19}, {0.08, 0.07, 0.18}, {0.0013, 0.10, 0.03, 0.15, 0.08}}},
      {{"mil", "regression"}, {{0.85, 0.42, 0.41}, {0.05, 0.04, 0.13}, {0.07, 0.07, 0.13}, {0.0007, 0.05, 0.01, 0.08, 0.07}}},
  };
  return refs;
}

}  // namespace

void write_report_csv(const std::filesystem::path& path, const Report& r) {
  std::ofstream os(path);
  if (!os) throw ArgumentError(path.string() + ": cannot open for writing");
  os << "model,task,block,metric,value\n";
  for (const auto& m : r.rows) {
    auto row = [&](const std::string& block, const char* metric, double v) {
      os << m.model << ',' << m.task << ',' << block << ',' << metric << ',' << num(v) << '\n';
    };
    row("classification", "auroc", m.classification.auroc);
    row("classification", "average_precision", m.classification.ap);
    row("classification", "f1", m.classification.f1);
    for (const auto& s : m.segmentation) {
      const std::string b = "segmentation@" + std::to_string(s.iterations);
      row(b, "dice_positive", s.dice_positive);
      row(b, "dice_all", s.dice_all);
      row(b, "recall", s.recall);
      row(b, "precision", s.precision);
    }
    row("threshold_ablation", "threshold", m.ablation.threshold);
    row("threshold_ablation", "val_dice", m.ablation.val_dice);
    row("threshold_ablation", "test_dice", m.ablation.test_dice);
    row("threshold_ablation", "oracle_test_dice", m.ablation.oracle_dice);
    row("threshold_ablation", "segmenter_dice", m.ablation.segmenter_dice);
    row("diagnostics", "segmenter_errors", static_cast<double>(m.segmenter_errors));
  }
}

void write_report_txt(const std::filesystem::path& path, const Report& r) {
  std::ofstream os(path);
  if (!os) throw ArgumentError(path.string() + ": cannot open for writing");
  os << std::fixed << std::setprecision(3);
  os << "Test scans: " << r.test_scans << "   validation scans: " << r.val_scans << "\n";
  os << "Values in brackets are published full-scale references (clinical data, 50k steps).\n\n";
  auto cell = [&](double v, const double* ref) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(3) << v;
    if (ref) c << " [" << std::setprecision(2) << *ref << "]";
    os << std::setw(14) << c.str();
  };

  os << "Classification and segmentation (Dice over scans with foci)\n";
  os << std::left << std::setw(6) << "model" << std::setw(13) << "task" << std::right;
  for (const char* h : {"AUROC", "AP", "F1"}) os << std::setw(14) << h;
  if (!r.rows.empty()) {
    for (const auto& s : r.rows.front().segmentation) {
      for (const char* h : {"Dice", "Recall", "Prec"}) os << std::setw(14) << (h + std::string("@") + std::to_string(s.iterations));
    }
  }
  os << "\n";
  for (const auto& m : r.rows) {
    const auto it = references().find({m.model, m.task});
    const Reference* ref = it == references().end() ? nullptr : &it->second;
    os << std::left << std::setw(6) << m.model << std::setw(13) << m.task << std::right;
    cell(m.classification.auroc, ref ? &ref->cls[0] : nullptr);
    cell(m.classification.ap, ref ? &ref->cls[1] : nullptr);
    cell(m.classification.f1, ref ? &ref->cls[2] : nullptr);
    for (const auto& s : m.segmentation) {
      const double* rs = !ref ? nullptr : s.iterations == 1 ? ref->seg1 : s.iterations == 6 ? ref->seg6 : nullptr;
      cell(s.dice_positive, rs ? &rs[0] : nullptr);
      cell(s.recall, rs ? &rs[1] : nullptr);
      cell(s.precision, rs ? &rs[2] : nullptr);
    }
    os << "\n";
  }

  os << "\nRelevance post-processing (Dice over scans with foci)\n";
  os << std::left << std::setw(6) << "model" << std::setw(13) << "task" << std::right;
  for (const char* h : {"Threshold", "ValDice", "TestDice", "OracleDice", "SegmDice"}) os << std::setw(14) << h;
  os << "\n";
  for (const auto& m : r.rows) {
    const auto it = references().find({m.model, m.task});
    const Reference* ref = it == references().end() ? nullptr : &it->second;
    os << std::left << std::setw(6) << m.model << std::setw(13) << m.task << std::right;
    const double v[5] = {m.ablation.threshold, m.ablation.val_dice, m.ablation.test_dice, m.ablation.oracle_dice,
                         m.ablation.segmenter_dice};
    for (int k = 0; k < 5; ++k) {
      if (k == 0) {
        std::ostringstream c;
        c << std::scientific << std::setprecision(2) << v[0];
        os << std::setw(14) << c.str();
      } else {
        cell(v[k], ref ? &ref->abl[k] : nullptr);
      }
    }
    os << "\n";
  }
}

}  // namespace hrfseg::eval
