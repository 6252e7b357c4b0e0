#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "dfl/boxgeom.hpp"

namespace dfl {

struct MatchResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::vector<bool> det_is_tp;    // per detection, in input order
  std::vector<int> det_gt;        // matched gt index or -1
  std::vector<bool> gt_matched;   // per ground truth
};

struct Rates {
  double rr = 0;
  double pr = 0;
  double f1 = 0;
};

struct CurveRow {
  double iou = 0;
  double rr = 0;
  double pr = 0;
};

struct EvalReport {
  double rr = 0;
  double pr = 0;
  double f1 = 0;
  double operating_iou = 0.3;
  std::vector<CurveRow> curve;
};

// Greedy score-ordered matching: detections in descending score order (ties
// by input order) each take the unmatched ground truth of highest IoU when
// that IoU is >= threshold. One detection matches at most one gt and vice
// versa.
MatchResult match_detections(std::span<const Detection> dets,
                             std::span<const Box> gts, double iou_threshold);

// rr = TP/(TP+FN), pr = TP/(TP+FP), f1 = 2 rr pr / (rr + pr); 0/0 -> 0.
Rates prf1(const MatchResult& m);

// One row per threshold, each from an independent matching pass.
std::vector<CurveRow> iou_sweep(std::span<const Detection> dets,
                                std::span<const Box> gts,
                                std::span<const double> thresholds);

// 0.05, 0.10, ..., 0.95
std::vector<double> default_iou_thresholds();

// Per-image matching with an ordered count reduction, at the operating
// threshold and across the sweep grid.
EvalReport evaluate_dataset(std::span<const std::vector<Detection>> dets,
                            std::span<const std::vector<Box>> gts,
                            double operating_iou,
                            std::span<const double> thresholds);

// CSV: header "iou,recall,precision", 6 decimal places, LF endings.
void write_curve_csv(const EvalReport& report,
                     const std::filesystem::path& path);

// Polyline plot of recall and precision against IoU; byte-deterministic for
// a fixed report.
void write_curve_svg(const EvalReport& report,
                     const std::filesystem::path& path);

}  // namespace dfl
