#pragma once

#include <string>
#include <vector>

#include "scib/tensor.hpp"
#include "scib/volume.hpp"

namespace scib {

struct AnomalyInstance {
    Volume corrupted;   // source with the anomaly region zeroed
    Volume truth_mask;  // binary, filled axis-aligned square
    int offset_y = 0;
    int offset_x = 0;
    int side = 0;
};

// Places a side x side all-zero square uniformly over the offsets whose
// square lies entirely inside the foreground mask.
AnomalyInstance insert_anomaly(const Volume& source, const Volume& foreground, int side,
                               RngStream& rng);

// Min-max scaling to [0,1]; constant maps scale to all zeros.
Volume normalize_minmax(const Volume& v);

// Thresholds at >= threshold, returns the largest 4-connected component
// (all-zero mask when nothing meets the threshold). The caller is expected
// to hand in a map already normalized to [0,1].
Volume binarize_largest_component(const Volume& map, double threshold);

// Overlap scores; both-masks-empty scores 1 by convention.
double dice(const Volume& a, const Volume& b);
double iou(const Volume& a, const Volume& b);

double detection_rate(const std::vector<std::pair<const Volume*, const Volume*>>& cases,
                      double iou_threshold);

struct BootstrapConfig {
    int resamples = 1000;
    double level = 0.95;
};

// Percentile bootstrap over the mean.
std::pair<double, double> bootstrap_ci(const std::vector<double>& values, int resamples,
                                       double level, RngStream& rng);

struct CurvePoint {
    double threshold = 0.0;
    double value = 0.0;  // mean dice or detection rate
    double ci_lo = 0.0;
    double ci_hi = 0.0;
};

struct CaseResult {
    int case_index = 0;
    double dice_at_fixed = 0.0;  // at the fixed binarization threshold
    double iou_at_fixed = 0.0;
    bool detected = false;  // iou_at_fixed >= detection reference threshold
};

struct EvalReport {
    std::vector<CurvePoint> dice_curve;       // threshold = binarization threshold
    std::vector<CurvePoint> detection_curve;  // threshold = IoU threshold
    std::vector<CaseResult> cases;
    double best_dice = 0.0;
    double best_dice_threshold = 0.0;
    double detection_rate_ref = 0.0;  // at the reference IoU threshold
};

struct SweepConfig {
    std::vector<double> thresholds;      // binarization grid for the dice curve
    std::vector<double> iou_thresholds;  // detection grid
    double binarize_threshold = 0.15;    // fixed threshold for detection
    double detection_iou_ref = 0.1;
    BootstrapConfig bootstrap;
    uint64_t seed = 0;
};

// Scibilic maps are min-max normalized per volume before any thresholding.
EvalReport threshold_sweep(const std::vector<std::pair<const Volume*, const Volume*>>& cases,
                           const SweepConfig& config);

// CSV emitters: dice curve (threshold,mean_dice,ci_lo,ci_hi), detection
// curve (iou_threshold,rate,ci_lo,ci_hi), per-case detail.
void write_eval_report(const EvalReport& report, const std::string& dice_csv,
                       const std::string& detection_csv, const std::string& cases_csv);

}  // namespace scib
