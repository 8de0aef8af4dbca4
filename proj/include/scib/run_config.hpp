#pragma once

#include <string>
#include <vector>

#include "scib/mc.hpp"
#include "scib/phantom.hpp"
#include "scib/trainer.hpp"
#include "scib/unet.hpp"

namespace scib {

struct EvalConfig {
    std::vector<double> thresholds = {0.02, 0.05, 0.10, 0.15, 0.20, 0.30,
                                      0.40, 0.50, 0.60, 0.75, 0.90};
    std::vector<double> iou_thresholds = {0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    double binarize_threshold = 0.15;
    double detection_iou_ref = 0.1;
    int anomalies_per_case = 5;
    double anomaly_side_frac = 0.25;  // of image width
    int bootstrap_resamples = 1000;
    double ci_level = 0.95;
};

struct DataConfig {
    int n_train = 16;
    int n_val = 5;
    PhantomSpec phantom;
};

// One config file drives the whole pipeline; all randomness flows from the
// global seed through (seed, label) stream derivation.
struct RunConfig {
    uint64_t seed = 1234;
    std::string out_dir = "out";
    DataConfig data;
    UNetConfig model;
    TrainConfig train;
    McConfig mc;
    EvalConfig eval;
};

// Strict JSON parsing: unknown keys are rejected naming the offending key.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& config);

// Applies a dotted-path override ("train.epochs=5") onto raw JSON text.
std::string apply_override(const std::string& json_text, const std::string& dotted_key,
                           const std::string& value);

}  // namespace scib
