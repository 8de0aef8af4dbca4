#include "scib/run_config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace scib {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::vector<std::string>& known,
                    const std::string& scope) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const auto& k : known)
            if (k == key) ok = true;
        if (!ok)
            throw ConfigError("config: unknown key \"" + (scope.empty() ? key : scope + "." + key) +
                              "\"");
    }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError(std::string("config: bad value for \"") + key + "\"");
        }
    }
}

void parse_phantom(const json& obj, PhantomSpec& spec) {
    reject_unknown(obj,
                   {"height", "width", "input_noise_std", "target_noise_std",
                    "band_noise_multiplier", "band_lo", "band_hi"},
                   "data.phantom");
    maybe(obj, "height", spec.height);
    maybe(obj, "width", spec.width);
    maybe(obj, "input_noise_std", spec.input_noise_std);
    maybe(obj, "target_noise_std", spec.target_noise_std);
    maybe(obj, "band_noise_multiplier", spec.band_noise_multiplier);
    maybe(obj, "band_lo", spec.band_lo);
    maybe(obj, "band_hi", spec.band_hi);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    RunConfig cfg;
    reject_unknown(root, {"seed", "out_dir", "data", "model", "train", "mc", "eval"}, "");
    maybe(root, "seed", cfg.seed);
    maybe(root, "out_dir", cfg.out_dir);

    if (root.contains("data")) {
        const json& d = root["data"];
        reject_unknown(d, {"n_train", "n_val", "phantom"}, "data");
        maybe(d, "n_train", cfg.data.n_train);
        maybe(d, "n_val", cfg.data.n_val);
        if (d.contains("phantom")) parse_phantom(d["phantom"], cfg.data.phantom);
    }
    if (root.contains("model")) {
        const json& m = root["model"];
        reject_unknown(m, {"levels", "base_channels", "dropout_rate", "input_channels"}, "model");
        maybe(m, "levels", cfg.model.levels);
        maybe(m, "base_channels", cfg.model.base_channels);
        maybe(m, "dropout_rate", cfg.model.dropout_rate);
        maybe(m, "input_channels", cfg.model.input_channels);
    }
    if (root.contains("train")) {
        const json& t = root["train"];
        reject_unknown(t,
                       {"learning_rate", "beta1", "beta2", "weight_decay", "epsilon", "batch_size",
                        "epochs", "batches_per_epoch", "patch_h", "patch_w"},
                       "train");
        maybe(t, "learning_rate", cfg.train.optimizer.learning_rate);
        maybe(t, "beta1", cfg.train.optimizer.beta1);
        maybe(t, "beta2", cfg.train.optimizer.beta2);
        maybe(t, "weight_decay", cfg.train.optimizer.weight_decay);
        maybe(t, "epsilon", cfg.train.optimizer.epsilon);
        maybe(t, "batch_size", cfg.train.batch_size);
        maybe(t, "epochs", cfg.train.epochs);
        maybe(t, "batches_per_epoch", cfg.train.batches_per_epoch);
        maybe(t, "patch_h", cfg.train.patch_h);
        maybe(t, "patch_w", cfg.train.patch_w);
    }
    if (root.contains("mc")) {
        const json& m = root["mc"];
        reject_unknown(m,
                       {"samples", "scibilic_epsilon", "segment_overlap", "segment_height"}, "mc");
        maybe(m, "samples", cfg.mc.samples);
        maybe(m, "scibilic_epsilon", cfg.mc.scibilic_epsilon);
        maybe(m, "segment_overlap", cfg.mc.segment_overlap);
        maybe(m, "segment_height", cfg.mc.segment_height);
    }
    if (root.contains("eval")) {
        const json& e = root["eval"];
        reject_unknown(e,
                       {"thresholds", "iou_thresholds", "binarize_threshold", "detection_iou_ref",
                        "anomalies_per_case", "anomaly_side_frac", "bootstrap_resamples",
                        "ci_level"},
                       "eval");
        maybe(e, "thresholds", cfg.eval.thresholds);
        maybe(e, "iou_thresholds", cfg.eval.iou_thresholds);
        maybe(e, "binarize_threshold", cfg.eval.binarize_threshold);
        maybe(e, "detection_iou_ref", cfg.eval.detection_iou_ref);
        maybe(e, "anomalies_per_case", cfg.eval.anomalies_per_case);
        maybe(e, "anomaly_side_frac", cfg.eval.anomaly_side_frac);
        maybe(e, "bootstrap_resamples", cfg.eval.bootstrap_resamples);
        maybe(e, "ci_level", cfg.eval.ci_level);
    }

    // the trainer and mc draw their seeds from the global one
    cfg.train.seed = cfg.seed;
    cfg.mc.seed = cfg.seed;
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
    json root;
    root["seed"] = cfg.seed;
    root["out_dir"] = cfg.out_dir;
    root["data"] = {{"n_train", cfg.data.n_train},
                    {"n_val", cfg.data.n_val},
                    {"phantom",
                     {{"height", cfg.data.phantom.height},
                      {"width", cfg.data.phantom.width},
                      {"input_noise_std", cfg.data.phantom.input_noise_std},
                      {"target_noise_std", cfg.data.phantom.target_noise_std},
                      {"band_noise_multiplier", cfg.data.phantom.band_noise_multiplier},
                      {"band_lo", cfg.data.phantom.band_lo},
                      {"band_hi", cfg.data.phantom.band_hi}}}};
    root["model"] = {{"levels", cfg.model.levels},
                     {"base_channels", cfg.model.base_channels},
                     {"dropout_rate", cfg.model.dropout_rate},
                     {"input_channels", cfg.model.input_channels}};
    root["train"] = {{"learning_rate", cfg.train.optimizer.learning_rate},
                     {"beta1", cfg.train.optimizer.beta1},
                     {"beta2", cfg.train.optimizer.beta2},
                     {"weight_decay", cfg.train.optimizer.weight_decay},
                     {"epsilon", cfg.train.optimizer.epsilon},
                     {"batch_size", cfg.train.batch_size},
                     {"epochs", cfg.train.epochs},
                     {"batches_per_epoch", cfg.train.batches_per_epoch},
                     {"patch_h", cfg.train.patch_h},
                     {"patch_w", cfg.train.patch_w}};
    root["mc"] = {{"samples", cfg.mc.samples},
                  {"scibilic_epsilon", cfg.mc.scibilic_epsilon},
                  {"segment_overlap", cfg.mc.segment_overlap},
                  {"segment_height", cfg.mc.segment_height}};
    root["eval"] = {{"thresholds", cfg.eval.thresholds},
                    {"iou_thresholds", cfg.eval.iou_thresholds},
                    {"binarize_threshold", cfg.eval.binarize_threshold},
                    {"detection_iou_ref", cfg.eval.detection_iou_ref},
                    {"anomalies_per_case", cfg.eval.anomalies_per_case},
                    {"anomaly_side_frac", cfg.eval.anomaly_side_frac},
                    {"bootstrap_resamples", cfg.eval.bootstrap_resamples},
                    {"ci_level", cfg.eval.ci_level}};
    return root.dump(2);
}

std::string apply_override(const std::string& json_text, const std::string& dotted_key,
                           const std::string& value) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    json* node = &root;
    size_t pos = 0;
    std::string key = dotted_key;
    while ((pos = key.find('.')) != std::string::npos) {
        const std::string head = key.substr(0, pos);
        node = &(*node)[head];
        key = key.substr(pos + 1);
    }
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // plain string
    }
    (*node)[key] = parsed;
    return root.dump();
}

}  // namespace scib
