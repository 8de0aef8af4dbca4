// Batch frontend: synthesize -> train -> predict/evaluate, driven by one
// JSON config. Commands:
//   scib synthesize --config cfg.json [--seed N] [--out DIR] [--KEY=VALUE...]
//   scib train      ...
//   scib predict    ... --checkpoint ckpt --input vol.sciv
//   scib evaluate   ... (sweep is an alias)
// Dotted overrides patch the config file, e.g. --train.epochs=5.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "scib/eval.hpp"
#include "scib/mc.hpp"
#include "scib/run_config.hpp"

namespace fs = std::filesystem;
using namespace scib;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;

struct CliArgs {
    std::string command;
    std::string config_path;
    std::string checkpoint_path;
    std::string input_path;
    std::vector<std::pair<std::string, std::string>> overrides;  // dotted key, raw value
};

void usage() {
    std::cerr << "usage: scib <synthesize|train|predict|evaluate|sweep> [--config FILE]\n"
                 "            [--seed N] [--out DIR] [--checkpoint FILE] [--input FILE]\n"
                 "            [--<dotted.key>=VALUE ...]\n";
}

CliArgs parse_args(int argc, char** argv) {
    CliArgs args;
    args.command = argv[1];
    for (int i = 2; i < argc; ++i) {
        std::string tok = argv[i];
        if (tok.rfind("--", 0) != 0) throw ConfigError("unexpected argument: " + tok);
        tok = tok.substr(2);
        if (tok == "help") {
            args.command = "help";
            continue;
        }
        std::string value;
        const size_t eq = tok.find('=');
        if (eq != std::string::npos) {
            value = tok.substr(eq + 1);
            tok = tok.substr(0, eq);
        } else {
            if (i + 1 >= argc) throw ConfigError("flag --" + tok + " needs a value");
            value = argv[++i];
        }
        if (tok == "config")
            args.config_path = value;
        else if (tok == "checkpoint")
            args.checkpoint_path = value;
        else if (tok == "input")
            args.input_path = value;
        else if (tok == "seed")
            args.overrides.emplace_back("seed", value);
        else if (tok == "out")
            args.overrides.emplace_back("out_dir", value);
        else
            args.overrides.emplace_back(tok, value);  // dotted config override
    }
    return args;
}

RunConfig resolve_config(const CliArgs& args) {
    std::string text = "{}";
    if (!args.config_path.empty()) {
        std::ifstream is(args.config_path);
        if (!is) throw ConfigError("cannot open config file " + args.config_path);
        std::ostringstream ss;
        ss << is.rdbuf();
        text = ss.str();
    }
    for (const auto& [key, value] : args.overrides) {
        // string-typed leaves must not be JSON-parsed into numbers
        if (key == "out_dir")
            text = apply_override(text, key, "\"" + value + "\"");
        else
            text = apply_override(text, key, value);
    }
    return parse_run_config(text);
}

// single-writer guard on the output directory
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".scib.lock") {
        std::error_code ec;
        fs::create_directories(dir, ec);
        FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) throw DataError("output directory is locked (" + path_.string() + " exists)");
        std::fclose(f);
    }
    ~DirLock() { std::remove(path_.c_str()); }

private:
    fs::path path_;
};

std::string vol_name(uint64_t index, const char* kind) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "vol_%03llu_%s.sciv", static_cast<unsigned long long>(index),
                  kind);
    return buf;
}

int cmd_synthesize(const RunConfig& cfg) {
    const fs::path out(cfg.out_dir);
    DirLock lock(out);
    Dataset ds = build_dataset(cfg.data.n_train, cfg.data.n_val, cfg.data.phantom, cfg.seed);

    nlohmann::json manifest;
    manifest["seed"] = cfg.seed;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : ds.entries) {
        const std::string in_f = vol_name(e.seed_index, "input");
        const std::string tg_f = vol_name(e.seed_index, "target");
        const std::string fg_f = vol_name(e.seed_index, "foreground");
        write_volume(e.input, (out / in_f).string());
        write_volume(e.target, (out / tg_f).string());
        write_volume(e.foreground, (out / fg_f).string());
        entries.push_back({{"index", e.seed_index},
                           {"split", e.is_validation ? "val" : "train"},
                           {"input", in_f},
                           {"target", tg_f},
                           {"foreground", fg_f},
                           {"input_divisor", e.input_divisor},
                           {"target_divisor", e.target_divisor}});
    }
    manifest["entries"] = entries;
    std::ofstream ms((out / "manifest.json").string());
    ms << manifest.dump(2) << "\n";
    std::cout << "synthesize: wrote " << ds.entries.size() << " volume triples to " << cfg.out_dir
              << "\n";
    return kExitOk;
}

Dataset load_dataset(const RunConfig& cfg) {
    const fs::path out(cfg.out_dir);
    const fs::path mpath = out / "manifest.json";
    std::ifstream is(mpath);
    if (!is)
        throw DataError("missing dataset manifest " + mpath.string() + " (run synthesize first)");
    nlohmann::json manifest;
    is >> manifest;
    Dataset ds;
    for (const auto& e : manifest.at("entries")) {
        DatasetEntry d;
        d.seed_index = e.at("index").get<uint64_t>();
        d.is_validation = e.at("split").get<std::string>() == "val";
        d.input = read_volume((out / e.at("input").get<std::string>()).string());
        d.target = read_volume((out / e.at("target").get<std::string>()).string());
        d.foreground = read_volume((out / e.at("foreground").get<std::string>()).string());
        d.input_divisor = e.at("input_divisor").get<double>();
        d.target_divisor = e.at("target_divisor").get<double>();
        ds.entries.push_back(std::move(d));
    }
    return ds;
}

int cmd_train(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg);
    const fs::path out(cfg.out_dir);
    DirLock lock(out);
    RngStream init_rng = RngStream(cfg.seed).child("model-init");
    NetworkWeights init = build_model(cfg.model, init_rng);
    TrainResult res = train(init, ds, cfg.train);

    {
        std::ofstream os((out / "loss.csv").string());
        os << "epoch,train_loss,val_loss\n";
        char buf[96];
        for (size_t i = 0; i < res.history.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, res.history[i].train_loss,
                          res.history[i].val_loss);
            os << buf;
        }
    }
    save_checkpoint(res.weights, (out / "checkpoint.ckpt").string());
    if (res.diverged) {
        std::cerr << "train: diverged (non-finite loss); last finite checkpoint retained\n";
        return kExitDiverged;
    }
    std::cout << "train: " << res.history.size() << " epochs, best epoch " << res.best_epoch
              << ", final val loss " << res.history.back().val_loss << "\n";
    return kExitOk;
}

int cmd_predict(const RunConfig& cfg, const std::string& ckpt_path,
                const std::string& input_path) {
    if (ckpt_path.empty() || input_path.empty())
        throw ConfigError("predict needs --checkpoint and --input");
    NetworkWeights w = load_checkpoint(ckpt_path);
    Volume x = read_volume(input_path);
    const fs::path out(cfg.out_dir);
    DirLock lock(out);

    const int div = w.config.divisibility();
    PredictiveOutput pred;
    if (x.height % div == 0 && x.width % div == 0 &&
        (cfg.mc.segment_height <= 0 || x.height <= cfg.mc.segment_height)) {
        pred = mc_predict(w, x, cfg.mc);
    } else {
        McConfig mc = cfg.mc;
        if (mc.segment_height <= 0) {
            // round down to the largest tile the network accepts
            mc.segment_height = x.height / div * div;
            if (mc.segment_height == 0)
                throw DataError("predict: input too small for the network");
        }
        pred = segmented_inference(w, x, mc);
    }
    export_predictive_output(pred, (out / "predict").string());
    std::cout << "predict: wrote mean/epistemic/aleatoric/scibilic maps to " << cfg.out_dir
              << "\n";
    return kExitOk;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& ckpt_override) {
    const fs::path out(cfg.out_dir);
    const std::string ckpt =
        ckpt_override.empty() ? (out / "checkpoint.ckpt").string() : ckpt_override;
    NetworkWeights w = load_checkpoint(ckpt);
    Dataset ds = load_dataset(cfg);
    auto val = ds.split(true);
    if (val.empty()) throw DataError("evaluate: dataset has no validation split");
    DirLock lock(out);

    const int side =
        std::max(1, static_cast<int>(cfg.eval.anomaly_side_frac * cfg.data.phantom.width));
    RngStream root(cfg.seed);
    std::vector<Volume> scibilic_maps;
    std::vector<Volume> truths;
    // per-case mean epistemic uncertainty inside vs outside the anomaly mask
    std::vector<std::pair<double, double>> epistemic_response;
    for (size_t vi = 0; vi < val.size(); ++vi) {
        for (int a = 0; a < cfg.eval.anomalies_per_case; ++a) {
            const uint64_t case_id = vi * static_cast<size_t>(cfg.eval.anomalies_per_case) +
                                     static_cast<size_t>(a);
            try {
                RngStream ar = root.child("anomaly").child(case_id);
                AnomalyInstance inst = insert_anomaly(val[vi]->input, val[vi]->foreground, side, ar);
                McConfig mc = cfg.mc;
                mc.seed = root.child("mc").child(case_id).root_seed();
                PredictiveOutput pred = mc_predict(w, inst.corrupted, mc);
                double in_sum = 0.0, out_sum = 0.0;
                long in_n = 0, out_n = 0;
                for (size_t i = 0; i < pred.epistemic.data.size(); ++i) {
                    if (inst.truth_mask.data[i] > 0.5f) {
                        in_sum += pred.epistemic.data[i];
                        ++in_n;
                    } else {
                        out_sum += pred.epistemic.data[i];
                        ++out_n;
                    }
                }
                epistemic_response.emplace_back(in_sum / std::max<long>(in_n, 1),
                                                out_sum / std::max<long>(out_n, 1));
                scibilic_maps.push_back(std::move(pred.scibilic));
                truths.push_back(std::move(inst.truth_mask));
            } catch (const Error& e) {
                throw DataError("evaluate: case " + std::to_string(case_id) + ": " + e.what());
            }
        }
    }
    {
        std::ofstream er((out / "epistemic_response.csv").string());
        er << "case,mean_inside,mean_outside\n";
        for (size_t i = 0; i < epistemic_response.size(); ++i) {
            char line[128];
            std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", i, epistemic_response[i].first,
                          epistemic_response[i].second);
            er << line;
        }
    }

    std::vector<std::pair<const Volume*, const Volume*>> cases;
    for (size_t i = 0; i < scibilic_maps.size(); ++i)
        cases.emplace_back(&scibilic_maps[i], &truths[i]);

    SweepConfig sweep;
    sweep.thresholds = cfg.eval.thresholds;
    sweep.iou_thresholds = cfg.eval.iou_thresholds;
    sweep.binarize_threshold = cfg.eval.binarize_threshold;
    sweep.detection_iou_ref = cfg.eval.detection_iou_ref;
    sweep.bootstrap.resamples = cfg.eval.bootstrap_resamples;
    sweep.bootstrap.level = cfg.eval.ci_level;
    sweep.seed = root.child("sweep-ci").root_seed();
    EvalReport report = threshold_sweep(cases, sweep);

    write_eval_report(report, (out / "dice_curve.csv").string(),
                      (out / "detection_curve.csv").string(), (out / "cases.csv").string());
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "evaluate: %zu cases | best mean dice %.4f at threshold %.2f | "
                  "detection rate %.2f at IoU %.2f (binarize %.2f)\n",
                  cases.size(), report.best_dice, report.best_dice_threshold,
                  report.detection_rate_ref, cfg.eval.detection_iou_ref,
                  cfg.eval.binarize_threshold);
    std::cout << buf;
    std::ofstream sm((out / "summary.txt").string());
    sm << buf;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        usage();
        return kExitUsage;
    }
    if (std::string(argv[1]) == "--help" || std::string(argv[1]) == "-h") {
        usage();
        return kExitOk;
    }
    try {
        CliArgs args = parse_args(argc, argv);
        if (args.command == "help") {
            usage();
            return kExitOk;
        }
        RunConfig cfg = resolve_config(args);
        if (args.command == "synthesize") return cmd_synthesize(cfg);
        if (args.command == "train") return cmd_train(cfg);
        if (args.command == "predict") return cmd_predict(cfg, args.checkpoint_path, args.input_path);
        if (args.command == "evaluate" || args.command == "sweep")
            return cmd_evaluate(cfg, args.checkpoint_path);
        usage();
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}
