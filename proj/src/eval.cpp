#include "scib/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace scib {

AnomalyInstance insert_anomaly(const Volume& source, const Volume& foreground, int side,
                               RngStream& rng) {
    if (source.height != foreground.height || source.width != foreground.width)
        throw ShapeError("insert_anomaly: foreground shape mismatch");
    if (side < 1) throw ConfigError("insert_anomaly: side must be >= 1");

    // column prefix sums of the foreground for O(1) square tests
    const int H = source.height, W = source.width;
    std::vector<int> ps(static_cast<size_t>(H + 1) * (W + 1), 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            ps[static_cast<size_t>(y + 1) * (W + 1) + x + 1] =
                ps[static_cast<size_t>(y) * (W + 1) + x + 1] +
                ps[static_cast<size_t>(y + 1) * (W + 1) + x] -
                ps[static_cast<size_t>(y) * (W + 1) + x] + (foreground.at(y, x) != 0.0f ? 1 : 0);
    auto square_sum = [&](int y, int x) {
        return ps[static_cast<size_t>(y + side) * (W + 1) + x + side] -
               ps[static_cast<size_t>(y) * (W + 1) + x + side] -
               ps[static_cast<size_t>(y + side) * (W + 1) + x] +
               ps[static_cast<size_t>(y) * (W + 1) + x];
    };

    std::vector<std::pair<int, int>> valid;
    for (int y = 0; y + side <= H; ++y)
        for (int x = 0; x + side <= W; ++x)
            if (square_sum(y, x) == side * side) valid.emplace_back(y, x);
    if (valid.empty())
        throw DataError("insert_anomaly: no side-" + std::to_string(side) +
                        " square fits inside the foreground mask");

    const auto [oy, ox] = valid[rng.uniform_index(valid.size())];
    AnomalyInstance inst;
    inst.corrupted = source;
    inst.truth_mask = Volume(H, W);
    inst.offset_y = oy;
    inst.offset_x = ox;
    inst.side = side;
    for (int y = oy; y < oy + side; ++y)
        for (int x = ox; x < ox + side; ++x) {
            inst.corrupted.at(y, x) = 0.0f;
            inst.truth_mask.at(y, x) = 1.0f;
        }
    return inst;
}

Volume normalize_minmax(const Volume& v) {
    float lo = std::numeric_limits<float>::max();
    float hi = std::numeric_limits<float>::lowest();
    for (float x : v.data) {
        if (!std::isfinite(x)) throw DataError("normalize_minmax: non-finite value");
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    Volume out(v.height, v.width);
    if (hi > lo)
        for (size_t i = 0; i < v.data.size(); ++i) out.data[i] = (v.data[i] - lo) / (hi - lo);
    return out;
}

Volume binarize_largest_component(const Volume& map, double threshold) {
    const int H = map.height, W = map.width;
    std::vector<uint8_t> above(map.data.size());
    for (size_t i = 0; i < map.data.size(); ++i)
        above[i] = map.data[i] >= static_cast<float>(threshold) ? 1 : 0;

    // flood fill, 4-connectivity
    std::vector<int> label(map.data.size(), -1);
    std::vector<size_t> stack;
    int best_label = -1;
    size_t best_size = 0;
    int next_label = 0;
    for (size_t start = 0; start < above.size(); ++start) {
        if (!above[start] || label[start] >= 0) continue;
        size_t size = 0;
        stack.clear();
        stack.push_back(start);
        label[start] = next_label;
        while (!stack.empty()) {
            const size_t i = stack.back();
            stack.pop_back();
            ++size;
            const int y = static_cast<int>(i) / W;
            const int x = static_cast<int>(i) % W;
            const int ny[4] = {y - 1, y + 1, y, y};
            const int nx[4] = {x, x, x - 1, x + 1};
            for (int k = 0; k < 4; ++k) {
                if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= W) continue;
                const size_t j = static_cast<size_t>(ny[k]) * W + nx[k];
                if (above[j] && label[j] < 0) {
                    label[j] = next_label;
                    stack.push_back(j);
                }
            }
        }
        if (size > best_size) {
            best_size = size;
            best_label = next_label;
        }
        ++next_label;
    }

    Volume out(H, W);
    if (best_label >= 0)
        for (size_t i = 0; i < out.data.size(); ++i)
            out.data[i] = label[i] == best_label ? 1.0f : 0.0f;
    return out;
}

namespace {

struct OverlapCounts {
    int64_t a = 0, b = 0, both = 0;
};

OverlapCounts overlap(const Volume& a, const Volume& b) {
    if (a.height != b.height || a.width != b.width)
        throw ShapeError("dice/iou: mask shape mismatch");
    OverlapCounts c;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const bool ia = a.data[i] != 0.0f;
        const bool ib = b.data[i] != 0.0f;
        c.a += ia;
        c.b += ib;
        c.both += ia && ib;
    }
    return c;
}

}  // namespace

double dice(const Volume& a, const Volume& b) {
    const OverlapCounts c = overlap(a, b);
    if (c.a + c.b == 0) return 1.0;  // both empty: correct "no anomaly"
    return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b);
}

double iou(const Volume& a, const Volume& b) {
    const OverlapCounts c = overlap(a, b);
    const int64_t uni = c.a + c.b - c.both;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.both) / static_cast<double>(uni);
}

double detection_rate(const std::vector<std::pair<const Volume*, const Volume*>>& cases,
                      double iou_threshold) {
    if (cases.empty()) throw ConfigError("detection_rate: empty case list");
    int detected = 0;
    for (const auto& [pred, truth] : cases)
        if (iou(*pred, *truth) >= iou_threshold) ++detected;
    return static_cast<double>(detected) / static_cast<double>(cases.size());
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& values, int resamples,
                                       double level, RngStream& rng) {
    if (values.empty()) throw ConfigError("bootstrap_ci: empty values");
    if (level <= 0.0 || level >= 1.0) throw ConfigError("bootstrap_ci: level must be in (0,1)");
    const size_t n = values.size();
    std::vector<double> means(static_cast<size_t>(resamples));
    for (int r = 0; r < resamples; ++r) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += values[rng.uniform_index(n)];
        means[static_cast<size_t>(r)] = s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    auto pct = [&](double q) {
        const double pos = q * static_cast<double>(means.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, means.size() - 1);
        const double f = pos - static_cast<double>(lo);
        return means[lo] * (1.0 - f) + means[hi] * f;
    };
    return {pct((1.0 - level) / 2.0), pct((1.0 + level) / 2.0)};
}

EvalReport threshold_sweep(const std::vector<std::pair<const Volume*, const Volume*>>& cases,
                           const SweepConfig& config) {
    if (cases.empty()) throw ConfigError("threshold_sweep: empty case list");
    if (config.thresholds.empty() || config.iou_thresholds.empty())
        throw ConfigError("threshold_sweep: empty threshold grid");
    for (double t : config.thresholds)
        if (t < 0.0 || t > 1.0)
            throw ConfigError("threshold_sweep: binarization thresholds must lie in [0,1]");

    std::vector<Volume> normalized;
    normalized.reserve(cases.size());
    for (const auto& [map, truth] : cases) normalized.push_back(normalize_minmax(*map));

    RngStream root(config.seed);
    EvalReport report;
    report.best_dice = -1.0;

    RngStream dice_rng = root.child("dice-ci");
    for (double thr : config.thresholds) {
        std::vector<double> per_case;
        per_case.reserve(cases.size());
        for (size_t i = 0; i < cases.size(); ++i) {
            Volume pred = binarize_largest_component(normalized[i], thr);
            per_case.push_back(dice(pred, *cases[i].second));
        }
        double mean = 0.0;
        for (double d : per_case) mean += d;
        mean /= static_cast<double>(per_case.size());
        auto [lo, hi] = bootstrap_ci(per_case, config.bootstrap.resamples, config.bootstrap.level,
                                     dice_rng);
        report.dice_curve.push_back({thr, mean, lo, hi});
        if (mean > report.best_dice) {
            report.best_dice = mean;
            report.best_dice_threshold = thr;
        }
    }

    // detection: binarize once at the fixed threshold, then sweep the IoU grid
    std::vector<Volume> fixed_preds;
    std::vector<double> fixed_ious;
    for (size_t i = 0; i < cases.size(); ++i) {
        fixed_preds.push_back(binarize_largest_component(normalized[i], config.binarize_threshold));
        fixed_ious.push_back(iou(fixed_preds.back(), *cases[i].second));
    }
    RngStream det_rng = root.child("detect-ci");
    for (double it : config.iou_thresholds) {
        std::vector<double> indicators;
        indicators.reserve(cases.size());
        for (double v : fixed_ious) indicators.push_back(v >= it ? 1.0 : 0.0);
        double rate = 0.0;
        for (double d : indicators) rate += d;
        rate /= static_cast<double>(indicators.size());
        auto [lo, hi] = bootstrap_ci(indicators, config.bootstrap.resamples,
                                     config.bootstrap.level, det_rng);
        report.detection_curve.push_back({it, rate, lo, hi});
    }

    for (size_t i = 0; i < cases.size(); ++i) {
        CaseResult cr;
        cr.case_index = static_cast<int>(i);
        cr.dice_at_fixed = dice(fixed_preds[i], *cases[i].second);
        cr.iou_at_fixed = fixed_ious[i];
        cr.detected = fixed_ious[i] >= config.detection_iou_ref;
        report.cases.push_back(cr);
    }
    int det = 0;
    for (const auto& cr : report.cases) det += cr.detected ? 1 : 0;
    report.detection_rate_ref = static_cast<double>(det) / static_cast<double>(report.cases.size());
    return report;
}

void write_eval_report(const EvalReport& report, const std::string& dice_csv,
                       const std::string& detection_csv, const std::string& cases_csv) {
    char buf[160];
    {
        std::ofstream os(dice_csv);
        if (!os) throw DataError("eval: cannot write " + dice_csv);
        os << "threshold,mean_dice,ci_lo,ci_hi\n";
        for (const auto& p : report.dice_curve) {
            std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%.9g\n", p.threshold, p.value, p.ci_lo,
                          p.ci_hi);
            os << buf;
        }
    }
    {
        std::ofstream os(detection_csv);
        if (!os) throw DataError("eval: cannot write " + detection_csv);
        os << "iou_threshold,rate,ci_lo,ci_hi\n";
        for (const auto& p : report.detection_curve) {
            std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%.9g\n", p.threshold, p.value, p.ci_lo,
                          p.ci_hi);
            os << buf;
        }
    }
    {
        std::ofstream os(cases_csv);
        if (!os) throw DataError("eval: cannot write " + cases_csv);
        os << "case,dice_at_binarize,iou_at_binarize,detected\n";
        for (const auto& c : report.cases) {
            std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%d\n", c.case_index, c.dice_at_fixed,
                          c.iou_at_fixed, c.detected ? 1 : 0);
            os << buf;
        }
    }
}

}  // namespace scib
