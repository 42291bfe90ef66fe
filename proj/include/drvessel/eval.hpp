#pragma once

// Thresholding, confusion counts, accuracy/sensitivity/specificity and ROC/AUC.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "drvessel/error.hpp"
#include "drvessel/imgio.hpp"

namespace drvessel {

/// A metric whose denominator is zero.
struct UndefinedMetricError : Error {
    using Error::Error;
};

/// 1 where prob >= t.
inline MaskImage apply_threshold(const GrayImage& prob, double t)
{
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("apply_threshold: threshold must lie in [0,1]");
    MaskImage m(prob.width, prob.height);
    for (std::size_t i = 0; i < prob.size(); ++i) m.pixels[i] = prob.pixels[i] >= t ? 1 : 0;
    return m;
}

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o)
    {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(const MaskImage& pred, const MaskImage& truth, const MaskImage* roi = nullptr)
{
    if (pred.width != truth.width || pred.height != truth.height)
        throw ShapeError("confusion: prediction and truth dimensions differ");
    if (roi && (roi->width != truth.width || roi->height != truth.height))
        throw ShapeError("confusion: roi dimensions differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (roi && !roi->pixels[i]) continue;
        const bool p = pred.pixels[i], t = truth.pixels[i];
        if (p && t) ++c.tp;
        else if (p) ++c.fp;
        else if (t) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// Empty optional marks a zero denominator.
struct Metrics {
    std::optional<double> acc, sen, spe;
};

inline Metrics metrics(const ConfusionCounts& c)
{
    if (c.total() == 0) throw UndefinedMetricError("metrics: no evaluated pixels");
    const auto ratio = [](std::uint64_t num, std::uint64_t den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    return {ratio(c.tp + c.tn, c.total()), ratio(c.tp, c.tp + c.fn), ratio(c.tn, c.tn + c.fp)};
}

struct RocCurve {
    std::vector<double> thresholds; ///< descending; entry i produced fpr[i+1], tpr[i+1]
    std::vector<double> fpr;        ///< starts at 0, ends at 1
    std::vector<double> tpr;
};

struct RocResult {
    RocCurve curve;
    double auc = 0.0;
};

/// ROC swept over unique score thresholds, AUC by the trapezoidal rule.
/// Tied scores move both rates together, which counts ties as one half.
inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels)
{
    if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
    std::uint64_t pos = 0;
    for (auto l : labels) pos += l ? 1 : 0;
    const std::uint64_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw UndefinedMetricError("roc_auc: AUC undefined without both classes");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocResult r;
    r.curve.fpr.push_back(0.0);
    r.curve.tpr.push_back(0.0);
    std::uint64_t tp = 0, fp = 0;
    double area = 0.0; // in units of pos*neg
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        std::uint64_t dtp = 0, dfp = 0;
        for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? dtp : dfp) += 1;
        area += static_cast<double>(dfp) * (static_cast<double>(tp) + 0.5 * static_cast<double>(dtp));
        tp += dtp;
        fp += dfp;
        r.curve.thresholds.push_back(s);
        r.curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(neg));
        r.curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(pos));
    }
    r.auc = area / (static_cast<double>(pos) * static_cast<double>(neg));
    return r;
}

/// Area under a piecewise-linear curve through the given points.
inline double trapezoid_area(const RocCurve& c)
{
    double a = 0.0;
    for (std::size_t i = 1; i < c.fpr.size(); ++i) a += (c.fpr[i] - c.fpr[i - 1]) * (c.tpr[i] + c.tpr[i - 1]) / 2.0;
    return a;
}

inline std::string format_metric(const std::optional<double>& v)
{
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return buf;
}

/// Pixel-level evaluation of probability maps, pooled over all images.
struct Evaluation {
    ConfusionCounts counts;
    Metrics metrics;
    std::optional<double> auc;

    std::string line() const
    {
        return format_metric(metrics.acc) + " " + format_metric(metrics.sen) + " " + format_metric(metrics.spe) + " " +
               format_metric(auc);
    }
};

struct EvalItem {
    GrayImage prob;
    MaskImage truth;
    std::optional<MaskImage> roi;
};

inline Evaluation evaluate(const std::vector<EvalItem>& items, double threshold)
{
    Evaluation e;
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    for (const auto& it : items) {
        if (it.prob.width != it.truth.width || it.prob.height != it.truth.height)
            throw ShapeError("evaluate: probability map and truth dimensions differ");
        const MaskImage* roi = it.roi ? &*it.roi : nullptr;
        e.counts += confusion(apply_threshold(it.prob, threshold), it.truth, roi);
        for (std::size_t i = 0; i < it.prob.size(); ++i) {
            if (roi && !roi->pixels[i]) continue;
            scores.push_back(it.prob.pixels[i]);
            labels.push_back(it.truth.pixels[i]);
        }
    }
    e.metrics = metrics(e.counts);
    try {
        e.auc = roc_auc(scores, labels).auc;
    } catch (const UndefinedMetricError&) {
        e.auc.reset();
    }
    return e;
}

} // namespace drvessel
