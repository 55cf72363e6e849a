#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "chmfl/volume.hpp"

namespace chmfl {

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
};

/// The five thresholded classification metrics. A metric with a zero
/// denominator is reported as undefined rather than 0.
struct ClassificationMetrics {
    std::optional<double> acc, sen, spe, pre, f1;
};

inline ClassificationMetrics classification_metrics(const ConfusionCounts& c) {
    ClassificationMetrics m;
    const double tp = (double)c.tp, fp = (double)c.fp, tn = (double)c.tn, fn = (double)c.fn;
    if (c.total() > 0) m.acc = (tp + tn) / (double)c.total();
    if (c.tp + c.fn > 0) m.sen = tp / (tp + fn);
    if (c.tn + c.fp > 0) m.spe = tn / (tn + fp);
    if (c.tp + c.fp > 0) m.pre = tp / (tp + fp);
    if (m.pre && m.sen && (*m.pre + *m.sen) > 0)
        m.f1 = 2.0 * *m.pre * *m.sen / (*m.pre + *m.sen);
    return m;
}

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

struct RocResult {
    double auc = 0;
    std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0) .. (1,1)
};

/// AUC via the Mann-Whitney statistic (ties count 0.5); ROC points from the
/// threshold sweep over sorted unique scores.
inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("roc_auc: scores/labels length mismatch");
    std::size_t npos = 0, nneg = 0;
    for (int l : labels) (l ? npos : nneg)++;
    if (npos == 0 || nneg == 0)
        throw std::invalid_argument("roc_auc: both classes must be present");

    double conc = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            if (scores[i] > scores[j])
                conc += 1;
            else if (scores[i] == scores[j])
                conc += 0.5;
        }
    }
    RocResult r;
    r.auc = conc / (double)(npos * nneg);

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    r.points.push_back({0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] ? tp : fp)++;
            ++i;
        }
        r.points.push_back({(double)fp / (double)nneg, (double)tp / (double)npos});
    }
    return r;
}

// ---------------------------------------------------------------------------
// segmentation metrics
// ---------------------------------------------------------------------------

struct SegMetrics {
    double dsc = 0, jaccard = 0;
    std::optional<double> voxel_acc, voxel_sen, voxel_spe;
};

inline SegMetrics segmentation_metrics(const Volume& pred, const Volume& truth) {
    if (pred.extents != truth.extents)
        throw std::invalid_argument("segmentation_metrics: extent mismatch");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
        const bool p = pred.voxels[i] != 0.0f;
        const bool t = truth.voxels[i] != 0.0f;
        if (p && t)
            ++c.tp;
        else if (p && !t)
            ++c.fp;
        else if (!p && t)
            ++c.fn;
        else
            ++c.tn;
    }
    SegMetrics m;
    const std::size_t psize = c.tp + c.fp, tsize = c.tp + c.fn;
    if (psize + tsize == 0) {
        m.dsc = 1.0;  // empty vs empty
        m.jaccard = 1.0;
    } else {
        m.dsc = 2.0 * (double)c.tp / (double)(psize + tsize);
        m.jaccard = (double)c.tp / (double)(psize + tsize - c.tp);
    }
    const auto cm = classification_metrics(c);
    m.voxel_acc = cm.acc;
    m.voxel_sen = cm.sen;
    m.voxel_spe = cm.spe;
    return m;
}

// ---------------------------------------------------------------------------
// folds
// ---------------------------------------------------------------------------

/// Partition of patient ids into k folds whose sizes differ by at most 1.
struct FoldSplit {
    std::map<std::string, std::size_t> assignment;
    std::size_t k = 0;
};

inline FoldSplit make_folds(const std::vector<std::string>& ids, std::size_t k,
                            std::uint64_t seed) {
    if (ids.size() < k) throw std::invalid_argument("make_folds: fewer ids than folds");
    if (k == 0) throw std::invalid_argument("make_folds: k must be positive");
    std::vector<std::string> shuffled = ids;
    std::mt19937_64 rng(seed);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    FoldSplit split;
    split.k = k;
    for (std::size_t i = 0; i < shuffled.size(); ++i)
        split.assignment[shuffled[i]] = i % k;
    return split;
}

// ---------------------------------------------------------------------------
// unpaired t-test
// ---------------------------------------------------------------------------

namespace stat_detail {

// Regularized incomplete beta via the Lentz continued fraction.
inline double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 200;
    constexpr double kEps = 3e-14, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

inline double inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace stat_detail

struct TTestResult {
    double t = 0;
    double df = 0;
    double p_two_sided = 1;
};

/// Equal-variance two-sample t-test.
inline TTestResult unpaired_t_test(const std::vector<double>& a,
                                   const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw std::invalid_argument("unpaired_t_test: need at least 2 samples per group");
    const double na = (double)a.size(), nb = (double)b.size();
    auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / (double)v.size();
    };
    const double ma = mean(a), mb = mean(b);
    double ssa = 0, ssb = 0;
    for (double x : a) ssa += (x - ma) * (x - ma);
    for (double x : b) ssb += (x - mb) * (x - mb);
    const double df = na + nb - 2.0;
    const double pooled = (ssa + ssb) / df;
    if (pooled <= 0) throw std::invalid_argument("unpaired_t_test: zero pooled variance");
    TTestResult r;
    r.df = df;
    r.t = (ma - mb) / std::sqrt(pooled * (1.0 / na + 1.0 / nb));
    const double x = df / (df + r.t * r.t);
    r.p_two_sided = stat_detail::inc_beta(df / 2.0, 0.5, x);
    return r;
}

}  // namespace chmfl
