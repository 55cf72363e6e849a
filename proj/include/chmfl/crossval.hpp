#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "chmfl/metrics.hpp"
#include "chmfl/network.hpp"
#include "chmfl/optim.hpp"

namespace chmfl {

/// Metrics for one evaluated cohort (a fold or the pooled dataset).
struct MetricsReport {
    ConfusionCounts confusion;
    ClassificationMetrics cls;
    std::optional<double> auc;
    std::vector<std::pair<double, double>> roc_points;
    std::optional<SegMetrics> seg;  // averaged over patients
    bool auc_undefined_flagged = false;
};

struct PatientEval {
    std::string id;
    int label = 0;
    double dm_probability = 0;  // softmax class-1 output
    int dm_decision = 0;        // threshold 0.5
    SegMetrics seg;
};

/// Run the model over a set of examples. The segmentation decision is the
/// per-voxel argmax.
///
/// With batch size 1, training normalizes every sample by its own spatial
/// statistics; evaluating against stale running averages would shift each
/// feature map relative to what the heads were fitted on and miscalibrate the
/// decision threshold. Evaluation therefore also normalizes per sample
/// (dropout disabled) and restores the running buffers it would otherwise
/// perturb, so the call has no net side effect and stays deterministic.
template <typename T>
std::vector<PatientEval> evaluate_model(const ModelParams<T>& params,
                                        const NetworkConfig& net_cfg,
                                        const std::vector<TrainingExample<T>>& examples) {
    NetworkConfig eval_cfg = net_cfg;
    eval_cfg.dropout_p = 0.0;
    std::map<std::string, std::vector<T>> saved_buffers;
    for (const auto& [name, p] : params)
        if (!p->requires_grad) saved_buffers.emplace(name, p->data);

    std::vector<PatientEval> evals;
    std::mt19937_64 rng(0);  // dropout is disabled; never drawn from
    for (const auto& ex : examples) {
        auto out = forward(params, eval_cfg, ex.pet, ex.ct, true, rng);
        auto prob = softmax(out.dm_logits, 1);
        PatientEval pe;
        pe.id = ex.id;
        pe.label = ex.label;
        pe.dm_probability = (double)prob->data[1];
        pe.dm_decision = pe.dm_probability >= 0.5 ? 1 : 0;

        const auto& sl = out.seg_logits;
        const std::size_t S = sl->shape[2] * sl->shape[3] * sl->shape[4];
        Volume pred;
        pred.modality = Modality::MASK;
        pred.extents = {sl->shape[2], sl->shape[3], sl->shape[4]};
        pred.voxels.resize(S);
        Volume truth = pred;
        for (std::size_t i = 0; i < S; ++i) {
            pred.voxels[i] = sl->data[S + i] > sl->data[i] ? 1.0f : 0.0f;
            truth.voxels[i] = (float)ex.mask->data[i];
        }
        pe.seg = segmentation_metrics(pred, truth);
        evals.push_back(std::move(pe));
    }
    for (const auto& [name, p] : params)
        if (!p->requires_grad) p->data = saved_buffers.at(name);
    return evals;
}

namespace crossval_detail {

inline MetricsReport report_from_evals(const std::vector<PatientEval>& evals) {
    MetricsReport r;
    std::vector<double> scores;
    std::vector<int> labels;
    double dsc = 0, jac = 0, vacc = 0;
    std::size_t n_vacc = 0;
    for (const auto& e : evals) {
        if (e.label && e.dm_decision)
            ++r.confusion.tp;
        else if (!e.label && e.dm_decision)
            ++r.confusion.fp;
        else if (e.label && !e.dm_decision)
            ++r.confusion.fn;
        else
            ++r.confusion.tn;
        scores.push_back(e.dm_probability);
        labels.push_back(e.label);
        dsc += e.seg.dsc;
        jac += e.seg.jaccard;
        if (e.seg.voxel_acc) {
            vacc += *e.seg.voxel_acc;
            ++n_vacc;
        }
    }
    r.cls = classification_metrics(r.confusion);
    bool pos = false, neg = false;
    for (int l : labels) (l ? pos : neg) = true;
    if (pos && neg) {
        auto roc = roc_auc(scores, labels);
        r.auc = roc.auc;
        r.roc_points = std::move(roc.points);
    } else {
        r.auc_undefined_flagged = true;
    }
    if (!evals.empty()) {
        SegMetrics s;
        s.dsc = dsc / (double)evals.size();
        s.jaccard = jac / (double)evals.size();
        if (n_vacc) s.voxel_acc = vacc / (double)n_vacc;
        // per-patient voxel sen/spe may be undefined; average the defined ones
        double vsen = 0, vspe = 0;
        std::size_t nsen = 0, nspe = 0;
        for (const auto& e : evals) {
            if (e.seg.voxel_sen) { vsen += *e.seg.voxel_sen; ++nsen; }
            if (e.seg.voxel_spe) { vspe += *e.seg.voxel_spe; ++nspe; }
        }
        if (nsen) s.voxel_sen = vsen / (double)nsen;
        if (nspe) s.voxel_spe = vspe / (double)nspe;
        r.seg = s;
    }
    return r;
}

}  // namespace crossval_detail

struct CrossValResult {
    std::vector<MetricsReport> per_fold;
    MetricsReport pooled;          // pooled confusion / scores over all patients
    MetricsReport mean_over_folds; // per-fold metric means (AUC over defined folds)
    std::vector<std::vector<EpochStats>> fold_histories;
    std::vector<PatientEval> all_evals;
};

/// Hold-out k-fold cross-validation. `examples` must already be preprocessed
/// to the grid implied by net_cfg. Each fold trains a freshly initialized
/// model on the other k-1 folds and evaluates on the held-out fold.
template <typename T>
CrossValResult cross_validate(const std::vector<TrainingExample<T>>& examples,
                              const NetworkConfig& net_cfg, const TrainingConfig& train_cfg,
                              std::size_t k, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& ex : examples) ids.push_back(ex.id);
    const auto split = make_folds(ids, k, seed);

    CrossValResult result;
    for (std::size_t fold = 0; fold < k; ++fold) {
        std::vector<TrainingExample<T>> train_set, test_set;
        for (const auto& ex : examples)
            (split.assignment.at(ex.id) == fold ? test_set : train_set).push_back(ex);
        bool pos = false, neg = false;
        for (const auto& ex : train_set) (ex.label ? pos : neg) = true;
        if (!pos || !neg)
            throw std::runtime_error("cross_validate: training portion of fold " +
                                     std::to_string(fold) + " has a single class");

        const std::uint64_t fold_seed = seed + 1000003ull * (fold + 1);
        std::mt19937_64 init_rng(fold_seed ^ 0x1234567890abcdefull);
        auto params = init_params<T>(net_cfg, init_rng);
        TrainingConfig fold_cfg = train_cfg;
        fold_cfg.seed = fold_seed;
        result.fold_histories.push_back(train(params, net_cfg, train_set, fold_cfg));

        auto evals = evaluate_model(params, net_cfg, test_set);
        result.per_fold.push_back(crossval_detail::report_from_evals(evals));
        for (auto& e : evals) result.all_evals.push_back(std::move(e));
    }
    result.pooled = crossval_detail::report_from_evals(result.all_evals);

    // mean of per-fold metrics; folds with undefined AUC are excluded, flagged
    auto mean_of = [&](auto pick) -> std::optional<double> {
        double s = 0;
        std::size_t n = 0;
        for (const auto& f : result.per_fold) {
            const auto v = pick(f);
            if (v) { s += *v; ++n; }
        }
        if (!n) return std::nullopt;
        return s / (double)n;
    };
    MetricsReport& m = result.mean_over_folds;
    m.confusion = result.pooled.confusion;
    m.cls.acc = mean_of([](const MetricsReport& f) { return f.cls.acc; });
    m.cls.sen = mean_of([](const MetricsReport& f) { return f.cls.sen; });
    m.cls.spe = mean_of([](const MetricsReport& f) { return f.cls.spe; });
    m.cls.pre = mean_of([](const MetricsReport& f) { return f.cls.pre; });
    m.cls.f1 = mean_of([](const MetricsReport& f) { return f.cls.f1; });
    m.auc = mean_of([](const MetricsReport& f) { return f.auc; });
    for (const auto& f : result.per_fold)
        if (f.auc_undefined_flagged) m.auc_undefined_flagged = true;
    if (result.pooled.seg) m.seg = result.pooled.seg;
    return result;
}

struct SweepRow {
    double w = 0;
    std::optional<double> mean_acc, mean_sen, mean_spe;
    std::optional<double> pooled_auc;
    std::optional<double> mean_dsc;
};

/// Re-run cross-validation for each CFL weight and tabulate the fold means.
template <typename T>
std::vector<SweepRow> weight_sweep(const std::vector<TrainingExample<T>>& examples,
                                   const NetworkConfig& net_cfg,
                                   const TrainingConfig& train_cfg,
                                   const std::vector<double>& w_values, std::size_t k,
                                   std::uint64_t seed,
                                   std::vector<CrossValResult>* details = nullptr) {
    std::vector<SweepRow> rows;
    for (double w : w_values) {
        if (w < 0 || w > 1) throw std::invalid_argument("weight_sweep: w outside [0,1]");
        TrainingConfig cfg = train_cfg;
        cfg.w = w;
        auto res = cross_validate(examples, net_cfg, cfg, k, seed);
        SweepRow row;
        row.w = w;
        row.mean_acc = res.mean_over_folds.cls.acc;
        row.mean_sen = res.mean_over_folds.cls.sen;
        row.mean_spe = res.mean_over_folds.cls.spe;
        row.pooled_auc = res.pooled.auc;
        if (res.pooled.seg) row.mean_dsc = res.pooled.seg->dsc;
        rows.push_back(row);
        if (details) details->push_back(std::move(res));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// report output
// ---------------------------------------------------------------------------

namespace report_detail {

inline std::string fmt(const std::optional<double>& v) {
    if (!v) return "undef";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}

}  // namespace report_detail

inline void write_report_text(std::ostream& os, const std::string& title,
                              const MetricsReport& r) {
    using report_detail::fmt;
    os << title << "\n";
    os << "  confusion: tp=" << r.confusion.tp << " fp=" << r.confusion.fp
       << " tn=" << r.confusion.tn << " fn=" << r.confusion.fn << "\n";
    os << "  acc=" << fmt(r.cls.acc) << " sen=" << fmt(r.cls.sen) << " spe=" << fmt(r.cls.spe)
       << " pre=" << fmt(r.cls.pre) << " f1=" << fmt(r.cls.f1) << " auc=" << fmt(r.auc);
    if (r.auc_undefined_flagged) os << " (auc undefined for some folds)";
    os << "\n";
    if (r.seg)
        os << "  seg: dsc=" << fmt(r.seg->dsc) << " jaccard=" << fmt(r.seg->jaccard)
           << " vox_acc=" << fmt(r.seg->voxel_acc) << " vox_sen=" << fmt(r.seg->voxel_sen)
           << " vox_spe=" << fmt(r.seg->voxel_spe) << "\n";
}

/// Machine-readable metric-name -> value pairs, one per line.
inline void write_report_kv(const std::string& path, const std::string& prefix,
                            const MetricsReport& r) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_report_kv: cannot open " + path);
    os << std::setprecision(17);
    auto put = [&](const std::string& key, const std::optional<double>& v) {
        if (v) os << prefix << key << " " << *v << "\n";
    };
    os << prefix << "tp " << r.confusion.tp << "\n";
    os << prefix << "fp " << r.confusion.fp << "\n";
    os << prefix << "tn " << r.confusion.tn << "\n";
    os << prefix << "fn " << r.confusion.fn << "\n";
    put("acc", r.cls.acc);
    put("sen", r.cls.sen);
    put("spe", r.cls.spe);
    put("pre", r.cls.pre);
    put("f1", r.cls.f1);
    put("auc", r.auc);
    if (r.seg) {
        put("dsc", r.seg->dsc);
        put("jaccard", r.seg->jaccard);
        put("voxel_acc", r.seg->voxel_acc);
        put("voxel_sen", r.seg->voxel_sen);
        put("voxel_spe", r.seg->voxel_spe);
    }
}

/// ROC points as two whitespace-separated columns (fpr tpr).
inline void write_roc_points(const std::string& path,
                             const std::vector<std::pair<double, double>>& points) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_roc_points: cannot open " + path);
    os << std::setprecision(17);
    for (const auto& [fpr, tpr] : points) os << fpr << " " << tpr << "\n";
}

inline void write_history_csv(const std::string& path, const std::vector<EpochStats>& hist) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_history_csv: cannot open " + path);
    os << std::setprecision(17);
    os << "epoch,mean_loss,cls_loss,seg_loss\n";
    for (const auto& h : hist)
        os << h.epoch << "," << h.mean_loss << "," << h.mean_cls_loss << ","
           << h.mean_seg_loss << "\n";
}

}  // namespace chmfl
