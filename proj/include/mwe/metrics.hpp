#pragma once

// Evaluation metrics against a known ground truth: signed PR-AUC, signed
// EMD (exact Kantorovich distance between normalized parts, in cm) and MSE.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mwe/errors.hpp"
#include "mwe/geometry.hpp"
#include "mwe/uot.hpp"

namespace mwe {

/// Area under the precision-recall curve. Thresholds run over the distinct
/// score values (ties form one threshold); the curve starts at recall 0 with
/// the precision of the first threshold and is integrated with the
/// trapezoidal rule in recall.
inline double pr_auc(const Vector& scores, const std::vector<bool>& positive)
{
    const auto p = static_cast<std::size_t>(scores.size());
    if (positive.size() != p) throw ParameterError("pr_auc: length mismatch");
    const auto total_pos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
    if (total_pos == 0.0) throw DomainError("pr_auc: no positives");

    std::vector<std::size_t> order(p);
    for (std::size_t i = 0; i < p; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[static_cast<Eigen::Index>(a)] > scores[static_cast<Eigen::Index>(b)]; });

    double area = 0.0;
    double prev_recall = 0.0;
    double prev_precision = -1.0;
    double tp = 0.0, predicted = 0.0;
    for (std::size_t k = 0; k < p;) {
        const double t = scores[static_cast<Eigen::Index>(order[k])];
        while (k < p && scores[static_cast<Eigen::Index>(order[k])] == t) {
            tp += positive[order[k]] ? 1.0 : 0.0;
            predicted += 1.0;
            ++k;
        }
        const double precision = tp / predicted;
        const double recall = tp / total_pos;
        if (prev_precision < 0.0) prev_precision = precision;
        area += (recall - prev_recall) * 0.5 * (precision + prev_precision);
        prev_recall = recall;
        prev_precision = precision;
    }
    return area;
}

struct SignedAuc {
    double value = 0.0;
    int skipped_halves = 0; // halves with empty true support
};

/// 1/2 PR-AUC(x^+, x*^+) + 1/2 PR-AUC(x^-, x*^-). A half whose true part is
/// empty is dropped and the other half gets full weight.
inline SignedAuc signed_pr_auc_detail(const Vector& estimate, const Vector& truth)
{
    if (estimate.size() != truth.size()) throw ParameterError("signed_pr_auc: length mismatch");
    const auto p = static_cast<std::size_t>(truth.size());
    std::vector<bool> pos(p), neg(p);
    bool any_pos = false, any_neg = false;
    for (std::size_t i = 0; i < p; ++i) {
        pos[i] = truth[static_cast<Eigen::Index>(i)] > 0.0;
        neg[i] = truth[static_cast<Eigen::Index>(i)] < 0.0;
        any_pos = any_pos || pos[i];
        any_neg = any_neg || neg[i];
    }
    if (!any_pos && !any_neg) throw DomainError("signed_pr_auc: ground truth is identically zero");
    SignedAuc out;
    if (any_pos && any_neg) {
        out.value = 0.5 * pr_auc(positive_part(estimate), pos) + 0.5 * pr_auc(negative_part(estimate), neg);
    } else if (any_pos) {
        out.value = pr_auc(positive_part(estimate), pos);
        out.skipped_halves = 1;
    } else {
        out.value = pr_auc(negative_part(estimate), neg);
        out.skipped_halves = 1;
    }
    return out;
}

inline double signed_pr_auc(const Vector& estimate, const Vector& truth)
{
    return signed_pr_auc_detail(estimate, truth).value;
}

struct SignedEmd {
    double value = 0.0;
    int worst_case_halves = 0; // halves where exactly one part was empty
};

/// 1/2 WK(x^+ / |x^+|, x*^+ / |x*^+|) + 1/2 WK(x^-, x*^-) likewise. Both parts
/// empty: that half is 0. Exactly one empty: that half is max(M).
inline SignedEmd signed_emd_detail(const Vector& estimate, const Vector& truth, const CostMatrix& M)
{
    if (estimate.size() != truth.size() || estimate.size() != M.size())
        throw ParameterError("signed_emd: size mismatch");
    SignedEmd out;
    auto half = [&](const Vector& a, const Vector& b) {
        const double ma = a.sum();
        const double mb = b.sum();
        if (ma == 0.0 && mb == 0.0) return 0.0;
        if (ma == 0.0 || mb == 0.0) {
            ++out.worst_case_halves;
            return M.max();
        }
        return exact_kantorovich(a / ma, b / mb, M);
    };
    out.value = 0.5 * half(positive_part(estimate), positive_part(truth)) +
                0.5 * half(negative_part(estimate), negative_part(truth));
    return out;
}

inline double signed_emd(const Vector& estimate, const Vector& truth, const CostMatrix& M)
{
    return signed_emd_detail(estimate, truth, M).value;
}

inline double mse(const Vector& estimate, const Vector& truth)
{
    if (estimate.size() != truth.size()) throw ParameterError("mse: length mismatch");
    if (truth.size() == 0) return 0.0;
    return (estimate - truth).squaredNorm() / static_cast<double>(truth.size());
}

struct MetricReport {
    double auc = 0.0;
    double emd = 0.0; // cm
    double mse = 0.0; // nAm^2
    std::vector<double> per_subject_auc;
    std::vector<double> per_subject_emd;
    std::vector<double> per_subject_mse;
    int auc_skipped_halves = 0;
    int emd_worst_case_halves = 0;
};

/// Scores each subject's estimate and averages across subjects.
inline MetricReport evaluate(const std::vector<Vector>& estimates, const std::vector<Vector>& truths, const CostMatrix& M)
{
    if (estimates.size() != truths.size() || estimates.empty())
        throw ParameterError("evaluate: need one estimate per ground-truth subject");
    MetricReport r;
    for (std::size_t s = 0; s < truths.size(); ++s) {
        const auto a = signed_pr_auc_detail(estimates[s], truths[s]);
        const auto e = signed_emd_detail(estimates[s], truths[s], M);
        r.per_subject_auc.push_back(a.value);
        r.per_subject_emd.push_back(e.value);
        r.per_subject_mse.push_back(mse(estimates[s], truths[s]));
        r.auc_skipped_halves += a.skipped_halves;
        r.emd_worst_case_halves += e.worst_case_halves;
    }
    const auto mean = [](const std::vector<double>& v) {
        double acc = 0.0;
        for (double x : v) acc += x;
        return acc / static_cast<double>(v.size());
    };
    r.auc = mean(r.per_subject_auc);
    r.emd = mean(r.per_subject_emd);
    r.mse = mean(r.per_subject_mse);
    return r;
}

/// Metric row layout: trial, model, subject, auc, emd_cm, mse.
struct MetricRow {
    int trial = 0;
    std::string model;
    int subject = 0;
    double auc = 0.0;
    double emd_cm = 0.0;
    double mse = 0.0;
};

inline void write_metric_header(std::ostream& os) { os << "trial,model,subject,auc,emd_cm,mse\n"; }

inline void write_metric_row(std::ostream& os, const MetricRow& row)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%s,%d,%.12g,%.12g,%.12g\n", row.trial, row.model.c_str(), row.subject, row.auc,
                  row.emd_cm, row.mse);
    os << buf;
}

} // namespace mwe
