#pragma once

#include <algorithm>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hipt/common.hpp"
#include "hipt/hierarchy.hpp"

namespace hipt {

/**
 * Example-based multi-label metrics for one level, all as percentages.
 * Precision, recall and Jaccard IoU are per-sample values averaged over the
 * split; F1 is the harmonic mean of the aggregate P and R.
 */
struct MetricsReport {
    int level_index = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double iou = 0.0;
    std::map<std::string, double> per_class_f1;
    std::size_t n_samples = 0;
    long long trainable_params = 0;
};

inline double f1_from_aggregates(double precision, double recall) {
    double denom = precision + recall;
    if (denom <= 0.0) return 0.0;
    return 2.0 * precision * recall / denom;
}

namespace detail {

inline std::size_t intersection_size(const LabelSet& a, const LabelSet& b) {
    std::size_t n = 0;
    for (const auto& x : a) n += b.count(x);
    return n;
}

}  // namespace detail

/**
 * Example-based evaluation. Per sample: precision |p∩g|/|p| (0 for an empty
 * prediction against a non-empty target -- abstention is penalized), recall
 * |p∩g|/|g|, IoU |p∩g|/|p∪g|. Aggregates are means over samples, x100.
 */
inline MetricsReport evaluate(const std::vector<LabelSet>& predictions,
                              const std::vector<LabelSet>& targets) {
    if (predictions.size() != targets.size()) {
        throw Error("evaluate: " + std::to_string(predictions.size()) + " predictions vs " +
                    std::to_string(targets.size()) + " targets");
    }
    if (predictions.empty()) throw Error("evaluate: no samples");
    double sum_p = 0.0, sum_r = 0.0, sum_iou = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& pred = predictions[i];
        const auto& gt = targets[i];
        if (gt.empty()) {
            throw Error("evaluate: sample " + std::to_string(i) + " has an empty target set");
        }
        std::size_t inter = detail::intersection_size(pred, gt);
        std::size_t uni = pred.size() + gt.size() - inter;
        sum_p += pred.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(pred.size());
        sum_r += static_cast<double>(inter) / static_cast<double>(gt.size());
        sum_iou += static_cast<double>(inter) / static_cast<double>(uni);
    }
    double n = static_cast<double>(predictions.size());
    MetricsReport report;
    report.n_samples = predictions.size();
    report.precision = 100.0 * sum_p / n;
    report.recall = 100.0 * sum_r / n;
    report.iou = 100.0 * sum_iou / n;
    report.f1 = f1_from_aggregates(report.precision, report.recall);
    return report;
}

/**
 * Binary F1 per class over the split, as percentages. Classes that never
 * occur in either predictions or targets are omitted (their F1 is undefined).
 */
inline std::map<std::string, double> per_class_f1(const std::vector<LabelSet>& predictions,
                                                  const std::vector<LabelSet>& targets,
                                                  const LabelSpace& space) {
    if (predictions.size() != targets.size()) {
        throw Error("per_class_f1: prediction/target size mismatch");
    }
    std::map<std::string, double> out;
    for (const auto& label : space.labels) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            bool predicted = predictions[i].count(label) > 0;
            bool present = targets[i].count(label) > 0;
            tp += predicted && present;
            fp += predicted && !present;
            fn += !predicted && present;
        }
        if (tp + fp + fn == 0) continue;
        out[label] = 100.0 * 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    }
    return out;
}

/**
 * Per-sample prediction diff between a baseline and a new model, against the
 * ground truth. added_correct are true positives the new model complements;
 * removed_incorrect are wrong baseline predictions it drops. sibling_pairs
 * lists (kept true positive, removed incorrect) pairs that share a parent at
 * the next level -- the fine-grained confusions the hierarchy resolves.
 */
struct DiffRecord {
    std::string id;
    LabelSet added_correct;
    LabelSet removed_incorrect;
    std::vector<std::pair<std::string, std::string>> sibling_pairs;  // (kept, removed)
};

inline std::vector<DiffRecord> qualitative_diff(const std::vector<LabelSet>& base_preds,
                                                const std::vector<LabelSet>& new_preds,
                                                const std::vector<LabelSet>& targets,
                                                const std::vector<std::string>& sample_ids,
                                                const Hierarchy* h = nullptr, int level = 1) {
    if (base_preds.size() != new_preds.size() || base_preds.size() != targets.size() ||
        base_preds.size() != sample_ids.size()) {
        throw Error("qualitative_diff: misaligned sample lists");
    }
    std::vector<DiffRecord> out;
    out.reserve(base_preds.size());
    for (std::size_t i = 0; i < base_preds.size(); ++i) {
        const auto& base = base_preds[i];
        const auto& next = new_preds[i];
        const auto& gt = targets[i];
        DiffRecord rec;
        rec.id = sample_ids[i];
        for (const auto& l : next) {
            if (gt.count(l) && !base.count(l)) rec.added_correct.insert(l);
        }
        for (const auto& l : base) {
            if (!gt.count(l) && !next.count(l)) rec.removed_incorrect.insert(l);
        }
        if (h != nullptr && level < 3) {
            for (const auto& removed : rec.removed_incorrect) {
                for (const auto& kept : next) {
                    if (!gt.count(kept) || !base.count(kept)) continue;  // retained true positives
                    if (map_label(*h, kept, level, level + 1) ==
                        map_label(*h, removed, level, level + 1)) {
                        rec.sibling_pairs.emplace_back(kept, removed);
                    }
                }
            }
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Results files. Every emitted results file carries the full config echo and
// the digests of its input files so a run is reproducible from the artifact.
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json j;
    j["level"] = r.level_index;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["iou"] = r.iou;
    j["n_samples"] = r.n_samples;
    j["trainable_params"] = r.trainable_params;
    j["per_class_f1"] = r.per_class_f1;
    return j;
}

inline void write_results_json(const std::string& path, const std::vector<MetricsReport>& reports,
                               const std::map<std::string, std::string>& config_echo,
                               const std::map<std::string, std::string>& input_digests) {
    nlohmann::json j;
    j["config"] = config_echo;
    j["inputs"] = input_digests;
    j["reports"] = nlohmann::json::array();
    for (const auto& r : reports) j["reports"].push_back(report_to_json(r));
    std::ofstream out(path);
    if (!out) throw Error("cannot write results file: " + path);
    out << j.dump(2) << "\n";
}

namespace detail {

inline std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string fmt_params(long long n) {
    if (n <= 0) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1fM", static_cast<double>(n) / 1e6);
    return buf;
}

}  // namespace detail

/// Table-style CSV, one row per level, percentages to 2 decimals.
inline void write_results_csv(const std::string& path, const std::vector<MetricsReport>& reports,
                              const std::map<std::string, std::string>& config_echo,
                              const std::map<std::string, std::string>& input_digests) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write results file: " + path);
    for (const auto& [k, v] : config_echo) out << "# config " << k << " = " << v << "\n";
    for (const auto& [k, v] : input_digests) out << "# input " << k << " = " << v << "\n";
    out << "level,P,R,IOU,F1,#P\n";
    for (const auto& r : reports) {
        out << r.level_index << "," << detail::fmt2(r.precision) << "," << detail::fmt2(r.recall)
            << "," << detail::fmt2(r.iou) << "," << detail::fmt2(r.f1) << ","
            << detail::fmt_params(r.trainable_params) << "\n";
    }
}

inline void write_per_class_f1_csv(const std::string& path,
                                   const std::vector<MetricsReport>& reports,
                                   const std::map<std::string, std::string>& config_echo = {},
                                   const std::map<std::string, std::string>& input_digests = {}) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write per-class F1 file: " + path);
    for (const auto& [k, v] : config_echo) out << "# config " << k << " = " << v << "\n";
    for (const auto& [k, v] : input_digests) out << "# input " << k << " = " << v << "\n";
    out << "level,label,f1\n";
    for (const auto& r : reports) {
        for (const auto& [label, f1] : r.per_class_f1) {
            out << r.level_index << ",\"" << label << "\"," << detail::fmt2(f1) << "\n";
        }
    }
}

}  // namespace hipt
