#pragma once

#include <array>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "hipt/common.hpp"
#include "hipt/datamodel.hpp"
#include "hipt/hierarchy.hpp"
#include "hipt/metrics.hpp"

namespace hipt {

/**
 * Alias table for matching free-text model output against the fine-grained
 * vocabulary: TSV rows "variant<TAB>canonical", compared after trim and
 * lowercasing.
 */
struct AliasTable {
    std::map<std::string, std::string> variant_to_canonical;

    static AliasTable load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("cannot open alias table: " + path);
        AliasTable table;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string stripped = trim(line);
            if (stripped.empty() || stripped[0] == '#') continue;
            auto cols = split(line, '\t');
            if (cols.size() != 2) {
                throw Error("alias table " + path + " line " + std::to_string(lineno) +
                            ": expected 2 tab-separated columns");
            }
            table.variant_to_canonical[to_lower(trim(cols[0]))] = trim(cols[1]);
        }
        return table;
    }
};

/**
 * Externally produced fine-grained predictions, matched against the level-1
 * vocabulary. Labels that match nothing are excluded but counted, never
 * silently dropped.
 */
struct ExternalPredictions {
    std::string model_name;
    std::vector<std::string> ids;
    std::vector<LabelSet> p1;
    std::map<std::string, std::size_t> unmatched;  // raw label -> occurrences

    std::size_t unmatched_count() const {
        std::size_t n = 0;
        for (const auto& [_, c] : unmatched) n += c;
        return n;
    }
};

/**
 * Load a JSON-lines prediction file ({"id": str, "labels_l1": [str, ...]}).
 * Matching is exact after trim + lowercase, optionally routed through the
 * alias table first.
 */
inline ExternalPredictions load_predictions(const std::string& path, const Hierarchy& h,
                                            const AliasTable* aliases = nullptr,
                                            const std::string& model_name = "") {
    std::ifstream in(path);
    if (!in) throw Error("cannot open predictions file: " + path);

    std::unordered_map<std::string, std::string> canon;  // lowercase -> S1 label
    for (const auto& label : h.level(1).labels) canon.emplace(to_lower(label), label);

    ExternalPredictions out;
    out.model_name = model_name;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string stripped = trim(line);
        if (stripped.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(stripped);
            out.ids.push_back(j.at("id").get<std::string>());
            LabelSet labels;
            for (const auto& item : j.at("labels_l1")) {
                std::string raw = trim(item.get<std::string>());
                std::string key = to_lower(raw);
                if (aliases) {
                    auto it = aliases->variant_to_canonical.find(key);
                    if (it != aliases->variant_to_canonical.end()) key = to_lower(it->second);
                }
                auto it = canon.find(key);
                if (it != canon.end()) {
                    labels.insert(it->second);
                } else {
                    ++out.unmatched[raw];
                }
            }
            out.p1.push_back(std::move(labels));
        } catch (const nlohmann::json::exception& e) {
            throw Error("predictions file " + path + " line " + std::to_string(lineno) + ": " +
                        e.what());
        }
    }
    return out;
}

/// Map fine-grained prediction sets up the hierarchy (deduplicating).
inline std::pair<std::vector<LabelSet>, std::vector<LabelSet>> map_predictions(
    const Hierarchy& h, const std::vector<LabelSet>& p1) {
    std::vector<LabelSet> p2, p3;
    p2.reserve(p1.size());
    p3.reserve(p1.size());
    for (const auto& labels : p1) {
        LabelSet l2, l3;
        for (const auto& label : labels) {
            l2.insert(map_label(h, label, 1, 2));
            l3.insert(map_label(h, label, 1, 3));
        }
        p2.push_back(std::move(l2));
        p3.push_back(std::move(l3));
    }
    return {p2, p3};
}

/**
 * Score fine-grained zero-shot predictions at every hierarchy level:
 * level-k report = evaluate(P_k, y_k), with per-class F1 attached. Prediction
 * ids must cover the split exactly; order is taken from the split.
 */
inline std::array<MetricsReport, 3> evaluate_zeroshot(const ExternalPredictions& preds,
                                                      const DatasetSplit& split,
                                                      const Hierarchy& h) {
    std::unordered_map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < preds.ids.size(); ++i) {
        if (!by_id.emplace(preds.ids[i], i).second) {
            throw Error("predictions contain duplicate sample id '" + preds.ids[i] + "'");
        }
    }
    std::vector<LabelSet> p1;
    p1.reserve(split.size());
    for (const auto& sample : split.samples) {
        auto it = by_id.find(sample.id);
        if (it == by_id.end()) {
            throw Error("predictions missing sample id '" + sample.id + "'");
        }
        p1.push_back(preds.p1[it->second]);
    }
    auto [p2, p3] = map_predictions(h, p1);

    std::array<MetricsReport, 3> reports;
    const std::vector<LabelSet>* preds_at[3] = {&p1, &p2, &p3};
    for (int level = 1; level <= 3; ++level) {
        auto targets = split.targets_at(level);
        const auto& pk = *preds_at[level - 1];
        MetricsReport r = evaluate(pk, targets);
        r.level_index = level;
        r.per_class_f1 = per_class_f1(pk, targets, h.level(level));
        reports[static_cast<std::size_t>(level - 1)] = std::move(r);
    }
    return reports;
}

}  // namespace hipt
