#pragma once

#include <array>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "hipt/common.hpp"

namespace hipt {

using LabelSet = std::set<std::string>;

/**
 * Ordered set of label strings for one level of the hierarchy. Ordering is
 * lexicographic and fixed at load time so that class indices, checkpoints and
 * reports are stable across runs.
 */
struct LabelSpace {
    int level_index = 0;
    std::vector<std::string> labels;
    std::unordered_map<std::string, int> index;

    int size() const { return static_cast<int>(labels.size()); }

    bool contains(const std::string& label) const { return index.count(label) > 0; }

    int index_of(const std::string& label) const {
        auto it = index.find(label);
        if (it == index.end()) {
            throw Error("unknown label at level " + std::to_string(level_index) + ": '" +
                        label + "'");
        }
        return it->second;
    }

    /// Digest of the ordered label list; binds checkpoints to a label space.
    std::string digest() const {
        Digest d;
        d.update(static_cast<std::uint64_t>(level_index));
        for (const auto& l : labels) {
            d.update(l);
            d.update("\x1f");
        }
        return d.hex();
    }

    static LabelSpace from_labels(int level_index, const std::set<std::string>& labels) {
        LabelSpace s;
        s.level_index = level_index;
        s.labels.assign(labels.begin(), labels.end());  // std::set iterates sorted
        for (int i = 0; i < static_cast<int>(s.labels.size()); ++i) {
            s.index.emplace(s.labels[static_cast<std::size_t>(i)], i);
        }
        return s;
    }
};

/**
 * Three-level label taxonomy, fine (level 1) to coarse (level 3). Each fine
 * label has exactly one parent at the next level; a two-level ingredient is
 * represented by repeating its level-1 name at level 2. Immutable after load
 * and safe for concurrent reads.
 */
struct Hierarchy {
    std::array<LabelSpace, 3> levels;  // levels[0] = level 1 (fine)
    std::map<std::string, std::string> parent_l1_to_l2;
    std::map<std::string, std::string> parent_l2_to_l3;

    const LabelSpace& level(int i) const {
        if (i < 1 || i > 3) throw Error("level index out of range: " + std::to_string(i));
        return levels[static_cast<std::size_t>(i - 1)];
    }

    std::string digest() const {
        Digest d;
        for (const auto& space : levels) d.update(space.digest());
        for (const auto& [c, p] : parent_l1_to_l2) d.update(c).update("->").update(p);
        for (const auto& [c, p] : parent_l2_to_l3) d.update(c).update("->").update(p);
        return d.hex();
    }

    /**
     * Build and validate from (l1, l2, l3) rows, one per fine label.
     * Throws on duplicate fine labels, conflicting parents, or empty cells.
     */
    static Hierarchy from_rows(const std::vector<std::array<std::string, 3>>& rows) {
        std::set<std::string> s1, s2, s3;
        std::map<std::string, std::string> p12, p23;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& [l1, l2, l3] = rows[i];
            std::string where = "row " + std::to_string(i + 1) + " ('" + l1 + "')";
            if (l1.empty() || l2.empty() || l3.empty()) {
                throw Error("missing parent: " + where + " has an empty column");
            }
            if (auto it = p12.find(l1); it != p12.end()) {
                if (it->second != l2) {
                    throw Error("ambiguous parent: '" + l1 + "' maps to both '" + it->second +
                                "' and '" + l2 + "' at level 2");
                }
                throw Error("duplicate L1 label: '" + l1 + "' appears twice");
            }
            if (auto it = p23.find(l2); it != p23.end() && it->second != l3) {
                throw Error("ambiguous parent: '" + l2 + "' maps to both '" + it->second +
                            "' and '" + l3 + "' at level 3");
            }
            p12.emplace(l1, l2);
            p23.emplace(l2, l3);
            s1.insert(l1);
            s2.insert(l2);
            s3.insert(l3);
        }
        if (s1.empty() || s2.empty() || s3.empty()) {
            throw Error("empty level: hierarchy has no labels");
        }
        Hierarchy h;
        h.levels[0] = LabelSpace::from_labels(1, s1);
        h.levels[1] = LabelSpace::from_labels(2, s2);
        h.levels[2] = LabelSpace::from_labels(3, s3);
        h.parent_l1_to_l2 = std::move(p12);
        h.parent_l2_to_l3 = std::move(p23);
        return h;
    }
};

/**
 * Load a hierarchy from a TSV file: UTF-8, header "l1\tl2\tl3", one data row
 * per fine label, '#' starts a comment line. Labels are trimmed but matched
 * case-preserving (distinct ingredients must not merge silently).
 */
inline Hierarchy load_hierarchy(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open hierarchy file: " + path);
    std::string line;
    std::vector<std::array<std::string, 3>> rows;
    bool header_seen = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        auto cols = split(line, '\t');
        if (cols.size() != 3) {
            throw Error("hierarchy file " + path + " line " + std::to_string(lineno) +
                        ": expected 3 tab-separated columns, got " + std::to_string(cols.size()));
        }
        std::array<std::string, 3> row = {trim(cols[0]), trim(cols[1]), trim(cols[2])};
        if (!header_seen) {
            header_seen = true;
            if (row[0] == "l1" && row[1] == "l2" && row[2] == "l3") continue;
            throw Error("hierarchy file " + path + ": missing header line 'l1\\tl2\\tl3'");
        }
        rows.push_back(std::move(row));
    }
    try {
        return Hierarchy::from_rows(rows);
    } catch (const Error& e) {
        throw Error("hierarchy file " + path + ": " + e.what());
    }
}

/**
 * Map a label to its unique ancestor at a coarser level. Identity when
 * from_level == to_level. Downward mapping is one-to-many and rejected.
 */
inline std::string map_label(const Hierarchy& h, const std::string& label, int from_level,
                             int to_level) {
    if (to_level < from_level) {
        throw Error("cannot map label '" + label + "' downward from level " +
                    std::to_string(from_level) + " to level " + std::to_string(to_level));
    }
    h.level(to_level);  // range-check
    if (!h.level(from_level).contains(label)) {
        throw Error("unknown label at level " + std::to_string(from_level) + ": '" + label + "'");
    }
    std::string current = label;
    for (int lvl = from_level; lvl < to_level; ++lvl) {
        const auto& parents = (lvl == 1) ? h.parent_l1_to_l2 : h.parent_l2_to_l3;
        auto it = parents.find(current);
        if (it == parents.end()) {
            throw Error("label '" + current + "' has no parent at level " +
                        std::to_string(lvl + 1));
        }
        current = it->second;
    }
    return current;
}

/// Derive the level-2 and level-3 label sets of a fine-grained label set.
inline std::pair<LabelSet, LabelSet> derive_label_sets(const Hierarchy& h, const LabelSet& y1) {
    LabelSet y2, y3;
    for (const auto& label : y1) {
        y2.insert(map_label(h, label, 1, 2));
        y3.insert(map_label(h, label, 1, 3));
    }
    return {y2, y3};
}

}  // namespace hipt
