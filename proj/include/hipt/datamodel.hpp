#pragma once

#include <array>
#include <fstream>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "hipt/common.hpp"
#include "hipt/hierarchy.hpp"

namespace hipt {

/**
 * One annotated image: an opaque image reference plus its fine-grained label
 * set and the cached coarse sets derived through the hierarchy.
 */
struct Sample {
    std::string id;
    std::string image;  // empty for synthetic samples ("image": null)
    LabelSet y1;
    LabelSet y2;
    LabelSet y3;

    const LabelSet& labels_at(int level) const {
        switch (level) {
            case 1: return y1;
            case 2: return y2;
            case 3: return y3;
            default: throw Error("level index out of range: " + std::to_string(level));
        }
    }

    /// What a backbone resolves: the image handle, or the id for synthetic samples.
    const std::string& image_ref() const { return image.empty() ? id : image; }
};

struct DatasetSplit {
    std::string name;  // train | val | test
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }

    std::vector<LabelSet> targets_at(int level) const {
        std::vector<LabelSet> out;
        out.reserve(samples.size());
        for (const auto& s : samples) out.push_back(s.labels_at(level));
        return out;
    }
};

/**
 * Load a JSON-lines annotation file:
 *   {"id": str, "image": str-or-null, "labels_l1": [str, ...]}
 * Every label must exist at level 1; y2/y3 are derived and cached.
 */
inline DatasetSplit load_annotations(const std::string& path, const Hierarchy& h,
                                     const std::string& split_name = "train") {
    std::ifstream in(path);
    if (!in) throw Error("cannot open annotations file: " + path);
    DatasetSplit split;
    split.name = split_name;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string stripped = trim(line);
        if (stripped.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(stripped);
        } catch (const nlohmann::json::exception& e) {
            throw Error("annotations file " + path + " line " + std::to_string(lineno) + ": " +
                        e.what());
        }
        Sample s;
        if (!j.contains("id") || !j["id"].is_string()) {
            throw Error("annotations file " + path + " line " + std::to_string(lineno) +
                        ": missing string field 'id'");
        }
        s.id = j["id"].get<std::string>();
        if (!seen_ids.insert(s.id).second) {
            throw Error("annotations file " + path + ": duplicate sample id '" + s.id + "'");
        }
        if (j.contains("image") && j["image"].is_string()) {
            s.image = j["image"].get<std::string>();
        }
        if (!j.contains("labels_l1") || !j["labels_l1"].is_array() || j["labels_l1"].empty()) {
            throw Error("annotations file " + path + ": sample '" + s.id +
                        "' has an empty label set");
        }
        for (const auto& item : j["labels_l1"]) {
            if (!item.is_string()) {
                throw Error("annotations file " + path + ": sample '" + s.id +
                            "' has a non-string label");
            }
            std::string label = trim(item.get<std::string>());
            if (!h.level(1).contains(label)) {
                throw Error("annotations file " + path + ": sample '" + s.id +
                            "' has unknown label '" + label + "'");
            }
            s.y1.insert(label);
        }
        auto [y2, y3] = derive_label_sets(h, s.y1);
        s.y2 = std::move(y2);
        s.y3 = std::move(y3);
        split.samples.push_back(std::move(s));
    }
    return split;
}

inline void write_annotations(const std::string& path, const DatasetSplit& split) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write annotations file: " + path);
    for (const auto& s : split.samples) {
        nlohmann::json j;
        j["id"] = s.id;
        if (s.image.empty()) {
            j["image"] = nullptr;
        } else {
            j["image"] = s.image;
        }
        j["labels_l1"] = std::vector<std::string>(s.y1.begin(), s.y1.end());
        out << j.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset generator. Verification substrate: a random but valid
// hierarchy, unit-norm class prototypes with shared parent directions, and
// samples whose region features carry the prototypes of their labels.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    std::uint64_t seed = 7;
    int n_l1 = 12;
    int n_l2 = 6;
    int n_l3 = 3;
    int d = 64;        // feature dimension
    int regions = 4;   // spatial grid size R
    double noise_sigma = 0.1;
    int labels_min = 2;
    int labels_max = 4;
    std::array<int, 3> split_sizes = {500, 100, 200};  // train, val, test

    void validate() const {
        if (!(n_l3 <= n_l2 && n_l2 <= n_l1) || n_l3 < 1) {
            throw Error("synthetic spec: level sizes must satisfy 1 <= n_l3 <= n_l2 <= n_l1");
        }
        if (d < 8) throw Error("synthetic spec: feature dimension must be >= 8");
        if (regions < 1) throw Error("synthetic spec: regions must be >= 1");
        if (noise_sigma < 0) throw Error("synthetic spec: noise_sigma must be >= 0");
        if (labels_min < 1 || labels_max < labels_min) {
            throw Error("synthetic spec: invalid labels_per_sample range");
        }
        if (labels_max > n_l1) {
            throw Error("synthetic spec: labels_per_sample upper bound " +
                        std::to_string(labels_max) + " exceeds number of level-1 classes " +
                        std::to_string(n_l1));
        }
        if (labels_max > regions) {
            throw Error("synthetic spec: labels_per_sample upper bound " +
                        std::to_string(labels_max) + " exceeds region count " +
                        std::to_string(regions) + " (labels occupy disjoint regions)");
        }
    }
};

/// Unit-norm prototype vector per level-1 class, indexed by label-space order.
struct PrototypeBank {
    int dim = 0;
    std::vector<std::vector<double>> prototypes;

    std::string digest() const {
        Digest dg;
        dg.update(static_cast<std::uint64_t>(dim));
        for (const auto& p : prototypes) dg.update(p);
        return dg.hex();
    }
};

/// Region features per image reference; resolved by the synthetic backbone.
struct FeatureStore {
    std::unordered_map<std::string, Matrix> by_ref;

    const Matrix& resolve(const std::string& image_ref) const {
        auto it = by_ref.find(image_ref);
        if (it == by_ref.end()) throw Error("unresolvable image_ref: '" + image_ref + "'");
        return it->second;
    }
};

struct SyntheticDataset {
    Hierarchy hierarchy;
    DatasetSplit train;
    DatasetSplit val;
    DatasetSplit test;
    PrototypeBank bank;
    std::shared_ptr<FeatureStore> features;
};

namespace detail {

inline std::string synth_label(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03d", prefix, i);
    return buf;
}

inline std::vector<double> random_unit(std::mt19937_64& rng, int d) {
    std::vector<double> v(static_cast<std::size_t>(d));
    fill_gaussian(v, rng, 1.0);
    normalize_inplace(v);
    return v;
}

}  // namespace detail

/**
 * Deterministic synthetic dataset. Hierarchy parents are assigned round-robin
 * (balanced). Prototypes embed the hierarchy in feature space: each prototype
 * is normalize(parent_direction + class_direction), so siblings share half of
 * their prototype, and parent directions nest the same way one level up. That
 * makes fine classes harder to separate than coarse ones.
 */
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();

    // Hierarchy: synthetic label names are generated pre-sorted so that
    // label-space order equals construction order.
    std::vector<std::array<std::string, 3>> rows;
    for (int i = 0; i < spec.n_l1; ++i) {
        int p2 = i % spec.n_l2;
        int p3 = p2 % spec.n_l3;
        rows.push_back({detail::synth_label("l1", i), detail::synth_label("l2", p2),
                        detail::synth_label("l3", p3)});
    }
    SyntheticDataset out;
    out.hierarchy = Hierarchy::from_rows(rows);

    // Prototypes: directions drawn coarse-to-fine so siblings share parents.
    std::mt19937_64 proto_rng(substream_seed(spec.seed, "prototypes"));
    std::vector<std::vector<double>> l3_dirs, l2_dirs;
    for (int g = 0; g < spec.n_l3; ++g) l3_dirs.push_back(detail::random_unit(proto_rng, spec.d));
    for (int j = 0; j < spec.n_l2; ++j) {
        std::vector<double> dir = detail::random_unit(proto_rng, spec.d);
        const auto& parent = l3_dirs[static_cast<std::size_t>(j % spec.n_l3)];
        for (int k = 0; k < spec.d; ++k) dir[static_cast<std::size_t>(k)] += parent[static_cast<std::size_t>(k)];
        normalize_inplace(dir);
        l2_dirs.push_back(std::move(dir));
    }
    out.bank.dim = spec.d;
    for (int i = 0; i < spec.n_l1; ++i) {
        std::vector<double> proto = detail::random_unit(proto_rng, spec.d);
        const auto& parent = l2_dirs[static_cast<std::size_t>(i % spec.n_l2)];
        for (int k = 0; k < spec.d; ++k) proto[static_cast<std::size_t>(k)] += parent[static_cast<std::size_t>(k)];
        normalize_inplace(proto);
        out.bank.prototypes.push_back(std::move(proto));
    }

    // Samples: each draws a label count, a label subset, and disjoint regions
    // for the present labels; every region then receives Gaussian noise.
    out.features = std::make_shared<FeatureStore>();
    std::mt19937_64 sample_rng(substream_seed(spec.seed, "samples"));
    const char* names[3] = {"train", "val", "test"};
    DatasetSplit* splits[3] = {&out.train, &out.val, &out.test};
    std::uniform_int_distribution<int> count_dist(spec.labels_min, spec.labels_max);
    int serial = 0;
    for (int si = 0; si < 3; ++si) {
        splits[si]->name = names[si];
        for (int n = 0; n < spec.split_sizes[static_cast<std::size_t>(si)]; ++n) {
            Sample s;
            s.id = detail::synth_label(names[si], serial++);
            int k = count_dist(sample_rng);

            std::vector<int> class_ids(static_cast<std::size_t>(spec.n_l1));
            for (int i = 0; i < spec.n_l1; ++i) class_ids[static_cast<std::size_t>(i)] = i;
            std::shuffle(class_ids.begin(), class_ids.end(), sample_rng);
            class_ids.resize(static_cast<std::size_t>(k));

            std::vector<int> region_ids(static_cast<std::size_t>(spec.regions));
            for (int r = 0; r < spec.regions; ++r) region_ids[static_cast<std::size_t>(r)] = r;
            std::shuffle(region_ids.begin(), region_ids.end(), sample_rng);

            Matrix features(static_cast<std::size_t>(spec.regions), static_cast<std::size_t>(spec.d));
            for (int li = 0; li < k; ++li) {
                int cls = class_ids[static_cast<std::size_t>(li)];
                int region = region_ids[static_cast<std::size_t>(li)];
                const auto& proto = out.bank.prototypes[static_cast<std::size_t>(cls)];
                auto row = features.row(static_cast<std::size_t>(region));
                std::copy(proto.begin(), proto.end(), row.begin());
                s.y1.insert(out.hierarchy.level(1).labels[static_cast<std::size_t>(cls)]);
            }
            if (spec.noise_sigma > 0) {
                std::normal_distribution<double> noise(0.0, spec.noise_sigma);
                for (double& x : features.data()) x += noise(sample_rng);
            }

            auto [y2, y3] = derive_label_sets(out.hierarchy, s.y1);
            s.y2 = std::move(y2);
            s.y3 = std::move(y3);
            out.features->by_ref.emplace(s.id, std::move(features));
            splits[si]->samples.push_back(std::move(s));
        }
    }
    return out;
}

}  // namespace hipt
