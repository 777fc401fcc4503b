#include <catch2/catch_amalgamated.hpp>

#include "hipt/datamodel.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using hipt::derive_label_sets;
using hipt::generate_synthetic;
using hipt::Hierarchy;
using hipt::LabelSet;
using hipt::load_annotations;
using hipt::load_hierarchy;
using hipt::SyntheticSpec;
using testutil::TempDir;
using testutil::write_file;

namespace {

Hierarchy demo() { return load_hierarchy(testutil::data_file("demo_hierarchy.tsv")); }

}  // namespace

TEST_CASE("load_annotations: derives and caches coarse labels") {
    TempDir tmp;
    auto path = write_file(tmp.file("ann.jsonl"),
                           R"({"id":"img1","image":null,"labels_l1":["potato slices"]})"
                           "\n");
    auto split = load_annotations(path, demo());
    REQUIRE(split.size() == 1);
    CHECK(split.samples[0].y2 == LabelSet{"potato"});
    CHECK(split.samples[0].y3 == LabelSet{"vegetables"});
}

TEST_CASE("load_annotations: error cases name the offender") {
    TempDir tmp;
    Hierarchy h = demo();
    SECTION("unknown label") {
        auto path = write_file(tmp.file("ann.jsonl"),
                               R"({"id":"img9","labels_l1":["dragonfruit cube"]})"
                               "\n");
        CHECK_THROWS_WITH(load_annotations(path, h),
                          Catch::Matchers::ContainsSubstring("dragonfruit cube") &&
                              Catch::Matchers::ContainsSubstring("img9"));
    }
    SECTION("duplicate id") {
        auto path = write_file(tmp.file("ann.jsonl"),
                               R"({"id":"a","labels_l1":["rice"]})"
                               "\n"
                               R"({"id":"a","labels_l1":["eggs"]})"
                               "\n");
        CHECK_THROWS_WITH(load_annotations(path, h),
                          Catch::Matchers::ContainsSubstring("duplicate"));
    }
    SECTION("empty label set") {
        auto path = write_file(tmp.file("ann.jsonl"), R"({"id":"a","labels_l1":[]})"
                                                      "\n");
        CHECK_THROWS_WITH(load_annotations(path, h),
                          Catch::Matchers::ContainsSubstring("empty label set"));
    }
}

TEST_CASE("load_annotations: derived-label consistency on the demo fixture") {
    auto h = demo();
    auto split = load_annotations(testutil::data_file("demo_annotations.jsonl"), h);
    CHECK(split.size() == 8);
    for (const auto& s : split.samples) {
        auto [y2, y3] = derive_label_sets(h, s.y1);
        CHECK(s.y2 == y2);
        CHECK(s.y3 == y3);
    }
}

TEST_CASE("generate_synthetic: deterministic under a fixed seed") {
    SyntheticSpec spec;
    spec.seed = 7;
    spec.split_sizes = {20, 5, 10};
    auto a = generate_synthetic(spec);
    auto b = generate_synthetic(spec);
    CHECK(a.hierarchy.digest() == b.hierarchy.digest());
    CHECK(a.bank.digest() == b.bank.digest());
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train.samples[i].id == b.train.samples[i].id);
        CHECK(a.train.samples[i].y1 == b.train.samples[i].y1);
        CHECK(a.features->resolve(a.train.samples[i].id) ==
              b.features->resolve(b.train.samples[i].id));
    }
}

TEST_CASE("generate_synthetic: level sizes and derived labels by construction") {
    SyntheticSpec spec;
    spec.split_sizes = {30, 5, 5};
    auto data = generate_synthetic(spec);
    CHECK(data.hierarchy.level(1).size() == 12);
    CHECK(data.hierarchy.level(2).size() == 6);
    CHECK(data.hierarchy.level(3).size() == 3);
    for (const auto& s : data.train.samples) {
        REQUIRE(!s.y1.empty());
        auto [y2, y3] = derive_label_sets(data.hierarchy, s.y1);
        CHECK(s.y2 == y2);
        CHECK(s.y3 == y3);
    }
}

TEST_CASE("generate_synthetic: noise-free samples are nearest-prototype separable") {
    SyntheticSpec spec;
    spec.seed = 11;
    spec.noise_sigma = 0.0;
    spec.labels_min = 1;
    spec.labels_max = 1;
    spec.split_sizes = {60, 0, 0};
    auto data = generate_synthetic(spec);

    std::size_t correct = 0;
    for (const auto& s : data.train.samples) {
        const auto& features = data.features->resolve(s.id);
        std::vector<std::vector<double>> regions;
        for (std::size_t r = 0; r < features.rows(); ++r) {
            regions.emplace_back(features.row(r).begin(), features.row(r).end());
        }
        auto predicted = oracles::oracle_nearest_prototype(regions, data.bank.prototypes, 0.9);
        LabelSet names;
        for (int idx : predicted) {
            names.insert(data.hierarchy.level(1).labels[static_cast<std::size_t>(idx)]);
        }
        correct += names == s.y1;
    }
    CHECK(correct == data.train.size());  // F1 = 1.0 at level 1
}

TEST_CASE("generate_synthetic: invalid specs rejected") {
    SyntheticSpec spec;
    SECTION("too many labels per sample") {
        spec.labels_max = 99;
        CHECK_THROWS(generate_synthetic(spec));
    }
    SECTION("levels not nested") {
        spec.n_l2 = 20;
        CHECK_THROWS(generate_synthetic(spec));
    }
    SECTION("labels exceed regions") {
        spec.regions = 2;
        spec.labels_max = 3;
        CHECK_THROWS(generate_synthetic(spec));
    }
}
