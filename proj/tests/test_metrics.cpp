#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "hipt/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using Catch::Matchers::WithinAbs;
using hipt::evaluate;
using hipt::f1_from_aggregates;
using hipt::LabelSet;
using hipt::LabelSpace;
using hipt::MetricsReport;
using hipt::per_class_f1;
using hipt::qualitative_diff;

TEST_CASE("evaluate: perfect predictions score 100 everywhere") {
    std::vector<LabelSet> preds = {{"a", "b"}, {"c"}, {"a", "d", "e"}};
    MetricsReport r = evaluate(preds, preds);
    CHECK_THAT(r.precision, WithinAbs(100.0, 1e-12));
    CHECK_THAT(r.recall, WithinAbs(100.0, 1e-12));
    CHECK_THAT(r.f1, WithinAbs(100.0, 1e-12));
    CHECK_THAT(r.iou, WithinAbs(100.0, 1e-12));
}

TEST_CASE("evaluate: one-sample hand example") {
    MetricsReport r = evaluate({{"a", "b", "d"}}, {{"a", "b", "c"}});
    CHECK_THAT(r.precision, WithinAbs(100.0 * 2 / 3, 1e-9));
    CHECK_THAT(r.recall, WithinAbs(100.0 * 2 / 3, 1e-9));
    CHECK_THAT(r.f1, WithinAbs(100.0 * 2 / 3, 1e-9));
    CHECK_THAT(r.iou, WithinAbs(50.0, 1e-9));
}

TEST_CASE("evaluate: empty prediction set has zero precision") {
    MetricsReport r = evaluate({{}}, {{"a"}});
    CHECK(r.precision == 0.0);
    CHECK(r.recall == 0.0);
    CHECK(r.f1 == 0.0);
    CHECK(r.iou == 0.0);
}

TEST_CASE("evaluate: errors on misuse") {
    CHECK_THROWS(evaluate({{"a"}}, {{"a"}, {"b"}}));
    CHECK_THROWS_WITH(evaluate({{"a"}}, {LabelSet{}}),
                      Catch::Matchers::ContainsSubstring("empty target"));
}

TEST_CASE("f1 identity holds on the reference (P, R, F1) triples") {
    struct Row {
        double p, r, f1;
    };
    // Reference triples where F1 must equal 2PR/(P+R) to two decimals.
    const Row rows[] = {
        {5.85, 11.61, 7.78},   {16.74, 23.38, 19.51}, {44.30, 51.06, 47.44},
        {61.60, 69.02, 65.10}, {64.01, 73.69, 68.51}, {72.62, 85.45, 78.51},
        {62.88, 69.17, 65.88}, {64.43, 73.54, 68.68}, {72.85, 85.35, 78.60},
    };
    for (const auto& row : rows) {
        CHECK_THAT(f1_from_aggregates(row.p, row.r), WithinAbs(row.f1, 0.01));
    }
    CHECK(f1_from_aggregates(0.0, 0.0) == 0.0);
}

TEST_CASE("metric oracle fixed points") {
    auto hand = oracles::oracle_metrics({{"a", "b", "d"}}, {{"a", "b", "c"}});
    CHECK_THAT(hand.precision, WithinAbs(66.67, 0.005));
    CHECK_THAT(hand.recall, WithinAbs(66.67, 0.005));
    CHECK_THAT(hand.iou, WithinAbs(50.00, 0.005));
    CHECK_THAT(hand.f1, WithinAbs(66.67, 0.005));

    auto perfect = oracles::oracle_metrics({{"a"}, {"b", "c"}}, {{"a"}, {"b", "c"}});
    CHECK(perfect.precision == 100.0);
    CHECK(perfect.f1 == 100.0);

    auto disjoint = oracles::oracle_metrics({{"x"}}, {{"y"}});
    CHECK(disjoint.precision == 0.0);
    CHECK(disjoint.recall == 0.0);
    CHECK(disjoint.iou == 0.0);
    CHECK(disjoint.f1 == 0.0);
}

TEST_CASE("evaluate matches the brute-force oracle on random instances") {
    std::mt19937_64 rng(2024);
    const char* vocab[] = {"a", "b", "c", "d", "e", "f", "g", "h"};
    for (int trial = 0; trial < 250; ++trial) {
        std::size_t n = 1 + rng() % 10;
        std::vector<LabelSet> preds(n), targets(n);
        std::vector<std::set<std::string>> opreds(n), otargets(n);
        for (std::size_t i = 0; i < n; ++i) {
            for (const char* v : vocab) {
                if (rng() % 3 == 0) {
                    preds[i].insert(v);
                    opreds[i].insert(v);
                }
                if (rng() % 3 == 0) {
                    targets[i].insert(v);
                    otargets[i].insert(v);
                }
            }
            if (targets[i].empty()) {
                targets[i].insert("a");
                otargets[i].insert("a");
            }
        }
        MetricsReport r = evaluate(preds, targets);
        auto o = oracles::oracle_metrics(opreds, otargets);
        CHECK(r.precision == o.precision);
        CHECK(r.recall == o.recall);
        CHECK(r.iou == o.iou);
        CHECK(r.f1 == o.f1);
    }
}

TEST_CASE("per_class_f1: exact, absent, and hand-built confusion") {
    auto space = LabelSpace::from_labels(1, {"a", "b", "c"});
    SECTION("predicted exactly where present") {
        std::vector<LabelSet> preds = {{"a"}, {}, {"a"}};
        std::vector<LabelSet> gts = {{"a"}, {"b"}, {"a"}};
        auto f1 = per_class_f1(preds, gts, space);
        CHECK(f1.at("a") == 100.0);
        CHECK(f1.at("b") == 0.0);          // never predicted, present once
        CHECK(f1.count("c") == 0);         // no positives, no predictions
    }
    SECTION("TP=1, FP=1, FN=1 gives 50") {
        std::vector<LabelSet> preds = {{"a"}, {"a"}, {}, {}};
        std::vector<LabelSet> gts = {{"a"}, {"b"}, {"a"}, {"b"}};
        auto f1 = per_class_f1(preds, gts, space);
        CHECK_THAT(f1.at("a"), WithinAbs(50.0, 1e-12));
    }
}

TEST_CASE("qualitative_diff: added, removed, and sibling pairs") {
    hipt::Hierarchy h =
        hipt::load_hierarchy(testutil::data_file("demo_hierarchy.tsv"));
    SECTION("black rice kept, rice removed, same parent") {
        auto recs = qualitative_diff({{"rice", "black rice"}}, {{"black rice"}},
                                     {{"black rice"}}, {"s1"}, &h, 1);
        REQUIRE(recs.size() == 1);
        CHECK(recs[0].removed_incorrect == LabelSet{"rice"});
        CHECK(recs[0].added_correct.empty());
        REQUIRE(recs[0].sibling_pairs.size() == 1);
        CHECK(recs[0].sibling_pairs[0].first == "black rice");
        CHECK(recs[0].sibling_pairs[0].second == "rice");
    }
    SECTION("identical predictions make an empty diff") {
        auto recs = qualitative_diff({{"rice"}}, {{"rice"}}, {{"rice"}}, {"s1"}, &h, 1);
        CHECK(recs[0].added_correct.empty());
        CHECK(recs[0].removed_incorrect.empty());
        CHECK(recs[0].sibling_pairs.empty());
    }
    SECTION("complemented true positive") {
        auto recs = qualitative_diff({{}}, {{"eggs"}}, {{"eggs"}}, {"s1"}, &h, 1);
        CHECK(recs[0].added_correct == LabelSet{"eggs"});
    }
    SECTION("misaligned inputs") {
        CHECK_THROWS(qualitative_diff({{}}, {{}, {}}, {{}}, {"s1"}, &h, 1));
    }
}

TEST_CASE("evaluate(x, x) is a perfect score for arbitrary non-degenerate x") {
    std::mt19937_64 rng(5);
    const char* vocab[] = {"u", "v", "w", "x", "y"};
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<LabelSet> sets(1 + rng() % 6);
        for (auto& s : sets) {
            for (const char* v : vocab) {
                if (rng() % 2 == 0) s.insert(v);
            }
            if (s.empty()) s.insert("u");
        }
        MetricsReport r = evaluate(sets, sets);
        CHECK(r.precision == 100.0);
        CHECK(r.recall == 100.0);
        CHECK(r.f1 == 100.0);
        CHECK(r.iou == 100.0);
    }
}
