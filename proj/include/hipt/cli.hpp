#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hipt/backbone.hpp"
#include "hipt/config.hpp"
#include "hipt/datamodel.hpp"
#include "hipt/hierarchy.hpp"
#include "hipt/metrics.hpp"
#include "hipt/prompthead.hpp"
#include "hipt/trainer.hpp"
#include "hipt/zeroshot.hpp"

namespace hipt::cli {

inline std::string basename_of(const std::string& path) {
    return std::filesystem::path(path).filename().string();
}

inline std::string digest_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open file for digest: " + path);
    Digest d;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        d.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return d.hex();
}

inline void write_hierarchy_tsv(const std::string& path, const Hierarchy& h) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write hierarchy file: " + path);
    out << "l1\tl2\tl3\n";
    for (const auto& l1 : h.level(1).labels) {
        const std::string& l2 = h.parent_l1_to_l2.at(l1);
        out << l1 << "\t" << l2 << "\t" << h.parent_l2_to_l3.at(l2) << "\n";
    }
}

namespace detail {

/// Everything a train/eval run needs, resolved from config.
struct Workspace {
    Hierarchy hierarchy;
    DatasetSplit train, val, test;
    std::unique_ptr<BackboneAdapter> backbone;
    std::map<std::string, std::string> input_digests;

    const DatasetSplit& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw Error("unknown split '" + name + "' (expected train|val|test)");
    }
};

inline SyntheticSpec synth_spec_from_config(const RunConfig& cfg) {
    SyntheticSpec spec;
    spec.seed = cfg.get_seed("synth.seed", spec.seed);
    spec.n_l1 = static_cast<int>(cfg.get_int("synth.n_l1", spec.n_l1));
    spec.n_l2 = static_cast<int>(cfg.get_int("synth.n_l2", spec.n_l2));
    spec.n_l3 = static_cast<int>(cfg.get_int("synth.n_l3", spec.n_l3));
    spec.d = static_cast<int>(cfg.get_int("synth.d", spec.d));
    spec.regions = static_cast<int>(cfg.get_int("synth.regions", spec.regions));
    spec.noise_sigma = cfg.get_double("synth.noise_sigma", spec.noise_sigma);
    spec.labels_min = static_cast<int>(cfg.get_int("synth.labels_min", spec.labels_min));
    spec.labels_max = static_cast<int>(cfg.get_int("synth.labels_max", spec.labels_max));
    spec.split_sizes[0] = static_cast<int>(cfg.get_int("synth.train_size", spec.split_sizes[0]));
    spec.split_sizes[1] = static_cast<int>(cfg.get_int("synth.val_size", spec.split_sizes[1]));
    spec.split_sizes[2] = static_cast<int>(cfg.get_int("synth.test_size", spec.split_sizes[2]));
    return spec;
}

inline Workspace build_workspace(const RunConfig& cfg, bool need_backbone) {
    Workspace ws;
    std::string source = cfg.get("data.source", "synthetic");
    std::string backbone_kind = cfg.get("backbone.kind", "synthetic");
    int d_tok = static_cast<int>(cfg.get_int("backbone.d_tok", 512));
    double logit_scale = cfg.get_double("backbone.logit_scale", 100.0);

    if (source == "synthetic") {
        SyntheticSpec spec = synth_spec_from_config(cfg);
        SyntheticDataset data = generate_synthetic(spec);
        ws.hierarchy = std::move(data.hierarchy);
        ws.train = std::move(data.train);
        ws.val = std::move(data.val);
        ws.test = std::move(data.test);
        if (need_backbone && backbone_kind == "synthetic") {
            ws.backbone = std::make_unique<SyntheticBackbone>(
                spec.seed, spec.d, d_tok, spec.regions, data.features, std::move(data.bank),
                logit_scale);
        }
    } else if (source == "files") {
        std::string hier_path = cfg.get("data.hierarchy", "");
        if (hier_path.empty()) throw Error("data.source=files requires data.hierarchy");
        ws.hierarchy = load_hierarchy(hier_path);
        ws.input_digests["hierarchy:" + basename_of(hier_path)] = digest_file(hier_path);
        auto load_split = [&](const char* key, const char* name) {
            std::string path = cfg.get(key, "");
            if (path.empty()) return DatasetSplit{name, {}};
            ws.input_digests["annotations:" + basename_of(path)] = digest_file(path);
            return load_annotations(path, ws.hierarchy, name);
        };
        ws.train = load_split("data.train", "train");
        ws.val = load_split("data.val", "val");
        ws.test = load_split("data.test", "test");
        if (need_backbone && backbone_kind == "synthetic") {
            throw Error("the synthetic backbone only resolves synthetic samples; "
                        "use data.source=synthetic or an external backbone");
        }
    } else {
        throw Error("unknown data.source '" + source + "' (expected synthetic|files)");
    }

    if (need_backbone && !ws.backbone) {
        if (backbone_kind.rfind("external:", 0) == 0) {
            ws.backbone = make_external_backbone(backbone_kind.substr(9));
        } else if (backbone_kind != "synthetic") {
            throw Error("unknown backbone.kind '" + backbone_kind +
                        "' (expected synthetic|external:<name>)");
        }
    }
    return ws;
}

inline TrainConfig train_config_from(const RunConfig& cfg, int stage) {
    TrainConfig tc = stage == 1 ? TrainConfig::stage1_defaults() : TrainConfig::stage2_defaults();
    std::string prefix = "train.stage" + std::to_string(stage) + ".";
    tc.epochs = static_cast<int>(cfg.get_int(prefix + "epochs", tc.epochs));
    tc.lr0 = cfg.get_double(prefix + "lr0", tc.lr0);
    tc.batch_size = static_cast<int>(cfg.get_int("train.batch_size", tc.batch_size));
    tc.momentum = cfg.get_double("train.momentum", tc.momentum);
    tc.weight_decay = cfg.get_double("train.weight_decay", tc.weight_decay);
    tc.seed = cfg.get_seed("train.seed", tc.seed);
    tc.checkpoint_every = static_cast<int>(cfg.get_int("train.checkpoint_every", tc.checkpoint_every));
    tc.select_best = cfg.get_bool("train.select_best", tc.select_best);
    tc.lambda.allow_unnormalized = cfg.get_bool("stage2.allow_unnormalized", false);
    tc.lambda.lambda1 = cfg.get_double("stage2.lambda1", tc.lambda.lambda1);
    tc.lambda.lambda2 = cfg.get_double("stage2.lambda2", tc.lambda.lambda2);
    tc.lambda.lambda3 = cfg.get_double("stage2.lambda3", tc.lambda.lambda3);
    tc.asl.gamma_pos = cfg.get_double("loss.gamma_pos", tc.asl.gamma_pos);
    tc.asl.gamma_neg = cfg.get_double("loss.gamma_neg", tc.asl.gamma_neg);
    tc.asl.margin = cfg.get_double("loss.margin", tc.asl.margin);
    tc.asl.eps = cfg.get_double("loss.eps", tc.asl.eps);
    tc.prompts.m_pos = static_cast<int>(cfg.get_int("prompt.m_pos", tc.prompts.m_pos));
    tc.prompts.m_neg = static_cast<int>(cfg.get_int("prompt.m_neg", tc.prompts.m_neg));
    tc.prompts.d_tok = static_cast<int>(cfg.get_int("backbone.d_tok", tc.prompts.d_tok));
    tc.prompts.init_std = cfg.get_double("prompt.init_std", tc.prompts.init_std);
    tc.tau = cfg.get_double("prompt.tau", tc.tau);
    tc.agg_scale = cfg.get_double("prompt.agg_scale", tc.agg_scale);
    return tc;
}

/// Fill the config with every effective value so results echo the full run.
inline RunConfig materialize_effective(RunConfig cfg, int stage) {
    TrainConfig tc = train_config_from(cfg, stage);
    std::string prefix = "train.stage" + std::to_string(stage) + ".";
    auto put_num = [&cfg](const std::string& key, double v) {
        std::ostringstream os;
        os << v;
        cfg.set(key, os.str());
    };
    cfg.set("data.source", cfg.get("data.source", "synthetic"));
    cfg.set("backbone.kind", cfg.get("backbone.kind", "synthetic"));
    put_num("backbone.d_tok", tc.prompts.d_tok);
    put_num("backbone.logit_scale", cfg.get_double("backbone.logit_scale", 100.0));
    put_num(prefix + "epochs", tc.epochs);
    put_num(prefix + "lr0", tc.lr0);
    put_num("train.batch_size", tc.batch_size);
    put_num("train.momentum", tc.momentum);
    put_num("train.weight_decay", tc.weight_decay);
    put_num("train.seed", static_cast<double>(tc.seed));
    put_num("train.checkpoint_every", tc.checkpoint_every);
    cfg.set("train.select_best", tc.select_best ? "true" : "false");
    put_num("stage2.lambda1", tc.lambda.lambda1);
    put_num("stage2.lambda2", tc.lambda.lambda2);
    put_num("stage2.lambda3", tc.lambda.lambda3);
    put_num("loss.gamma_pos", tc.asl.gamma_pos);
    put_num("loss.gamma_neg", tc.asl.gamma_neg);
    put_num("loss.margin", tc.asl.margin);
    put_num("loss.eps", tc.asl.eps);
    put_num("prompt.m_pos", tc.prompts.m_pos);
    put_num("prompt.m_neg", tc.prompts.m_neg);
    put_num("prompt.init_std", tc.prompts.init_std);
    put_num("prompt.tau", tc.tau);
    put_num("prompt.agg_scale", tc.agg_scale);
    cfg.set("loss.reduction", "mean-over-classes");  // results metadata
    cfg.set("metrics.averaging", "example-based");
    if (cfg.get("data.source", "synthetic") == "synthetic") {
        SyntheticSpec spec = synth_spec_from_config(cfg);
        put_num("synth.seed", static_cast<double>(spec.seed));
        put_num("synth.n_l1", spec.n_l1);
        put_num("synth.n_l2", spec.n_l2);
        put_num("synth.n_l3", spec.n_l3);
        put_num("synth.d", spec.d);
        put_num("synth.regions", spec.regions);
        put_num("synth.noise_sigma", spec.noise_sigma);
        put_num("synth.labels_min", spec.labels_min);
        put_num("synth.labels_max", spec.labels_max);
        put_num("synth.train_size", spec.split_sizes[0]);
        put_num("synth.val_size", spec.split_sizes[1]);
        put_num("synth.test_size", spec.split_sizes[2]);
    }
    return cfg;
}

inline void write_loss_csv(const std::string& path, const TrainReport& report) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write loss file: " + path);
    out << "epoch";
    for (int level : report.levels) out << ",loss_l" << level;
    out << ",combined";
    if (!report.val_f1.empty()) out << ",val_mean_f1";
    out << "\n";
    std::size_t epochs = report.epoch_combined.size();
    char buf[64];
    for (std::size_t e = 0; e < epochs; ++e) {
        out << (e + 1);
        for (const auto& series : report.epoch_losses) {
            std::snprintf(buf, sizeof(buf), ",%.12g", series[e]);
            out << buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.12g", report.epoch_combined[e]);
        out << buf;
        if (!report.val_f1.empty()) {
            std::snprintf(buf, sizeof(buf), ",%.12g", report.val_f1[e]);
            out << buf;
        }
        out << "\n";
    }
}

inline void write_train_report(const std::string& path, const TrainReport& report,
                               const std::map<std::string, std::string>& config_echo,
                               const std::map<std::string, std::string>& input_digests) {
    nlohmann::json j;
    j["stage"] = report.stage;
    j["levels"] = report.levels;
    j["epoch_losses"] = report.epoch_losses;
    j["epoch_combined"] = report.epoch_combined;
    j["val_mean_f1"] = report.val_f1;
    j["best_epoch"] = report.best_epoch;
    j["backbone_digest_before"] = report.backbone_digest_before;
    j["backbone_digest_after"] = report.backbone_digest_after;
    j["wall_seconds"] = report.wall_seconds;  // timing only; excluded from repro checks
    j["config"] = config_echo;
    j["inputs"] = input_digests;
    std::ofstream out(path);
    if (!out) throw Error("cannot write train report: " + path);
    out << j.dump(2) << "\n";
}

inline void write_predictions_jsonl(const std::string& path, const std::vector<std::string>& ids,
                                    const std::vector<LabelSet>& preds, int level) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write predictions file: " + path);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        nlohmann::json j;
        j["id"] = ids[i];
        j["level"] = level;
        j["labels"] = std::vector<std::string>(preds[i].begin(), preds[i].end());
        out << j.dump() << "\n";
    }
}

/// Read {"id", "labels" or "labels_l1"} JSON-lines without vocabulary checks.
inline std::pair<std::vector<std::string>, std::vector<LabelSet>> load_label_sets(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open predictions file: " + path);
    std::vector<std::string> ids;
    std::vector<LabelSet> sets;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string stripped = trim(line);
        if (stripped.empty()) continue;
        try {
            nlohmann::json j = nlohmann::json::parse(stripped);
            ids.push_back(j.at("id").get<std::string>());
            LabelSet labels;
            const auto& arr = j.contains("labels") ? j["labels"] : j.at("labels_l1");
            for (const auto& item : arr) labels.insert(trim(item.get<std::string>()));
            sets.push_back(std::move(labels));
        } catch (const nlohmann::json::exception& e) {
            throw Error("predictions file " + path + " line " + std::to_string(lineno) + ": " +
                        e.what());
        }
    }
    return {ids, sets};
}

// ---------------------------------------------------------------------------
// Subcommand bodies. They throw hipt::Error for domain failures; run() maps
// those to exit code 1.
// ---------------------------------------------------------------------------

inline int cmd_hierarchy(const std::string& subcmd, const std::string& path, std::ostream& out) {
    Hierarchy h = load_hierarchy(path);  // throws on any invariant violation
    if (subcmd == "validate") {
        out << "ok: " << path << " is a valid 3-level hierarchy\n";
        out << "digest: " << h.digest() << "\n";
        return 0;
    }
    for (int level = 1; level <= 3; ++level) {
        out << "level " << level << ": " << h.level(level).size() << "\n";
    }
    out << h.level(1).size() << " / " << h.level(2).size() << " / " << h.level(3).size() << "\n";
    return 0;
}

inline int cmd_synth(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    SyntheticSpec spec = synth_spec_from_config(cfg);
    SyntheticDataset data = generate_synthetic(spec);
    write_hierarchy_tsv((fs::path(out_dir) / "hierarchy.tsv").string(), data.hierarchy);
    write_annotations((fs::path(out_dir) / "annotations_train.jsonl").string(), data.train);
    write_annotations((fs::path(out_dir) / "annotations_val.jsonl").string(), data.val);
    write_annotations((fs::path(out_dir) / "annotations_test.jsonl").string(), data.test);
    out << "wrote synthetic hierarchy (" << data.hierarchy.level(1).size() << " / "
        << data.hierarchy.level(2).size() << " / " << data.hierarchy.level(3).size()
        << ") and splits (" << data.train.size() << " / " << data.val.size() << " / "
        << data.test.size() << ") to " << out_dir << "\n";
    return 0;
}

inline int cmd_train(int stage, const RunConfig& raw_cfg, const std::string& out_dir,
                     const std::string& stage1_dir, std::ostream& out) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    RunConfig cfg = materialize_effective(raw_cfg, stage);
    Workspace ws = build_workspace(cfg, /*need_backbone=*/true);
    if (!ws.backbone) throw Error("no backbone available for training");
    TrainConfig tc = train_config_from(cfg, stage);
    tc.stage = stage;

    auto ckpt_path = [&](int level, int epoch) {
        std::string name = "prompts_stage" + std::to_string(stage) + "_l" + std::to_string(level);
        if (epoch >= 0) {
            char buf[24];
            std::snprintf(buf, sizeof(buf), "_epoch%03d", epoch);
            name += buf;
        }
        return (fs::path(out_dir) / (name + ".json")).string();
    };

    if (stage == 1) {
        TrainReport merged;
        merged.stage = 1;
        for (int level = 1; level <= 3; ++level) {
            auto on_ckpt = [&](int epoch, const std::vector<const PromptState*>& states) {
                bool final = epoch >= tc.epochs;
                save_checkpoint(*states[0], ckpt_path(level, final ? -1 : epoch), cfg.echo());
            };
            auto [state, report] =
                train_stage1(level, ws.train, &ws.val, *ws.backbone, ws.hierarchy, tc, nullptr,
                             on_ckpt);
            out << "stage 1 level " << level << ": final loss "
                << report.epoch_losses[0].back() << ", checkpoint " << ckpt_path(level, -1)
                << "\n";
            merged.levels.push_back(level);
            merged.epoch_losses.push_back(report.epoch_losses[0]);
            merged.wall_seconds += report.wall_seconds;
            if (level == 1) {
                merged.backbone_digest_before = report.backbone_digest_before;
            }
            merged.backbone_digest_after = report.backbone_digest_after;
        }
        // The combined column is the mean per-level loss; stage 1 has no
        // weighted objective.
        std::size_t epochs = merged.epoch_losses[0].size();
        merged.epoch_combined.assign(epochs, 0.0);
        for (const auto& series : merged.epoch_losses) {
            for (std::size_t e = 0; e < epochs; ++e) merged.epoch_combined[e] += series[e] / 3.0;
        }
        write_loss_csv((fs::path(out_dir) / "loss_stage1.csv").string(), merged);
        write_train_report((fs::path(out_dir) / "train_report_stage1.json").string(), merged,
                           cfg.echo(), ws.input_digests);
        return 0;
    }

    // Stage 2: resume from the three stage-1 checkpoints.
    std::string ckpt_dir = stage1_dir.empty() ? out_dir : stage1_dir;
    std::array<PromptState, 3> states;
    for (int level = 1; level <= 3; ++level) {
        std::string path =
            (fs::path(ckpt_dir) / ("prompts_stage1_l" + std::to_string(level) + ".json")).string();
        if (!fs::exists(path)) {
            throw Error("missing stage-1 checkpoint: " + path +
                        " (run 'train --stage 1' first or pass --stage1-dir)");
        }
        states[static_cast<std::size_t>(level - 1)] =
            load_checkpoint(path, ws.hierarchy.level(level));
    }
    auto on_ckpt = [&](int epoch, const std::vector<const PromptState*>& sts) {
        bool final = epoch >= tc.epochs;
        for (std::size_t k = 0; k < sts.size(); ++k) {
            save_checkpoint(*sts[k], ckpt_path(static_cast<int>(k) + 1, final ? -1 : epoch),
                            cfg.echo());
        }
    };
    auto [trained, report] =
        train_stage2(std::move(states), ws.train, &ws.val, *ws.backbone, ws.hierarchy, tc, on_ckpt);
    out << "stage 2: final combined loss " << report.epoch_combined.back() << ", lambdas ("
        << tc.lambda.lambda1 << ", " << tc.lambda.lambda2 << ", " << tc.lambda.lambda3 << ")\n";
    write_loss_csv((fs::path(out_dir) / "loss_stage2.csv").string(), report);
    write_train_report((fs::path(out_dir) / "train_report_stage2.json").string(), report,
                       cfg.echo(), ws.input_digests);
    return 0;
}

inline int cmd_eval(const std::vector<std::string>& checkpoint_paths, const std::string& split_name,
                    const RunConfig& raw_cfg, const std::string& out_dir, std::ostream& out) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    RunConfig cfg = materialize_effective(raw_cfg, 1);
    Workspace ws = build_workspace(cfg, /*need_backbone=*/true);
    if (!ws.backbone) throw Error("no backbone available for evaluation");
    const DatasetSplit& split = ws.split(split_name);
    if (split.size() == 0) throw Error("split '" + split_name + "' is empty");

    std::vector<PromptState> states;
    std::map<std::string, std::string> digests = ws.input_digests;
    for (const auto& path : checkpoint_paths) {
        digests["checkpoint:" + basename_of(path)] = digest_file(path);
        // Level is read from the file, then the class digest is verified
        // against that level of the active hierarchy.
        std::ifstream probe(path);
        if (!probe) throw Error("cannot open checkpoint: " + path);
        nlohmann::json j;
        probe >> j;
        int level = j.at("level_index").get<int>();
        states.push_back(load_checkpoint(path, ws.hierarchy.level(level)));
    }
    if (states.empty()) throw Error("no checkpoints given");

    double tau = cfg.get_double("prompt.tau", 0.5);
    double agg = cfg.get_double("prompt.agg_scale", -1.0);
    std::vector<const PromptState*> views;
    for (const auto& s : states) views.push_back(&s);
    std::vector<std::vector<LabelSet>> predictions;
    auto reports =
        evaluate_states(views, *ws.backbone, split, ws.hierarchy, tau, agg, &predictions);

    std::vector<std::string> ids;
    for (const auto& s : split.samples) ids.push_back(s.id);
    for (std::size_t i = 0; i < states.size(); ++i) {
        write_predictions_jsonl(
            (fs::path(out_dir) / ("predictions_l" + std::to_string(states[i].level_index) + ".jsonl"))
                .string(),
            ids, predictions[i], states[i].level_index);
    }
    write_results_json((fs::path(out_dir) / "results.json").string(), reports, cfg.echo(), digests);
    write_results_csv((fs::path(out_dir) / "results.csv").string(), reports, cfg.echo(), digests);
    write_per_class_f1_csv((fs::path(out_dir) / "per_class_f1.csv").string(), reports, cfg.echo(),
                           digests);
    for (const auto& r : reports) {
        out << "level " << r.level_index << ": P " << hipt::detail::fmt2(r.precision) << "  R "
            << hipt::detail::fmt2(r.recall) << "  IOU " << hipt::detail::fmt2(r.iou) << "  F1 "
            << hipt::detail::fmt2(r.f1) << "  #P " << r.trainable_params << "\n";
    }
    return 0;
}

inline int cmd_zeroshot(const std::string& predictions_path, const std::string& annotations_path,
                        const std::string& hierarchy_path, const std::string& aliases_path,
                        const std::string& out_dir, std::ostream& out) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Hierarchy h = load_hierarchy(hierarchy_path);
    DatasetSplit split = load_annotations(annotations_path, h, "eval");
    std::optional<AliasTable> aliases;
    if (!aliases_path.empty()) aliases = AliasTable::load(aliases_path);
    ExternalPredictions preds =
        load_predictions(predictions_path, h, aliases ? &*aliases : nullptr);

    auto reports_arr = evaluate_zeroshot(preds, split, h);
    std::vector<MetricsReport> reports(reports_arr.begin(), reports_arr.end());

    std::map<std::string, std::string> config_echo = {
        {"zeroshot.matching", aliases ? "trim+lowercase+aliases" : "trim+lowercase"},
        {"metrics.averaging", "example-based"},
    };
    std::map<std::string, std::string> digests = {
        {"predictions:" + basename_of(predictions_path), digest_file(predictions_path)},
        {"annotations:" + basename_of(annotations_path), digest_file(annotations_path)},
        {"hierarchy:" + basename_of(hierarchy_path), digest_file(hierarchy_path)},
    };
    if (!aliases_path.empty()) digests["aliases:" + basename_of(aliases_path)] = digest_file(aliases_path);

    nlohmann::json j;
    j["config"] = config_echo;
    j["inputs"] = digests;
    j["unmatched_label_count"] = preds.unmatched_count();
    j["unmatched_labels"] = preds.unmatched;
    j["reports"] = nlohmann::json::array();
    for (const auto& r : reports) j["reports"].push_back(report_to_json(r));
    std::ofstream results((fs::path(out_dir) / "zeroshot_results.json").string());
    if (!results) throw Error("cannot write zeroshot results");
    results << j.dump(2) << "\n";

    write_results_csv((fs::path(out_dir) / "zeroshot_results.csv").string(), reports, config_echo,
                      digests);
    write_per_class_f1_csv((fs::path(out_dir) / "per_class_f1.csv").string(), reports, config_echo,
                           digests);

    // Mapped prediction files, one per level, for downstream diffing.
    std::vector<std::string> ids;
    std::vector<LabelSet> p1_aligned;
    {
        std::unordered_map<std::string, std::size_t> by_id;
        for (std::size_t i = 0; i < preds.ids.size(); ++i) by_id[preds.ids[i]] = i;
        for (const auto& s : split.samples) {
            ids.push_back(s.id);
            p1_aligned.push_back(preds.p1[by_id.at(s.id)]);
        }
    }
    auto [p2, p3] = map_predictions(h, p1_aligned);
    write_predictions_jsonl((fs::path(out_dir) / "predictions_l1.jsonl").string(), ids, p1_aligned, 1);
    write_predictions_jsonl((fs::path(out_dir) / "predictions_l2.jsonl").string(), ids, p2, 2);
    write_predictions_jsonl((fs::path(out_dir) / "predictions_l3.jsonl").string(), ids, p3, 3);

    out << "unmatched labels: " << preds.unmatched_count() << "\n";
    for (const auto& r : reports) {
        out << "level " << r.level_index << ": P " << hipt::detail::fmt2(r.precision) << "  R "
            << hipt::detail::fmt2(r.recall) << "  IOU " << hipt::detail::fmt2(r.iou) << "  F1 "
            << hipt::detail::fmt2(r.f1) << "\n";
    }
    return 0;
}

inline int cmd_diff(const std::string& base_path, const std::string& new_path,
                    const std::string& annotations_path, const std::string& hierarchy_path,
                    int level, const std::string& out_dir, std::ostream& out) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Hierarchy h = load_hierarchy(hierarchy_path);
    DatasetSplit split = load_annotations(annotations_path, h, "eval");
    auto [base_ids, base_sets] = load_label_sets(base_path);
    auto [new_ids, new_sets] = load_label_sets(new_path);

    auto align = [&](const std::vector<std::string>& ids, std::vector<LabelSet>& sets,
                     const char* which) {
        std::unordered_map<std::string, std::size_t> by_id;
        for (std::size_t i = 0; i < ids.size(); ++i) by_id[ids[i]] = i;
        std::vector<LabelSet> aligned;
        for (const auto& s : split.samples) {
            auto it = by_id.find(s.id);
            if (it == by_id.end()) {
                throw Error(std::string(which) + " predictions missing sample id '" + s.id + "'");
            }
            aligned.push_back(sets[it->second]);
        }
        sets = std::move(aligned);
    };
    align(base_ids, base_sets, "base");
    align(new_ids, new_sets, "new");

    std::vector<std::string> ids;
    for (const auto& s : split.samples) ids.push_back(s.id);
    auto records = qualitative_diff(base_sets, new_sets, split.targets_at(level), ids, &h, level);

    nlohmann::json j;
    j["level"] = level;
    j["config"] = {{"diff.level", std::to_string(level)}};
    j["inputs"] = {
        {"base:" + basename_of(base_path), digest_file(base_path)},
        {"new:" + basename_of(new_path), digest_file(new_path)},
        {"annotations:" + basename_of(annotations_path), digest_file(annotations_path)},
        {"hierarchy:" + basename_of(hierarchy_path), digest_file(hierarchy_path)},
    };
    j["records"] = nlohmann::json::array();
    std::ofstream text((fs::path(out_dir) / "diff.txt").string());
    if (!text) throw Error("cannot write diff report");
    std::size_t changed = 0;
    for (const auto& rec : records) {
        if (rec.added_correct.empty() && rec.removed_incorrect.empty()) continue;
        ++changed;
        nlohmann::json rj;
        rj["id"] = rec.id;
        rj["added_correct"] = std::vector<std::string>(rec.added_correct.begin(),
                                                       rec.added_correct.end());
        rj["removed_incorrect"] = std::vector<std::string>(rec.removed_incorrect.begin(),
                                                           rec.removed_incorrect.end());
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& [kept, removed] : rec.sibling_pairs) {
            pairs.push_back({{"kept", kept}, {"removed", removed}});
        }
        rj["sibling_pairs"] = pairs;
        j["records"].push_back(rj);

        text << rec.id << "\n";
        for (const auto& l : rec.added_correct) text << "  + " << l << " (true positive added)\n";
        for (const auto& l : rec.removed_incorrect) text << "  - " << l << " (incorrect removed)\n";
        for (const auto& [kept, removed] : rec.sibling_pairs) {
            text << "  ~ kept '" << kept << "', removed sibling '" << removed << "'\n";
        }
    }
    std::ofstream jf((fs::path(out_dir) / "diff.json").string());
    if (!jf) throw Error("cannot write diff report");
    jf << j.dump(2) << "\n";
    out << "samples with changes: " << changed << " of " << records.size() << "\n";
    return 0;
}

}  // namespace detail

/**
 * Entry point shared by the binary and the tests. Returns the process exit
 * code: 0 success, 1 validation/domain error, 2 usage error.
 */
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
    CLI::App app{"hierarchical dual-prompt tuning toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", seed_override;
    bool allow_unnormalized = false;
    app.add_option("--config", config_path, "key=value config file")->expected(1);
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed_override, "override train.seed / synth.seed");
    app.add_flag("--allow-unnormalized-lambda", allow_unnormalized,
                 "accept stage-2 lambda weights that do not sum to 1");

    auto* hier = app.add_subcommand("hierarchy", "validate or summarize a hierarchy file");
    std::string hier_sub, hier_path;
    hier->add_option("action", hier_sub, "validate|stats")
        ->required()
        ->check(CLI::IsMember({"validate", "stats"}));
    hier->add_option("file", hier_path, "hierarchy TSV")->required();

    auto* synth = app.add_subcommand("synth", "materialize the synthetic dataset to files");

    auto* train = app.add_subcommand("train", "run stage-1 or stage-2 prompt tuning");
    int stage = 1;
    std::string stage1_dir;
    train->add_option("--stage", stage, "training stage (1 or 2)")->required();
    train->add_option("--stage1-dir", stage1_dir, "directory with stage-1 checkpoints (stage 2)");

    auto* eval = app.add_subcommand("eval", "evaluate checkpoints on a split");
    std::vector<std::string> checkpoint_paths;
    std::string split_name = "test";
    eval->add_option("--checkpoint", checkpoint_paths, "checkpoint file (repeatable)")
        ->required();
    eval->add_option("--split", split_name, "train|val|test (default test)");

    auto* zeroshot = app.add_subcommand("zeroshot", "score external fine-grained predictions");
    std::string zs_predictions, zs_annotations, zs_hierarchy, zs_aliases;
    zeroshot->add_option("--predictions", zs_predictions, "JSON-lines predictions")->required();
    zeroshot->add_option("--annotations", zs_annotations, "JSON-lines annotations")->required();
    zeroshot->add_option("--hierarchy", zs_hierarchy, "hierarchy TSV")->required();
    zeroshot->add_option("--aliases", zs_aliases, "variant->canonical alias TSV");

    auto* diff = app.add_subcommand("diff", "qualitative prediction diff");
    std::string diff_base, diff_new, diff_annotations, diff_hierarchy;
    int diff_level = 1;
    diff->add_option("--base", diff_base, "baseline predictions JSON-lines")->required();
    diff->add_option("--new", diff_new, "new predictions JSON-lines")->required();
    diff->add_option("--annotations", diff_annotations, "JSON-lines annotations")->required();
    diff->add_option("--hierarchy", diff_hierarchy, "hierarchy TSV")->required();
    diff->add_option("--level", diff_level, "hierarchy level of the prediction files");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg;
        if (!config_path.empty()) cfg = RunConfig::load(config_path);
        if (!seed_override.empty()) {
            cfg.set("train.seed", seed_override);
            cfg.set("synth.seed", seed_override);
        }
        if (allow_unnormalized) cfg.set("stage2.allow_unnormalized", "true");

        if (*hier) return detail::cmd_hierarchy(hier_sub, hier_path, out);
        if (*synth) return detail::cmd_synth(cfg, out_dir, out);
        if (*train) {
            if (stage != 1 && stage != 2) throw Error("--stage must be 1 or 2");
            return detail::cmd_train(stage, cfg, out_dir, stage1_dir, out);
        }
        if (*eval) return detail::cmd_eval(checkpoint_paths, split_name, cfg, out_dir, out);
        if (*zeroshot) {
            return detail::cmd_zeroshot(zs_predictions, zs_annotations, zs_hierarchy, zs_aliases,
                                        out_dir, out);
        }
        if (*diff) {
            return detail::cmd_diff(diff_base, diff_new, diff_annotations, diff_hierarchy,
                                    diff_level, out_dir, out);
        }
        err << "error: no subcommand\n";
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace hipt::cli
