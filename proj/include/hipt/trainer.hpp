#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "hipt/backbone.hpp"
#include "hipt/datamodel.hpp"
#include "hipt/hierarchy.hpp"
#include "hipt/loss.hpp"
#include "hipt/metrics.hpp"
#include "hipt/prompthead.hpp"

namespace hipt {

/// Cosine annealing: lr(t) = lr0 * 0.5 * (1 + cos(pi * t / T)).
inline double cosine_lr(double lr0, long step, long total_steps) {
    if (total_steps <= 0) return lr0;
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) /
                                       static_cast<double>(total_steps)));
}

struct PromptOptions {
    int m_pos = 16;
    int m_neg = 16;
    int d_tok = 512;
    double init_std = 0.02;
};

struct TrainConfig {
    int stage = 1;
    int epochs = 110;
    double lr0 = 0.002;
    int batch_size = 32;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    StageTwoConfig lambda;       // stage 2 only
    int checkpoint_every = 10;   // epochs; 0 disables periodic checkpoints
    bool select_best = true;     // best-on-validation by mean per-level F1
    ASLConfig asl;
    PromptOptions prompts;
    double tau = 0.5;
    double agg_scale = -1.0;     // <= 0: use the backbone logit scale

    static TrainConfig stage1_defaults() {
        TrainConfig cfg;
        cfg.stage = 1;
        cfg.epochs = 110;
        cfg.lr0 = 0.002;
        return cfg;
    }

    static TrainConfig stage2_defaults() {
        TrainConfig cfg;
        cfg.stage = 2;
        cfg.epochs = 60;
        cfg.lr0 = 0.001;
        return cfg;
    }
};

struct TrainReport {
    int stage = 1;
    std::vector<int> levels;
    std::vector<std::vector<double>> epoch_losses;  // [level][epoch], unweighted ASL
    std::vector<double> epoch_combined;             // weighted objective per epoch
    std::vector<double> val_f1;                     // mean per-level F1 per epoch
    int best_epoch = -1;                            // -1: final state returned
    std::string backbone_digest_before;
    std::string backbone_digest_after;
    double wall_seconds = 0.0;
    std::map<std::string, std::string> config_echo;
};

/// Forward a whole split through trained prompt states and score every level.
inline std::vector<MetricsReport> evaluate_states(const std::vector<const PromptState*>& states,
                                                  const BackboneAdapter& b,
                                                  const DatasetSplit& split, const Hierarchy& h,
                                                  double tau = 0.5, double agg_scale = -1.0,
                                                  std::vector<std::vector<LabelSet>>* predictions_out = nullptr) {
    if (agg_scale <= 0) agg_scale = b.logit_scale();
    std::vector<MetricsReport> reports;
    for (const PromptState* ps : states) {
        PromptEncoding enc = encode_prompts(*ps, b);
        std::vector<LabelSet> preds;
        preds.reserve(split.size());
        for (const auto& sample : split.samples) {
            LevelScores scores =
                score_features(enc, b.encode_image(sample.image_ref()), b.logit_scale(), agg_scale);
            preds.push_back(threshold(scores, ps->class_names, tau));
        }
        auto targets = split.targets_at(ps->level_index);
        MetricsReport report = evaluate(preds, targets);
        report.level_index = ps->level_index;
        report.trainable_params = count_trainable_params(*ps);
        report.per_class_f1 = per_class_f1(preds, targets, h.level(ps->level_index));
        if (predictions_out) predictions_out->push_back(std::move(preds));
        reports.push_back(std::move(report));
    }
    return reports;
}

/// Batch loss plus its gradient w.r.t. every context entry of one level.
struct BatchGradients {
    double loss = 0.0;
    std::vector<Matrix> grad_pos;  // per class, m_pos x d_tok
    std::vector<Matrix> grad_neg;
};

/**
 * End-to-end gradient of the batch-mean stage-1 loss w.r.t. one level's
 * prompt contexts. Used by gradient checks and small-step experiments; the
 * training loop composes the same primitives.
 */
inline BatchGradients prompt_gradients(const PromptState& ps, const BackboneAdapter& b,
                                       const DatasetSplit& data,
                                       const std::vector<std::size_t>& sample_indices,
                                       const std::vector<std::vector<std::uint8_t>>& targets,
                                       const ASLConfig& asl_cfg = {}, double agg_scale = -1.0) {
    if (sample_indices.empty()) throw Error("prompt_gradients: empty batch");
    double logit_scale = b.logit_scale();
    if (agg_scale <= 0) agg_scale = logit_scale;

    PromptEncoding enc = encode_prompts(ps, b);
    std::size_t n = enc.t_pos.size();
    std::size_t d = enc.t_pos.empty() ? 0 : enc.t_pos[0].size();
    std::vector<std::vector<double>> grad_t_pos(n, std::vector<double>(d, 0.0));
    std::vector<std::vector<double>> grad_t_neg(n, std::vector<double>(d, 0.0));

    BatchGradients out;
    double inv_batch = 1.0 / static_cast<double>(sample_indices.size());
    for (std::size_t idx : sample_indices) {
        const Sample& sample = data.samples[idx];
        ScoreCache cache;
        LevelScores scores =
            score_features(enc, b.encode_image(sample.image_ref()), logit_scale, agg_scale, &cache);
        const auto& y = targets[idx];
        out.loss += asl(scores.p, y, asl_cfg) * inv_batch;
        std::vector<double> gp = asl_grad(scores.p, y, asl_cfg);
        std::vector<double> gl_pos(gp.size()), gl_neg(gp.size());
        for (std::size_t c = 0; c < gp.size(); ++c) {
            double sig = scores.p[c] * (1.0 - scores.p[c]);
            gl_pos[c] = gp[c] * sig * inv_batch;
            gl_neg[c] = -gl_pos[c];
        }
        score_backward(cache, gl_pos, gl_neg, logit_scale, agg_scale, grad_t_pos, grad_t_neg);
    }

    for (std::size_t c = 0; c < n; ++c) {
        Matrix vjp_pos = b.encode_text_vjp(enc.seq_pos[c], grad_t_pos[c]);
        Matrix vjp_neg = b.encode_text_vjp(enc.seq_neg[c], grad_t_neg[c]);
        Matrix gp(static_cast<std::size_t>(ps.m_pos), static_cast<std::size_t>(ps.d_tok));
        Matrix gn(static_cast<std::size_t>(ps.m_neg), static_cast<std::size_t>(ps.d_tok));
        for (std::size_t r = 0; r < gp.rows(); ++r) {
            auto src = vjp_pos.row(r);
            std::copy(src.begin(), src.end(), gp.row(r).begin());
        }
        for (std::size_t r = 0; r < gn.rows(); ++r) {
            auto src = vjp_neg.row(r);
            std::copy(src.begin(), src.end(), gn.row(r).begin());
        }
        out.grad_pos.push_back(std::move(gp));
        out.grad_neg.push_back(std::move(gn));
    }
    return out;
}

namespace detail {

/// SGD with momentum over one level's contexts; the only writer of a
/// PromptState during training.
struct LevelOptimizer {
    PromptState* state = nullptr;
    double weight = 1.0;  // lambda_k; 1 for stage 1
    std::vector<Matrix> vel_pos, vel_neg;
    std::vector<std::vector<std::uint8_t>> targets;  // per train sample

    void init_velocity() {
        vel_pos.clear();
        vel_neg.clear();
        for (const auto& m : state->pos_context) vel_pos.emplace_back(m.rows(), m.cols());
        for (const auto& m : state->neg_context) vel_neg.emplace_back(m.rows(), m.cols());
    }
};

inline std::vector<std::vector<std::uint8_t>> binary_targets(const DatasetSplit& split,
                                                             const LabelSpace& space) {
    std::vector<std::vector<std::uint8_t>> out;
    out.reserve(split.size());
    for (const auto& sample : split.samples) {
        std::vector<std::uint8_t> row(static_cast<std::size_t>(space.size()), 0);
        for (const auto& label : sample.labels_at(space.level_index)) {
            row[static_cast<std::size_t>(space.index_of(label))] = 1;
        }
        out.push_back(std::move(row));
    }
    return out;
}

inline void sgd_update(Matrix& param, Matrix& velocity, const Matrix& grad, double lr,
                       double momentum, double weight_decay) {
    auto& p = param.data();
    auto& v = velocity.data();
    const auto& g = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        double gi = g[i] + weight_decay * p[i];
        v[i] = momentum * v[i] + gi;
        p[i] -= lr * v[i];
    }
}

/**
 * The shared training loop behind both stages. Trains the given levels
 * jointly with the given loss weights; each step encodes every image exactly
 * once and feeds the same features to every level's head. Deterministic for
 * a fixed seed (single-threaded by design).
 */
inline TrainReport run_training(std::vector<LevelOptimizer>& tasks, const DatasetSplit& train,
                                const DatasetSplit* val, const BackboneAdapter& b,
                                const Hierarchy& h, const TrainConfig& cfg,
                                const std::function<void(int, const std::vector<const PromptState*>&)>&
                                    on_checkpoint = nullptr) {
    auto t_start = std::chrono::steady_clock::now();
    TrainReport report;
    report.stage = cfg.stage;
    report.backbone_digest_before = b.parameter_digest();
    for (const auto& task : tasks) report.levels.push_back(task.state->level_index);
    report.epoch_losses.assign(tasks.size(), {});

    if (train.size() == 0) throw Error("train: empty training split");
    if (cfg.batch_size < 1) throw Error("train: batch_size must be >= 1");
    if (cfg.epochs < 0) throw Error("train: epochs must be >= 0");
    double agg_scale = cfg.agg_scale > 0 ? cfg.agg_scale : b.logit_scale();
    double logit_scale = b.logit_scale();
    long steps_per_epoch =
        (static_cast<long>(train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    long total_steps = steps_per_epoch * cfg.epochs;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(substream_seed(cfg.seed, "shuffle"));

    std::vector<const PromptState*> state_views;
    for (const auto& task : tasks) state_views.push_back(task.state);

    // Best-on-validation snapshots.
    std::vector<PromptState> best_states;
    double best_val = -1.0;

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        std::vector<double> epoch_loss(tasks.size(), 0.0);
        double epoch_combined = 0.0;

        for (long bstart = 0; bstart < static_cast<long>(train.size());
             bstart += cfg.batch_size) {
            long bend = std::min<long>(bstart + cfg.batch_size, static_cast<long>(train.size()));
            long bsize = bend - bstart;
            double lr = cosine_lr(cfg.lr0, step, total_steps);

            struct TaskScratch {
                PromptEncoding enc;
                std::vector<std::vector<double>> grad_t_pos, grad_t_neg;
                double batch_loss = 0.0;
            };
            std::vector<TaskScratch> scratch(tasks.size());
            for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
                scratch[ti].enc = encode_prompts(*tasks[ti].state, b);
                std::size_t n = scratch[ti].enc.t_pos.size();
                std::size_t d = scratch[ti].enc.t_pos.empty() ? 0 : scratch[ti].enc.t_pos[0].size();
                scratch[ti].grad_t_pos.assign(n, std::vector<double>(d, 0.0));
                scratch[ti].grad_t_neg.assign(n, std::vector<double>(d, 0.0));
            }

            for (long bi = bstart; bi < bend; ++bi) {
                const Sample& sample = train.samples[order[static_cast<std::size_t>(bi)]];
                Matrix features = b.encode_image(sample.image_ref());  // shared across levels
                for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
                    ScoreCache cache;
                    LevelScores scores =
                        score_features(scratch[ti].enc, features, logit_scale, agg_scale, &cache);
                    const auto& y = tasks[ti].targets[order[static_cast<std::size_t>(bi)]];
                    scratch[ti].batch_loss += asl(scores.p, y, cfg.asl);
                    if (tasks[ti].weight == 0.0) continue;

                    std::vector<double> gp = asl_grad(scores.p, y, cfg.asl);
                    double scale = tasks[ti].weight / static_cast<double>(bsize);
                    std::vector<double> gl_pos(gp.size()), gl_neg(gp.size());
                    for (std::size_t c = 0; c < gp.size(); ++c) {
                        double sig = scores.p[c] * (1.0 - scores.p[c]);
                        gl_pos[c] = gp[c] * sig * scale;
                        gl_neg[c] = -gl_pos[c];
                    }
                    score_backward(cache, gl_pos, gl_neg, logit_scale, agg_scale,
                                   scratch[ti].grad_t_pos, scratch[ti].grad_t_neg);
                }
            }

            for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
                auto& task = tasks[ti];
                auto& sc = scratch[ti];
                double mean_loss = sc.batch_loss / static_cast<double>(bsize);
                epoch_loss[ti] += mean_loss * static_cast<double>(bsize);
                epoch_combined += task.weight * mean_loss * static_cast<double>(bsize);
                for (std::size_t c = 0; c < sc.grad_t_pos.size(); ++c) {
                    if (task.weight != 0.0) {
                        Matrix vjp_pos = b.encode_text_vjp(sc.enc.seq_pos[c], sc.grad_t_pos[c]);
                        Matrix vjp_neg = b.encode_text_vjp(sc.enc.seq_neg[c], sc.grad_t_neg[c]);
                        Matrix grad_pos(static_cast<std::size_t>(task.state->m_pos),
                                        static_cast<std::size_t>(task.state->d_tok));
                        Matrix grad_neg(static_cast<std::size_t>(task.state->m_neg),
                                        static_cast<std::size_t>(task.state->d_tok));
                        for (std::size_t r = 0; r < grad_pos.rows(); ++r) {
                            auto src = vjp_pos.row(r);
                            std::copy(src.begin(), src.end(), grad_pos.row(r).begin());
                        }
                        for (std::size_t r = 0; r < grad_neg.rows(); ++r) {
                            auto src = vjp_neg.row(r);
                            std::copy(src.begin(), src.end(), grad_neg.row(r).begin());
                        }
                        sgd_update(task.state->pos_context[c], task.vel_pos[c], grad_pos, lr,
                                   cfg.momentum, cfg.weight_decay);
                        sgd_update(task.state->neg_context[c], task.vel_neg[c], grad_neg, lr,
                                   cfg.momentum, cfg.weight_decay);
                    } else if (cfg.weight_decay != 0.0) {
                        Matrix zero_pos(static_cast<std::size_t>(task.state->m_pos),
                                        static_cast<std::size_t>(task.state->d_tok));
                        Matrix zero_neg(static_cast<std::size_t>(task.state->m_neg),
                                        static_cast<std::size_t>(task.state->d_tok));
                        sgd_update(task.state->pos_context[c], task.vel_pos[c], zero_pos, lr,
                                   cfg.momentum, cfg.weight_decay);
                        sgd_update(task.state->neg_context[c], task.vel_neg[c], zero_neg, lr,
                                   cfg.momentum, cfg.weight_decay);
                    }
                }
            }
            ++step;
        }

        for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
            report.epoch_losses[ti].push_back(epoch_loss[ti] / static_cast<double>(train.size()));
        }
        report.epoch_combined.push_back(epoch_combined / static_cast<double>(train.size()));

        if (val != nullptr && val->size() > 0) {
            auto reports = evaluate_states(state_views, b, *val, h, cfg.tau, agg_scale);
            double mean_f1 = 0.0;
            for (const auto& r : reports) mean_f1 += r.f1;
            mean_f1 /= static_cast<double>(reports.size());
            report.val_f1.push_back(mean_f1);
            if (cfg.select_best && mean_f1 > best_val) {
                best_val = mean_f1;
                report.best_epoch = epoch;
                best_states.clear();
                for (const auto& task : tasks) best_states.push_back(*task.state);
            }
        }

        if (on_checkpoint && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            epoch + 1 < cfg.epochs) {
            on_checkpoint(epoch + 1, state_views);
        }
    }

    if (!best_states.empty()) {
        for (std::size_t ti = 0; ti < tasks.size(); ++ti) *tasks[ti].state = best_states[ti];
    }
    if (on_checkpoint) on_checkpoint(cfg.epochs, state_views);

    report.backbone_digest_after = b.parameter_digest();
    if (report.backbone_digest_after != report.backbone_digest_before) {
        throw Error("frozen-backbone contract violated: parameter digest changed during training");
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace detail

/**
 * Stage 1: tune one level's prompts in isolation. Pass an initial state to
 * resume; otherwise prompts are initialized from the config seed.
 */
inline std::pair<PromptState, TrainReport> train_stage1(
    int level, const DatasetSplit& train, const DatasetSplit* val, const BackboneAdapter& b,
    const Hierarchy& h, const TrainConfig& cfg, const PromptState* initial = nullptr,
    const std::function<void(int, const std::vector<const PromptState*>&)>& on_checkpoint =
        nullptr) {
    if (cfg.stage != 1) throw Error("train_stage1: config is for stage " + std::to_string(cfg.stage));
    const LabelSpace& space = h.level(level);
    PromptState state =
        initial ? *initial
                : init_prompts(space, cfg.prompts.m_pos, cfg.prompts.m_neg, cfg.prompts.d_tok,
                               substream_seed(cfg.seed, "level-" + std::to_string(level)),
                               cfg.prompts.init_std);
    if (state.level_index != level) {
        throw Error("train_stage1: initial state is for level " +
                    std::to_string(state.level_index) + ", requested level " +
                    std::to_string(level));
    }
    std::vector<detail::LevelOptimizer> tasks(1);
    tasks[0].state = &state;
    tasks[0].weight = 1.0;
    tasks[0].targets = detail::binary_targets(train, space);
    tasks[0].init_velocity();
    TrainReport report = detail::run_training(tasks, train, val, b, h, cfg, on_checkpoint);
    return {std::move(state), std::move(report)};
}

/**
 * Stage 2: joint cross-hierarchy training. Starts from the three stage-1
 * states and backpropagates the lambda-weighted combined loss into all of
 * them; each batch shares one image encoding across the three heads.
 */
inline std::pair<std::array<PromptState, 3>, TrainReport> train_stage2(
    std::array<PromptState, 3> states, const DatasetSplit& train, const DatasetSplit* val,
    const BackboneAdapter& b, const Hierarchy& h, const TrainConfig& cfg,
    const std::function<void(int, const std::vector<const PromptState*>&)>& on_checkpoint =
        nullptr) {
    if (cfg.stage != 2) throw Error("train_stage2: config is for stage " + std::to_string(cfg.stage));
    cfg.lambda.validate();
    double weights[3] = {cfg.lambda.lambda1, cfg.lambda.lambda2, cfg.lambda.lambda3};
    std::vector<detail::LevelOptimizer> tasks(3);
    for (int k = 0; k < 3; ++k) {
        if (states[static_cast<std::size_t>(k)].level_index != k + 1) {
            throw Error("train_stage2: state " + std::to_string(k) + " is for level " +
                        std::to_string(states[static_cast<std::size_t>(k)].level_index));
        }
        tasks[static_cast<std::size_t>(k)].state = &states[static_cast<std::size_t>(k)];
        tasks[static_cast<std::size_t>(k)].weight = weights[k];
        tasks[static_cast<std::size_t>(k)].targets =
            detail::binary_targets(train, h.level(k + 1));
        tasks[static_cast<std::size_t>(k)].init_velocity();
    }
    TrainReport report = detail::run_training(tasks, train, val, b, h, cfg, on_checkpoint);
    return {std::move(states), std::move(report)};
}

}  // namespace hipt
