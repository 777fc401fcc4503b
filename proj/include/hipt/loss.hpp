#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hipt/common.hpp"

namespace hipt {

/**
 * Asymmetric multi-label loss configuration. Separate focusing exponents for
 * positives and negatives plus a probability margin that zeroes easy
 * negatives. Defaults follow the DualCoOp lineage.
 */
struct ASLConfig {
    double gamma_pos = 1.0;
    double gamma_neg = 2.0;
    double margin = 0.05;
    double eps = 1e-8;

    void validate() const {
        if (gamma_pos < 0 || gamma_neg < 0) throw Error("asl: gamma must be >= 0");
        if (margin < 0 || margin >= 1) throw Error("asl: margin must be in [0, 1)");
        if (eps <= 0 || eps >= 0.5) throw Error("asl: eps must be in (0, 0.5)");
    }
};

namespace detail {

inline double clamp_prob(double p, double eps) {
    return std::min(std::max(p, eps), 1.0 - eps);
}

}  // namespace detail

/**
 * Asymmetric loss, averaged over classes.
 *   y=1: (1-p)^g+ * (-log p)
 *   y=0: pm^g-    * (-log(1-pm)),  pm = max(p - margin, 0)
 */
inline double asl(const std::vector<double>& p, const std::vector<std::uint8_t>& y,
                  const ASLConfig& cfg = {}) {
    cfg.validate();
    if (p.size() != y.size()) {
        throw Error("asl: probability/target length mismatch (" + std::to_string(p.size()) +
                    " vs " + std::to_string(y.size()) + ")");
    }
    if (p.empty()) throw Error("asl: empty class vector");
    double total = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) {
        double pc = detail::clamp_prob(p[c], cfg.eps);
        if (y[c]) {
            total += std::pow(1.0 - pc, cfg.gamma_pos) * (-std::log(pc));
        } else {
            double pm = std::max(pc - cfg.margin, 0.0);
            if (pm > 0.0) {
                pm = std::min(pm, 1.0 - cfg.eps);
                total += std::pow(pm, cfg.gamma_neg) * (-std::log(1.0 - pm));
            }
        }
    }
    return total / static_cast<double>(p.size());
}

/// dL/dp for the asymmetric loss above (same class averaging).
inline std::vector<double> asl_grad(const std::vector<double>& p,
                                    const std::vector<std::uint8_t>& y,
                                    const ASLConfig& cfg = {}) {
    cfg.validate();
    if (p.size() != y.size()) throw Error("asl_grad: probability/target length mismatch");
    std::vector<double> g(p.size(), 0.0);
    double inv_n = 1.0 / static_cast<double>(p.size());
    for (std::size_t c = 0; c < p.size(); ++c) {
        double pc = detail::clamp_prob(p[c], cfg.eps);
        if (p[c] != pc) continue;  // clamped: flat region
        if (y[c]) {
            double focus = std::pow(1.0 - pc, cfg.gamma_pos);
            double dfocus = cfg.gamma_pos > 0.0
                                ? -cfg.gamma_pos * std::pow(1.0 - pc, cfg.gamma_pos - 1.0)
                                : 0.0;
            g[c] = (dfocus * (-std::log(pc)) - focus / pc) * inv_n;
        } else {
            double pm = std::max(pc - cfg.margin, 0.0);
            if (pm > 0.0 && pm < 1.0 - cfg.eps) {
                double focus = std::pow(pm, cfg.gamma_neg);
                double dfocus =
                    cfg.gamma_neg > 0.0 ? cfg.gamma_neg * std::pow(pm, cfg.gamma_neg - 1.0) : 0.0;
                g[c] = (dfocus * (-std::log(1.0 - pm)) + focus / (1.0 - pm)) * inv_n;
            }
        }
    }
    return g;
}

/**
 * First-stage loss of one level: the asymmetric loss of that level's
 * presence probabilities against its derived binary targets, averaged over
 * the batch. Scores must carry the expected level index.
 */
template <typename Scores>
double stage1_loss(const std::vector<Scores>& batch,
                   const std::vector<std::vector<std::uint8_t>>& targets, int level,
                   const ASLConfig& cfg = {}) {
    if (batch.size() != targets.size()) throw Error("stage1_loss: batch/target size mismatch");
    if (batch.empty()) throw Error("stage1_loss: empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].level_index != level) {
            throw Error("stage1_loss: scores are for level " +
                        std::to_string(batch[i].level_index) + ", targets for level " +
                        std::to_string(level));
        }
        total += asl(batch[i].p, targets[i], cfg);
    }
    return total / static_cast<double>(batch.size());
}

/**
 * Per-level loss weights of the combined second-stage objective. The weights
 * must sum to 1 unless explicitly overridden.
 */
struct StageTwoConfig {
    double lambda1 = 0.6;
    double lambda2 = 0.25;
    double lambda3 = 0.15;
    bool allow_unnormalized = false;

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) {
            throw Error("stage-2 lambda weights must be non-negative");
        }
        double sum = lambda1 + lambda2 + lambda3;
        if (!allow_unnormalized && std::abs(sum - 1.0) > 1e-6) {
            throw Error("stage-2 lambda weights sum to " + std::to_string(sum) +
                        ", expected 1 (pass --allow-unnormalized-lambda to override)");
        }
    }
};

/// Combined second-stage loss: the lambda-weighted sum of per-level losses.
inline double stage2_loss(double l1, double l2, double l3, const StageTwoConfig& cfg) {
    cfg.validate();
    return cfg.lambda1 * l1 + cfg.lambda2 * l2 + cfg.lambda3 * l3;
}

}  // namespace hipt
