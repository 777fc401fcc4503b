#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hipt/backbone.hpp"
#include "hipt/common.hpp"
#include "hipt/hierarchy.hpp"

namespace hipt {

/**
 * The dual learnable-prompt state of one hierarchy level: a positive and a
 * negative context matrix per class. These context entries are the only
 * trainable parameters in the whole system; everything else is frozen.
 */
struct PromptState {
    int level_index = 0;
    int m_pos = 16;
    int m_neg = 16;
    int d_tok = 512;
    std::vector<std::string> class_names;
    std::string class_digest;
    std::vector<Matrix> pos_context;  // per class, m_pos x d_tok
    std::vector<Matrix> neg_context;  // per class, m_neg x d_tok

    int n_classes() const { return static_cast<int>(class_names.size()); }
};

/// N * (M+ + M-) * d_tok; reproduces the paper-scale trainable budgets.
inline long long count_trainable_params(const PromptState& ps) {
    return static_cast<long long>(ps.n_classes()) *
           (static_cast<long long>(ps.m_pos) + ps.m_neg) * ps.d_tok;
}

/// Fresh prompt state with contexts drawn i.i.d. Gaussian(0, init_std^2).
inline PromptState init_prompts(const LabelSpace& space, int m_pos, int m_neg, int d_tok,
                                std::uint64_t seed, double init_std = 0.02) {
    if (m_pos < 1 || m_neg < 1) throw Error("init_prompts: context lengths must be >= 1");
    if (d_tok < 1) throw Error("init_prompts: d_tok must be >= 1");
    PromptState ps;
    ps.level_index = space.level_index;
    ps.m_pos = m_pos;
    ps.m_neg = m_neg;
    ps.d_tok = d_tok;
    ps.class_names = space.labels;
    ps.class_digest = space.digest();
    std::mt19937_64 rng(substream_seed(seed, "prompt-init"));
    for (int c = 0; c < space.size(); ++c) {
        Matrix pos(static_cast<std::size_t>(m_pos), static_cast<std::size_t>(d_tok));
        Matrix neg(static_cast<std::size_t>(m_neg), static_cast<std::size_t>(d_tok));
        fill_gaussian(pos.data(), rng, init_std);
        fill_gaussian(neg.data(), rng, init_std);
        ps.pos_context.push_back(std::move(pos));
        ps.neg_context.push_back(std::move(neg));
    }
    return ps;
}

/// Per-sample presence probabilities and the paired logits behind them.
struct LevelScores {
    int level_index = 0;
    std::vector<double> p;          // presence probability per class, in (0,1)
    std::vector<double> logit_pos;  // l+ per class
    std::vector<double> logit_neg;  // l- per class
};

/**
 * Text embeddings of every class prompt pair, plus the token sequences that
 * produced them (kept so gradients can flow back through encode_text).
 * Prompts are image-independent, so one encoding serves a whole batch.
 */
struct PromptEncoding {
    int level_index = 0;
    std::vector<std::vector<double>> t_pos;  // per class, unit d-vector
    std::vector<std::vector<double>> t_neg;
    std::vector<Matrix> seq_pos;  // per class, (m_pos + name tokens) x d_tok
    std::vector<Matrix> seq_neg;
};

namespace detail {

/// Context tokens first, then the class-name tokens.
inline Matrix build_sequence(const Matrix& context, const Matrix& name_embeddings) {
    Matrix seq(context.rows() + name_embeddings.rows(), context.cols());
    std::copy(context.data().begin(), context.data().end(), seq.data().begin());
    std::copy(name_embeddings.data().begin(), name_embeddings.data().end(),
              seq.data().begin() + static_cast<std::ptrdiff_t>(context.data().size()));
    return seq;
}

inline double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

inline PromptEncoding encode_prompts(const PromptState& ps, const BackboneAdapter& b) {
    if (b.dims().d_tok != ps.d_tok) {
        throw Error("prompt d_tok " + std::to_string(ps.d_tok) + " != backbone d_tok " +
                    std::to_string(b.dims().d_tok));
    }
    PromptEncoding enc;
    enc.level_index = ps.level_index;
    for (int c = 0; c < ps.n_classes(); ++c) {
        auto ids = b.tokenize(ps.class_names[static_cast<std::size_t>(c)]);
        if (ids.empty()) {
            throw Error("class name tokenizes to nothing: '" +
                        ps.class_names[static_cast<std::size_t>(c)] + "'");
        }
        Matrix name_emb = b.embed_tokens(ids);
        Matrix seq_pos = detail::build_sequence(ps.pos_context[static_cast<std::size_t>(c)], name_emb);
        Matrix seq_neg = detail::build_sequence(ps.neg_context[static_cast<std::size_t>(c)], name_emb);
        enc.t_pos.push_back(b.encode_text(seq_pos));
        enc.t_neg.push_back(b.encode_text(seq_neg));
        enc.seq_pos.push_back(std::move(seq_pos));
        enc.seq_neg.push_back(std::move(seq_neg));
    }
    return enc;
}

/**
 * Forward intermediates of one sample, kept for the backward pass: the
 * row-normalized region features plus per-class similarities and attention
 * weights.
 */
struct ScoreCache {
    Matrix f_hat;                           // regions x d, rows unit (or zero)
    std::vector<std::vector<double>> s_pos;  // per class, per region
    std::vector<std::vector<double>> s_neg;
    std::vector<std::vector<double>> w;      // attention weights, positive branch
};

/**
 * Score one image against encoded prompts. Per class: cosine similarities
 * between each region and the prompt pair, spatial attention from the
 * positive branch (softmax over regions of s+ * agg_scale, applied to both
 * polarities so the logit pair stays comparable over identical regions),
 * logits = logit_scale * aggregated similarity, and the pairwise softmax
 * p = exp(l+) / (exp(l+) + exp(l-)).
 */
inline LevelScores score_features(const PromptEncoding& enc, const Matrix& features,
                                  double logit_scale, double agg_scale,
                                  ScoreCache* cache = nullptr) {
    std::size_t n = enc.t_pos.size();
    std::size_t regions = features.rows();
    if (regions == 0) throw Error("score_features: image has no regions");
    if (n > 0 && features.cols() != enc.t_pos[0].size()) {
        throw Error("score_features: feature dim " + std::to_string(features.cols()) +
                    " != text embedding dim " + std::to_string(enc.t_pos[0].size()));
    }

    Matrix f_hat = features;
    for (std::size_t r = 0; r < regions; ++r) normalize_inplace(f_hat.row(r));

    LevelScores out;
    out.level_index = enc.level_index;
    out.p.resize(n);
    out.logit_pos.resize(n);
    out.logit_neg.resize(n);
    if (cache) {
        cache->s_pos.assign(n, {});
        cache->s_neg.assign(n, {});
        cache->w.assign(n, {});
    }

    std::vector<double> s_pos(regions), s_neg(regions), attn_logits(regions);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t r = 0; r < regions; ++r) {
            s_pos[r] = dot(f_hat.row(r), enc.t_pos[c]);
            s_neg[r] = dot(f_hat.row(r), enc.t_neg[c]);
            attn_logits[r] = agg_scale * s_pos[r];
        }
        std::vector<double> w = softmax(attn_logits);
        double e_pos = 0.0, e_neg = 0.0;
        for (std::size_t r = 0; r < regions; ++r) {
            e_pos += w[r] * s_pos[r];
            e_neg += w[r] * s_neg[r];
        }
        out.logit_pos[c] = logit_scale * e_pos;
        out.logit_neg[c] = logit_scale * e_neg;
        out.p[c] = detail::stable_sigmoid(out.logit_pos[c] - out.logit_neg[c]);
        if (cache) {
            cache->s_pos[c] = s_pos;
            cache->s_neg[c] = s_neg;
            cache->w[c] = std::move(w);
        }
    }
    if (cache) cache->f_hat = std::move(f_hat);
    return out;
}

/// Full forward pass for one image reference.
inline LevelScores forward(const PromptState& ps, const BackboneAdapter& b,
                           const std::string& image_ref, double agg_scale = -1.0) {
    PromptEncoding enc = encode_prompts(ps, b);
    Matrix features = b.encode_image(image_ref);
    if (agg_scale <= 0) agg_scale = b.logit_scale();
    return score_features(enc, features, b.logit_scale(), agg_scale);
}

/**
 * Accumulate d(loss)/d(t+-) for one scored sample into per-class gradient
 * buffers, given d(loss)/d(logit) for both polarities.
 */
inline void score_backward(const ScoreCache& cache, const std::vector<double>& grad_logit_pos,
                           const std::vector<double>& grad_logit_neg, double logit_scale,
                           double agg_scale, std::vector<std::vector<double>>& grad_t_pos,
                           std::vector<std::vector<double>>& grad_t_neg) {
    std::size_t n = cache.s_pos.size();
    std::size_t regions = cache.f_hat.rows();
    for (std::size_t c = 0; c < n; ++c) {
        double ge_pos = grad_logit_pos[c] * logit_scale;
        double ge_neg = grad_logit_neg[c] * logit_scale;
        if (ge_pos == 0.0 && ge_neg == 0.0) continue;
        const auto& s_pos = cache.s_pos[c];
        const auto& s_neg = cache.s_neg[c];
        const auto& w = cache.w[c];
        double e_pos = 0.0, e_neg = 0.0;
        for (std::size_t r = 0; r < regions; ++r) {
            e_pos += w[r] * s_pos[r];
            e_neg += w[r] * s_neg[r];
        }
        for (std::size_t r = 0; r < regions; ++r) {
            // E+- = sum_r w_r s+-_r with w = softmax(agg * s+); the positive
            // similarities feed both the weights and the positive aggregate.
            double ds_pos = ge_pos * (w[r] + agg_scale * w[r] * (s_pos[r] - e_pos)) +
                            ge_neg * agg_scale * w[r] * (s_neg[r] - e_neg);
            double ds_neg = ge_neg * w[r];
            auto f_row = cache.f_hat.row(r);
            for (std::size_t k = 0; k < f_row.size(); ++k) {
                grad_t_pos[c][k] += ds_pos * f_row[k];
                grad_t_neg[c][k] += ds_neg * f_row[k];
            }
        }
    }
}

/// Thresholded label set: classes with presence probability strictly above tau.
inline LabelSet threshold(const LevelScores& scores, const std::vector<std::string>& class_names,
                          double tau = 0.5) {
    if (tau <= 0.0 || tau >= 1.0) throw Error("threshold: tau must be in (0, 1)");
    LabelSet out;
    for (std::size_t c = 0; c < scores.p.size(); ++c) {
        if (scores.p[c] > tau) out.insert(class_names[c]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON with the context arrays, the class-list digest
// that binds them to a label space, and the run's config echo.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const PromptState& ps, const std::string& path,
                            const std::map<std::string, std::string>& config_echo = {}) {
    nlohmann::json j;
    j["format"] = "prompt-checkpoint";
    j["version"] = 1;
    j["level_index"] = ps.level_index;
    j["m_pos"] = ps.m_pos;
    j["m_neg"] = ps.m_neg;
    j["d_tok"] = ps.d_tok;
    j["class_digest"] = ps.class_digest;
    j["classes"] = ps.class_names;
    auto dump_contexts = [](const std::vector<Matrix>& ms) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& m : ms) arr.push_back(m.data());
        return arr;
    };
    j["pos_context"] = dump_contexts(ps.pos_context);
    j["neg_context"] = dump_contexts(ps.neg_context);
    j["config"] = config_echo;
    std::ofstream out(path);
    if (!out) throw Error("cannot write checkpoint: " + path);
    out << j.dump(1) << "\n";
}

inline PromptState load_checkpoint(const std::string& path, const LabelSpace& space) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint " + path + ": " + e.what());
    }
    PromptState ps;
    try {
        if (j.value("format", "") != "prompt-checkpoint") {
            throw Error("checkpoint " + path + ": not a prompt checkpoint");
        }
        if (int version = j.value("version", 0); version != 1) {
            throw Error("checkpoint " + path + ": unsupported version " +
                        std::to_string(version));
        }
        ps.level_index = j.at("level_index").get<int>();
        ps.m_pos = j.at("m_pos").get<int>();
        ps.m_neg = j.at("m_neg").get<int>();
        ps.d_tok = j.at("d_tok").get<int>();
        ps.class_digest = j.at("class_digest").get<std::string>();
        ps.class_names = j.at("classes").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint " + path + ": " + e.what());
    }
    if (ps.class_digest != space.digest()) {
        throw Error("checkpoint " + path + ": class-list digest mismatch (checkpoint " +
                    ps.class_digest + ", hierarchy level " + std::to_string(space.level_index) +
                    " " + space.digest() + ")");
    }
    auto load_contexts = [&](const char* key, int rows) {
        std::vector<Matrix> ms;
        for (const auto& flat : j.at(key)) {
            Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(ps.d_tok));
            auto values = flat.get<std::vector<double>>();
            if (values.size() != m.data().size()) {
                throw Error("checkpoint " + path + ": context size mismatch");
            }
            m.data() = std::move(values);
            ms.push_back(std::move(m));
        }
        if (ms.size() != ps.class_names.size()) {
            throw Error("checkpoint " + path + ": class count mismatch");
        }
        return ms;
    };
    try {
        ps.pos_context = load_contexts("pos_context", ps.m_pos);
        ps.neg_context = load_contexts("neg_context", ps.m_neg);
    } catch (const nlohmann::json::exception& e) {
        throw Error("checkpoint " + path + ": " + e.what());
    }
    return ps;
}

}  // namespace hipt
