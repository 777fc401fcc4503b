#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "hipt/common.hpp"
#include "hipt/datamodel.hpp"

namespace hipt {

struct BackboneDims {
    int d = 0;        // joint embedding dimension
    int d_tok = 0;    // token embedding dimension
    int regions = 0;  // spatial regions per image
};

/**
 * Frozen vision-language encoder seam. Adapters own their parameters, which
 * never change for the adapter's lifetime; parameter_digest() makes that
 * checkable. encode_text_vjp carries gradients back to the (trainable) prompt
 * tokens through the frozen text path.
 */
class BackboneAdapter {
public:
    virtual ~BackboneAdapter() = default;

    /// Final spatial feature map, regions x d, no pooling.
    virtual Matrix encode_image(const std::string& image_ref) const = 0;

    virtual std::vector<std::int64_t> tokenize(const std::string& text) const = 0;

    /// Token embedding lookup, one row per token id.
    virtual Matrix embed_tokens(const std::vector<std::int64_t>& token_ids) const = 0;

    /// Encode a token embedding sequence (M x d_tok, M >= 1) to a unit d-vector.
    virtual std::vector<double> encode_text(const Matrix& token_embeddings) const = 0;

    /// Vector-Jacobian product of encode_text: upstream is d-dimensional,
    /// result is the M x d_tok gradient w.r.t. the input embeddings.
    virtual Matrix encode_text_vjp(const Matrix& token_embeddings,
                                   const std::vector<double>& upstream) const = 0;

    virtual BackboneDims dims() const = 0;
    virtual double logit_scale() const = 0;
    virtual std::string parameter_digest() const = 0;
};

/**
 * Deterministic synthetic backbone. Images resolve to the generator's stored
 * region features; text encoding is mean-pool over tokens, a fixed random
 * projection d_tok -> d, then unit normalization -- the cheapest encoder that
 * is differentiable in the prompt tokens. Token embeddings come from a seeded
 * hash-indexed table, so the table never materializes.
 */
class SyntheticBackbone : public BackboneAdapter {
public:
    SyntheticBackbone(std::uint64_t seed, int d, int d_tok, int regions,
                      std::shared_ptr<const FeatureStore> features, PrototypeBank bank,
                      double logit_scale = 100.0)
        : seed_(seed),
          dims_{d, d_tok, regions},
          features_(std::move(features)),
          bank_(std::move(bank)),
          logit_scale_(logit_scale),
          projection_(static_cast<std::size_t>(d), static_cast<std::size_t>(d_tok)) {
        if (logit_scale_ <= 0) throw Error("logit_scale must be positive");
        std::mt19937_64 rng(substream_seed(seed, "text-projection"));
        fill_gaussian(projection_.data(), rng, 1.0 / std::sqrt(static_cast<double>(d_tok)));
    }

    static SyntheticBackbone from_dataset(const SyntheticDataset& data, const SyntheticSpec& spec,
                                          int d_tok, double logit_scale = 100.0) {
        return SyntheticBackbone(spec.seed, spec.d, d_tok, spec.regions, data.features,
                                 data.bank, logit_scale);
    }

    Matrix encode_image(const std::string& image_ref) const override {
        return features_->resolve(image_ref);
    }

    std::vector<std::int64_t> tokenize(const std::string& text) const override {
        std::vector<std::int64_t> ids;
        for (const auto& word : split(text, ' ')) {
            std::string w = trim(word);
            if (w.empty()) continue;
            ids.push_back(static_cast<std::int64_t>(hash64(w) >> 1));
        }
        return ids;
    }

    Matrix embed_tokens(const std::vector<std::int64_t>& token_ids) const override {
        Matrix out(token_ids.size(), static_cast<std::size_t>(dims_.d_tok));
        for (std::size_t i = 0; i < token_ids.size(); ++i) {
            std::mt19937_64 rng(
                Digest().update(seed_).update("token").update(static_cast<std::uint64_t>(token_ids[i])).value());
            fill_gaussian(out.row(i), rng, 1.0);
        }
        return out;
    }

    std::vector<double> encode_text(const Matrix& token_embeddings) const override {
        std::vector<double> u = project_mean(token_embeddings);
        normalize_inplace(u);
        return u;
    }

    Matrix encode_text_vjp(const Matrix& token_embeddings,
                           const std::vector<double>& upstream) const override {
        std::vector<double> u = project_mean(token_embeddings);
        double nu = norm(u);
        if (nu < 1e-12) throw Error("encode_text_vjp: degenerate (zero) text embedding");
        std::vector<double> t(u);
        scale_inplace(t, 1.0 / nu);

        // d(u/|u|)/du applied to upstream: (g - (t.g) t) / |u|
        std::vector<double> g_u(t.size());
        double tg = dot(t, upstream);
        for (std::size_t i = 0; i < t.size(); ++i) g_u[i] = (upstream[i] - tg * t[i]) / nu;

        // Through the projection and the mean pool: every token row gets
        // P^T g_u / M.
        std::size_t m = token_embeddings.rows();
        std::vector<double> g_tok(static_cast<std::size_t>(dims_.d_tok), 0.0);
        for (std::size_t i = 0; i < projection_.rows(); ++i) {
            auto prow = projection_.row(i);
            for (std::size_t j = 0; j < prow.size(); ++j) g_tok[j] += prow[j] * g_u[i];
        }
        for (double& x : g_tok) x /= static_cast<double>(m);
        Matrix out(m, g_tok.size());
        for (std::size_t r = 0; r < m; ++r) {
            std::copy(g_tok.begin(), g_tok.end(), out.row(r).begin());
        }
        return out;
    }

    BackboneDims dims() const override { return dims_; }
    double logit_scale() const override { return logit_scale_; }

    std::string parameter_digest() const override {
        Digest d;
        d.update(seed_);
        d.update(logit_scale_);
        d.update(projection_.data());
        for (const auto& p : bank_.prototypes) d.update(p);
        return d.hex();
    }

private:
    std::vector<double> project_mean(const Matrix& token_embeddings) const {
        if (token_embeddings.rows() == 0) throw Error("encode_text: empty token sequence");
        if (token_embeddings.cols() != static_cast<std::size_t>(dims_.d_tok)) {
            throw Error("encode_text: token embedding width " +
                        std::to_string(token_embeddings.cols()) + " != d_tok " +
                        std::to_string(dims_.d_tok));
        }
        std::vector<double> mean(token_embeddings.cols(), 0.0);
        for (std::size_t r = 0; r < token_embeddings.rows(); ++r) {
            auto row = token_embeddings.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) mean[c] += row[c];
        }
        for (double& x : mean) x /= static_cast<double>(token_embeddings.rows());
        std::vector<double> u(projection_.rows(), 0.0);
        for (std::size_t i = 0; i < projection_.rows(); ++i) {
            u[i] = dot(projection_.row(i), mean);
        }
        return u;
    }

    std::uint64_t seed_;
    BackboneDims dims_;
    std::shared_ptr<const FeatureStore> features_;
    PrototypeBank bank_;
    double logit_scale_;
    Matrix projection_;
};

// ---------------------------------------------------------------------------
// Registry for out-of-tree adapters, selected by config key. The synthetic
// adapter is constructed directly; external ones register a factory by name.
// ---------------------------------------------------------------------------

using BackboneFactory = std::function<std::unique_ptr<BackboneAdapter>()>;

inline std::map<std::string, BackboneFactory>& backbone_registry() {
    static std::map<std::string, BackboneFactory> registry;
    return registry;
}

inline void register_backbone(const std::string& name, BackboneFactory factory) {
    backbone_registry()[name] = std::move(factory);
}

inline std::unique_ptr<BackboneAdapter> make_external_backbone(const std::string& name) {
    auto it = backbone_registry().find(name);
    if (it == backbone_registry().end()) {
        throw Error("no external backbone registered under name '" + name + "'");
    }
    return it->second();
}

}  // namespace hipt
