// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <concepts>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "image.hpp"
#include "scheduler.hpp"
#include "tensor.hpp"

namespace sketchguide {

using Matrix = Eigen::MatrixXd;

struct TokenRange {
    int begin = 0; // inclusive
    int end = 0;   // exclusive
    [[nodiscard]] int size() const { return end - begin; }
    bool operator==(const TokenRange&) const = default;
};

struct TokenSpan {
    std::string word;
    TokenRange range;
};

inline std::string lowercase(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    return words;
}

struct TextEmbedding {
    std::vector<std::uint32_t> tokens;
    Matrix embedding; // [num_tokens x embed_dim]
    std::vector<TokenSpan> token_spans;

    [[nodiscard]] int num_tokens() const { return static_cast<int>(tokens.size()); }

    // Token range covered by a (possibly multi-word) phrase, first occurrence.
    [[nodiscard]] std::optional<TokenRange> find_phrase(std::string_view phrase) const {
        const auto words = split_words(phrase);
        if (words.empty() || words.size() > token_spans.size()) return std::nullopt;
        for (std::size_t i = 0; i + words.size() <= token_spans.size(); ++i) {
            bool match = true;
            for (std::size_t k = 0; k < words.size() && match; ++k) {
                match = token_spans[i + k].word == lowercase(words[k]);
            }
            if (match) {
                return TokenRange{token_spans[i].range.begin,
                                  token_spans[i + words.size() - 1].range.end};
            }
        }
        return std::nullopt;
    }
};

enum class AttentionKind { cross, self };

struct LayerInfo {
    std::string id;
    AttentionKind kind = AttentionKind::cross;
    int height = 0;
    int width = 0;
    int heads = 0;
    int head_dim = 0;
    bool mid_block = false;
    bool decoder = false;
};

// Raw per-head cross-attention map M = softmax(Q K^T / sqrt(d_k)) of one
// layer; each head matrix is [pixels x tokens].
struct CrossAttentionRecord {
    std::string layer;
    int height = 0;
    int width = 0;
    std::vector<Matrix> head_maps;
};

// Self-attention keys and values of one layer, per head [pixels x head_dim].
struct SelfAttentionRecord {
    std::string layer;
    int height = 0;
    int width = 0;
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
};

struct DenoiserOutput {
    Latent epsilon;
    std::vector<CrossAttentionRecord> cross_records;
    std::vector<SelfAttentionRecord> self_records;

    [[nodiscard]] const CrossAttentionRecord* cross(std::string_view layer) const {
        for (const auto& r : cross_records)
            if (r.layer == layer) return &r;
        return nullptr;
    }
};

// Keys/values that replace a layer's own during a forward pass; queries
// stay native.
using SelfAttentionInjection = std::map<std::string, SelfAttentionRecord, std::less<>>;

struct DenoiseOptions {
    bool record_attention = false;
    // Keep what is needed to pull cotangents of the cross maps back to the
    // input latent. Implies record_attention.
    bool track_gradients = false;
    const SelfAttentionInjection* injection = nullptr;
};

// dLoss/dM for one layer's recorded maps, shaped like its head_maps.
struct CrossMapCotangent {
    std::string layer;
    std::vector<Matrix> head_maps;
};

// A noise predictor with instrumented attention. One in-flight denoise call
// per instance: gradient tracking keeps state between denoise() and
// pullback_cross_maps().
template <class B>
concept Denoiser = requires(B& b, const B& cb, const Latent& z, int t, const TextEmbedding& c,
                            const DenoiseOptions& opts, std::span<const CrossMapCotangent> cot,
                            std::string_view text, const Image& img) {
    { cb.latent_shape() } -> std::convertible_to<Shape>;
    { cb.layers() } -> std::convertible_to<const std::vector<LayerInfo>&>;
    { cb.num_train_steps() } -> std::convertible_to<int>;
    { cb.embed_prompt(text) } -> std::same_as<TextEmbedding>;
    { cb.null_embedding() } -> std::same_as<TextEmbedding>;
    { cb.default_guidance_layers() } -> std::convertible_to<std::vector<std::string>>;
    { b.denoise(z, t, c, opts) } -> std::same_as<DenoiserOutput>;
    { b.pullback_cross_maps(cot) } -> std::same_as<Latent>;
    { cb.encode_image(img) } -> std::same_as<Latent>;
    { cb.decode_latent(z) } -> std::same_as<Image>;
};

// Classifier-free-guided noise prediction. Scale 1 (or 0) skips the unused
// branch, so it is exactly the conditional (or unconditional) prediction.
template <Denoiser B>
Latent guided_epsilon(B& backbone, const Latent& z, int t, const TextEmbedding& cond,
                      const TextEmbedding& uncond, double scale,
                      const SelfAttentionInjection* injection = nullptr) {
    DenoiseOptions opts;
    opts.injection = injection;
    if (scale == 1.0) return backbone.denoise(z, t, cond, opts).epsilon;
    if (scale == 0.0) return backbone.denoise(z, t, uncond, opts).epsilon;
    const Latent eps_u = backbone.denoise(z, t, uncond, opts).epsilon;
    const Latent eps_c = backbone.denoise(z, t, cond, opts).epsilon;
    return cfg_epsilon(eps_u, eps_c, scale);
}

template <Denoiser B>
std::vector<std::string> layer_ids(const B& backbone, AttentionKind kind) {
    std::vector<std::string> ids;
    for (const auto& l : backbone.layers())
        if (l.kind == kind) ids.push_back(l.id);
    return ids;
}

} // namespace sketchguide
