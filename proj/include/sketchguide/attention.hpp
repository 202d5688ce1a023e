// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "errors.hpp"
#include "inversion.hpp"

namespace sketchguide {

// Class-token map per layer id, each [H_l x W_l].
using LayerMaps = std::map<std::string, Matrix, std::less<>>;

inline constexpr double kDefaultEpsFloor = 1e-8;

// Recorded class-token maps along a trajectory, keyed by trajectory timestep.
struct TokenAttentionStack {
    struct Entry {
        int timestep = 0;
        LayerMaps maps;
        bool operator==(const Entry&) const = default;
    };

    std::string class_word;
    TokenRange tokens;
    std::vector<std::string> layers;
    std::vector<Entry> entries;

    [[nodiscard]] const LayerMaps* find(int timestep) const {
        for (const auto& e : entries)
            if (e.timestep == timestep) return &e.maps;
        return nullptr;
    }

    [[nodiscard]] const LayerMaps& at(int timestep) const {
        if (const auto* m = find(timestep)) return *m;
        throw lookup_error("no target maps recorded for timestep " + std::to_string(timestep));
    }

    void validate() const {
        for (const auto& e : entries) {
            if (e.maps.size() != layers.size()) throw shape_error("stack layer set differs across timesteps");
            for (const auto& id : layers) {
                auto it = e.maps.find(id);
                if (it == e.maps.end()) throw lookup_error("stack entry missing layer " + id);
                if ((it->second.array() < 0.0).any()) throw domain_error("negative attention map entry");
            }
        }
    }

    bool operator==(const TokenAttentionStack&) const = default;
};

inline TokenRange find_class_tokens(const TextEmbedding& embedding, const std::string& class_word) {
    auto range = embedding.find_phrase(class_word);
    if (!range) throw lookup_error("class word '" + class_word + "' not found in prompt tokens");
    return *range;
}

// Class-token slice of each requested layer, averaged over heads and over
// the class word's tokens, reshaped to the layer grid.
inline LayerMaps extract_token_maps(const std::vector<CrossAttentionRecord>& records,
                                    const TokenRange& tokens, const std::vector<std::string>& layers) {
    LayerMaps out;
    for (const auto& id : layers) {
        const CrossAttentionRecord* rec = nullptr;
        for (const auto& r : records)
            if (r.layer == id) rec = &r;
        if (!rec) throw lookup_error("cross-attention layer '" + id + "' was not recorded");
        if (rec->head_maps.empty()) throw shape_error("layer '" + id + "' has no heads");
        if (tokens.size() <= 0 || tokens.end > rec->head_maps.front().cols()) {
            throw lookup_error("token range outside layer '" + id + "' map");
        }
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(rec->head_maps.front().rows());
        for (const auto& head : rec->head_maps)
            for (int k = tokens.begin; k < tokens.end; ++k) acc += head.col(k);
        acc /= static_cast<double>(rec->head_maps.size() * tokens.size());
        if (acc.size() != static_cast<Eigen::Index>(rec->height) * rec->width) {
            throw shape_error("layer '" + id + "' pixel count does not match its grid");
        }
        Matrix grid(rec->height, rec->width);
        for (int y = 0; y < rec->height; ++y)
            for (int x = 0; x < rec->width; ++x) grid(y, x) = acc(y * rec->width + x);
        out.emplace(id, std::move(grid));
    }
    return out;
}

inline LayerMaps extract_token_maps(const std::vector<CrossAttentionRecord>& records,
                                    const TextEmbedding& embedding, const std::string& class_word,
                                    const std::vector<std::string>& layers) {
    return extract_token_maps(records, find_class_tokens(embedding, class_word), layers);
}

// p = (m + eps_floor) / sum(m + eps_floor)
inline Matrix normalize_map(const Matrix& m, double eps_floor = kDefaultEpsFloor) {
    if (m.size() == 0) throw shape_error("cannot normalize an empty map");
    if ((m.array() < 0.0).any()) throw domain_error("attention map has negative entries");
    if (eps_floor < 0.0) throw parameter_error("eps_floor must be >= 0");
    const Matrix floored = (m.array() + eps_floor).matrix();
    const double total = floored.sum();
    if (!(total > 0.0) || !std::isfinite(total)) throw domain_error("attention map sums to zero");
    return floored / total;
}

inline LayerMaps normalize_maps(const LayerMaps& maps, double eps_floor = kDefaultEpsFloor) {
    LayerMaps out;
    for (const auto& [id, m] : maps) out.emplace(id, normalize_map(m, eps_floor));
    return out;
}

// Evaluation timestep for a trajectory entry: the clean end is probed at the
// smallest training timestep.
inline int probe_timestep(int trajectory_timestep) {
    return trajectory_timestep < 0 ? 0 : trajectory_timestep;
}

// One conditioned, attention-recording pass per stored latent.
template <Denoiser B>
TokenAttentionStack build_target_stack(const LatentTrajectory& traj, const std::string& prompt,
                                       const std::string& class_word, B& backbone,
                                       const std::vector<std::string>& layers) {
    traj.validate();
    if (traj.clean().shape() != backbone.latent_shape()) {
        throw shape_error("trajectory shape does not match backbone");
    }
    const TextEmbedding cond = backbone.embed_prompt(prompt);
    TokenAttentionStack stack;
    stack.class_word = class_word;
    stack.tokens = find_class_tokens(cond, class_word);
    stack.layers = layers;
    DenoiseOptions opts;
    opts.record_attention = true;
    for (const auto& e : traj.entries) {
        const auto out = backbone.denoise(e.latent, probe_timestep(e.timestep), cond, opts);
        stack.entries.push_back({e.timestep, extract_token_maps(out.cross_records, stack.tokens, layers)});
    }
    return stack;
}

// Alternative target source: record maps while denoising the inverted latent
// back with the sketch prompt instead of probing the inverted latents.
template <Denoiser B>
TokenAttentionStack build_target_stack_from_reconstruction(const LatentTrajectory& traj,
                                                           const std::string& prompt,
                                                           const std::string& class_word,
                                                           const NoiseSchedule& schedule, B& backbone,
                                                           const std::vector<std::string>& layers,
                                                           double guidance_scale = 1.0) {
    const TextEmbedding cond = backbone.embed_prompt(prompt);
    TokenAttentionStack stack;
    stack.class_word = class_word;
    stack.tokens = find_class_tokens(cond, class_word);
    stack.layers = layers;
    DenoiseOptions opts;
    opts.record_attention = true;
    auto record = [&](int timestep, const Latent& z) {
        const auto out = backbone.denoise(z, probe_timestep(timestep), cond, opts);
        stack.entries.push_back({timestep, extract_token_maps(out.cross_records, stack.tokens, layers)});
    };
    const Latent clean = reconstruct(traj, prompt, schedule, backbone, guidance_scale,
                                     [&](std::size_t, int t, const Latent& z) { record(t, z); });
    record(kVirtualCleanStep, clean);
    std::reverse(stack.entries.begin(), stack.entries.end());
    return stack;
}

} // namespace sketchguide
