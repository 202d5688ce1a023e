// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "backbone.hpp"
#include "errors.hpp"

namespace sketchguide {

// Run-config block naming a pretrained latent-diffusion checkpoint and the
// cross-attention layers to guide.
struct CheckpointConfig {
    std::string checkpoint;
    std::string layer_pattern = "16x16+mid";
};

// Attention layers of a Stable Diffusion 1.x U-Net at a 64x64 latent.
inline std::vector<LayerInfo> sd1_attention_layout() {
    std::vector<LayerInfo> out;
    auto block = [&](const std::string& prefix, int res, int heads, int dim, bool mid, bool decoder) {
        out.push_back({prefix + ".attn1", AttentionKind::self, res, res, heads, dim, mid, decoder});
        out.push_back({prefix + ".attn2", AttentionKind::cross, res, res, heads, dim, mid, decoder});
    };
    const int res_down[] = {64, 32, 16};
    const int dims[] = {40, 80, 160};
    for (int b = 0; b < 3; ++b)
        for (int a = 0; a < 2; ++a)
            block("down_blocks." + std::to_string(b) + ".attentions." + std::to_string(a) +
                      ".transformer_blocks.0",
                  res_down[b], 8, dims[b], false, false);
    block("mid_block.attentions.0.transformer_blocks.0", 8, 8, 160, true, false);
    const int res_up[] = {16, 32, 64};
    for (int b = 1; b <= 3; ++b)
        for (int a = 0; a < 3; ++a)
            block("up_blocks." + std::to_string(b) + ".attentions." + std::to_string(a) +
                      ".transformer_blocks.0",
                  res_up[b - 1], 8, dims[3 - b], false, true);
    return out;
}

// Layer selection pattern: '+'-separated terms, each "all", "mid", "<H>x<W>"
// (every layer at that resolution) or an exact layer id. Result keeps layout
// order.
inline std::vector<std::string> select_layers(const std::vector<LayerInfo>& layout, std::string_view pattern,
                                              AttentionKind kind = AttentionKind::cross) {
    std::vector<std::string> terms;
    std::string term;
    std::istringstream in{std::string(pattern)};
    while (std::getline(in, term, '+')) {
        if (!term.empty()) terms.push_back(term);
    }
    if (terms.empty()) throw parameter_error("empty layer pattern");

    auto matches = [&](const LayerInfo& l, const std::string& t) {
        if (t == "all") return true;
        if (t == "mid") return l.mid_block;
        if (t == l.id) return true;
        const auto x = t.find('x');
        if (x != std::string::npos && x > 0 && x + 1 < t.size() &&
            t.find_first_not_of("0123456789x") == std::string::npos) {
            return l.height == std::stoi(t.substr(0, x)) && l.width == std::stoi(t.substr(x + 1));
        }
        return false;
    };

    std::vector<std::string> out;
    for (const auto& t : terms) {
        bool any = false;
        for (const auto& l : layout)
            if (l.kind == kind && matches(l, t)) any = true;
        if (!any) throw lookup_error("layer pattern term '" + t + "' matches no layer");
    }
    for (const auto& l : layout) {
        if (l.kind != kind) continue;
        for (const auto& t : terms) {
            if (matches(l, t)) {
                out.push_back(l.id);
                break;
            }
        }
    }
    return out;
}

// This build links no neural-network inference runtime, so a checkpoint can
// be described and its layers selected, but not executed.
inline std::string checkpoint_unavailable_message(const CheckpointConfig& c) {
    return "checkpoint backbone unavailable: no inference runtime is linked into this build" +
           (c.checkpoint.empty() ? std::string() : " (requested '" + c.checkpoint + "')") +
           "; use --backbone toy";
}

} // namespace sketchguide
