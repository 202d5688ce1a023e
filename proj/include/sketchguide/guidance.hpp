// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attention.hpp"
#include "backbone.hpp"
#include "errors.hpp"
#include "scheduler.hpp"
#include "tensor.hpp"

namespace sketchguide {

// Where the natural step size ||z_t - z_{t-1}|| of the update comes from.
enum class StepScaleRule {
    // ||z_t - provisional unguided DDIM step from z_t||
    provisional_ddim,
    // ||z_{t+1} - z_t|| of the step just completed (provisional on the first)
    previous_delta,
};

inline std::string to_string(StepScaleRule r) {
    return r == StepScaleRule::provisional_ddim ? "provisional_ddim" : "previous_delta";
}

inline StepScaleRule parse_step_scale_rule(const std::string& s) {
    if (s == "provisional_ddim") return StepScaleRule::provisional_ddim;
    if (s == "previous_delta") return StepScaleRule::previous_delta;
    throw parameter_error("unknown step-scale rule '" + s + "'");
}

struct GuidanceConfig {
    double beta = 1.0;
    int guided_steps = 25;
    // Empty selects the backbone's default guidance layers.
    std::vector<std::string> layers;
    int iterations_per_step = 1;
    double eps_floor = kDefaultEpsFloor;
    // Elementwise clamp on the loss gradient before normalization.
    std::optional<double> grad_clip;
    StepScaleRule step_scale_rule = StepScaleRule::provisional_ddim;

    void validate(int total_steps) const {
        if (!(beta >= 0.0) || !std::isfinite(beta)) throw parameter_error("beta must be a finite value >= 0");
        if (guided_steps < 0 || guided_steps > total_steps) {
            throw parameter_error("guided_steps must lie in [0, " + std::to_string(total_steps) + "]");
        }
        if (iterations_per_step < 1) throw parameter_error("iterations_per_step must be >= 1");
        if (eps_floor < 0.0) throw parameter_error("eps_floor must be >= 0");
        if (grad_clip && !(*grad_clip > 0.0)) throw parameter_error("grad_clip must be > 0");
    }
};

inline void require_distribution(const Matrix& p, const char* name) {
    if ((p.array() <= 0.0).any()) {
        throw domain_error(std::string(name) + " must be strictly positive");
    }
    if (std::abs(p.sum() - 1.0) > 1e-6) {
        throw domain_error(std::string(name) + " does not sum to 1 (sum=" + std::to_string(p.sum()) + ")");
    }
}

// D(p, q) = KL(p||q) + KL(q||p), accumulated as sum (p - q)(log p - log q),
// which is exactly symmetric in floating point.
inline double symmetric_kl(const Matrix& p, const Matrix& q) {
    if (p.rows() != q.rows() || p.cols() != q.cols()) {
        throw shape_error("symmetric_kl: shape mismatch");
    }
    require_distribution(p, "p");
    require_distribution(q, "q");
    double d = 0.0;
    for (Eigen::Index j = 0; j < p.cols(); ++j)
        for (Eigen::Index i = 0; i < p.rows(); ++i)
            d += (p(i, j) - q(i, j)) * (std::log(p(i, j)) - std::log(q(i, j)));
    return std::max(d, 0.0);
}

// dD(p, q)/dp = log(p/q) + 1 - q/p
inline Matrix symmetric_kl_grad(const Matrix& p, const Matrix& q) {
    return ((p.array() / q.array()).log() + 1.0 - q.array() / p.array()).matrix();
}

// Sum over layers of D(target[l], current[l]) on normalized maps.
inline double alignment_loss(const LayerMaps& target, const LayerMaps& current) {
    if (target.size() != current.size()) throw lookup_error("alignment_loss: layer sets differ");
    double total = 0.0;
    for (const auto& [id, t] : target) {
        auto it = current.find(id);
        if (it == current.end()) throw lookup_error("alignment_loss: layer '" + id + "' missing");
        total += symmetric_kl(t, it->second);
    }
    return total;
}

// z - beta * (step_scale / ||grad||) * grad; identity when ||grad|| < 1e-12.
inline Latent optimize_latent(const Latent& z, const Latent& grad, double step_scale, double beta) {
    require_same_shape(z, grad, "optimize_latent");
    if (!all_finite(grad.values())) throw numerical_error("non-finite gradient in latent update");
    if (!(step_scale >= 0.0) || !(beta >= 0.0)) {
        throw parameter_error("step_scale and beta must be >= 0");
    }
    const double norm = l2_norm(grad.values());
    if (norm < 1e-12) return z;
    const double coef = beta * step_scale / norm;
    Latent out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - coef * grad[i];
    return out;
}

// Cotangents of the alignment loss w.r.t. the raw per-head maps of each
// guided layer. `raw` are the extracted class-token maps, `target` the
// normalized target maps.
inline std::vector<CrossMapCotangent> alignment_cotangents(const std::vector<CrossAttentionRecord>& records,
                                                           const TokenRange& tokens, const LayerMaps& raw,
                                                           const LayerMaps& target, double eps_floor) {
    std::vector<CrossMapCotangent> out;
    for (const auto& [id, m] : raw) {
        const Matrix p = normalize_map(m, eps_floor);
        const Matrix g = symmetric_kl_grad(p, target.at(id));
        const double total = (m.array() + eps_floor).sum();
        // Through the normalization: dL/dm = (g - <g, p>) / total.
        const Matrix dm = ((g.array() - (g.array() * p.array()).sum()) / total).matrix();

        const CrossAttentionRecord* rec = nullptr;
        for (const auto& r : records)
            if (r.layer == id) rec = &r;
        if (!rec) throw lookup_error("cross-attention layer '" + id + "' was not recorded");

        // Through the head/token average and the grid reshape.
        const double share = 1.0 / static_cast<double>(rec->head_maps.size() * tokens.size());
        CrossMapCotangent cot{id, {}};
        for (const auto& head : rec->head_maps) {
            Matrix gh = Matrix::Zero(head.rows(), head.cols());
            for (int y = 0; y < rec->height; ++y)
                for (int x = 0; x < rec->width; ++x)
                    for (int k = tokens.begin; k < tokens.end; ++k) gh(y * rec->width + x, k) = share * dm(y, x);
            cot.head_maps.push_back(std::move(gh));
        }
        out.push_back(std::move(cot));
    }
    return out;
}

struct AlignmentEvaluation {
    double loss = 0.0;
    Latent grad;       // empty unless requested
    Latent eps_cond;   // conditional noise prediction at the evaluated latent
    LayerMaps maps;    // normalized current maps
};

// Conditional pass at z, alignment loss against `target` (normalized), and
// optionally its gradient w.r.t. z through the attention-recording pass.
template <Denoiser B>
AlignmentEvaluation evaluate_alignment(B& backbone, const Latent& z, int t, const TextEmbedding& cond,
                                       const TokenRange& tokens, const LayerMaps& target,
                                       const std::vector<std::string>& layers, double eps_floor,
                                       bool with_gradient, const SelfAttentionInjection* injection = nullptr) {
    DenoiseOptions opts;
    opts.record_attention = true;
    opts.track_gradients = with_gradient;
    opts.injection = injection;
    DenoiserOutput out = backbone.denoise(z, t, cond, opts);
    const LayerMaps raw = extract_token_maps(out.cross_records, tokens, layers);
    AlignmentEvaluation ev;
    ev.maps = normalize_maps(raw, eps_floor);
    ev.loss = alignment_loss(target, ev.maps);
    ev.eps_cond = std::move(out.epsilon);
    if (with_gradient) {
        const auto cot = alignment_cotangents(out.cross_records, tokens, raw, target, eps_floor);
        ev.grad = backbone.pullback_cross_maps(cot);
    }
    return ev;
}

struct GuidanceTraceRow {
    int step = 0;       // 1-based denoising step
    int iteration = 0;  // 0-based refinement within the step
    int timestep = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    double grad_norm = 0.0;
    double step_scale = 0.0;
    double beta = 0.0;
};

inline nlohmann::json to_json(const GuidanceTraceRow& r) {
    return {{"step", r.step},           {"iteration", r.iteration}, {"timestep", r.timestep},
            {"loss_before", r.loss_before}, {"loss_after", r.loss_after}, {"grad_norm", r.grad_norm},
            {"step_scale", r.step_scale},   {"beta", r.beta}};
}

inline GuidanceTraceRow trace_row_from_json(const nlohmann::json& j) {
    GuidanceTraceRow r;
    r.step = j.at("step").get<int>();
    r.iteration = j.at("iteration").get<int>();
    r.timestep = j.at("timestep").get<int>();
    r.loss_before = j.at("loss_before").get<double>();
    r.loss_after = j.at("loss_after").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    r.step_scale = j.at("step_scale").get<double>();
    r.beta = j.at("beta").get<double>();
    return r;
}

// Per-run inputs shared by every denoising step.
struct StepContext {
    const TextEmbedding& cond;
    const TextEmbedding& uncond;
    TokenRange class_tokens;
    std::vector<std::string> layers;
    double cfg_scale = 7.5;
    const SelfAttentionInjection* injection = nullptr;
};

struct GuidedStepResult {
    Latent next;     // latent at t_prev
    Latent refined;  // optimized latent at t
    std::vector<GuidanceTraceRow> trace;
};

// Latent optimization at t followed by the CFG DDIM step to t_prev.
// `step_index` is the 1-based position of t in the sampling loop.
template <Denoiser B>
GuidedStepResult guided_denoise_step(const Latent& z_t, int t, int t_prev, const LayerMaps& target_maps,
                                     const StepContext& ctx, B& backbone, const NoiseSchedule& schedule,
                                     const GuidanceConfig& config, int step_index = 1,
                                     std::optional<double> previous_delta = std::nullopt) {
    if (config.iterations_per_step < 1) throw parameter_error("iterations_per_step must be >= 1");
    LayerMaps target;
    for (const auto& id : ctx.layers) {
        auto it = target_maps.find(id);
        if (it == target_maps.end()) {
            throw lookup_error("target maps at t=" + std::to_string(t) + " lack layer '" + id + "'");
        }
        target.emplace(id, normalize_map(it->second, config.eps_floor));
    }

    auto uncond_eps = [&](const Latent& z) {
        DenoiseOptions opts;
        opts.injection = ctx.injection;
        return backbone.denoise(z, t, ctx.uncond, opts).epsilon;
    };
    auto combine = [&](const Latent& z, const Latent& eps_c) {
        if (ctx.cfg_scale == 1.0) return eps_c;
        return cfg_epsilon(uncond_eps(z), eps_c, ctx.cfg_scale);
    };

    GuidedStepResult result;
    Latent z = z_t;
    for (int it = 0; it < config.iterations_per_step; ++it) {
        AlignmentEvaluation before = evaluate_alignment(backbone, z, t, ctx.cond, ctx.class_tokens, target,
                                                        ctx.layers, config.eps_floor, true, ctx.injection);
        const Latent provisional = ddim_step(z, combine(z, before.eps_cond), t, t_prev, schedule);
        double step_scale = l2_distance(z, provisional);
        if (config.step_scale_rule == StepScaleRule::previous_delta && previous_delta) {
            step_scale = *previous_delta;
        }
        Latent grad = std::move(before.grad);
        if (!all_finite(grad.values())) {
            throw numerical_error("non-finite gradient at step " + std::to_string(step_index));
        }
        if (config.grad_clip) {
            for (auto& g : grad.values()) g = std::clamp(g, -*config.grad_clip, *config.grad_clip);
        }
        Latent refined = optimize_latent(z, grad, step_scale, config.beta);
        check_finite(refined, static_cast<std::size_t>(step_index), "guidance");
        const AlignmentEvaluation after = evaluate_alignment(backbone, refined, t, ctx.cond, ctx.class_tokens,
                                                             target, ctx.layers, config.eps_floor, false,
                                                             ctx.injection);
        result.trace.push_back({step_index, it, t, before.loss, after.loss, l2_norm(grad.values()),
                                step_scale, config.beta});
        z = std::move(refined);
        if (it + 1 == config.iterations_per_step) {
            result.next = ddim_step(z, combine(z, after.eps_cond), t, t_prev, schedule);
        }
    }
    check_finite(result.next, static_cast<std::size_t>(step_index), "guidance");
    result.refined = std::move(z);
    return result;
}

} // namespace sketchguide
