// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attention.hpp"
#include "backbone.hpp"
#include "container.hpp"
#include "guidance.hpp"
#include "hashing.hpp"
#include "image.hpp"
#include "inversion.hpp"
#include "scheduler.hpp"

namespace sketchguide {

struct PromptPair {
    std::string source;
    std::string target;
    std::string class_word;
};

inline PromptPair build_prompts(const std::string& class_label, const std::string& style_source = "sketch",
                                const std::string& style_target = "photo") {
    if (split_words(class_label).empty()) throw parameter_error("class label must not be empty");
    if (split_words(style_source).empty() || split_words(style_target).empty()) {
        throw parameter_error("style words must not be empty");
    }
    return {"a " + style_source + " of a " + class_label, "a " + style_target + " of a " + class_label,
            class_label};
}

// Which latents the target maps are probed on.
enum class TargetSource {
    inverted_latents, // one pass per inverted latent z_i
    reconstruction,   // passes recorded while denoising z_T back
};

inline std::string to_string(TargetSource s) {
    return s == TargetSource::inverted_latents ? "inverted_latents" : "reconstruction";
}

inline TargetSource parse_target_source(const std::string& s) {
    if (s == "inverted_latents") return TargetSource::inverted_latents;
    if (s == "reconstruction") return TargetSource::reconstruction;
    throw parameter_error("unknown target source '" + s + "'");
}

// Self-attention key/value substitution from an exemplar.
struct EditingConfig {
    bool enabled = true;
    int start_step = 5; // 1-based, inclusive
    int end_step = 0;   // 1-based, inclusive; 0 means the last step
    // Empty selects decoder self-attention layers (all self layers if the
    // backbone marks none as decoder).
    std::vector<std::string> layers;
};

struct PipelineConfig {
    ScheduleParams schedule;
    double cfg_scale = 7.5;
    double inversion_scale = 1.0;
    GuidanceConfig guidance;
    std::string style_source = "sketch";
    std::string style_target = "photo";
    TargetSource target_source = TargetSource::inverted_latents;
    EditingConfig editing;
    std::optional<std::filesystem::path> cache_dir;
};

inline nlohmann::json to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["num_train_steps"] = c.schedule.num_train_steps;
    j["beta_start"] = c.schedule.beta_start;
    j["beta_end"] = c.schedule.beta_end;
    j["beta_schedule"] = to_string(c.schedule.beta_schedule);
    j["num_inference_steps"] = c.schedule.num_inference_steps;
    j["timestep_spacing"] = to_string(c.schedule.spacing);
    j["steps_offset"] = c.schedule.steps_offset;
    j["cfg_scale"] = c.cfg_scale;
    j["inversion_scale"] = c.inversion_scale;
    j["beta"] = c.guidance.beta;
    j["guided_steps"] = c.guidance.guided_steps;
    j["layers"] = c.guidance.layers;
    j["iterations_per_step"] = c.guidance.iterations_per_step;
    j["eps_floor"] = c.guidance.eps_floor;
    j["grad_clip"] = c.guidance.grad_clip ? nlohmann::json(*c.guidance.grad_clip) : nlohmann::json(nullptr);
    j["step_scale_rule"] = to_string(c.guidance.step_scale_rule);
    j["style_source"] = c.style_source;
    j["style_target"] = c.style_target;
    j["target_source"] = to_string(c.target_source);
    j["editing"] = {{"enabled", c.editing.enabled},
                    {"start_step", c.editing.start_step},
                    {"end_step", c.editing.end_step},
                    {"layers", c.editing.layers}};
    return j;
}

template <Denoiser B>
std::vector<std::string> guidance_layers(const PipelineConfig& config, const B& backbone) {
    return config.guidance.layers.empty() ? std::vector<std::string>(backbone.default_guidance_layers())
                                          : config.guidance.layers;
}

struct ReferenceFeatures {
    LatentTrajectory trajectory;
    TokenAttentionStack stack;
    std::string content_hash;
    bool cache_hit = false;
};

namespace detail {

inline std::string feature_key(const Latent& z0, const std::string& class_label, const PipelineConfig& c,
                               const std::vector<std::string>& layers) {
    Sha256 h;
    h.update(z0.values());
    nlohmann::json k;
    k["class"] = class_label;
    k["shape"] = shape_vector(z0.shape());
    k["schedule"] = {c.schedule.num_train_steps, c.schedule.beta_start, c.schedule.beta_end,
                     to_string(c.schedule.beta_schedule), c.schedule.num_inference_steps,
                     to_string(c.schedule.spacing), c.schedule.steps_offset};
    k["inversion_scale"] = c.inversion_scale;
    k["style_source"] = c.style_source;
    k["target_source"] = to_string(c.target_source);
    k["layers"] = layers;
    h.update(k.dump());
    return h.hex();
}

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

} // namespace detail

// Inversion of the sketch latent under the source prompt, then the target
// map stack. Results pass through the container representation, and are
// cached under config.cache_dir keyed by a content hash when set.
template <Denoiser B>
ReferenceFeatures extract_reference_features(const Latent& sketch_latent, const std::string& class_label,
                                             const PipelineConfig& config, B& backbone) {
    const PromptPair prompts = build_prompts(class_label, config.style_source, config.style_target);
    const auto layers = guidance_layers(config, backbone);
    ReferenceFeatures f;
    f.content_hash = detail::feature_key(sketch_latent, class_label, config, layers);

    std::filesystem::path traj_path, stack_path;
    if (config.cache_dir) {
        traj_path = *config.cache_dir / (f.content_hash + ".trajectory.skgc");
        stack_path = *config.cache_dir / (f.content_hash + ".stack.skgc");
        if (std::filesystem::exists(traj_path) && std::filesystem::exists(stack_path)) {
            f.trajectory = trajectory_from_container(load_container(traj_path));
            f.stack = stack_from_container(load_container(stack_path));
            f.cache_hit = true;
            return f;
        }
    }

    const NoiseSchedule schedule = make_noise_schedule(config.schedule);
    LatentTrajectory traj = invert(sketch_latent, prompts.source, schedule, backbone, config.inversion_scale);
    TokenAttentionStack stack =
        config.target_source == TargetSource::inverted_latents
            ? build_target_stack(traj, prompts.source, prompts.class_word, backbone, layers)
            : build_target_stack_from_reconstruction(traj, prompts.source, prompts.class_word, schedule, backbone,
                                                     layers, config.inversion_scale);
    f.trajectory = canonicalize(traj);
    f.stack = canonicalize(stack);

    if (config.cache_dir) {
        // Write-then-rename keeps concurrent readers from seeing partial files.
        auto publish = [](const std::filesystem::path& path, const Container& c) {
            auto tmp = path;
            tmp += ".tmp";
            save_container(tmp, c);
            std::filesystem::rename(tmp, path);
        };
        publish(traj_path, to_container(f.trajectory));
        publish(stack_path, to_container(f.stack));
    }
    return f;
}

template <Denoiser B>
ReferenceFeatures extract_reference_features(const Image& sketch, const std::string& class_label,
                                             const PipelineConfig& config, B& backbone) {
    if (sketch.empty()) throw io_error("empty sketch image");
    return extract_reference_features(backbone.encode_image(sketch), class_label, config, backbone);
}

struct RunManifest {
    std::uint64_t seed = 0;
    nlohmann::json config;
    std::map<std::string, std::string> input_hashes;
    std::map<std::string, double> phase_timings_ms;
    std::string output_path;
    std::string trace_path;
    // Schedule and step bookkeeping of the run itself.
    int steps_performed = 0;
    std::vector<int> guided_step_indices; // 1-based
    std::vector<int> substituted_step_indices;
    std::vector<int> timesteps;
    double cfg_scale = 0.0;
    std::string class_label;
    std::string target_prompt;
    std::string output_image_sha256;
    std::string output_latent_sha256;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"seed", seed},
                {"config", config},
                {"input_hashes", input_hashes},
                {"phase_timings_ms", phase_timings_ms},
                {"output_path", output_path},
                {"trace_path", trace_path},
                {"steps_performed", steps_performed},
                {"guided_step_indices", guided_step_indices},
                {"substituted_step_indices", substituted_step_indices},
                {"timesteps", timesteps},
                {"cfg_scale", cfg_scale},
                {"class_label", class_label},
                {"target_prompt", target_prompt},
                {"output_image_sha256", output_image_sha256},
                {"output_latent_sha256", output_latent_sha256}};
    }
};

struct GenerationResult {
    Latent latent;
    Image image;
    std::vector<GuidanceTraceRow> trace;
    RunManifest manifest;
};

// Supplies self-attention substitutions per (1-based step, timestep).
using InjectionProvider = std::function<const SelfAttentionInjection*(int, int)>;

struct GenerationHooks {
    std::function<void(int, int)> on_progress;                    // (completed, total)
    std::function<void(const GuidanceTraceRow&)> on_trace;
    InjectionProvider injection;
};

// Guided sampling from seeded Gaussian noise. Reads only the extracted
// features, never the sketch itself.
template <Denoiser B>
GenerationResult generate(const ReferenceFeatures& features, const std::string& class_label, std::uint64_t seed,
                          const PipelineConfig& config, B& backbone, const GenerationHooks& hooks = {}) {
    const auto t_start = std::chrono::steady_clock::now();
    const NoiseSchedule schedule = make_noise_schedule(config.schedule);
    const int total = schedule.num_inference_steps();
    config.guidance.validate(total);
    const auto& ts = schedule.sample_timesteps();
    const auto layers = guidance_layers(config, backbone);
    for (int i = 0; i < config.guidance.guided_steps; ++i) {
        if (!features.stack.find(ts[static_cast<std::size_t>(i)])) {
            throw lookup_error("reference features lack target maps for guided timestep " +
                               std::to_string(ts[static_cast<std::size_t>(i)]));
        }
    }

    const PromptPair prompts = build_prompts(class_label, config.style_source, config.style_target);
    const TextEmbedding cond = backbone.embed_prompt(prompts.target);
    const TextEmbedding uncond = backbone.null_embedding();
    StepContext ctx{cond, uncond, {}, layers, config.cfg_scale, nullptr};
    if (config.guidance.guided_steps > 0) ctx.class_tokens = find_class_tokens(cond, prompts.class_word);

    GenerationResult result;
    RunManifest& m = result.manifest;
    m.seed = seed;
    m.config = to_json(config);
    m.input_hashes["features"] = features.content_hash;
    m.cfg_scale = config.cfg_scale;
    m.timesteps = ts;
    m.class_label = class_label;
    m.target_prompt = prompts.target;

    Latent z = random_normal_latent(backbone.latent_shape(), seed);
    std::optional<double> previous_delta;
    for (int i = 0; i < total; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        const int t = ts[idx];
        const int t_prev = schedule.previous_timestep(idx);
        const int step = i + 1;
        ctx.injection = hooks.injection ? hooks.injection(step, t) : nullptr;
        if (ctx.injection) m.substituted_step_indices.push_back(step);

        Latent next;
        if (i < config.guidance.guided_steps) {
            GuidedStepResult r = guided_denoise_step(z, t, t_prev, features.stack.at(t), ctx, backbone, schedule,
                                                     config.guidance, step, previous_delta);
            for (const auto& row : r.trace) {
                result.trace.push_back(row);
                if (hooks.on_trace) hooks.on_trace(row);
            }
            m.guided_step_indices.push_back(step);
            next = std::move(r.next);
        } else {
            const Latent eps = guided_epsilon(backbone, z, t, cond, uncond, config.cfg_scale, ctx.injection);
            next = ddim_step(z, eps, t, t_prev, schedule);
        }
        check_finite(next, static_cast<std::size_t>(step), "generate");
        previous_delta = l2_distance(z, next);
        z = std::move(next);
        ++m.steps_performed;
        if (hooks.on_progress) hooks.on_progress(step, total);
    }
    m.phase_timings_ms["generate"] = detail::elapsed_ms(t_start);

    result.image = backbone.decode_latent(z);
    m.output_latent_sha256 = Sha256().update(z.values()).hex();
    m.output_image_sha256 = sha256_hex(result.image.pixels);
    result.latent = std::move(z);
    return result;
}

inline std::string trace_to_jsonl(const std::vector<GuidanceTraceRow>& rows) {
    std::string out;
    for (const auto& r : rows) out += to_json(r).dump() + "\n";
    return out;
}

// Writes <out>.png, <stem>.manifest.json and <stem>.trace.jsonl next to it.
inline void write_generation(GenerationResult& result, const std::filesystem::path& out_png) {
    auto stem = out_png;
    stem.replace_extension();
    const auto manifest_path = std::filesystem::path(stem.string() + ".manifest.json");
    const auto trace_path = std::filesystem::path(stem.string() + ".trace.jsonl");
    result.manifest.output_path = out_png.string();
    result.manifest.trace_path = trace_path.string();
    write_png(out_png, result.image);
    const std::string trace = trace_to_jsonl(result.trace);
    write_file_bytes(trace_path, std::vector<std::uint8_t>(trace.begin(), trace.end()));
    const std::string manifest = result.manifest.to_json().dump(2) + "\n";
    write_file_bytes(manifest_path, std::vector<std::uint8_t>(manifest.begin(), manifest.end()));
}

} // namespace sketchguide
