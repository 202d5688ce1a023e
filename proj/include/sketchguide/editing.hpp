// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "container.hpp"
#include "pipeline.hpp"

namespace sketchguide {

// Self-attention keys/values recorded while reconstructing an exemplar,
// keyed by trajectory timestep.
struct ExemplarFeatures {
    struct Entry {
        int timestep = 0;
        SelfAttentionInjection kv;
    };

    std::string source_hash;
    std::string prompt;
    std::vector<std::string> layers;
    std::vector<Entry> entries;

    [[nodiscard]] const SelfAttentionInjection* find(int timestep) const {
        for (const auto& e : entries)
            if (e.timestep == timestep) return &e.kv;
        return nullptr;
    }
};

template <Denoiser B>
std::vector<std::string> substitution_layers(const EditingConfig& config, const B& backbone) {
    if (!config.layers.empty()) return config.layers;
    std::vector<std::string> decoder, all;
    for (const auto& l : backbone.layers()) {
        if (l.kind != AttentionKind::self) continue;
        all.push_back(l.id);
        if (l.decoder) decoder.push_back(l.id);
    }
    return decoder.empty() ? all : decoder;
}

// Inverts the exemplar under the target-style prompt, then reconstructs it,
// recording self-attention keys/values at every visited latent.
template <Denoiser B>
ExemplarFeatures record_exemplar(const Latent& exemplar_latent, const std::string& class_label,
                                 const PipelineConfig& config, B& backbone,
                                 const std::vector<std::string>& layers) {
    const PromptPair prompts = build_prompts(class_label, config.style_source, config.style_target);
    const NoiseSchedule schedule = make_noise_schedule(config.schedule);
    const LatentTrajectory traj =
        invert(exemplar_latent, prompts.target, schedule, backbone, config.inversion_scale);
    const TextEmbedding cond = backbone.embed_prompt(prompts.target);

    ExemplarFeatures ex;
    ex.source_hash = Sha256().update(exemplar_latent.values()).hex();
    ex.prompt = prompts.target;
    ex.layers = layers;
    DenoiseOptions opts;
    opts.record_attention = true;
    auto record = [&](int timestep, const Latent& z) {
        const auto out = backbone.denoise(z, probe_timestep(timestep), cond, opts);
        ExemplarFeatures::Entry e{timestep, {}};
        for (const auto& id : layers) {
            auto it = std::find_if(out.self_records.begin(), out.self_records.end(),
                                   [&](const SelfAttentionRecord& r) { return r.layer == id; });
            if (it == out.self_records.end()) throw lookup_error("no self-attention layer '" + id + "'");
            e.kv.emplace(id, *it);
        }
        ex.entries.push_back(std::move(e));
    };
    const Latent clean = reconstruct(traj, prompts.target, schedule, backbone, config.inversion_scale,
                                     [&](std::size_t, int t, const Latent& z) { record(t, z); });
    record(kVirtualCleanStep, clean);
    std::reverse(ex.entries.begin(), ex.entries.end());
    return ex;
}

template <Denoiser B>
ExemplarFeatures record_exemplar(const Latent& exemplar_latent, const std::string& class_label,
                                 const PipelineConfig& config, B& backbone) {
    return record_exemplar(exemplar_latent, class_label, config, backbone,
                           substitution_layers(config.editing, backbone));
}

template <Denoiser B>
ExemplarFeatures record_exemplar(const Image& exemplar, const std::string& class_label,
                                 const PipelineConfig& config, B& backbone) {
    if (exemplar.empty()) throw io_error("empty exemplar image");
    return record_exemplar(backbone.encode_image(exemplar), class_label, config, backbone);
}

// Guided generation with the exemplar's self-attention keys/values replacing
// the native ones on steps [start_step, end_step]; queries stay native.
template <Denoiser B>
GenerationResult generate_with_exemplar(const ReferenceFeatures& features, const ExemplarFeatures& exemplar,
                                        const std::string& class_label, std::uint64_t seed,
                                        const PipelineConfig& config, B& backbone, GenerationHooks hooks = {}) {
    const EditingConfig& ed = config.editing;
    if (ed.enabled) {
        const NoiseSchedule schedule = make_noise_schedule(config.schedule);
        const int total = schedule.num_inference_steps();
        const int last = ed.end_step == 0 ? total : ed.end_step;
        if (ed.start_step < 1 || last > total || ed.start_step > last) {
            throw parameter_error("substitution window [" + std::to_string(ed.start_step) + ", " +
                                  std::to_string(last) + "] outside 1.." + std::to_string(total));
        }
        for (int t : schedule.sample_timesteps()) {
            if (!exemplar.find(t)) {
                throw lookup_error("exemplar features do not cover timestep " + std::to_string(t));
            }
        }
        hooks.injection = [&exemplar, first = ed.start_step, last](int step, int t) -> const SelfAttentionInjection* {
            if (step < first || step > last) return nullptr;
            return exemplar.find(t);
        };
    }
    GenerationResult r = generate(features, class_label, seed, config, backbone, hooks);
    r.manifest.input_hashes["exemplar"] = exemplar.source_hash;
    return r;
}

inline Container to_container(const ExemplarFeatures& ex) {
    Container c;
    c.manifest["kind"] = "exemplar_features";
    c.manifest["source_hash"] = ex.source_hash;
    c.manifest["prompt"] = ex.prompt;
    c.manifest["layers"] = ex.layers;
    std::vector<int> ts;
    nlohmann::json grids = nlohmann::json::object();
    for (const auto& e : ex.entries) {
        ts.push_back(e.timestep);
        for (const auto& id : ex.layers) {
            const auto& rec = e.kv.at(id);
            grids[id] = {rec.height, rec.width, rec.keys.size()};
            const std::string base = std::to_string(e.timestep) + "/" + id + "/";
            for (std::size_t h = 0; h < rec.keys.size(); ++h) {
                c.add(base + "k" + std::to_string(h), rec.keys[h]);
                c.add(base + "v" + std::to_string(h), rec.values[h]);
            }
        }
    }
    c.manifest["timesteps"] = ts;
    c.manifest["grids"] = grids;
    return c;
}

inline ExemplarFeatures exemplar_from_container(const Container& c) {
    if (c.manifest.value("kind", "") != "exemplar_features") throw io_error("container is not exemplar features");
    ExemplarFeatures ex;
    ex.source_hash = c.manifest.at("source_hash").get<std::string>();
    ex.prompt = c.manifest.at("prompt").get<std::string>();
    ex.layers = c.manifest.at("layers").get<std::vector<std::string>>();
    const auto& grids = c.manifest.at("grids");
    for (int t : c.manifest.at("timesteps").get<std::vector<int>>()) {
        ExemplarFeatures::Entry e{t, {}};
        for (const auto& id : ex.layers) {
            const auto g = grids.at(id).get<std::vector<int>>();
            SelfAttentionRecord rec{id, g.at(0), g.at(1), {}, {}};
            const std::string base = std::to_string(t) + "/" + id + "/";
            for (int h = 0; h < g.at(2); ++h) {
                rec.keys.push_back(c.matrix(base + "k" + std::to_string(h)));
                rec.values.push_back(c.matrix(base + "v" + std::to_string(h)));
            }
            e.kv.emplace(id, std::move(rec));
        }
        ex.entries.push_back(std::move(e));
    }
    return ex;
}

} // namespace sketchguide
