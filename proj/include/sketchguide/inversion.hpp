// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "errors.hpp"
#include "scheduler.hpp"
#include "tensor.hpp"

namespace sketchguide {

struct TrajectoryEntry {
    int timestep = 0;
    Latent latent;
    bool operator==(const TrajectoryEntry&) const = default;
};

// z_0 (clean, at kVirtualCleanStep) through z_T, timesteps increasing.
struct LatentTrajectory {
    std::vector<TrajectoryEntry> entries;
    std::string prompt;
    double guidance_scale = 1.0;

    [[nodiscard]] bool empty() const { return entries.empty(); }
    [[nodiscard]] std::size_t size() const { return entries.size(); }
    [[nodiscard]] const Latent& clean() const { return entries.front().latent; }
    [[nodiscard]] const Latent& noisiest() const { return entries.back().latent; }

    [[nodiscard]] const Latent* find(int timestep) const {
        for (const auto& e : entries)
            if (e.timestep == timestep) return &e.latent;
        return nullptr;
    }

    void validate() const {
        if (entries.empty()) throw parameter_error("empty trajectory");
        const Shape shape = entries.front().latent.shape();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].latent.shape() != shape) throw shape_error("trajectory latents differ in shape");
            if (i > 0 && entries[i].timestep <= entries[i - 1].timestep) {
                throw ordering_error("trajectory timesteps must be strictly increasing");
            }
        }
    }

    bool operator==(const LatentTrajectory&) const = default;
};

// Timesteps a trajectory over `schedule` visits, clean end first.
inline std::vector<int> trajectory_timesteps(const NoiseSchedule& schedule) {
    std::vector<int> ts{kVirtualCleanStep};
    const auto& desc = schedule.sample_timesteps();
    ts.insert(ts.end(), desc.rbegin(), desc.rend());
    return ts;
}

inline void check_finite(const Latent& z, std::size_t step, const char* phase) {
    if (!all_finite(z.values())) {
        throw numerical_error(std::string(phase) + ": non-finite latent at step " + std::to_string(step));
    }
}

// DDIM inversion of z_0: each move t_prev -> t uses the noise predicted at
// the current latent with label t.
template <Denoiser B>
LatentTrajectory invert(const Latent& z0, const std::string& prompt, const NoiseSchedule& schedule,
                        B& backbone, double guidance_scale = 1.0) {
    if (z0.shape() != backbone.latent_shape()) {
        throw shape_error("latent " + to_string(z0.shape()) + " does not match backbone " +
                          to_string(backbone.latent_shape()));
    }
    if (!(guidance_scale >= 0.0)) throw parameter_error("guidance scale must be >= 0");
    check_finite(z0, 0, "invert");
    const TextEmbedding cond = backbone.embed_prompt(prompt);
    const TextEmbedding uncond = backbone.null_embedding();

    const auto ts = trajectory_timesteps(schedule);
    LatentTrajectory traj;
    traj.prompt = prompt;
    traj.guidance_scale = guidance_scale;
    traj.entries.reserve(ts.size());
    traj.entries.push_back({ts[0], z0});
    for (std::size_t k = 1; k < ts.size(); ++k) {
        const Latent& z = traj.entries.back().latent;
        const Latent eps = guided_epsilon(backbone, z, ts[k], cond, uncond, guidance_scale);
        Latent next = ddim_inverse_step(z, eps, ts[k - 1], ts[k], schedule);
        check_finite(next, k, "invert");
        traj.entries.push_back({ts[k], std::move(next)});
    }
    return traj;
}

// Called once per denoising step with (step index, timestep, latent at t).
using ReconstructObserver = std::function<void(std::size_t, int, const Latent&)>;

template <Denoiser B>
Latent reconstruct(const LatentTrajectory& traj, const std::string& prompt,
                   const NoiseSchedule& schedule, B& backbone, double guidance_scale = 1.0,
                   const ReconstructObserver& observer = {}) {
    if (traj.empty()) throw parameter_error("cannot reconstruct from an empty trajectory");
    traj.validate();
    if (traj.entries.back().timestep != schedule.sample_timesteps().front()) {
        throw parameter_error("trajectory does not end at the schedule's first timestep");
    }
    const TextEmbedding cond = backbone.embed_prompt(prompt);
    const TextEmbedding uncond = backbone.null_embedding();
    Latent z = traj.noisiest();
    const auto& ts = schedule.sample_timesteps();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        if (observer) observer(i, ts[i], z);
        const Latent eps = guided_epsilon(backbone, z, ts[i], cond, uncond, guidance_scale);
        z = ddim_step(z, eps, ts[i], schedule.previous_timestep(i), schedule);
        check_finite(z, i + 1, "reconstruct");
    }
    return z;
}

} // namespace sketchguide
