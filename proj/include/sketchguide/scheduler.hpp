// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace sketchguide {

// Timestep label for the clean end of the chain; its cumulative alpha is 1.
inline constexpr int kVirtualCleanStep = -1;

enum class BetaSchedule { linear, scaled_linear };
enum class TimestepSpacing { leading, trailing, linspace };

struct ScheduleParams {
    int num_train_steps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    int num_inference_steps = 50;
    BetaSchedule beta_schedule = BetaSchedule::linear;
    TimestepSpacing spacing = TimestepSpacing::leading;
    int steps_offset = 0;
};

inline std::string to_string(TimestepSpacing s) {
    switch (s) {
    case TimestepSpacing::leading: return "leading";
    case TimestepSpacing::trailing: return "trailing";
    case TimestepSpacing::linspace: return "linspace";
    }
    return "?";
}

inline std::string to_string(BetaSchedule s) {
    return s == BetaSchedule::linear ? "linear" : "scaled_linear";
}

inline TimestepSpacing parse_spacing(const std::string& s) {
    if (s == "leading") return TimestepSpacing::leading;
    if (s == "trailing") return TimestepSpacing::trailing;
    if (s == "linspace") return TimestepSpacing::linspace;
    throw parameter_error("unknown timestep spacing '" + s + "'");
}

inline BetaSchedule parse_beta_schedule(const std::string& s) {
    if (s == "linear") return BetaSchedule::linear;
    if (s == "scaled_linear") return BetaSchedule::scaled_linear;
    throw parameter_error("unknown beta schedule '" + s + "'");
}

// Cumulative signal coefficients and the inference timestep grid. Immutable
// once built.
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> alpha_bar, std::vector<int> sample_timesteps)
        : alpha_bar_(std::move(alpha_bar)), sample_timesteps_(std::move(sample_timesteps)) {
        validate();
    }

    [[nodiscard]] int num_train_steps() const { return static_cast<int>(alpha_bar_.size()); }
    [[nodiscard]] int num_inference_steps() const {
        return static_cast<int>(sample_timesteps_.size());
    }
    [[nodiscard]] const std::vector<double>& alpha_bars() const { return alpha_bar_; }
    // Descending.
    [[nodiscard]] const std::vector<int>& sample_timesteps() const { return sample_timesteps_; }

    [[nodiscard]] bool in_domain(int t) const {
        return t == kVirtualCleanStep || (t >= 0 && t < num_train_steps());
    }

    [[nodiscard]] double alpha_bar(int t) const {
        if (t == kVirtualCleanStep) return 1.0;
        if (t < 0 || t >= num_train_steps()) {
            throw parameter_error("timestep " + std::to_string(t) + " outside schedule domain [0, " +
                                  std::to_string(num_train_steps()) + ")");
        }
        return alpha_bar_[static_cast<std::size_t>(t)];
    }

    // Timestep that follows sample_timesteps()[i] while denoising.
    [[nodiscard]] int previous_timestep(std::size_t i) const {
        return i + 1 < sample_timesteps_.size() ? sample_timesteps_[i + 1] : kVirtualCleanStep;
    }

private:
    void validate() const {
        if (alpha_bar_.empty()) throw parameter_error("empty alpha_bar sequence");
        for (std::size_t i = 0; i < alpha_bar_.size(); ++i) {
            if (!(alpha_bar_[i] > 0.0 && alpha_bar_[i] <= 1.0)) {
                throw parameter_error("alpha_bar outside (0, 1] at t=" + std::to_string(i));
            }
            if (i > 0 && !(alpha_bar_[i] < alpha_bar_[i - 1])) {
                throw parameter_error("alpha_bar not strictly decreasing at t=" + std::to_string(i));
            }
        }
        if (sample_timesteps_.empty()) throw parameter_error("empty sample timestep list");
        for (std::size_t i = 0; i < sample_timesteps_.size(); ++i) {
            const int t = sample_timesteps_[i];
            if (t < 0 || t >= num_train_steps()) {
                throw parameter_error("sample timestep " + std::to_string(t) + " out of range");
            }
            if (i > 0 && !(t < sample_timesteps_[i - 1])) {
                throw parameter_error("sample timesteps not strictly descending");
            }
        }
    }

    std::vector<double> alpha_bar_;
    std::vector<int> sample_timesteps_;
};

inline NoiseSchedule make_noise_schedule(const ScheduleParams& p) {
    if (!(p.beta_start > 0.0 && p.beta_start <= p.beta_end && p.beta_end < 1.0)) {
        throw parameter_error("invalid beta range: need 0 < beta_start <= beta_end < 1");
    }
    if (p.num_train_steps <= 0) throw parameter_error("num_train_steps must be positive");
    if (p.num_inference_steps <= 0) throw parameter_error("num_inference_steps must be positive");
    if (p.num_inference_steps > p.num_train_steps) {
        throw parameter_error("num_inference_steps (" + std::to_string(p.num_inference_steps) +
                              ") exceeds num_train_steps (" + std::to_string(p.num_train_steps) +
                              ")");
    }

    const auto n = static_cast<std::size_t>(p.num_train_steps);
    std::vector<double> alpha_bar(n);
    double prod = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        double beta;
        if (p.beta_schedule == BetaSchedule::linear) {
            beta = p.beta_start + frac * (p.beta_end - p.beta_start);
        } else {
            const double s = std::sqrt(p.beta_start) +
                             frac * (std::sqrt(p.beta_end) - std::sqrt(p.beta_start));
            beta = s * s;
        }
        prod *= 1.0 - beta;
        alpha_bar[i] = prod;
    }

    const int steps = p.num_inference_steps;
    std::vector<int> ts(static_cast<std::size_t>(steps));
    switch (p.spacing) {
    case TimestepSpacing::leading: {
        const int stride = p.num_train_steps / steps;
        for (int i = 0; i < steps; ++i) ts[i] = (steps - 1 - i) * stride + p.steps_offset;
        break;
    }
    case TimestepSpacing::trailing: {
        const double stride = static_cast<double>(p.num_train_steps) / steps;
        for (int i = 0; i < steps; ++i) {
            ts[i] = static_cast<int>(std::round(p.num_train_steps - i * stride)) - 1;
        }
        break;
    }
    case TimestepSpacing::linspace: {
        for (int i = 0; i < steps; ++i) {
            const double v = steps == 1 ? 0.0
                                        : static_cast<double>(p.num_train_steps - 1) *
                                              (steps - 1 - i) / (steps - 1);
            ts[i] = static_cast<int>(std::round(v));
        }
        break;
    }
    }
    return NoiseSchedule(std::move(alpha_bar), std::move(ts));
}

inline NoiseSchedule make_noise_schedule(int num_train_steps, double beta_start, double beta_end,
                                         int num_inference_steps) {
    ScheduleParams p;
    p.num_train_steps = num_train_steps;
    p.beta_start = beta_start;
    p.beta_end = beta_end;
    p.num_inference_steps = num_inference_steps;
    return make_noise_schedule(p);
}

// Deterministic DDIM move between two noise levels for a fixed noise
// prediction: estimate x0 at `alpha_from`, re-noise it to `alpha_to`.
inline Latent ddim_transfer(const Latent& z, const Latent& epsilon, double alpha_from,
                            double alpha_to) {
    require_same_shape(z, epsilon, "ddim");
    const double sa_from = std::sqrt(alpha_from);
    const double sb_from = std::sqrt(1.0 - alpha_from);
    const double sa_to = std::sqrt(alpha_to);
    const double sb_to = std::sqrt(1.0 - alpha_to);
    Latent out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double x0 = (z[i] - sb_from * epsilon[i]) / sa_from;
        out[i] = sa_to * x0 + sb_to * epsilon[i];
    }
    return out;
}

// One denoising step t -> t_prev (t_prev may be kVirtualCleanStep).
inline Latent ddim_step(const Latent& z_t, const Latent& epsilon, int t, int t_prev,
                        const NoiseSchedule& schedule) {
    if (t <= t_prev) {
        throw ordering_error("ddim_step requires t > t_prev (got t=" + std::to_string(t) +
                             ", t_prev=" + std::to_string(t_prev) + ")");
    }
    return ddim_transfer(z_t, epsilon, schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
}

// One inversion step t -> t_next, the algebraic inverse of ddim_step for a
// fixed epsilon.
inline Latent ddim_inverse_step(const Latent& z_t, const Latent& epsilon, int t, int t_next,
                                const NoiseSchedule& schedule) {
    if (t_next <= t) {
        throw ordering_error("ddim_inverse_step requires t_next > t (got t=" + std::to_string(t) +
                             ", t_next=" + std::to_string(t_next) + ")");
    }
    return ddim_transfer(z_t, epsilon, schedule.alpha_bar(t), schedule.alpha_bar(t_next));
}

inline Latent cfg_epsilon(const Latent& eps_uncond, const Latent& eps_cond, double scale) {
    require_same_shape(eps_uncond, eps_cond, "cfg_epsilon");
    Latent out(eps_uncond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
    }
    return out;
}

} // namespace sketchguide
