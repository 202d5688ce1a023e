// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace sketchguide {

struct Shape {
    int channels = 0;
    int height = 0;
    int width = 0;

    [[nodiscard]] std::size_t size() const {
        return static_cast<std::size_t>(channels) * height * width;
    }
    [[nodiscard]] int pixels() const { return height * width; }
    bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
    return "[" + std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" +
           std::to_string(s.width) + "]";
}

// Channel-major latent tensor [C, H, W].
class Latent {
public:
    Latent() = default;
    explicit Latent(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}
    Latent(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.size()) {
            throw shape_error("latent data size " + std::to_string(data_.size()) +
                              " does not match shape " + to_string(shape_));
        }
    }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
    [[nodiscard]] double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

    [[nodiscard]] std::span<double> values() { return data_; }
    [[nodiscard]] std::span<const double> values() const { return data_; }
    [[nodiscard]] const std::vector<double>& data() const { return data_; }

    bool operator==(const Latent&) const = default;

private:
    [[nodiscard]] std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x;
    }

    Shape shape_{};
    std::vector<double> data_;
};

inline void require_same_shape(const Latent& a, const Latent& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw shape_error(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                          to_string(b.shape()));
    }
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double l2_distance(const Latent& a, const Latent& b) {
    require_same_shape(a, b, "l2_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline double relative_l2_error(const Latent& estimate, const Latent& reference) {
    const double denom = l2_norm(reference.values());
    const double num = l2_distance(estimate, reference);
    return denom > 0.0 ? num / denom : num;
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Portable pseudo-random source (splitmix64 + Box-Muller). Draws depend only on
// the seed, never on standard-library distribution internals, so weights and
// noise are identical under any toolchain.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return next(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline Latent random_normal_latent(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    Latent z(shape);
    for (auto& v : z.values()) v = rng.normal();
    return z;
}

} // namespace sketchguide
