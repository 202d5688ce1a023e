// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <unistd.h>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <sketchguide/sketchguide.hpp>

namespace sgtest {

using namespace sketchguide;

class TempDir {
public:
    explicit TempDir(const std::string& tag = "sg") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Black outline of a rectangle ("body") and a circle ("head") on white.
inline Image fixture_sketch(int size = 64) {
    Image img(size, size, 255);
    auto ink = [&](int x, int y) {
        if (x < 0 || y < 0 || x >= size || y >= size) return;
        auto* p = img.at(x, y);
        p[0] = p[1] = p[2] = 0;
    };
    const int s = size / 64 > 0 ? size / 64 : 1;
    for (int y = 28 * s; y < 52 * s; ++y)
        for (int x = 12 * s; x < 44 * s; ++x)
            if (y < 31 * s || y >= 49 * s || x < 15 * s || x >= 41 * s) ink(x, y);
    const double cx = 46.0 * s, cy = 20.0 * s, r = 10.0 * s;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double d = std::hypot(x - cx, y - cy);
            if (d > r - 1.5 * s && d < r + 1.5 * s) ink(x, y);
        }
    return img;
}

// Flat-coloured "photo" with a bright disc.
inline Image fixture_photo(int size = 64, std::uint8_t r = 170, std::uint8_t g = 110, std::uint8_t b = 60) {
    Image img(size, size, 0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            auto* p = img.at(x, y);
            const bool disc = std::hypot(x - size / 2.0, y - size / 2.0) < size / 4.0;
            p[0] = disc ? 250 : r;
            p[1] = disc ? 230 : g;
            p[2] = disc ? 200 : b;
        }
    return img;
}

// Gaussian blob on an h x w grid, unnormalized.
inline Matrix blob(int h, int w, double cy, double cx, double sigma) {
    Matrix m(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dy = (y + 0.5) / h - cy, dx = (x + 0.5) / w - cx;
            m(y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    return m;
}

// Target stack whose maps are the same off-centre blob at every timestep.
template <Denoiser B>
TokenAttentionStack synthetic_target_stack(const B& backbone, const NoiseSchedule& schedule,
                                           const std::vector<std::string>& layers, const std::string& class_word) {
    TokenAttentionStack stack;
    stack.class_word = class_word;
    stack.layers = layers;
    for (int t : trajectory_timesteps(schedule)) {
        TokenAttentionStack::Entry e{t, {}};
        for (const auto& id : layers) {
            for (const auto& info : backbone.layers()) {
                if (info.id == id) e.maps.emplace(id, blob(info.height, info.width, 0.3, 0.7, 0.15));
            }
        }
        stack.entries.push_back(std::move(e));
    }
    return stack;
}

inline ReferenceFeatures synthetic_features(const ToyBackbone& backbone, const PipelineConfig& config) {
    ReferenceFeatures f;
    const NoiseSchedule schedule = make_noise_schedule(config.schedule);
    f.stack = synthetic_target_stack(backbone, schedule, backbone.default_guidance_layers(), "cat");
    f.content_hash = "synthetic";
    return f;
}

// Toy backbone whose noise prediction is a fixed tensor; attention is
// still recorded from the real forward pass.
class ConstantEpsBackbone {
public:
    explicit ConstantEpsBackbone(Latent eps) : eps_(std::move(eps)) {}

    [[nodiscard]] Shape latent_shape() const { return inner_.latent_shape(); }
    [[nodiscard]] const std::vector<LayerInfo>& layers() const { return inner_.layers(); }
    [[nodiscard]] int num_train_steps() const { return inner_.num_train_steps(); }
    [[nodiscard]] TextEmbedding embed_prompt(std::string_view text) const { return inner_.embed_prompt(text); }
    [[nodiscard]] TextEmbedding null_embedding() const { return inner_.null_embedding(); }
    [[nodiscard]] std::vector<std::string> default_guidance_layers() const { return inner_.default_guidance_layers(); }
    DenoiserOutput denoise(const Latent& z, int t, const TextEmbedding& c, const DenoiseOptions& o) {
        DenoiserOutput out = inner_.denoise(z, t, c, o);
        out.epsilon = eps_;
        return out;
    }
    Latent pullback_cross_maps(std::span<const CrossMapCotangent> cot) { return inner_.pullback_cross_maps(cot); }
    [[nodiscard]] Latent encode_image(const Image& img) const { return inner_.encode_image(img); }
    [[nodiscard]] Image decode_latent(const Latent& z) const { return inner_.decode_latent(z); }

private:
    ToyBackbone inner_;
    Latent eps_;
};
static_assert(Denoiser<ConstantEpsBackbone>);

inline Latent random_latent(Shape shape, std::uint64_t seed, double scale = 1.0) {
    Latent z = random_normal_latent(shape, seed);
    for (auto& v : z.values()) v *= scale;
    return z;
}

} // namespace sgtest
