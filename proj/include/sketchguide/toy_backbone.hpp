// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "image.hpp"
#include "scheduler.hpp"
#include "tensor.hpp"

namespace sketchguide {

inline constexpr std::uint64_t kToyWeightSeed = 0xC0FFEE;

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Per-word embedding table keyed by a seeded hash of the lowercased word.
// Row 0 of every prompt is a start token; the null prompt is that token alone.
class ToyTextEncoder {
public:
    explicit ToyTextEncoder(int embed_dim, std::uint64_t seed = kToyWeightSeed)
        : dim_(embed_dim), seed_(seed) {}

    [[nodiscard]] int embed_dim() const { return dim_; }

    [[nodiscard]] TextEmbedding embed(std::string_view text) const {
        const auto words = split_words(text);
        if (words.empty()) throw parameter_error("cannot embed an empty prompt");
        TextEmbedding e;
        e.embedding.resize(static_cast<Eigen::Index>(words.size() + 1), dim_);
        append_token(e, "<start>", 0);
        for (std::size_t i = 0; i < words.size(); ++i) {
            const auto w = lowercase(words[i]);
            append_token(e, w, static_cast<int>(i + 1));
            e.token_spans.push_back({w, {static_cast<int>(i + 1), static_cast<int>(i + 2)}});
        }
        return e;
    }

    [[nodiscard]] TextEmbedding null_embedding() const {
        TextEmbedding e;
        e.embedding.resize(1, dim_);
        append_token(e, "<start>", 0);
        return e;
    }

private:
    void append_token(TextEmbedding& e, const std::string& word, int row) const {
        const std::uint64_t h = fnv1a64(word);
        e.tokens.push_back(static_cast<std::uint32_t>(h ^ (h >> 32)));
        Rng rng(h ^ seed_);
        for (int k = 0; k < dim_; ++k) e.embedding(row, k) = rng.normal();
    }

    int dim_;
    std::uint64_t seed_;
};

struct ToyBackboneParams {
    std::uint64_t seed = kToyWeightSeed;
    int channels = 4;
    int height = 8;
    int width = 8;
    int hidden = 16;
    int embed_dim = 16;
    int heads = 2;
    int head_dim = 8;
    // Training noise schedule the model is paired with.
    int num_train_steps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    // Standard deviation of the Gaussian data prior behind the analytic
    // part of the noise prediction.
    double data_std = 1.0;
    // Gain of the attention network's contribution to epsilon.
    double output_gain = 0.03;
};

// Small deterministic U-shaped denoiser with real attention:
//   in-proj + time embedding (8x8) -> cross-attn 8x8 -> 2x2 avg-pool ->
//   self-attn 4x4 -> cross-attn 4x4 -> nearest upsample + skip -> out-proj.
// epsilon = optimal predictor for N(0, data_std^2) data + gain * network.
// The analytic term keeps DDIM close to an exact ODE flow, so inversion
// round-trips. Query gain decays linearly with t, so maps flatten toward the
// noisy end. Gradients of the cross maps w.r.t. the input are hand-derived.
class ToyBackbone {
public:
    static constexpr const char* kCrossFine = "down.cross.8x8";
    static constexpr const char* kSelfMid = "mid.self.4x4";
    static constexpr const char* kCrossMid = "mid.cross.4x4";

    explicit ToyBackbone(ToyBackboneParams params = {})
        : p_(params), encoder_(params.embed_dim, params.seed),
          train_schedule_(make_noise_schedule(params.num_train_steps, params.beta_start,
                                              params.beta_end, 1)) {
        if (p_.height % 2 != 0 || p_.width % 2 != 0) {
            throw parameter_error("toy backbone needs even spatial dims");
        }
        init_weights();
        const int hh = p_.height / 2, hw = p_.width / 2;
        layers_ = {
            {kCrossFine, AttentionKind::cross, p_.height, p_.width, p_.heads, p_.head_dim, false, false},
            {kSelfMid, AttentionKind::self, hh, hw, p_.heads, p_.head_dim, true, false},
            {kCrossMid, AttentionKind::cross, hh, hw, p_.heads, p_.head_dim, true, false},
        };
        const int P = p_.height * p_.width;
        pool_ = Matrix::Zero(P / 4, P);
        for (int y = 0; y < p_.height; ++y)
            for (int x = 0; x < p_.width; ++x) pool_((y / 2) * hw + x / 2, y * p_.width + x) = 0.25;
    }

    [[nodiscard]] const ToyBackboneParams& params() const { return p_; }
    [[nodiscard]] Shape latent_shape() const { return {p_.channels, p_.height, p_.width}; }
    [[nodiscard]] const std::vector<LayerInfo>& layers() const { return layers_; }
    [[nodiscard]] int num_train_steps() const { return p_.num_train_steps; }
    [[nodiscard]] std::vector<std::string> default_guidance_layers() const { return {kCrossFine, kCrossMid}; }

    [[nodiscard]] TextEmbedding embed_prompt(std::string_view text) const { return encoder_.embed(text); }
    [[nodiscard]] TextEmbedding null_embedding() const { return encoder_.null_embedding(); }

    // Toy codec: the image is box-resized to the latent grid; channels 0..2
    // carry RGB and channel 3 luminance, all mapped from [0,255] to [-1,1].
    [[nodiscard]] Latent encode_image(const Image& image) const {
        const Image small = resize_area(image, p_.width, p_.height);
        Latent z(latent_shape());
        for (int y = 0; y < p_.height; ++y) {
            for (int x = 0; x < p_.width; ++x) {
                const auto* px = small.at(x, y);
                double lum = 0.0;
                for (int c = 0; c < 3; ++c) {
                    z.at(c, y, x) = px[c] / 127.5 - 1.0;
                    lum += px[c];
                }
                for (int c = 3; c < p_.channels; ++c) z.at(c, y, x) = lum / (3 * 127.5) - 1.0;
            }
        }
        return z;
    }

    [[nodiscard]] Image decode_latent(const Latent& z) const {
        check_shape(z);
        Image img(p_.width, p_.height);
        for (int y = 0; y < p_.height; ++y) {
            for (int x = 0; x < p_.width; ++x) {
                auto* px = img.at(x, y);
                for (int c = 0; c < 3; ++c) {
                    const double v = (std::clamp(z.at(c, y, x), -1.0, 1.0) + 1.0) * 127.5;
                    px[c] = static_cast<std::uint8_t>(std::lround(v));
                }
            }
        }
        return upscale_nearest(img, 8);
    }

    DenoiserOutput denoise(const Latent& z, int t, const TextEmbedding& cond,
                           const DenoiseOptions& opts = {}) {
        check_shape(z);
        if (t < 0 || t >= p_.num_train_steps) {
            throw parameter_error("timestep " + std::to_string(t) + " outside backbone domain");
        }
        if (cond.embedding.cols() != p_.embed_dim || cond.embedding.rows() == 0) {
            throw shape_error("text embedding has wrong width");
        }
        const int P = p_.height * p_.width;
        const int C = p_.channels;
        const double gain = query_gain(t);

        Tape tape;
        tape.gain = gain;
        Matrix x(P, C);
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < P; ++i) x(i, c) = z[static_cast<std::size_t>(c) * P + i];

        const Eigen::RowVectorXd bias = b_in_ + time_embedding(t) * w_t_;
        tape.h = ((x * w_in_).rowwise() + bias).array().tanh().matrix();

        DenoiserOutput out;
        const bool record = opts.record_attention || opts.track_gradients;

        CrossState fine = cross_forward(fine_, tape.h, cond.embedding, gain);
        const Matrix h1 = tape.h + fine.mixed * fine_.wo;
        const Matrix h2 = pool_ * h1;

        const SelfAttentionRecord* inj = nullptr;
        if (opts.injection) {
            auto it = opts.injection->find(kSelfMid);
            if (it != opts.injection->end()) inj = &it->second;
        }
        SelfState self = self_forward(h2, inj);
        const Matrix h3 = h2 + self.mixed * mid_self_.wo;

        CrossState mid = cross_forward(mid_cross_, h3, cond.embedding, gain);
        const Matrix h4 = h3 + mid.mixed * mid_cross_.wo;
        const Matrix h5 = pool_.transpose() * 4.0 * h4 + h1;
        const Matrix eps = h5 * w_out_;

        const double ab = train_schedule_.alpha_bar(t);
        const double var = p_.data_std * p_.data_std;
        const double prior = std::sqrt(1.0 - ab) / (ab * var + 1.0 - ab);
        out.epsilon = Latent(latent_shape());
        for (int c = 0; c < C; ++c) {
            for (int i = 0; i < P; ++i) {
                const auto k = static_cast<std::size_t>(c) * P + i;
                out.epsilon[k] = prior * z[k] + p_.output_gain * eps(i, c);
            }
        }

        if (record) {
            out.cross_records.push_back({kCrossFine, p_.height, p_.width, fine.maps});
            out.cross_records.push_back({kCrossMid, p_.height / 2, p_.width / 2, mid.maps});
            out.self_records.push_back({kSelfMid, p_.height / 2, p_.width / 2, self.native_keys,
                                        self.native_values});
        }
        if (opts.track_gradients) {
            tape.fine = std::move(fine);
            tape.self = std::move(self);
            tape.mid = std::move(mid);
            tape.h2 = h2;
            tape_ = std::move(tape);
        } else {
            tape_.reset();
        }
        return out;
    }

    // Vector-Jacobian product of the cross maps recorded by the last
    // gradient-tracking denoise() call. Layers without a cotangent count as 0.
    Latent pullback_cross_maps(std::span<const CrossMapCotangent> cotangents) const {
        if (!tape_) throw parameter_error("no gradient tape: call denoise with track_gradients");
        const Tape& tp = *tape_;
        const int P = p_.height * p_.width;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(p_.head_dim));

        const CrossMapCotangent* g_fine = nullptr;
        const CrossMapCotangent* g_mid = nullptr;
        for (const auto& c : cotangents) {
            if (c.layer == kCrossFine) g_fine = &c;
            else if (c.layer == kCrossMid) g_mid = &c;
            else throw lookup_error("no cross-attention layer '" + c.layer + "'");
        }
        check_cotangent(g_fine, tp.fine);
        check_cotangent(g_mid, tp.mid);

        // mid cross-attention: only the queries depend on h3.
        Matrix dh3 = Matrix::Zero(P / 4, p_.hidden);
        if (g_mid) {
            for (int hd = 0; hd < p_.heads; ++hd) {
                const Matrix ds = softmax_backward(tp.mid.maps[hd], g_mid->head_maps[hd]) * inv_sqrt_dk;
                dh3 += tp.gain * (ds * tp.mid.keys[hd]) * head_cols(mid_cross_.wq, hd).transpose();
            }
        }

        // self-attention block with residual: h3 = h2 + concat(A V) Wo.
        Matrix dh2 = dh3;
        const Matrix dmixed = dh3 * mid_self_.wo.transpose();
        for (int hd = 0; hd < p_.heads; ++hd) {
            const Matrix d_av = dmixed.middleCols(hd * p_.head_dim, p_.head_dim);
            const Matrix& a = tp.self.weights[hd];
            const Matrix da = d_av * tp.self.used_values[hd].transpose();
            const Matrix ds = softmax_backward(a, da) * inv_sqrt_dk;
            const Matrix dq = ds * tp.self.used_keys[hd];
            dh2 += dq * head_cols(mid_self_.wq, hd).transpose();
            if (!tp.self.injected) {
                const Matrix dk = ds.transpose() * tp.self.queries[hd];
                const Matrix dv = a.transpose() * d_av;
                dh2 += dk * head_cols(mid_self_.wk, hd).transpose();
                dh2 += dv * head_cols(mid_self_.wv, hd).transpose();
            }
        }

        const Matrix dh1 = pool_.transpose() * dh2;

        // fine cross-attention with residual: h1 = h + concat(M V) Wo.
        Matrix dh = dh1;
        const Matrix dmixed_fine = dh1 * fine_.wo.transpose();
        for (int hd = 0; hd < p_.heads; ++hd) {
            Matrix dm = dmixed_fine.middleCols(hd * p_.head_dim, p_.head_dim) *
                        tp.fine.values[hd].transpose();
            if (g_fine) dm += g_fine->head_maps[hd];
            const Matrix ds = softmax_backward(tp.fine.maps[hd], dm) * inv_sqrt_dk;
            dh += tp.gain * (ds * tp.fine.keys[hd]) * head_cols(fine_.wq, hd).transpose();
        }

        const Matrix dpre = (dh.array() * (1.0 - tp.h.array().square())).matrix();
        const Matrix dx = dpre * w_in_.transpose();
        Latent grad(latent_shape());
        for (int c = 0; c < p_.channels; ++c)
            for (int i = 0; i < P; ++i) grad[static_cast<std::size_t>(c) * P + i] = dx(i, c);
        return grad;
    }

    [[nodiscard]] double query_gain(int t) const {
        return 2.0 - 1.5 * static_cast<double>(t) / p_.num_train_steps;
    }

private:
    struct CrossWeights {
        Matrix wq, wk, wv, wo;
    };

    struct CrossState {
        std::vector<Matrix> maps, keys, values;
        Matrix mixed;
    };

    struct SelfState {
        std::vector<Matrix> queries, weights, native_keys, native_values;
        std::vector<Matrix> used_keys, used_values;
        Matrix mixed;
        bool injected = false;
    };

    struct Tape {
        double gain = 1.0;
        Matrix h, h2;
        CrossState fine, mid;
        SelfState self;
    };

    void check_shape(const Latent& z) const {
        if (z.shape() != latent_shape()) {
            throw shape_error("latent shape " + to_string(z.shape()) + " does not match backbone " +
                              to_string(latent_shape()));
        }
    }

    static void check_cotangent(const CrossMapCotangent* g, const CrossState& s) {
        if (!g) return;
        if (g->head_maps.size() != s.maps.size()) throw shape_error("cotangent head count mismatch");
        for (std::size_t i = 0; i < s.maps.size(); ++i) {
            if (g->head_maps[i].rows() != s.maps[i].rows() || g->head_maps[i].cols() != s.maps[i].cols()) {
                throw shape_error("cotangent shape mismatch for layer " + g->layer);
            }
        }
    }

    [[nodiscard]] Matrix head_cols(const Matrix& w, int head) const {
        return w.middleCols(head * p_.head_dim, p_.head_dim);
    }

    static Matrix softmax_rows(const Matrix& s) {
        Matrix out(s.rows(), s.cols());
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            const double mx = s.row(r).maxCoeff();
            out.row(r) = (s.row(r).array() - mx).exp().matrix();
            out.row(r) /= out.row(r).sum();
        }
        return out;
    }

    // Given M = softmax(S) row-wise and G = dL/dM, returns dL/dS.
    static Matrix softmax_backward(const Matrix& m, const Matrix& g) {
        const Eigen::VectorXd dot = (m.array() * g.array()).rowwise().sum();
        return (m.array() * (g.colwise() - dot).array()).matrix();
    }

    CrossState cross_forward(const CrossWeights& w, const Matrix& h, const Matrix& text, double gain) const {
        CrossState s;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(p_.head_dim));
        s.mixed.resize(h.rows(), p_.heads * p_.head_dim);
        for (int hd = 0; hd < p_.heads; ++hd) {
            const Matrix q = gain * (h * head_cols(w.wq, hd));
            s.keys.push_back(text * head_cols(w.wk, hd));
            s.values.push_back(text * head_cols(w.wv, hd));
            s.maps.push_back(softmax_rows(q * s.keys.back().transpose() * inv_sqrt_dk));
            s.mixed.middleCols(hd * p_.head_dim, p_.head_dim) = s.maps.back() * s.values.back();
        }
        return s;
    }

    SelfState self_forward(const Matrix& h, const SelfAttentionRecord* inj) const {
        SelfState s;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(p_.head_dim));
        if (inj) {
            if (inj->keys.size() != static_cast<std::size_t>(p_.heads) ||
                inj->values.size() != static_cast<std::size_t>(p_.heads)) {
                throw shape_error("injected self-attention head count mismatch");
            }
            for (int hd = 0; hd < p_.heads; ++hd) {
                if (inj->keys[hd].cols() != p_.head_dim || inj->values[hd].cols() != p_.head_dim ||
                    inj->keys[hd].rows() != inj->values[hd].rows()) {
                    throw shape_error("injected self-attention key/value shape mismatch");
                }
            }
            s.injected = true;
        }
        s.mixed.resize(h.rows(), p_.heads * p_.head_dim);
        for (int hd = 0; hd < p_.heads; ++hd) {
            s.queries.push_back(h * head_cols(mid_self_.wq, hd));
            s.native_keys.push_back(h * head_cols(mid_self_.wk, hd));
            s.native_values.push_back(h * head_cols(mid_self_.wv, hd));
            s.used_keys.push_back(inj ? inj->keys[hd] : s.native_keys.back());
            s.used_values.push_back(inj ? inj->values[hd] : s.native_values.back());
            s.weights.push_back(softmax_rows(s.queries.back() * s.used_keys.back().transpose() * inv_sqrt_dk));
            s.mixed.middleCols(hd * p_.head_dim, p_.head_dim) = s.weights.back() * s.used_values.back();
        }
        return s;
    }

    [[nodiscard]] Eigen::RowVectorXd time_embedding(int t) const {
        const int half = p_.hidden / 2;
        Eigen::RowVectorXd e(p_.hidden);
        for (int k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(10000.0) * k / half);
            e(k) = std::sin(t * freq);
            e(half + k) = std::cos(t * freq);
        }
        return e;
    }

    void init_weights() {
        Rng rng(p_.seed);
        auto dense = [&](int rows, int cols, double gain) {
            Matrix m(rows, cols);
            const double a = gain * std::sqrt(3.0 / rows);
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-a, a);
            return m;
        };
        const int inner = p_.heads * p_.head_dim;
        w_in_ = dense(p_.channels, p_.hidden, 1.5);
        b_in_ = dense(1, p_.hidden, 0.1);
        w_t_ = dense(p_.hidden, p_.hidden, 0.3);
        auto cross = [&] {
            return CrossWeights{dense(p_.hidden, inner, 1.0), dense(p_.embed_dim, inner, 1.0),
                                dense(p_.embed_dim, inner, 1.0), dense(inner, p_.hidden, 0.3)};
        };
        fine_ = cross();
        mid_self_ = CrossWeights{dense(p_.hidden, inner, 1.0), dense(p_.hidden, inner, 1.0),
                                 dense(p_.hidden, inner, 1.0), dense(inner, p_.hidden, 0.3)};
        mid_cross_ = cross();
        w_out_ = dense(p_.hidden, p_.channels, 1.0);
    }

    ToyBackboneParams p_;
    ToyTextEncoder encoder_;
    NoiseSchedule train_schedule_;
    std::vector<LayerInfo> layers_;
    Matrix pool_;
    Matrix w_in_, w_t_, w_out_;
    Eigen::RowVectorXd b_in_;
    CrossWeights fine_, mid_self_, mid_cross_;
    std::optional<Tape> tape_;
};

static_assert(Denoiser<ToyBackbone>);

} // namespace sketchguide
