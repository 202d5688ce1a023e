// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace sketchguide;

TEST(Attention, NormalizeHandCase) {
    Matrix m(2, 2);
    m << 1, 0, 0, 0;
    const Matrix p = normalize_map(m, 0.01);
    EXPECT_NEAR(p(0, 0), 1.01 / 1.04, 1e-15);
    EXPECT_NEAR(p(0, 1), 0.01 / 1.04, 1e-15);
    EXPECT_NEAR(p(1, 0), 0.01 / 1.04, 1e-15);
    EXPECT_NEAR(p(1, 1), 0.01 / 1.04, 1e-15);
    EXPECT_NEAR(p.sum(), 1.0, 1e-15);
}

TEST(Attention, NormalizeRejectsBadInput) {
    Matrix neg(1, 2);
    neg << 0.5, -0.1;
    EXPECT_THROW(normalize_map(neg), domain_error);
    EXPECT_THROW(normalize_map(Matrix::Zero(2, 2), 0.0), domain_error);
    EXPECT_THROW(normalize_map(Matrix(0, 0)), shape_error);
    const Matrix z = normalize_map(Matrix::Zero(2, 2));
    EXPECT_TRUE((z.array() > 0.0).all());
    EXPECT_NEAR(z(0, 0), 0.25, 1e-15);
}

TEST(Attention, TokenMapsAverageHeadsAndTokens) {
    CrossAttentionRecord rec{"L", 1, 2, {}};
    Matrix h0(2, 4), h1(2, 4);
    h0 << 0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.2, 0.1;
    h1 << 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1;
    rec.head_maps = {h0, h1};
    const LayerMaps maps = extract_token_maps({rec}, TokenRange{1, 3}, {"L"});
    const Matrix& m = maps.at("L");
    ASSERT_EQ(m.rows(), 1);
    ASSERT_EQ(m.cols(), 2);
    EXPECT_NEAR(m(0, 0), (0.2 + 0.3 + 0.25 + 0.25) / 4.0, 1e-15);
    EXPECT_NEAR(m(0, 1), (0.3 + 0.2 + 0.1 + 0.1) / 4.0, 1e-15);
    EXPECT_THROW(extract_token_maps({rec}, TokenRange{3, 5}, {"L"}), lookup_error);
    EXPECT_THROW(extract_token_maps({rec}, TokenRange{1, 2}, {"missing"}), lookup_error);
}

TEST(Attention, ClassTokenLookup) {
    ToyBackbone bb;
    const auto e = bb.embed_prompt("a photo of a cat");
    const TokenRange r = find_class_tokens(e, "cat");
    EXPECT_EQ(r.begin, 5);
    EXPECT_EQ(r.end, 6);
    EXPECT_THROW(find_class_tokens(e, "dog"), lookup_error);
}

TEST(Attention, ProbeTimestepMapsCleanEndToZero) {
    EXPECT_EQ(probe_timestep(kVirtualCleanStep), 0);
    EXPECT_EQ(probe_timestep(0), 0);
    EXPECT_EQ(probe_timestep(980), 980);
}

class TargetStackTest : public ::testing::Test {
protected:
    ToyBackbone bb;
    NoiseSchedule schedule = make_noise_schedule(ScheduleParams{});
    LatentTrajectory traj =
        invert(bb.encode_image(sgtest::fixture_sketch()), "a sketch of a cat", schedule, bb, 1.0);
    std::vector<std::string> layers = bb.default_guidance_layers();
};

TEST_F(TargetStackTest, OneEntryPerTrajectoryLatent) {
    const auto stack = build_target_stack(traj, "a sketch of a cat", "cat", bb, layers);
    EXPECT_NO_THROW(stack.validate());
    ASSERT_EQ(stack.entries.size(), 51u);
    for (const auto& e : stack.entries) {
        ASSERT_EQ(e.maps.size(), layers.size());
        for (const auto& [id, m] : e.maps) EXPECT_TRUE((m.array() >= 0.0).all());
    }
    EXPECT_EQ(stack.at(980).at(ToyBackbone::kCrossFine).rows(), 8);
    EXPECT_EQ(stack.at(980).at(ToyBackbone::kCrossMid).rows(), 4);
    EXPECT_THROW(static_cast<void>(stack.at(981)), lookup_error);
}

TEST_F(TargetStackTest, ReconstructionSourceCoversSameTimesteps) {
    const auto a = build_target_stack(traj, "a sketch of a cat", "cat", bb, layers);
    const auto b = build_target_stack_from_reconstruction(traj, "a sketch of a cat", "cat", schedule, bb, layers, 1.0);
    ASSERT_EQ(a.entries.size(), b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) EXPECT_EQ(a.entries[i].timestep, b.entries[i].timestep);
    // The noisiest latent is shared by both sources.
    EXPECT_EQ(a.at(980), b.at(980));
}

// Class-token maps carry more structure near the clean end than at high
// noise: the peak of the normalized map falls as t grows.
TEST_F(TargetStackTest, MapsFlattenWithNoise) {
    const auto stack = build_target_stack(traj, "a sketch of a cat", "cat", bb, layers);
    for (const auto& id : layers) {
        auto quartile_peak = [&](int from, int to) {
            double acc = 0.0;
            for (int i = from; i < to; ++i) acc += normalize_map(stack.entries[i].maps.at(id)).maxCoeff();
            return acc / (to - from);
        };
        EXPECT_GT(quartile_peak(0, 13), quartile_peak(38, 51)) << id;
    }
}
