// SPDX-License-Identifier: Apache-2.0
#include <limits>

#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace sketchguide;

namespace {

NoiseSchedule schedule_with(int steps) {
    ScheduleParams p;
    p.num_inference_steps = steps;
    return make_noise_schedule(p);
}

double round_trip_error(int steps) {
    ToyBackbone bb;
    const auto s = schedule_with(steps);
    const Latent z0 = bb.encode_image(sgtest::fixture_sketch());
    const auto traj = invert(z0, "a sketch of a cat", s, bb, 1.0);
    return relative_l2_error(reconstruct(traj, "a sketch of a cat", s, bb, 1.0), z0);
}

} // namespace

TEST(Inversion, TrajectoryCoversVirtualCleanAndEveryTimestep) {
    ToyBackbone bb;
    const auto s = schedule_with(50);
    const Latent z0 = bb.encode_image(sgtest::fixture_sketch());
    const auto traj = invert(z0, "a sketch of a cat", s, bb, 1.0);
    ASSERT_EQ(traj.entries.size(), 51u);
    EXPECT_EQ(traj.entries.front().timestep, kVirtualCleanStep);
    EXPECT_EQ(traj.entries[1].timestep, 0);
    EXPECT_EQ(traj.entries.back().timestep, 980);
    EXPECT_EQ(traj.clean(), z0);
    EXPECT_EQ(trajectory_timesteps(s).size(), 51u);
    EXPECT_NO_THROW(traj.validate());
    EXPECT_EQ(traj.prompt, "a sketch of a cat");
}

TEST(Inversion, ExactWithConstantNoisePrediction) {
    const Latent eps = sgtest::random_latent({4, 8, 8}, 77);
    sgtest::ConstantEpsBackbone bb(eps);
    const auto s = schedule_with(50);
    const Latent z0 = sgtest::random_latent({4, 8, 8}, 78, 0.5);
    const auto traj = invert(z0, "a cat", s, bb, 1.0);
    EXPECT_LT(relative_l2_error(reconstruct(traj, "a cat", s, bb, 1.0), z0), 1e-12);
}

TEST(Inversion, SingleStepRoundTripIsNearExact) {
    EXPECT_LT(round_trip_error(1), 1e-4);
}

TEST(Inversion, RoundTripErrorShrinksWithSteps) {
    const double e10 = round_trip_error(10), e25 = round_trip_error(25), e50 = round_trip_error(50);
    EXPECT_LE(e25, e10);
    EXPECT_LE(e50, e25);
    EXPECT_LT(e50, 0.05);
}

TEST(Inversion, DeterministicAcrossInstances) {
    ToyBackbone a, b;
    const auto s = schedule_with(20);
    const Latent z0 = a.encode_image(sgtest::fixture_sketch());
    const auto ta = invert(z0, "a sketch of a cat", s, a, 1.0);
    const auto tb = invert(z0, "a sketch of a cat", s, b, 1.0);
    ASSERT_EQ(ta.entries.size(), tb.entries.size());
    for (std::size_t i = 0; i < ta.entries.size(); ++i) EXPECT_EQ(ta.entries[i].latent, tb.entries[i].latent);
}

TEST(Inversion, ObserverSeesEveryReconstructionStep) {
    ToyBackbone bb;
    const auto s = schedule_with(10);
    const auto traj = invert(bb.encode_image(sgtest::fixture_sketch()), "a sketch of a cat", s, bb, 1.0);
    std::vector<int> seen;
    static_cast<void>(reconstruct(traj, "a sketch of a cat", s, bb, 1.0,
                                  [&](std::size_t, int t, const Latent&) { seen.push_back(t); }));
    EXPECT_EQ(seen, s.sample_timesteps());
}

TEST(Inversion, NonFiniteLatentIsReported) {
    Latent z({1, 1, 2}, 0.0);
    z[1] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(check_finite(z, 3, "inversion"), numerical_error);
    ToyBackbone bb;
    Latent bad(bb.latent_shape(), 0.0);
    bad[5] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(invert(bad, "a cat", schedule_with(5), bb, 1.0), numerical_error);
}

TEST(Inversion, WrongShapeIsRejected) {
    ToyBackbone bb;
    EXPECT_THROW(invert(Latent({3, 8, 8}), "a cat", schedule_with(5), bb, 1.0), shape_error);
}
