#include <doctest.h>

#include "compose/blending.hpp"

using namespace compose;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.latent = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.ff = 16;
    cfg.channels = 36;
    cfg.max_frames = 64;
    cfg.classes = 6;
    return cfg;
}

}  // namespace

TEST_CASE("degenerate blends reproduce single-model sampling bit for bit") {
    DenoiserParams pa = init_params(tiny_config(), 3);
    DenoiserParams pb = init_params(tiny_config(), 4);
    NoiseSchedule s = make_schedule(10);

    BlendModelSpec a{&pa, 1, 2.0};
    BlendModelSpec b{&pb, 2, 1.5};
    BlendConfig cfg;
    cfg.frames = 12;
    cfg.seed = 8;

    cfg.s = 0.0;
    Mat left = blend_sample(a, b, s, cfg).frames;
    cfg.s = 1.0;
    Mat right = blend_sample(a, b, s, cfg).frames;
    Mat ref_a = sample_batch(pa, s, {1}, {12}, 2.0, cfg.seed, cfg.sample_index)[0];
    Mat ref_b = sample_batch(pb, s, {2}, {12}, 1.5, cfg.seed, cfg.sample_index)[0];
    CHECK(left == ref_a);
    CHECK(right == ref_b);

    // identical specs on both sides collapse at every s
    cfg.s = 0.37;
    Mat same = blend_sample(a, a, s, cfg).frames;
    CHECK(same == ref_a);
}

TEST_CASE("blending one model's null and conditioned branches equals guided sampling") {
    DenoiserParams p = init_params(tiny_config(), 3);
    NoiseSchedule s = make_schedule(10);

    Scalar g = 2.5;
    BlendModelSpec null_side{&p, std::nullopt, 1.0};
    BlendModelSpec cond_side{&p, 2, 1.0};
    BlendConfig cfg;
    cfg.frames = 10;
    cfg.seed = 19;
    cfg.s = g;
    Mat blended = blend_sample(null_side, cond_side, s, cfg).frames;
    Mat guided = sample_batch(p, s, {2}, {10}, g, cfg.seed, cfg.sample_index)[0];
    CHECK(blended == guided);
}

TEST_CASE("blend_predict interpolates the two predictions exactly") {
    DenoiserParams pa = init_params(tiny_config(), 3);
    DenoiserParams pb = init_params(tiny_config(), 4);
    NoiseSchedule s = make_schedule(10);

    Mat x(9, 36);
    NoiseStream{3, 95, 0}.fill_normal(0, x);
    BlendModelSpec a{&pa, 0, 1.0};
    BlendModelSpec b{&pb, 5, 1.0};
    Mat ya = blend_predict(a, b, s, x, 4, 0.0);
    Mat yb = blend_predict(a, b, s, x, 4, 1.0);
    CHECK(ya == cfg_predict(pa, x, 4, 0, 1.0));
    CHECK(yb == cfg_predict(pb, x, 4, 5, 1.0));
    Mat mid = blend_predict(a, b, s, x, 4, 0.5);
    CHECK((mid - (ya + 0.5 * (yb - ya))).cwiseAbs().maxCoeff() == 0);
    // affine in s
    Mat y1 = blend_predict(a, b, s, x, 4, 0.25);
    Mat y2 = blend_predict(a, b, s, x, 4, 0.75);
    CHECK(((y1 + y2) - (ya + yb)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("masked sides stay anchored to their held features") {
    DenoiserParams pa = init_params(tiny_config(), 3);
    DenoiserParams pb = init_params(tiny_config(), 4);
    NoiseSchedule s = make_schedule(10);
    FeatureLayout l = FeatureLayout::standard(6, 30);

    const int F = 10;
    ControlMask mask_a = make_mask(ControlTask::trajectory(), l);
    ControlMask mask_b = make_mask(ControlTask::for_joint(3), l);
    Mat given_a(F, l.total_channels), given_b(F, l.total_channels);
    NoiseStream{77, 96, 0}.fill_normal(0, given_a);
    NoiseStream{77, 96, 1}.fill_normal(0, given_b);

    BlendModelSpec a{&pa, 1, 1.5, &mask_a, &given_a};
    BlendModelSpec b{&pb, 2, 1.5, &mask_b, &given_b};
    BlendConfig cfg;
    cfg.frames = F;
    cfg.seed = 23;
    auto r = blend_sample(a, b, s, cfg);
    REQUIRE(r.adherence_a.has_value());
    REQUIRE(r.adherence_b.has_value());
    CHECK(*r.adherence_a >= 0);
    CHECK(*r.adherence_b >= 0);
    // final anchor at noise level 0 injects the held features verbatim
    for (int f = 0; f < F; ++f) {
        for (int c : mask_a.channels) CHECK(r.frames(f, c) == given_a(f, c));
        for (int c : mask_b.channels) CHECK(r.frames(f, c) == given_b(f, c));
    }
    // deterministic
    auto r2 = blend_sample(a, b, s, cfg);
    CHECK(r2.frames == r.frames);
    CHECK(*r2.adherence_a == *r.adherence_a);

    // a mask without its held features is rejected
    BlendModelSpec broken{&pa, 1, 1.0, &mask_a, nullptr};
    CHECK_THROWS_AS(blend_sample(broken, b, s, cfg), ValidationError);
    BlendModelSpec no_model;
    CHECK_THROWS_AS(blend_sample(no_model, b, s, cfg), ValidationError);
}

TEST_CASE("per-step anchoring matches an oracle re-implementation") {
    DenoiserParams pa = init_params(tiny_config(), 3);
    DenoiserParams pb = init_params(tiny_config(), 4);
    NoiseSchedule s = make_schedule(10);
    FeatureLayout l = FeatureLayout::standard(6, 30);

    const int F = 8;
    ControlMask mask_a = make_mask(ControlTask::trajectory(), l);
    Mat given_a(F, l.total_channels);
    NoiseStream{9, 97, 0}.fill_normal(0, given_a);

    BlendModelSpec a{&pa, 1, 2.0, &mask_a, &given_a};
    BlendModelSpec b{&pb, 4, 2.0};
    BlendConfig cfg;
    cfg.frames = F;
    cfg.seed = 29;
    cfg.s = 0.5;
    auto got = blend_sample(a, b, s, cfg);

    Mat da = mask_a.dense(F, l);
    Mat x(F, l.total_channels), z(F, l.total_channels);
    NoiseStream{cfg.seed, kStreamSampleInit, cfg.sample_index}.fill_normal(uint32_t(s.T), x);
    std::optional<Scalar> adh;
    for (int t = s.T; t >= 1; --t) {
        Mat x0_hat = blend_predict(a, b, s, x, t, cfg.s);
        if (t > 1)
            NoiseStream{cfg.seed, kStreamSampleStep, cfg.sample_index}.fill_normal(uint32_t(t), z);
        x = ddpm_step(s, x, x0_hat, t, z);
        if (t == 1) {
            Mat dev = (x - given_a).array() * da.array();
            adh = std::sqrt(dev.squaredNorm() / da.sum());
        }
        Scalar scale = std::sqrt(s.abar(t - 1));
        x = (1.0 - da.array()) * x.array() + da.array() * (scale * given_a.array());
    }
    CHECK(got.frames == x);
    CHECK(*got.adherence_a == *adh);
}
