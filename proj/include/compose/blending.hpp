#pragma once

#include "compose/control.hpp"

namespace compose {

// One side of a blend: a model plus how to query it. `mask`/`given`, when set,
// hold that model's control features fixed during sampling (the model sees an
// input whose masked entries are sqrt(abar_t) * given, and the shared state is
// re-anchored to them after every step).
struct BlendModelSpec {
    const DenoiserParams* model = nullptr;
    std::optional<int> cond;
    Scalar guidance = 1.0;
    const ControlMask* mask = nullptr;
    const Mat* given = nullptr;

    void validate(int channels) const;
};

// Blended x0 prediction: each model denoises its own view of x_t, then the two
// estimates are combined as a + s * (b - a). s == 0 and s == 1 return the
// single-model prediction bit for bit.
Mat blend_predict(const BlendModelSpec& a, const BlendModelSpec& b, const NoiseSchedule& sched,
                  const Mat& x_t, int t, Scalar s);

struct BlendConfig {
    Scalar s = 0.5;
    int frames = 120;
    uint64_t seed = 0;
    uint32_t sample_index = 0;
};

struct BlendResult {
    Mat frames;  // normalized
    // Pre-anchor deviation of the final estimate from each side's held
    // features; absent when that side has no mask.
    std::optional<Scalar> adherence_a, adherence_b;
};

// Full reverse diffusion with the blended prediction. Without masks this is
// the plain DDPM sampling loop on the same noise streams, so a == b
// reproduces ordinary sampling exactly.
BlendResult blend_sample(const BlendModelSpec& a, const BlendModelSpec& b,
                         const NoiseSchedule& sched, const BlendConfig& cfg);

}  // namespace compose
