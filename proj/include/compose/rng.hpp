#pragma once

#include <array>
#include <cstdint>

#include "compose/common.hpp"

namespace compose {

// Philox4x32-10 counter-based generator. Every random number in the project
// is addressed by (seed, stream, sample, step, element); nothing is stateful,
// so the noise consumed at a given address is independent of how many models
// or threads touched the sampler in between.
std::array<uint32_t, 4> philox4x32(uint64_t key, const std::array<uint32_t, 4>& ctr);

// Reserved stream ids. Keeping them in one place avoids accidental collisions
// between modules that draw from the same (seed, sample) pair.
enum StreamId : uint32_t {
    kStreamSampleInit = 0,   // x_T draw at the start of reverse diffusion
    kStreamSampleStep = 1,   // posterior noise z_t
    kStreamSecondInit = 2,   // DoubleTake second-take initial partial noising
    kStreamSecondStep = 3,   // DoubleTake second-take posterior noise
    kStreamSecondAnchor = 4, // DoubleTake second-take per-step anchor noising
    kStreamTrainBatch = 5,   // batch index selection
    kStreamTrainT = 6,       // per-sample timestep draw
    kStreamTrainEps = 7,     // per-sample forward noise
    kStreamTrainDrop = 8,    // condition-drop coin
    kStreamInit = 9,         // parameter initialization
    kStreamJitter = 10,      // synthetic data jitter
    kStreamDInit = 11,       // two-person initial-pose x_T
    kStreamDStep = 12,       // two-person initial-pose posterior noise
    kStreamDTrainEps = 13,   // two-person initial-pose training noise
    kStreamControlEps = 14,  // controlled-sampling renoise draws
};

struct NoiseStream {
    uint64_t seed = 0;
    uint32_t stream = 0;
    uint32_t sample = 0;

    // Uniform in (0,1], element-addressed.
    Scalar uniform(uint32_t step, uint64_t element) const;
    // Standard normal, element-addressed (Box-Muller over counter pairs).
    Scalar normal(uint32_t step, uint64_t element) const;
    // Uniform integer in [0, n).
    uint64_t uniform_index(uint32_t step, uint64_t element, uint64_t n) const;

    void fill_normal(uint32_t step, Mat& out) const;
    void fill_normal(uint32_t step, Vec& out) const;
};

}  // namespace compose
