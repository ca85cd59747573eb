#pragma once

#include "compose/diffusion.hpp"

namespace compose {

struct IntervalSpec {
    int condition = 0;          // class id
    int frames = 120;           // includes its handshakes
};

struct DoubleTakeConfig {
    int handshake = 30;         // h, frames shared by adjacent intervals
    int ramp = 10;              // b, soft-mask linear ramp width
    Scalar m_soft = 0.1;
    Scalar m_hard = 0.85;
    int partial_steps = 70;     // T', second-take noising depth
    int context = 30;           // c, flank frames per side of a sandwich
    bool second_take = true;

    void validate(int T) const;
};

// Linear handshake cross-fade: row j gets (1 - j/h) * suffix + (j/h) * prefix.
Mat blend_handshake(const Mat& suffix, const Mat& prefix);

// First take: every interval denoised as its own batch item, handshakes
// overridden after every step. Returns normalized per-interval matrices with
// suffix(i) == prefix(i+1) exactly.
std::vector<Mat> first_take(const DenoiserParams& p, const NoiseSchedule& s,
                            const std::vector<IntervalSpec>& intervals,
                            const DoubleTakeConfig& cfg, const SamplerConfig& sampler);

// Per-frame refinement weights for a sandwich [left flank | handshake | right
// flank]: m_hard on the handshake, m_soft deep in the flanks, linear ramp of
// width `ramp` in between (endpoints exclusive).
Vec make_soft_mask(const DoubleTakeConfig& cfg, int flank_left, int handshake, int flank_right);

// Second take: partially renoise each transition sandwich and denoise it back
// under the soft mask, anchored to freshly-noised first-take content.
std::vector<Mat> second_take(const DenoiserParams& p, const NoiseSchedule& s,
                             const std::vector<Mat>& take1,
                             const DoubleTakeConfig& cfg, const SamplerConfig& sampler);

// Reassemble: interval interiors from the first take, each handshake plus its
// flanks replaced by the refined sandwich. Still normalized feature space.
Mat unfold(const std::vector<Mat>& take1, const std::vector<Mat>& refined,
           const DoubleTakeConfig& cfg);

// Frame index where each handshake starts in the unfolded sequence.
std::vector<int> handshake_starts(const std::vector<IntervalSpec>& intervals, int handshake);

// The whole pipeline; returns a denormalized long motion with the interval
// boundaries recorded in meta.
Motion double_take(const DenoiserParams& p, const NoiseSchedule& s,
                   const std::vector<IntervalSpec>& intervals, const DoubleTakeConfig& cfg,
                   const SamplerConfig& sampler, const NormStats& stats,
                   const FeatureLayout& layout);

}  // namespace compose
