#pragma once

#include "compose/diffusion.hpp"

namespace compose {

// Channel-and-frame selector for control features.
struct ControlMask {
    std::vector<int> channels;                      // sorted, unique
    std::optional<std::pair<int, int>> frame_range; // [begin, end), absent = all frames

    void validate(const FeatureLayout& layout) const;
    // Dense F x C indicator (1 = control feature).
    Mat dense(int frames, const FeatureLayout& layout) const;
    bool covers(int frame, int channel) const;
};

struct ControlTask {
    std::string name;   // "trajectory" | "joint" | "prefix"
    int joint = -1;     // for "joint"
    int prefix_frames = 0;  // for "prefix"

    static ControlTask trajectory();
    static ControlTask for_joint(int joint_index);
    static ControlTask prefix(int frames);
    // "trajectory", "joint:left_wrist", "prefix:30"
    static ControlTask parse(const std::string& text);
};

// trajectory: planar root velocities + heading rate, all frames, root height
// excluded. joint(j): that joint's local-position triple, all frames.
// prefix(k): every channel of the first k frames.
ControlMask make_mask(const ControlTask& task, const FeatureLayout& layout);

// Alg.-1 fine-tuning: the base training loop with the forward noise zeroed on
// the masked entries, starting from pretrained params.
std::vector<LossLogRow> finetune_control(DenoiserParams& params, const ControlMask& mask,
                                         const std::vector<Motion>& data,
                                         const NoiseSchedule& schedule, const TrainConfig& cfg,
                                         uint64_t seed, const TrainHook* hook = nullptr);

struct ControlledSampleResult {
    Mat frames;               // normalized
    Scalar adherence_rmse;    // pre-overwrite deviation on the masked entries
};

// Alg.-2 sampling: per step, inject the given features into the x0 estimate,
// renoise with the control-feature noise zeroed (mask_eps = true) or left
// untouched (the hard-inpainting baseline), and predict again.
// `secondary`, when given, is a second feature set injected into the x0
// estimate without its noise being masked; its adherence is reported too.
struct ControlledSampleOptions {
    std::optional<int> cond;
    Scalar guidance = 2.5;
    uint64_t seed = 0;
    uint32_t sample_index = 0;
    bool mask_eps = true;
    bool overwrite_final = true;
    const ControlMask* secondary_mask = nullptr;
    const Mat* secondary_given = nullptr;
    Scalar* secondary_adherence = nullptr;
    // Called with the exact model input at every step, so tests can assert
    // input[mask] == sqrt(abar_t) * given.
    std::function<void(int t, const Mat& input)> input_hook;
};

ControlledSampleResult sample_controlled(const DenoiserParams& p, const NoiseSchedule& s,
                                         const ControlMask& mask, const Mat& given, int frames,
                                         const ControlledSampleOptions& opt);

}  // namespace compose
