#pragma once

#include <functional>

#include "compose/network.hpp"
#include "compose/synth.hpp"

namespace compose {

struct NoiseSchedule {
    int T = 100;
    Vec alpha;          // alpha_t, index t-1
    Vec alpha_bar;      // cumulative product, index t-1
    Vec beta;           // 1 - alpha_t
    Vec posterior_var;  // beta~_t

    // abar(0) == 1 by convention.
    Scalar abar(int t) const;
    void validate() const;
};

// kind: "cosine" (the only schedule).
NoiseSchedule make_schedule(int T, const std::string& kind = "cosine");

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; t == 0 returns x0 unchanged.
Mat forward_noise(const NoiseSchedule& s, const Mat& x0, int t, const Mat& eps);

// DDPM posterior step from x_t to x_{t-1}; z is ignored at t == 1.
Mat ddpm_step(const NoiseSchedule& s, const Mat& x_t, const Mat& x0_hat, int t, const Mat& z);

// a + s * (b - a), with s == 0 and s == 1 short-circuited so the degenerate
// cases are bit-exact. Classifier-free guidance and model blending share this.
Mat guided_combine(const Mat& a, const Mat& b, Scalar s);

// Classifier-free guidance: null prediction extrapolated toward the
// conditioned one. cond == nullopt ignores the scale entirely.
Mat cfg_predict(const DenoiserParams& p, const Mat& x_t, int t, std::optional<int> cond,
                Scalar s_cfg);

struct SamplerConfig {
    Scalar guidance = 2.5;
    uint64_t seed = 0;
    int batch = 1;
};

struct GeometricLosses {
    Scalar pos = 0, vel = 0, foot = 0;
};
GeometricLosses geometric_losses(const Mat& x0_hat, const Mat& x0, const FeatureLayout& layout);
// Adds the lambda-weighted gradients of the three losses w.r.t. x0_hat into dy.
void geometric_loss_backward(const Mat& x0_hat, const Mat& x0, const FeatureLayout& layout,
                             Scalar lambda_pos, Scalar lambda_vel, Scalar lambda_foot, Mat& dy);

struct TrainConfig {
    int steps = 600;
    int batch = 64;
    Scalar lr = 1e-4;
    Scalar lambda_pos = 1.0, lambda_vel = 1.0, lambda_foot = 1.0;
    Scalar cond_drop = 0.1;
    bool geometric = true;
    bool force_null_cond = false;  // prefix-completion fine-tuning masks the condition entirely
};

struct LossLogRow {
    int step;
    Scalar simple, pos, vel, foot, total;
};

// Called once per training sample with the exact model input, so tests can
// assert the masked-channel identity input[mask] == sqrt(abar_t) * x0[mask].
using TrainHook = std::function<void(int step, const Mat& input, const Mat& x0, int t)>;

// Trains in place. `data` must be normalized, labeled, equal-length motions.
// `eps_zero_mask`, when given, zeroes the forward noise on the masked entries
// (1 = control feature) before building each training input.
std::vector<LossLogRow> train(DenoiserParams& params, const std::vector<Motion>& data,
                              const NoiseSchedule& schedule, const TrainConfig& cfg, uint64_t seed,
                              const Mat* eps_zero_mask = nullptr, const TrainHook* hook = nullptr);

void write_loss_log_csv(const std::vector<LossLogRow>& log, const std::string& path);

// Called after every DDPM step with t_next = t - 1 and the whole batch;
// DoubleTake installs its handshake override here (a per-step barrier).
using StepHook = std::function<void(int t_next, std::vector<Mat>& xs)>;

// Reverse diffusion for a batch of (condition, frame-count) items. Noise is
// addressed by (seed, base_sample_index + i, step, element) and never depends
// on how many model evaluations a step performs.
std::vector<Mat> sample_batch(const DenoiserParams& p, const NoiseSchedule& s,
                              const std::vector<std::optional<int>>& conds,
                              const std::vector<int>& frames, Scalar guidance, uint64_t seed,
                              uint32_t base_sample_index = 0, const StepHook* hook = nullptr);

// Single denormalized motion.
Motion sample(const DenoiserParams& p, const NoiseSchedule& s, std::optional<int> cond, int frames,
              const SamplerConfig& cfg, const NormStats& stats, const FeatureLayout& layout,
              uint32_t sample_index = 0);

}  // namespace compose
