#pragma once

#include "compose/checkpoint.hpp"
#include "compose/control.hpp"
#include "compose/diffusion.hpp"

namespace compose {

enum class CommTask { kLabelToMotion, kPrefixCompletion };

struct CommConfig {
    int tap = 8;          // prior layer whose output is exchanged, 1-based
    int comm_layers = 1;
    int latent = 64;      // matches the prior
    int heads = 4;
    CommTask task = CommTask::kLabelToMotion;
    int prefix_frames = 30;  // used when task == kPrefixCompletion

    void validate(const DenoiserConfig& prior) const;
};

// The communication block: one encoder layer over the concatenation of both
// actors' tap activations (offset by self/other role embeddings) and one
// initial-pose token. The correction projection and the D head start at zero,
// so an untrained block is an exact no-op on the priors.
struct CommParams {
    CommConfig cfg;
    Mat role_emb;            // 2 x d: row 0 = self, row 1 = other
    Mat d_in_w, d_in_b;      // 3 -> d initial-pose token embedding
    std::vector<EncoderLayerParams> layers;
    Mat out_w, out_b;        // d -> d correction head, zero-initialized
    Mat d_out_w, d_out_b;    // d -> 3 initial-pose head, zero-initialized

    template <class F>
    void for_each(F&& f) {
        f("role_emb", role_emb);
        f("d_in_w", d_in_w); f("d_in_b", d_in_b);
        for (size_t l = 0; l < layers.size(); ++l)
            layers[l].for_each("comm" + std::to_string(l), f);
        f("out_w", out_w); f("out_b", out_b);
        f("d_out_w", d_out_w); f("d_out_b", d_out_b);
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<CommParams*>(this)->for_each(
            [&](const std::string& n, Mat& m) { f(n, const_cast<const Mat&>(m)); });
    }
};

CommParams init_comm(const CommConfig& cfg, uint64_t seed);
CommParams comm_zeros_like(const CommParams& c);

void save_comm(const CommParams& c, const std::string& path);
CommParams load_comm(const std::string& path);

struct CommTape {
    Mat seq_in;
    std::vector<EncoderLayerTape> layers;
    Mat seq_out;
    Mat d_token_in;  // the noised pose that fed the D token, 1 x 3
};

struct CommOutput {
    Mat delta_o;  // same shape as O_self
    Mat d_hat;    // 1 x 3
};

// One directed call; swap (o_self, o_other) and pass the other actor's pose to
// get the other actor's correction.
CommOutput comm_forward(const CommParams& c, const Mat& o_self, const Mat& o_other,
                        const Mat& d_self_t, int t, CommTape* tape = nullptr);
// Accumulates comm-parameter gradients; the priors stay frozen, so gradients
// w.r.t. the tap activations are not produced.
void comm_backward(const CommParams& c, const CommTape& tape, const Mat& d_delta_o,
                   const Mat& d_d_hat, CommParams& grads);

struct TwoActorState {
    Mat x_a, x_b;        // normalized noised motions, same shape
    Mat d_a, d_b;        // 1 x 3 noised initial poses, normalized
    int t = 0;
    std::optional<int> cond_a, cond_b;
    Scalar guidance = 1.0;
};

struct TwoActorPrediction {
    Mat x0_a, x0_b;
    Mat d0_a, d0_b;  // 1 x 3
};

// Both priors run to the tap, exchange corrections through the comm block,
// and resume. Classifier-free guidance runs the whole exchange twice.
TwoActorPrediction two_person_denoise(const DenoiserParams& prior_a, const DenoiserParams& prior_b,
                                      const CommParams& comm, const TwoActorState& state);

struct CommLossRow {
    int step;
    Scalar simple, d, total;
};

std::vector<CommLossRow> train_commdm(const DenoiserParams& prior_a, const DenoiserParams& prior_b,
                                      CommParams& comm, const PairDataset& data,
                                      const NoiseSchedule& schedule, const TrainConfig& cfg,
                                      uint64_t seed);

void write_comm_loss_csv(const std::vector<CommLossRow>& log, const std::string& path);

struct TwoPersonSampleConfig {
    int frames = 120;
    Scalar guidance = 1.0;
    uint64_t seed = 0;
    uint32_t base_sample_index = 0;  // actors use base + 0 and base + 1
    std::optional<int> cond_a, cond_b;
    // Prefix completion: normalized prefix frames anchored per step and
    // overwritten at the end; forces the null condition.
    const Mat* prefix_a = nullptr;
    const Mat* prefix_b = nullptr;
};

struct TwoPersonSample {
    Motion a, b;              // denormalized
    PlanarPose pose_a, pose_b;  // denormalized initial placements
};

TwoPersonSample sample_two_person(const DenoiserParams& prior_a, const DenoiserParams& prior_b,
                                  const CommParams& comm, const NoiseSchedule& schedule,
                                  const PairDataset& data_stats, const TwoPersonSampleConfig& cfg);

}  // namespace compose
