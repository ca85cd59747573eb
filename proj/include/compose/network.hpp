#pragma once

#include <map>
#include <optional>
#include <vector>

#include "compose/common.hpp"
#include "compose/rng.hpp"

namespace compose {

struct DenoiserConfig {
    int latent = 64;
    int heads = 4;
    int layers = 8;
    int ff = 256;
    int channels = 36;
    int max_frames = 256;
    int classes = 6;       // K; condition embedding has K+1 rows, row K = null
    int max_timesteps = 1000;

    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

// All tensors are matrices; biases are 1 x n rows. Linear layers compute
// Y = X * W + b with W stored (in x out).
struct EncoderLayerParams {
    Mat wq, bq, wk, bk, wv, bv, wo, bo;
    Mat ln1_g, ln1_b, ln2_g, ln2_b;
    Mat ff_w1, ff_b1, ff_w2, ff_b2;

    template <class F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".wq", wq); f(prefix + ".bq", bq);
        f(prefix + ".wk", wk); f(prefix + ".bk", bk);
        f(prefix + ".wv", wv); f(prefix + ".bv", bv);
        f(prefix + ".wo", wo); f(prefix + ".bo", bo);
        f(prefix + ".ln1_g", ln1_g); f(prefix + ".ln1_b", ln1_b);
        f(prefix + ".ln2_g", ln2_g); f(prefix + ".ln2_b", ln2_b);
        f(prefix + ".ff_w1", ff_w1); f(prefix + ".ff_b1", ff_b1);
        f(prefix + ".ff_w2", ff_w2); f(prefix + ".ff_b2", ff_b2);
    }
};

struct EncoderLayerTape {
    Mat h_in;
    Vec ln1_mean, ln1_rstd;
    Mat b1;  // ln1 output
    Mat q, k, v;
    std::vector<Mat> p;  // per-head softmax
    Mat attn;            // concatenated head outputs, pre-wo
    Mat h_mid;
    Vec ln2_mean, ln2_rstd;
    Mat b2;  // ln2 output
    Mat z;   // ff pre-activation
    Mat g;   // gelu(z)
};

// Pre-layernorm transformer encoder layer; `heads` must divide the width.
Mat encoder_layer_forward(const EncoderLayerParams& p, int heads, const Mat& x,
                          EncoderLayerTape* tape = nullptr);
// Returns dX; accumulates parameter gradients into `grads` when non-null.
Mat encoder_layer_backward(const EncoderLayerParams& p, int heads, const EncoderLayerTape& tape,
                           const Mat& dy, EncoderLayerParams* grads);

EncoderLayerParams encoder_layer_init(int width, int ff, uint64_t seed, uint32_t tensor_base);
EncoderLayerParams encoder_layer_zeros(int width, int ff);

struct DenoiserParams {
    DenoiserConfig cfg;
    Mat in_w, in_b;                   // channels -> latent
    Mat t_w1, t_b1, t_w2, t_b2;       // timestep MLP over the sinusoidal embedding
    Mat cond_emb;                     // (K+1) x latent
    Mat trans_emb;                    // 2 x latent, row 0 pinned to zero
    std::vector<EncoderLayerParams> layers;
    Mat lnf_g, lnf_b;
    Mat out_w, out_b;                 // latent -> channels
    Mat pos_enc;                      // fixed sinusoidal, (max_frames + 1) x latent

    // Trainable tensors only (pos_enc is fixed). Iteration order is the
    // checkpoint and optimizer slot order; keep it stable.
    template <class F>
    void for_each(F&& f) {
        f("in_w", in_w); f("in_b", in_b);
        f("t_w1", t_w1); f("t_b1", t_b1); f("t_w2", t_w2); f("t_b2", t_b2);
        f("cond_emb", cond_emb); f("trans_emb", trans_emb);
        for (size_t l = 0; l < layers.size(); ++l)
            layers[l].for_each("layer" + std::to_string(l), f);
        f("lnf_g", lnf_g); f("lnf_b", lnf_b);
        f("out_w", out_w); f("out_b", out_b);
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<DenoiserParams*>(this)->for_each(
            [&](const std::string& n, Mat& m) { f(n, const_cast<const Mat&>(m)); });
    }
};

DenoiserParams init_params(const DenoiserConfig& cfg, uint64_t seed);
DenoiserParams zeros_like(const DenoiserParams& p);

// Fixed sinusoidal embedding row (1 x dim) for an integer position.
Mat sinusoidal_embedding(int position, int dim);

struct Activations {
    std::map<int, Mat> by_layer;  // layer index (1-based) -> (F+1) x latent tokens
};
using Corrections = std::map<int, Mat>;

// Full forward pass. Token row 0 is the conditioning token (timestep MLP +
// class embedding + position 0); rows 1..F are projected frames. Corrections
// are added to the named layer's output before the next layer (or the output
// head, for layer == layers) consumes it. Activations, when requested, hold
// the pre-correction layer outputs.
Mat denoise(const DenoiserParams& p, const Mat& x_t, int t, std::optional<int> cond,
            const std::vector<uint8_t>* transition_flags = nullptr,
            const std::vector<int>* taps = nullptr, Activations* acts = nullptr,
            const Corrections* corrections = nullptr);

// Split forward: run layers 1..n, hand out O^(n), resume later with a
// (possibly corrected) O^(n). forward_from(forward_to(x)) == denoise(x).
struct SplitState {
    int tap = 0;
    Mat tokens;  // layer-n output, pre-correction
};
std::pair<SplitState, Mat> forward_to(const DenoiserParams& p, const Mat& x_t, int t,
                                      std::optional<int> cond,
                                      const std::vector<uint8_t>* transition_flags, int n);
Mat forward_from(const DenoiserParams& p, const SplitState& state, const Mat& o_corrected);

struct DenoiserTape {
    Mat x;                       // input frames
    int t = 0;
    int cond_row = 0;
    std::vector<uint8_t> flags;  // per-frame transition flags
    Mat t_sin, t_z, t_g;         // timestep MLP intermediates
    Mat h0;
    std::vector<EncoderLayerTape> layers;
    Mat h_final;                 // final layernorm input (last layer output + correction)
    Vec lnf_mean, lnf_rstd;
    Mat yhat;                    // final layernorm output
};

Mat forward_train(const DenoiserParams& p, const Mat& x_t, int t, std::optional<int> cond,
                  const std::vector<uint8_t>* transition_flags, DenoiserTape& tape,
                  const Corrections* corrections = nullptr);

// Exact reverse-mode gradients of a scalar loss with dLoss/dOutput = dy.
// Accumulates into `grads` (same shape as the params).
void backward(const DenoiserParams& p, const DenoiserTape& tape, const Mat& dy,
              DenoiserParams& grads);

// Gradient of the loss w.r.t. the (corrected) layer-`tap` output; walks only
// the layers above the tap and accumulates no parameter gradients. This is
// what a frozen prior hands to the communication block during training.
Mat backward_to_tap(const DenoiserParams& p, const DenoiserTape& tape, const Mat& dy, int tap);

}  // namespace compose
