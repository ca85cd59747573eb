#include "compose/network.hpp"

#include <cmath>

namespace compose {

namespace {

constexpr Scalar kLnEps = 1e-5;

inline Scalar gelu(Scalar x) { return Scalar(0.5) * x * (1 + std::erf(x * M_SQRT1_2)); }
inline Scalar gelu_grad(Scalar x) {
    Scalar cdf = Scalar(0.5) * (1 + std::erf(x * M_SQRT1_2));
    Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(2 * M_PI);
    return cdf + x * pdf;
}

Mat gelu_mat(const Mat& x) { return x.unaryExpr([](Scalar v) { return gelu(v); }); }

void ln_forward(const Mat& x, const Mat& g, const Mat& b, Vec& mean, Vec& rstd, Mat& out) {
    const Eigen::Index n = x.rows(), d = x.cols();
    mean.resize(n);
    rstd.resize(n);
    out.resize(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        Scalar mu = x.row(r).mean();
        Scalar var = (x.row(r).array() - mu).square().mean();
        Scalar rs = Scalar(1) / std::sqrt(var + kLnEps);
        mean(r) = mu;
        rstd(r) = rs;
        out.row(r) = (((x.row(r).array() - mu) * rs) * g.row(0).array() + b.row(0).array()).matrix();
    }
}

// dy -> dx; accumulates dg/db when non-null. x is the layer input.
Mat ln_backward(const Mat& x, const Vec& mean, const Vec& rstd, const Mat& g, const Mat& dy,
                Mat* dg, Mat* db) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat dx(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        auto xhat = ((x.row(r).array() - mean(r)) * rstd(r)).eval();
        auto dxhat = (dy.row(r).array() * g.row(0).array()).eval();
        if (dg) dg->row(0).array() += dy.row(r).array() * xhat;
        if (db) db->row(0).array() += dy.row(r).array();
        Scalar m1 = dxhat.mean();
        Scalar m2 = (dxhat * xhat).mean();
        dx.row(r) = (rstd(r) * (dxhat - m1 - xhat * m2)).matrix();
    }
    return dx;
}

enum class TensorKind { Weight, Bias, Gamma, Embedding };

TensorKind classify(const std::string& name) {
    if (name.find("emb") != std::string::npos) return TensorKind::Embedding;
    if (name.find("_g") != std::string::npos && name.find("ln") != std::string::npos)
        return TensorKind::Gamma;
    if (name.find("_w") != std::string::npos || name.find(".w") != std::string::npos)
        return TensorKind::Weight;
    return TensorKind::Bias;
}

void init_tensor(const std::string& name, Mat& m, uint64_t seed, uint32_t index) {
    NoiseStream s{seed, kStreamInit, index};
    switch (classify(name)) {
        case TensorKind::Weight: {
            Scalar bound = std::sqrt(Scalar(6) / Scalar(m.rows() + m.cols()));
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c)
                    m(r, c) = bound * (2 * s.uniform(0, uint64_t(r) * m.cols() + c) - 1);
            break;
        }
        case TensorKind::Embedding:
            s.fill_normal(0, m);
            m *= Scalar(0.02);
            break;
        case TensorKind::Gamma:
            m.setOnes();
            break;
        case TensorKind::Bias:
            m.setZero();
            break;
    }
}

}  // namespace

void DenoiserConfig::validate() const {
    if (latent <= 0 || heads <= 0 || layers < 1 || ff <= 0 || channels <= 0 ||
        max_frames < 1 || classes < 1 || max_timesteps < 1)
        throw ValidationError("DenoiserConfig: non-positive field");
    if (latent % heads != 0) throw ValidationError("DenoiserConfig: latent must be divisible by heads");
}

Mat encoder_layer_forward(const EncoderLayerParams& p, int heads, const Mat& x,
                          EncoderLayerTape* tape) {
    const Eigen::Index n = x.rows(), d = x.cols();
    const Eigen::Index dh = d / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

    Vec ln1_mean, ln1_rstd;
    Mat b1;
    ln_forward(x, p.ln1_g, p.ln1_b, ln1_mean, ln1_rstd, b1);

    Mat q = (b1 * p.wq).rowwise() + p.bq.row(0);
    Mat k = (b1 * p.wk).rowwise() + p.bk.row(0);
    Mat v = (b1 * p.wv).rowwise() + p.bv.row(0);

    Mat attn(n, d);
    std::vector<Mat> ps(heads);
    for (int h = 0; h < heads; ++h) {
        auto qh = q.middleCols(h * dh, dh);
        auto kh = k.middleCols(h * dh, dh);
        auto vh = v.middleCols(h * dh, dh);
        Mat scores = (qh * kh.transpose()) * scale;
        for (Eigen::Index r = 0; r < n; ++r) {
            auto row = scores.row(r).array();
            Scalar mx = row.maxCoeff();
            auto e = (row - mx).exp().eval();
            scores.row(r) = (e / e.sum()).matrix();
        }
        attn.middleCols(h * dh, dh) = scores * vh;
        ps[h] = std::move(scores);
    }
    Mat h_mid = x + ((attn * p.wo).rowwise() + p.bo.row(0));

    Vec ln2_mean, ln2_rstd;
    Mat b2;
    ln_forward(h_mid, p.ln2_g, p.ln2_b, ln2_mean, ln2_rstd, b2);
    Mat z = (b2 * p.ff_w1).rowwise() + p.ff_b1.row(0);
    Mat g = gelu_mat(z);
    Mat out = h_mid + ((g * p.ff_w2).rowwise() + p.ff_b2.row(0));

    if (tape) {
        tape->h_in = x;
        tape->ln1_mean = std::move(ln1_mean);
        tape->ln1_rstd = std::move(ln1_rstd);
        tape->b1 = std::move(b1);
        tape->q = std::move(q);
        tape->k = std::move(k);
        tape->v = std::move(v);
        tape->p = std::move(ps);
        tape->attn = std::move(attn);
        tape->h_mid = std::move(h_mid);
        tape->ln2_mean = std::move(ln2_mean);
        tape->ln2_rstd = std::move(ln2_rstd);
        tape->b2 = std::move(b2);
        tape->z = std::move(z);
        tape->g = std::move(g);
    }
    return out;
}

Mat encoder_layer_backward(const EncoderLayerParams& p, int heads, const EncoderLayerTape& t,
                           const Mat& dy, EncoderLayerParams* grads) {
    const Eigen::Index n = t.h_in.rows(), d = t.h_in.cols();
    const Eigen::Index dh = d / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

    // feed-forward branch
    Mat dh_mid = dy;
    Mat dg_act = dy * p.ff_w2.transpose();
    if (grads) {
        grads->ff_w2 += t.g.transpose() * dy;
        grads->ff_b2.row(0) += dy.colwise().sum();
    }
    Mat dz = dg_act.array() * t.z.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
    Mat db2 = dz * p.ff_w1.transpose();
    if (grads) {
        grads->ff_w1 += t.b2.transpose() * dz;
        grads->ff_b1.row(0) += dz.colwise().sum();
    }
    dh_mid += ln_backward(t.h_mid, t.ln2_mean, t.ln2_rstd, p.ln2_g, db2,
                          grads ? &grads->ln2_g : nullptr, grads ? &grads->ln2_b : nullptr);

    // attention branch
    Mat dx = dh_mid;
    Mat dattn = dh_mid * p.wo.transpose();
    if (grads) {
        grads->wo += t.attn.transpose() * dh_mid;
        grads->bo.row(0) += dh_mid.colwise().sum();
    }
    Mat dq(n, d), dk(n, d), dv(n, d);
    for (int h = 0; h < heads; ++h) {
        auto doh = dattn.middleCols(h * dh, dh);
        const Mat& ph = t.p[h];
        auto vh = t.v.middleCols(h * dh, dh);
        Mat dp = doh * vh.transpose();
        dv.middleCols(h * dh, dh) = ph.transpose() * doh;
        Mat ds(n, n);
        for (Eigen::Index r = 0; r < n; ++r) {
            Scalar dot = dp.row(r).dot(ph.row(r));
            ds.row(r) = (ph.row(r).array() * (dp.row(r).array() - dot)).matrix();
        }
        dq.middleCols(h * dh, dh) = (ds * t.k.middleCols(h * dh, dh)) * scale;
        dk.middleCols(h * dh, dh) = (ds.transpose() * t.q.middleCols(h * dh, dh)) * scale;
    }
    Mat db1 = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
    if (grads) {
        grads->wq += t.b1.transpose() * dq;
        grads->bq.row(0) += dq.colwise().sum();
        grads->wk += t.b1.transpose() * dk;
        grads->bk.row(0) += dk.colwise().sum();
        grads->wv += t.b1.transpose() * dv;
        grads->bv.row(0) += dv.colwise().sum();
    }
    dx += ln_backward(t.h_in, t.ln1_mean, t.ln1_rstd, p.ln1_g, db1,
                      grads ? &grads->ln1_g : nullptr, grads ? &grads->ln1_b : nullptr);
    return dx;
}

EncoderLayerParams encoder_layer_zeros(int width, int ff) {
    EncoderLayerParams p;
    p.wq = p.wk = p.wv = p.wo = Mat::Zero(width, width);
    p.bq = p.bk = p.bv = p.bo = Mat::Zero(1, width);
    p.ln1_g = p.ln1_b = p.ln2_g = p.ln2_b = Mat::Zero(1, width);
    p.ff_w1 = Mat::Zero(width, ff);
    p.ff_b1 = Mat::Zero(1, ff);
    p.ff_w2 = Mat::Zero(ff, width);
    p.ff_b2 = Mat::Zero(1, width);
    return p;
}

EncoderLayerParams encoder_layer_init(int width, int ff, uint64_t seed, uint32_t tensor_base) {
    EncoderLayerParams p = encoder_layer_zeros(width, ff);
    uint32_t idx = tensor_base;
    p.for_each("layer", [&](const std::string& name, Mat& m) { init_tensor(name, m, seed, idx++); });
    return p;
}

Mat sinusoidal_embedding(int position, int dim) {
    Mat out(1, dim);
    for (int i = 0; i < dim; i += 2) {
        Scalar freq = std::pow(Scalar(10000), -Scalar(i) / Scalar(dim));
        out(0, i) = std::sin(position * freq);
        if (i + 1 < dim) out(0, i + 1) = std::cos(position * freq);
    }
    return out;
}

DenoiserParams zeros_like(const DenoiserParams& src) {
    DenoiserParams p;
    p.cfg = src.cfg;
    const int d = src.cfg.latent;
    p.in_w = Mat::Zero(src.cfg.channels, d);
    p.in_b = Mat::Zero(1, d);
    p.t_w1 = Mat::Zero(d, d);
    p.t_b1 = Mat::Zero(1, d);
    p.t_w2 = Mat::Zero(d, d);
    p.t_b2 = Mat::Zero(1, d);
    p.cond_emb = Mat::Zero(src.cfg.classes + 1, d);
    p.trans_emb = Mat::Zero(2, d);
    for (int l = 0; l < src.cfg.layers; ++l) p.layers.push_back(encoder_layer_zeros(d, src.cfg.ff));
    p.lnf_g = Mat::Zero(1, d);
    p.lnf_b = Mat::Zero(1, d);
    p.out_w = Mat::Zero(d, src.cfg.channels);
    p.out_b = Mat::Zero(1, src.cfg.channels);
    p.pos_enc = Mat::Zero(src.cfg.max_frames + 1, d);
    return p;
}

DenoiserParams init_params(const DenoiserConfig& cfg, uint64_t seed) {
    cfg.validate();
    DenoiserParams shape;
    shape.cfg = cfg;
    DenoiserParams p = zeros_like(shape);
    uint32_t idx = 0;
    p.for_each([&](const std::string& name, Mat& m) { init_tensor(name, m, seed, idx++); });
    p.trans_emb.row(0).setZero();  // "no transition" must be a strict no-op
    for (int pos = 0; pos <= cfg.max_frames; ++pos)
        p.pos_enc.row(pos) = sinusoidal_embedding(pos, cfg.latent);
    return p;
}

namespace {

// Shared forward core; tape and tap outputs are optional.
Mat run_forward(const DenoiserParams& p, const Mat& x_t, int t, std::optional<int> cond,
                const std::vector<uint8_t>* transition_flags, const Corrections* corrections,
                DenoiserTape* tape, const std::vector<int>* taps, Activations* acts,
                int stop_after_layer, Mat* tokens_out) {
    const auto& cfg = p.cfg;
    const int F = int(x_t.rows());
    if (x_t.cols() != cfg.channels)
        throw ValidationError("denoise: input has " + std::to_string(x_t.cols()) +
                              " channels, expected " + std::to_string(cfg.channels));
    if (F < 1 || F > cfg.max_frames)
        throw ValidationError("denoise: frame count " + std::to_string(F) + " out of range");
    if (t < 0 || t >= cfg.max_timesteps)
        throw ValidationError("denoise: timestep " + std::to_string(t) + " out of range");
    int cond_row = cond ? *cond : cfg.classes;
    if (cond_row < 0 || cond_row > cfg.classes)
        throw ValidationError("denoise: condition " + std::to_string(cond_row) + " out of range");
    if (transition_flags && int(transition_flags->size()) != F)
        throw ValidationError("denoise: transition flag count mismatch");
    if (corrections)
        for (const auto& [layer, c] : *corrections) {
            if (layer < 1 || layer > cfg.layers)
                throw ValidationError("denoise: correction layer " + std::to_string(layer) + " out of range");
            if (c.rows() != F + 1 || c.cols() != cfg.latent)
                throw ValidationError("denoise: correction shape mismatch at layer " + std::to_string(layer));
        }

    Mat t_sin = sinusoidal_embedding(t, cfg.latent);
    Mat t_z = t_sin * p.t_w1 + p.t_b1;
    Mat t_g = gelu_mat(t_z);
    Mat h(F + 1, cfg.latent);
    h.row(0) = t_g * p.t_w2 + p.t_b2 + p.cond_emb.row(cond_row) + p.pos_enc.row(0);
    Mat proj = (x_t * p.in_w).rowwise() + p.in_b.row(0);
    for (int f = 0; f < F; ++f) {
        int flag = transition_flags && (*transition_flags)[f] ? 1 : 0;
        h.row(f + 1) = proj.row(f) + p.pos_enc.row(f + 1) + p.trans_emb.row(flag);
    }

    if (tape) {
        tape->x = x_t;
        tape->t = t;
        tape->cond_row = cond_row;
        tape->flags = transition_flags ? *transition_flags : std::vector<uint8_t>(F, 0);
        tape->t_sin = t_sin;
        tape->t_z = std::move(t_z);
        tape->t_g = std::move(t_g);
        tape->h0 = h;
        tape->layers.resize(cfg.layers);
    }

    for (int l = 1; l <= cfg.layers; ++l) {
        h = encoder_layer_forward(p.layers[l - 1], cfg.heads, h, tape ? &tape->layers[l - 1] : nullptr);
        if (acts && taps)
            for (int want : *taps)
                if (want == l) acts->by_layer[l] = h;
        if (corrections) {
            auto it = corrections->find(l);
            if (it != corrections->end()) h += it->second;
        }
        if (l == stop_after_layer) {
            *tokens_out = h;
            return {};
        }
    }

    Vec lnf_mean, lnf_rstd;
    Mat yhat;
    ln_forward(h, p.lnf_g, p.lnf_b, lnf_mean, lnf_rstd, yhat);
    Mat out = (yhat.bottomRows(F) * p.out_w).rowwise() + p.out_b.row(0);
    if (tape) {
        tape->h_final = std::move(h);
        tape->lnf_mean = std::move(lnf_mean);
        tape->lnf_rstd = std::move(lnf_rstd);
        tape->yhat = std::move(yhat);
    }
    return out;
}

// Resume after layer `tap` with corrected tokens.
Mat resume_forward(const DenoiserParams& p, int tap, const Mat& tokens) {
    const auto& cfg = p.cfg;
    Mat h = tokens;
    for (int l = tap + 1; l <= cfg.layers; ++l)
        h = encoder_layer_forward(p.layers[l - 1], cfg.heads, h, nullptr);
    Vec m, r;
    Mat yhat;
    ln_forward(h, p.lnf_g, p.lnf_b, m, r, yhat);
    return (yhat.bottomRows(h.rows() - 1) * p.out_w).rowwise() + p.out_b.row(0);
}

}  // namespace

Mat denoise(const DenoiserParams& p, const Mat& x_t, int t, std::optional<int> cond,
            const std::vector<uint8_t>* transition_flags, const std::vector<int>* taps,
            Activations* acts, const Corrections* corrections) {
    if (taps)
        for (int l : *taps)
            if (l < 1 || l > p.cfg.layers)
                throw ValidationError("denoise: tap layer " + std::to_string(l) + " out of range");
    return run_forward(p, x_t, t, cond, transition_flags, corrections, nullptr, taps, acts, 0, nullptr);
}

std::pair<SplitState, Mat> forward_to(const DenoiserParams& p, const Mat& x_t, int t,
                                      std::optional<int> cond,
                                      const std::vector<uint8_t>* transition_flags, int n) {
    if (n < 1 || n > p.cfg.layers)
        throw ValidationError("forward_to: tap layer " + std::to_string(n) + " out of range");
    SplitState st;
    st.tap = n;
    run_forward(p, x_t, t, cond, transition_flags, nullptr, nullptr, nullptr, nullptr, n, &st.tokens);
    return {st, st.tokens};
}

Mat forward_from(const DenoiserParams& p, const SplitState& state, const Mat& o_corrected) {
    if (o_corrected.rows() != state.tokens.rows() || o_corrected.cols() != state.tokens.cols())
        throw ValidationError("forward_from: corrected activation shape mismatch");
    return resume_forward(p, state.tap, o_corrected);
}

Mat forward_train(const DenoiserParams& p, const Mat& x_t, int t, std::optional<int> cond,
                  const std::vector<uint8_t>* transition_flags, DenoiserTape& tape,
                  const Corrections* corrections) {
    return run_forward(p, x_t, t, cond, transition_flags, corrections, &tape, nullptr, nullptr, 0, nullptr);
}

namespace {

// Backward through the output head and final layernorm.
Mat head_backward(const DenoiserParams& p, const DenoiserTape& tape, const Mat& dy,
                  DenoiserParams* grads) {
    const int F = int(tape.x.rows());
    Mat dyhat = Mat::Zero(F + 1, p.cfg.latent);
    dyhat.bottomRows(F) = dy * p.out_w.transpose();
    if (grads) {
        grads->out_w += tape.yhat.bottomRows(F).transpose() * dy;
        grads->out_b.row(0) += dy.colwise().sum();
    }
    return ln_backward(tape.h_final, tape.lnf_mean, tape.lnf_rstd, p.lnf_g, dyhat,
                       grads ? &grads->lnf_g : nullptr, grads ? &grads->lnf_b : nullptr);
}

}  // namespace

void backward(const DenoiserParams& p, const DenoiserTape& tape, const Mat& dy,
              DenoiserParams& grads) {
    const auto& cfg = p.cfg;
    const int F = int(tape.x.rows());
    Mat dh = head_backward(p, tape, dy, &grads);
    for (int l = cfg.layers; l >= 1; --l)
        dh = encoder_layer_backward(p.layers[l - 1], cfg.heads, tape.layers[l - 1], dh,
                                    &grads.layers[l - 1]);
    // token embedding
    grads.in_w += tape.x.transpose() * dh.bottomRows(F);
    grads.in_b.row(0) += dh.bottomRows(F).colwise().sum();
    for (int f = 0; f < F; ++f) grads.trans_emb.row(tape.flags[f] ? 1 : 0) += dh.row(f + 1);
    // conditioning token
    grads.cond_emb.row(tape.cond_row) += dh.row(0);
    Mat dtok = dh.row(0);
    grads.t_w2 += tape.t_g.transpose() * dtok;
    grads.t_b2 += dtok;
    Mat dtg = dtok * p.t_w2.transpose();
    Mat dtz = dtg.array() * tape.t_z.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
    grads.t_w1 += tape.t_sin.transpose() * dtz;
    grads.t_b1 += dtz;
}

Mat backward_to_tap(const DenoiserParams& p, const DenoiserTape& tape, const Mat& dy, int tap) {
    if (tap < 1 || tap > p.cfg.layers)
        throw ValidationError("backward_to_tap: tap out of range");
    Mat dh = head_backward(p, tape, dy, nullptr);
    for (int l = p.cfg.layers; l > tap; --l)
        dh = encoder_layer_backward(p.layers[l - 1], p.cfg.heads, tape.layers[l - 1], dh, nullptr);
    return dh;
}

}  // namespace compose
