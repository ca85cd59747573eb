#include "compose/diffusion.hpp"

#include "compose/optim.hpp"

#include <cmath>
#include <sstream>

namespace compose {

Scalar NoiseSchedule::abar(int t) const {
    if (t == 0) return 1;
    if (t < 1 || t > T) throw ValidationError("NoiseSchedule: t=" + std::to_string(t) + " out of [0," + std::to_string(T) + "]");
    return alpha_bar(t - 1);
}

void NoiseSchedule::validate() const {
    if (T < 2 || alpha.size() != T || alpha_bar.size() != T || beta.size() != T ||
        posterior_var.size() != T)
        throw ValidationError("NoiseSchedule: inconsistent sizes");
    Scalar prev = 1;
    for (int t = 1; t <= T; ++t) {
        Scalar a = alpha(t - 1), ab = alpha_bar(t - 1);
        if (!(a > 0 && a < 1)) throw ValidationError("NoiseSchedule: alpha out of (0,1) at t=" + std::to_string(t));
        if (!(ab > 0 && ab < 1)) throw ValidationError("NoiseSchedule: alpha_bar out of (0,1) at t=" + std::to_string(t));
        if (!(ab < prev)) throw ValidationError("NoiseSchedule: alpha_bar not strictly decreasing at t=" + std::to_string(t));
        prev = ab;
    }
    // boundary targets are only reachable with enough steps
    if (T >= 50) {
        if (alpha_bar(0) < 0.99) throw ValidationError("NoiseSchedule: alpha_bar(1) below 0.99");
        if (alpha_bar(T - 1) > 1e-2) throw ValidationError("NoiseSchedule: alpha_bar(T) above 1e-2");
    }
}

NoiseSchedule make_schedule(int T, const std::string& kind) {
    if (kind != "cosine") throw ValidationError("make_schedule: unknown kind '" + kind + "'");
    if (T < 2) throw ValidationError("make_schedule: T must be >= 2");
    NoiseSchedule s;
    s.T = T;
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.beta.resize(T);
    s.posterior_var.resize(T);
    const Scalar offs = 0.008;
    auto f = [&](Scalar t) {
        Scalar v = std::cos((t / T + offs) / (1 + offs) * M_PI / 2);
        return v * v;
    };
    Scalar f0 = f(0);
    Scalar abar_prev = 1;
    for (int t = 1; t <= T; ++t) {
        Scalar abar_t = f(Scalar(t)) / f0;
        Scalar beta = 1 - abar_t / abar_prev;
        beta = std::min(beta, Scalar(0.999));
        s.beta(t - 1) = beta;
        s.alpha(t - 1) = 1 - beta;
        s.alpha_bar(t - 1) = abar_prev * s.alpha(t - 1);
        s.posterior_var(t - 1) = t == 1 ? 0 : (1 - abar_prev) / (1 - s.alpha_bar(t - 1)) * beta;
        abar_prev = s.alpha_bar(t - 1);
    }
    s.validate();
    return s;
}

Mat forward_noise(const NoiseSchedule& s, const Mat& x0, int t, const Mat& eps) {
    if (t == 0) return x0;
    if (eps.rows() != x0.rows() || eps.cols() != x0.cols())
        throw ValidationError("forward_noise: eps shape mismatch");
    Scalar ab = s.abar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1 - ab) * eps;
}

Mat ddpm_step(const NoiseSchedule& s, const Mat& x_t, const Mat& x0_hat, int t, const Mat& z) {
    if (t < 1 || t > s.T) throw ValidationError("ddpm_step: t out of range");
    if (x0_hat.rows() != x_t.rows() || x0_hat.cols() != x_t.cols())
        throw ValidationError("ddpm_step: shape mismatch");
    Scalar ab_t = s.abar(t), ab_prev = s.abar(t - 1);
    Scalar beta = s.beta(t - 1), alpha = s.alpha(t - 1);
    Scalar c0 = std::sqrt(ab_prev) * beta / (1 - ab_t);
    Scalar c1 = std::sqrt(alpha) * (1 - ab_prev) / (1 - ab_t);
    Mat mu = c0 * x0_hat + c1 * x_t;
    if (t == 1) return mu;
    return mu + std::sqrt(s.posterior_var(t - 1)) * z;
}

Mat guided_combine(const Mat& a, const Mat& b, Scalar s) {
    if (s == 0) return a;
    if (s == 1) return b;
    return a + s * (b - a);
}

Mat cfg_predict(const DenoiserParams& p, const Mat& x_t, int t, std::optional<int> cond,
                Scalar s_cfg) {
    if (!cond) return denoise(p, x_t, t, std::nullopt);
    if (s_cfg == 1) return denoise(p, x_t, t, cond);
    Mat uncond = denoise(p, x_t, t, std::nullopt);
    if (s_cfg == 0) return uncond;
    Mat c = denoise(p, x_t, t, cond);
    return guided_combine(uncond, c, s_cfg);
}

namespace {

struct FootChannels {
    int vel_l, vel_r;  // column offset of each foot's local-velocity triple
    int con;           // foot_contacts offset
};

FootChannels foot_channels(const FeatureLayout& layout) {
    const int vel = layout.span("joint_local_velocities").offset;
    return {vel + 3 * (kLeftFoot - 1), vel + 3 * (kRightFoot - 1),
            layout.span("foot_contacts").offset};
}

}  // namespace

GeometricLosses geometric_losses(const Mat& x0_hat, const Mat& x0, const FeatureLayout& layout) {
    if (x0_hat.rows() != x0.rows() || x0_hat.cols() != x0.cols())
        throw ValidationError("geometric_losses: shape mismatch");
    GeometricLosses out;
    const auto& ps = layout.span("joint_local_positions");
    const long F = x0.rows();
    auto dpos = (x0_hat.middleCols(ps.offset, ps.len) - x0.middleCols(ps.offset, ps.len)).eval();
    out.pos = dpos.array().square().mean();
    if (F > 1) {
        auto vh = (x0_hat.middleCols(ps.offset, ps.len).bottomRows(F - 1) -
                   x0_hat.middleCols(ps.offset, ps.len).topRows(F - 1)).eval();
        auto vg = (x0.middleCols(ps.offset, ps.len).bottomRows(F - 1) -
                   x0.middleCols(ps.offset, ps.len).topRows(F - 1)).eval();
        out.vel = (vh - vg).array().square().mean();
    }
    // Contacts are binary before normalization; afterwards contact frames are
    // exactly the positive values, so the gate is the sign, never the raw
    // channel (a negative gate would reward unbounded foot velocities).
    auto fc = foot_channels(layout);
    Scalar foot = 0;
    for (long f = 0; f < F; ++f) {
        if (x0(f, fc.con + 0) > 0) foot += x0_hat.row(f).segment(fc.vel_l, 3).norm();
        if (x0(f, fc.con + 1) > 0) foot += x0_hat.row(f).segment(fc.vel_r, 3).norm();
    }
    out.foot = foot / Scalar(F);
    return out;
}

void geometric_loss_backward(const Mat& x0_hat, const Mat& x0, const FeatureLayout& layout,
                             Scalar lambda_pos, Scalar lambda_vel, Scalar lambda_foot, Mat& dy) {
    const auto& ps = layout.span("joint_local_positions");
    const long F = x0.rows();
    if (lambda_pos != 0)
        dy.middleCols(ps.offset, ps.len) +=
            lambda_pos * 2.0 / Scalar(F * ps.len) *
            (x0_hat.middleCols(ps.offset, ps.len) - x0.middleCols(ps.offset, ps.len));
    if (lambda_vel != 0 && F > 1) {
        Scalar c = lambda_vel * 2.0 / Scalar((F - 1) * ps.len);
        for (long f = 0; f + 1 < F; ++f) {
            auto g = (c * ((x0_hat.row(f + 1) - x0_hat.row(f)) - (x0.row(f + 1) - x0.row(f)))
                          .segment(ps.offset, ps.len)).eval();
            dy.row(f + 1).segment(ps.offset, ps.len) += g;
            dy.row(f).segment(ps.offset, ps.len) -= g;
        }
    }
    if (lambda_foot != 0) {
        auto fc = foot_channels(layout);
        for (long f = 0; f < F; ++f)
            for (int side = 0; side < 2; ++side) {
                int off = side == 0 ? fc.vel_l : fc.vel_r;
                if (x0(f, fc.con + side) <= 0) continue;
                auto v = x0_hat.row(f).segment(off, 3);
                Scalar n = v.norm();
                if (n > 0) dy.row(f).segment(off, 3) += (lambda_foot / (n * Scalar(F))) * v;
            }
    }
}

std::vector<LossLogRow> train(DenoiserParams& params, const std::vector<Motion>& data,
                              const NoiseSchedule& schedule, const TrainConfig& cfg, uint64_t seed,
                              const Mat* eps_zero_mask, const TrainHook* hook) {
    if (data.empty()) throw ValidationError("train: empty dataset");
    const FeatureLayout& layout = data[0].layout;
    const long F = data[0].frames.rows();
    for (const auto& m : data)
        if (m.frames.rows() != F || m.frames.cols() != layout.total_channels)
            throw ValidationError("train: dataset motions must share shape");
    if (eps_zero_mask && (eps_zero_mask->rows() != F || eps_zero_mask->cols() != layout.total_channels))
        throw ValidationError("train: eps mask shape mismatch");

    std::vector<LossLogRow> log;
    Adam adam;
    DenoiserParams grads = zeros_like(params);
    std::vector<Mat*> param_ptrs, grad_ptrs;
    params.for_each([&](const std::string&, Mat& w) { param_ptrs.push_back(&w); });
    grads.for_each([&](const std::string&, Mat& g) { grad_ptrs.push_back(&g); });
    DenoiserTape tape;
    Mat eps(F, layout.total_channels);

    for (int step = 0; step < cfg.steps; ++step) {
        grads.for_each([](const std::string&, Mat& g) { g.setZero(); });
        Scalar sum_simple = 0, sum_pos = 0, sum_vel = 0, sum_foot = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            NoiseStream pick{seed, kStreamTrainBatch, uint32_t(b)};
            const Motion& mo = data[pick.uniform_index(uint32_t(step), 0, data.size())];
            NoiseStream ts{seed, kStreamTrainT, uint32_t(b)};
            int t = 1 + int(ts.uniform_index(uint32_t(step), 0, schedule.T));
            NoiseStream es{seed, kStreamTrainEps, uint32_t(b)};
            es.fill_normal(uint32_t(step), eps);
            if (eps_zero_mask) eps = eps.cwiseProduct(Mat::Ones(F, eps.cols()) - *eps_zero_mask);
            std::optional<int> cond = mo.label;
            if (cfg.force_null_cond) {
                cond = std::nullopt;
            } else {
                NoiseStream ds{seed, kStreamTrainDrop, uint32_t(b)};
                if (ds.uniform(uint32_t(step), 0) < cfg.cond_drop) cond = std::nullopt;
            }
            Mat x_t = forward_noise(schedule, mo.frames, t, eps);
            if (hook) (*hook)(step, x_t, mo.frames, t);
            Mat x0_hat = forward_train(params, x_t, t, cond, nullptr, tape);

            Mat diff = x0_hat - mo.frames;
            Scalar l_simple = diff.array().square().mean();
            Mat dy = (2.0 / Scalar(diff.size() * cfg.batch)) * diff;
            sum_simple += l_simple;
            if (cfg.geometric) {
                GeometricLosses gl = geometric_losses(x0_hat, mo.frames, layout);
                sum_pos += gl.pos;
                sum_vel += gl.vel;
                sum_foot += gl.foot;
                geometric_loss_backward(x0_hat, mo.frames, layout, cfg.lambda_pos / cfg.batch,
                                        cfg.lambda_vel / cfg.batch, cfg.lambda_foot / cfg.batch, dy);
            }
            backward(params, tape, dy, grads);
        }
        LossLogRow row;
        row.step = step;
        row.simple = sum_simple / cfg.batch;
        row.pos = sum_pos / cfg.batch;
        row.vel = sum_vel / cfg.batch;
        row.foot = sum_foot / cfg.batch;
        row.total = row.simple + cfg.lambda_pos * row.pos + cfg.lambda_vel * row.vel +
                    cfg.lambda_foot * row.foot;
        if (!std::isfinite(row.total))
            throw NumericalError("train: non-finite loss at step " + std::to_string(step), step);
        log.push_back(row);
        if (cfg.lr != 0) {
            adam.update(param_ptrs, grad_ptrs, cfg.lr);
            // row 0 of the transition embedding is pinned to zero
            params.trans_emb.row(0).setZero();
        }
    }
    return log;
}

void write_loss_log_csv(const std::vector<LossLogRow>& log, const std::string& path) {
    std::ostringstream out;
    out << "step,L_simple,L_pos,L_vel,L_foot,total\n";
    for (const auto& r : log)
        out << r.step << "," << r.simple << "," << r.pos << "," << r.vel << "," << r.foot << ","
            << r.total << "\n";
    atomic_write(path, out.str());
}

std::vector<Mat> sample_batch(const DenoiserParams& p, const NoiseSchedule& s,
                              const std::vector<std::optional<int>>& conds,
                              const std::vector<int>& frames, Scalar guidance, uint64_t seed,
                              uint32_t base_sample_index, const StepHook* hook) {
    if (conds.size() != frames.size()) throw ValidationError("sample_batch: conds/frames size mismatch");
    const int n = int(conds.size());
    std::vector<Mat> xs(n);
    for (int i = 0; i < n; ++i) {
        xs[i].resize(frames[i], p.cfg.channels);
        NoiseStream init{seed, kStreamSampleInit, base_sample_index + uint32_t(i)};
        init.fill_normal(uint32_t(s.T), xs[i]);
    }
    Mat z;
    for (int t = s.T; t >= 1; --t) {
        for (int i = 0; i < n; ++i) {
            Mat x0_hat = cfg_predict(p, xs[i], t, conds[i], guidance);
            if (t > 1) {
                z.resize(frames[i], p.cfg.channels);
                NoiseStream zs{seed, kStreamSampleStep, base_sample_index + uint32_t(i)};
                zs.fill_normal(uint32_t(t), z);
            }
            xs[i] = ddpm_step(s, xs[i], x0_hat, t, z);
        }
        if (hook) (*hook)(t - 1, xs);
    }
    return xs;
}

Motion sample(const DenoiserParams& p, const NoiseSchedule& s, std::optional<int> cond, int frames,
              const SamplerConfig& cfg, const NormStats& stats, const FeatureLayout& layout,
              uint32_t sample_index) {
    auto xs = sample_batch(p, s, {cond}, {frames}, cfg.guidance, cfg.seed, sample_index, nullptr);
    Motion m;
    m.layout = layout;
    m.frames = xs[0];
    m.label = cond;
    m = denormalize(m, stats);
    m.meta["seed"] = std::to_string(cfg.seed);
    m.meta["sample_index"] = std::to_string(sample_index);
    return m;
}

}  // namespace compose
