#include "compose/doubletake.hpp"

#include <sstream>

namespace compose {

void DoubleTakeConfig::validate(int T) const {
    if (handshake < 1) throw ValidationError("DoubleTakeConfig: handshake must be >= 1");
    if (!(0 <= m_soft && m_soft <= m_hard && m_hard <= 1))
        throw ValidationError("DoubleTakeConfig: need 0 <= m_soft <= m_hard <= 1");
    if (ramp < 0 || ramp > context) throw ValidationError("DoubleTakeConfig: need 0 <= ramp <= context");
    if (partial_steps < 1 || partial_steps > T)
        throw ValidationError("DoubleTakeConfig: partial_steps out of [1, T]");
}

namespace {

void check_intervals(const std::vector<IntervalSpec>& intervals, const DoubleTakeConfig& cfg) {
    if (intervals.empty()) throw ValidationError("first_take: no intervals");
    const int n = int(intervals.size());
    for (int i = 0; i < n; ++i) {
        int min_len = (n == 1) ? 1 : (i == 0 || i == n - 1 ? cfg.handshake : 2 * cfg.handshake);
        if (intervals[i].frames <= min_len)
            throw ValidationError("interval " + std::to_string(i) + " too short (" +
                                  std::to_string(intervals[i].frames) + " frames) for handshake " +
                                  std::to_string(cfg.handshake));
        if (n > 1 && i > 0 && intervals[i].frames < cfg.handshake + cfg.context)
            throw ValidationError("interval " + std::to_string(i) + " shorter than handshake + context");
        if (n > 1 && i < n - 1 && intervals[i].frames < cfg.handshake + cfg.context)
            throw ValidationError("interval " + std::to_string(i) + " shorter than handshake + context");
    }
}

void apply_handshakes(std::vector<Mat>& xs, int h) {
    for (size_t i = 1; i < xs.size(); ++i) {
        Mat tau = blend_handshake(xs[i - 1].bottomRows(h), xs[i].topRows(h));
        xs[i - 1].bottomRows(h) = tau;
        xs[i].topRows(h) = tau;
    }
}

}  // namespace

Mat blend_handshake(const Mat& suffix, const Mat& prefix) {
    if (suffix.rows() != prefix.rows() || suffix.cols() != prefix.cols())
        throw ValidationError("blend_handshake: shape mismatch");
    const int h = int(suffix.rows());
    Mat out(h, suffix.cols());
    for (int j = 0; j < h; ++j) {
        Scalar a = Scalar(j) / h;
        out.row(j) = (1 - a) * suffix.row(j) + a * prefix.row(j);
    }
    return out;
}

std::vector<Mat> first_take(const DenoiserParams& p, const NoiseSchedule& s,
                            const std::vector<IntervalSpec>& intervals,
                            const DoubleTakeConfig& cfg, const SamplerConfig& sampler) {
    cfg.validate(s.T);
    check_intervals(intervals, cfg);
    std::vector<std::optional<int>> conds;
    std::vector<int> frames;
    for (const auto& iv : intervals) {
        conds.emplace_back(iv.condition);
        frames.push_back(iv.frames);
    }
    StepHook hook = [&](int, std::vector<Mat>& xs) { apply_handshakes(xs, cfg.handshake); };
    return sample_batch(p, s, conds, frames, sampler.guidance, sampler.seed, 0, &hook);
}

Vec make_soft_mask(const DoubleTakeConfig& cfg, int flank_left, int handshake, int flank_right) {
    Vec m(flank_left + handshake + flank_right);
    m.setConstant(cfg.m_soft);
    m.segment(flank_left, handshake).setConstant(cfg.m_hard);
    // ramps sit in the flanks, endpoints exclusive on both sides
    for (int k = 0; k < cfg.ramp; ++k) {
        Scalar w = Scalar(k + 1) / Scalar(cfg.ramp + 1);
        Scalar v = cfg.m_soft + w * (cfg.m_hard - cfg.m_soft);
        int left = flank_left - cfg.ramp + k;
        if (left >= 0 && left < flank_left) m(left) = v;
        int right = flank_left + handshake + cfg.ramp - 1 - k;
        if (right >= flank_left + handshake && right < m.size()) m(right) = v;
    }
    return m;
}

std::vector<Mat> second_take(const DenoiserParams& p, const NoiseSchedule& s,
                             const std::vector<Mat>& take1, const DoubleTakeConfig& cfg,
                             const SamplerConfig& sampler) {
    cfg.validate(s.T);
    std::vector<Mat> refined;
    const int h = cfg.handshake, c = cfg.context;
    for (size_t i = 0; i + 1 < take1.size(); ++i) {
        if (take1[i].rows() < h + c || take1[i + 1].rows() < h + c)
            throw ValidationError("second_take: context exceeds interval length at pair " +
                                  std::to_string(i));
        // [last c of interval i (before its suffix handshake) | shared handshake | first c of i+1]
        Mat sandwich(c + h + c, take1[i].cols());
        sandwich.topRows(c) = take1[i].middleRows(take1[i].rows() - h - c, c);
        sandwich.middleRows(c, h) = take1[i].bottomRows(h);
        sandwich.bottomRows(c) = take1[i + 1].middleRows(h, c);

        Vec m = make_soft_mask(cfg, c, h, c);
        const uint32_t pair_idx = uint32_t(i);
        Mat eps(sandwich.rows(), sandwich.cols());
        NoiseStream init{sampler.seed, kStreamSecondInit, pair_idx};
        init.fill_normal(uint32_t(cfg.partial_steps), eps);
        Mat x = forward_noise(s, sandwich, cfg.partial_steps, eps);

        Mat z(x.rows(), x.cols());
        Mat out;
        for (int t = cfg.partial_steps; t >= 1; --t) {
            Mat x0_hat = denoise(p, x, t, std::nullopt);
            if (t > 1) {
                NoiseStream zs{sampler.seed, kStreamSecondStep, pair_idx};
                zs.fill_normal(uint32_t(t), z);
                Mat x_gen = ddpm_step(s, x, x0_hat, t, z);
                NoiseStream as{sampler.seed, kStreamSecondAnchor, pair_idx};
                as.fill_normal(uint32_t(t - 1), eps);
                Mat anchor = forward_noise(s, sandwich, t - 1, eps);
                x = m.asDiagonal() * x_gen + (Vec::Ones(m.size()) - m).asDiagonal() * anchor;
            } else {
                out = m.asDiagonal() * x0_hat +
                      (Vec::Ones(m.size()) - m).asDiagonal() * sandwich;
            }
        }
        refined.push_back(std::move(out));
    }
    return refined;
}

std::vector<int> handshake_starts(const std::vector<IntervalSpec>& intervals, int handshake) {
    std::vector<int> starts;
    int pos = 0;
    for (size_t i = 0; i + 1 < intervals.size(); ++i) {
        pos += intervals[i].frames - handshake;
        starts.push_back(pos);
    }
    return starts;
}

Mat unfold(const std::vector<Mat>& take1, const std::vector<Mat>& refined,
           const DoubleTakeConfig& cfg) {
    if (take1.empty()) throw ValidationError("unfold: no intervals");
    if (!refined.empty() && refined.size() != take1.size() - 1)
        throw ValidationError("unfold: expected one refined region per adjacent pair");
    const int h = cfg.handshake, c = cfg.context;
    long total = 0;
    for (const auto& m : take1) total += m.rows();
    total -= h * long(take1.size() - 1);

    Mat out(total, take1[0].cols());
    long pos = 0;
    for (size_t i = 0; i < take1.size(); ++i) {
        long skip = i == 0 ? 0 : h;  // the shared handshake was already written
        out.middleRows(pos, take1[i].rows() - skip) = take1[i].bottomRows(take1[i].rows() - skip);
        pos += take1[i].rows() - skip;
    }
    if (!refined.empty()) {
        long hs = 0;
        for (size_t i = 0; i + 1 < take1.size(); ++i) {
            hs += take1[i].rows() - h;  // global start of handshake i
            out.middleRows(hs - c, refined[i].rows()) = refined[i];
        }
    }
    return out;
}

Motion double_take(const DenoiserParams& p, const NoiseSchedule& s,
                   const std::vector<IntervalSpec>& intervals, const DoubleTakeConfig& cfg,
                   const SamplerConfig& sampler, const NormStats& stats,
                   const FeatureLayout& layout) {
    auto take1 = first_take(p, s, intervals, cfg, sampler);
    std::vector<Mat> refined;
    if (cfg.second_take && take1.size() > 1) refined = second_take(p, s, take1, cfg, sampler);
    Motion m;
    m.layout = layout;
    m.frames = unfold(take1, refined, cfg);
    m = denormalize(m, stats);
    std::ostringstream bounds, conds;
    int pos = 0;
    for (size_t i = 0; i < intervals.size(); ++i) {
        bounds << (i ? ";" : "") << pos;
        conds << (i ? ";" : "") << intervals[i].condition;
        pos += intervals[i].frames - (i + 1 < intervals.size() ? cfg.handshake : 0);
    }
    m.meta["interval_starts"] = bounds.str();
    m.meta["interval_conditions"] = conds.str();
    m.meta["seed"] = std::to_string(sampler.seed);
    return m;
}

}  // namespace compose
