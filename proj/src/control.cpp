#include "compose/control.hpp"

#include <algorithm>

#include "compose/rng.hpp"

namespace compose {

void ControlMask::validate(const FeatureLayout& layout) const {
    if (channels.empty()) throw ValidationError("control mask has no channels");
    for (size_t i = 0; i < channels.size(); ++i) {
        int c = channels[i];
        if (c < 0 || c >= layout.total_channels)
            throw ValidationError("control mask channel " + std::to_string(c) + " out of range");
        if (i > 0 && channels[i] <= channels[i - 1])
            throw ValidationError("control mask channels must be sorted and unique");
    }
    if (frame_range) {
        auto [b, e] = *frame_range;
        if (b < 0 || e <= b)
            throw ValidationError("control mask frame range [" + std::to_string(b) + ", " +
                                  std::to_string(e) + ") is empty or negative");
    }
}

Mat ControlMask::dense(int frames, const FeatureLayout& layout) const {
    validate(layout);
    int begin = 0, end = frames;
    if (frame_range) {
        begin = frame_range->first;
        end = std::min(frame_range->second, frames);
        if (begin >= frames)
            throw ValidationError("control mask frame range starts past the motion");
    }
    Mat m = Mat::Zero(frames, layout.total_channels);
    for (int f = begin; f < end; ++f)
        for (int c : channels) m(f, c) = 1.0;
    return m;
}

bool ControlMask::covers(int frame, int channel) const {
    if (frame_range && (frame < frame_range->first || frame >= frame_range->second)) return false;
    return std::binary_search(channels.begin(), channels.end(), channel);
}

ControlTask ControlTask::trajectory() { return {"trajectory", -1, 0}; }

ControlTask ControlTask::for_joint(int joint_index) { return {"joint", joint_index, 0}; }

ControlTask ControlTask::prefix(int frames) { return {"prefix", -1, frames}; }

ControlTask ControlTask::parse(const std::string& text) {
    if (text == "trajectory") return trajectory();
    auto colon = text.find(':');
    std::string head = text.substr(0, colon);
    std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    if (head == "prefix") {
        if (arg.empty()) throw ValidationError("prefix task needs a frame count, e.g. prefix:30");
        return prefix(std::stoi(arg));
    }
    if (head == "joint") {
        static const std::vector<std::string> names = SkeletonDef::standard().joint_names;
        auto it = std::find(names.begin(), names.end(), arg);
        if (it == names.end())
            throw ValidationError("unknown joint '" + arg + "' in control task '" + text + "'");
        return for_joint(int(it - names.begin()));
    }
    throw ValidationError("unknown control task '" + text + "'");
}

ControlMask make_mask(const ControlTask& task, const FeatureLayout& layout) {
    ControlMask m;
    if (task.name == "trajectory") {
        const auto& ang = layout.span("root_angular_velocity");
        const auto& lin = layout.span("root_linear_velocity_xz");
        for (int i = 0; i < ang.len; ++i) m.channels.push_back(ang.offset + i);
        for (int i = 0; i < lin.len; ++i) m.channels.push_back(lin.offset + i);
    } else if (task.name == "joint") {
        if (task.joint <= 0 || task.joint >= layout.joint_count)
            throw ValidationError("joint control index must name a non-root joint");
        const auto& pos = layout.span("joint_local_positions");
        int base = pos.offset + 3 * (task.joint - 1);
        for (int i = 0; i < 3; ++i) m.channels.push_back(base + i);
    } else if (task.name == "prefix") {
        if (task.prefix_frames <= 0)
            throw ValidationError("prefix control needs a positive frame count");
        for (int c = 0; c < layout.total_channels; ++c) m.channels.push_back(c);
        m.frame_range = {0, task.prefix_frames};
    } else {
        throw ValidationError("unknown control task '" + task.name + "'");
    }
    std::sort(m.channels.begin(), m.channels.end());
    m.validate(layout);
    return m;
}

std::vector<LossLogRow> finetune_control(DenoiserParams& params, const ControlMask& mask,
                                         const std::vector<Motion>& data,
                                         const NoiseSchedule& schedule, const TrainConfig& cfg,
                                         uint64_t seed, const TrainHook* hook) {
    if (data.empty()) throw ValidationError("fine-tuning needs a non-empty dataset");
    Mat dense = mask.dense(data[0].frame_count(), data[0].layout);
    return train(params, data, schedule, cfg, seed, &dense, hook);
}

ControlledSampleResult sample_controlled(const DenoiserParams& p, const NoiseSchedule& s,
                                         const ControlMask& mask, const Mat& given, int frames,
                                         const ControlledSampleOptions& opt) {
    FeatureLayout layout = FeatureLayout::standard(6, 30);
    if (layout.total_channels != p.cfg.channels)
        throw ValidationError("model channel count does not match the standard layout");
    if (given.rows() != frames || given.cols() != p.cfg.channels)
        throw ValidationError("control target must be frames x channels");
    if ((opt.secondary_mask == nullptr) != (opt.secondary_given == nullptr))
        throw ValidationError("secondary mask and target must be given together");

    Mat m = mask.dense(frames, layout);
    Mat m2;
    if (opt.secondary_mask) {
        m2 = opt.secondary_mask->dense(frames, layout);
        if (opt.secondary_given->rows() != frames || opt.secondary_given->cols() != p.cfg.channels)
            throw ValidationError("secondary control target must be frames x channels");
    }

    NoiseStream eps_stream{opt.seed, kStreamControlEps, opt.sample_index};
    Mat x0_cur = Mat::Zero(frames, p.cfg.channels);
    Mat eps(frames, p.cfg.channels);
    auto inject = [&](Mat& x) {
        x = (1.0 - m.array()) * x.array() + m.array() * given.array();
        if (opt.secondary_mask)
            x = (1.0 - m2.array()) * x.array() + m2.array() * opt.secondary_given->array();
    };
    for (int t = s.T; t >= 1; --t) {
        inject(x0_cur);
        eps_stream.fill_normal(uint32_t(t), eps);
        if (opt.mask_eps) eps = (1.0 - m.array()) * eps.array();
        Mat input = forward_noise(s, x0_cur, t, eps);
        if (opt.input_hook) opt.input_hook(t, input);
        x0_cur = cfg_predict(p, input, t, opt.cond, opt.guidance);
        if (!x0_cur.allFinite()) throw NumericalError("controlled sampling diverged", s.T - t);
    }

    ControlledSampleResult out;
    Mat dev = (x0_cur - given).array() * m.array();
    out.adherence_rmse = std::sqrt(dev.squaredNorm() / m.sum());
    if (opt.secondary_adherence && opt.secondary_mask) {
        Mat dev2 = (x0_cur - *opt.secondary_given).array() * m2.array();
        *opt.secondary_adherence = std::sqrt(dev2.squaredNorm() / m2.sum());
    }
    if (opt.overwrite_final) inject(x0_cur);
    out.frames = std::move(x0_cur);
    return out;
}

}  // namespace compose
