#include "compose/synth.hpp"

#include <cmath>

namespace compose {

namespace {

constexpr Scalar kRootHeight = 0.9;
constexpr Scalar kSquatDepth = 0.25;
constexpr Scalar kFootLift = 0.05;

Scalar jittered(Scalar base, Scalar range, const NoiseStream& s, uint64_t element) {
    if (range == 0) return base;
    return base + range * (2 * s.uniform(0, element) - 1);
}

struct Pose {
    // local joint positions for joints 1..J-1 plus root height and contacts
    Scalar height;
    Eigen::Vector3d head, lwrist, rwrist, lfoot, rfoot;
    Scalar contact_l, contact_r;
};

}  // namespace

void MotionClassSpec::validate() const {
    if (speed < 0 || speed_jitter < 0 || gait_jitter < 0 || amp_jitter < 0 ||
        turn_jitter < 0 || phase_jitter < 0)
        throw ValidationError("MotionClassSpec '" + name + "': negative parameter");
    if (gait_hz <= 0) throw ValidationError("MotionClassSpec '" + name + "': gait frequency must be > 0");
    if (speed_jitter > speed && speed_jitter > 0)
        throw ValidationError("MotionClassSpec '" + name + "': speed jitter exceeds base");
    if (gait_jitter >= gait_hz)
        throw ValidationError("MotionClassSpec '" + name + "': gait jitter exceeds base");
}

std::vector<MotionClassSpec> standard_classes(bool with_jitter) {
    Scalar j = with_jitter ? 1.0 : 0.0;
    std::vector<MotionClassSpec> cs;
    // Gait-frequency jitter is kept small on purpose: over a 4 s clip a
    // frequency spread of df leaks 2*pi*df*4 radians of phase, and once that
    // exceeds ~1 radian the class-conditional mean of the oscillatory
    // channels washes out, which a toy-scale denoiser cannot recover from.
    //                 id  name      speed gait  amp  turn    jitters: speed  gait     amp      turn  phase
    cs.push_back({0, "idle",   0.0, 1.0, 0.03, 0.0, 0.0,        0.02 * j, 0.01 * j, 0.0, 0.25 * M_PI * j});
    cs.push_back({1, "walk",   1.2, 1.5, 0.30, 0.0, 0.15 * j,   0.03 * j, 0.05 * j, 0.0, 0.25 * M_PI * j});
    cs.push_back({2, "run",    3.0, 2.5, 0.50, 0.0, 0.4 * j,    0.04 * j, 0.08 * j, 0.0, 0.25 * M_PI * j});
    cs.push_back({3, "circle", 1.0, 1.5, 0.30, 0.5, 0.1 * j,    0.03 * j, 0.05 * j, 0.1 * j, 0.25 * M_PI * j});
    cs.push_back({4, "wave",   0.0, 2.0, 0.40, 0.0, 0.0,        0.04 * j, 0.08 * j, 0.0, 0.25 * M_PI * j});
    cs.push_back({5, "squat",  0.0, 0.5, 0.25, 0.0, 0.0,        0.02 * j, 0.04 * j, 0.0, 0.25 * M_PI * j});
    for (auto& c : cs) c.validate();
    return cs;
}

const MotionClassSpec& class_by_name(const std::vector<MotionClassSpec>& classes, const std::string& name) {
    for (const auto& c : classes)
        if (c.name == name) return c;
    throw ValidationError("no motion class named '" + name + "'");
}

Motion generate_motion(const MotionClassSpec& spec, int frames, uint64_t seed, uint32_t sample_index) {
    spec.validate();
    if (frames < 2) throw ValidationError("generate_motion: frames must be >= 2");
    FeatureLayout layout = FeatureLayout::standard();
    SkeletonDef skel = SkeletonDef::standard();

    NoiseStream js{seed, kStreamJitter, sample_index};
    Scalar speed = jittered(spec.speed, spec.speed_jitter, js, 0);
    Scalar gait = jittered(spec.gait_hz, spec.gait_jitter, js, 1);
    Scalar amp = jittered(spec.amplitude, spec.amp_jitter, js, 2);
    Scalar turn = jittered(spec.turn_rate, spec.turn_jitter, js, 3);
    Scalar phase0 = spec.phase_jitter == 0 ? 0 : spec.phase_jitter * (2 * js.uniform(0, 4) - 1);

    const int fps = layout.fps;
    const bool squat = spec.name == "squat";
    const bool wave = spec.name == "wave";
    const bool gaited = spec.name == "walk" || spec.name == "run" || spec.name == "circle";

    auto pose_at = [&](int f) {
        Pose p;
        Scalar phi = 2 * M_PI * gait * f / fps + phase0;
        p.height = squat ? kRootHeight - kSquatDepth * Scalar(0.5) * (1 - std::cos(phi)) : kRootHeight;
        p.head = skel.rest_offsets[kHead];
        p.lwrist = skel.rest_offsets[kLeftWrist];
        p.rwrist = skel.rest_offsets[kRightWrist];
        p.lfoot = skel.rest_offsets[kLeftFoot];
        p.rfoot = skel.rest_offsets[kRightFoot];
        p.contact_l = p.contact_r = 1;
        if (gaited) {
            Scalar swing = std::sin(phi);
            // arms counter-swing the legs
            p.lwrist.z() = -Scalar(0.5) * amp * swing;
            p.rwrist.z() = Scalar(0.5) * amp * swing;
            p.lfoot.z() = amp * swing;
            p.rfoot.z() = -amp * swing;
            p.lfoot.y() += kFootLift * std::max(Scalar(0), std::sin(phi - M_PI / 2));
            p.rfoot.y() += kFootLift * std::max(Scalar(0), std::sin(phi + M_PI / 2));
            p.contact_l = std::sin(phi - M_PI / 2) <= 0 ? 1 : 0;
            p.contact_r = std::sin(phi + M_PI / 2) <= 0 ? 1 : 0;
            p.head.y() += Scalar(0.05) * amp * std::cos(2 * phi);
        } else if (wave) {
            p.rwrist.y() += amp * (Scalar(0.5) + Scalar(0.5) * std::sin(phi));
            p.rwrist.x() += Scalar(0.3) * amp * std::cos(phi);
            p.lwrist.z() += Scalar(0.1) * amp * std::sin(phi * Scalar(0.5));
        } else if (squat) {
            // feet stay on the floor while the root dips
            p.lfoot.y() = -p.height;
            p.rfoot.y() = -p.height;
            p.lwrist.z() += Scalar(0.3) * amp * Scalar(0.5) * (1 - std::cos(phi));
            p.rwrist.z() += Scalar(0.3) * amp * Scalar(0.5) * (1 - std::cos(phi));
        } else {
            // idle sway
            p.lwrist.z() += amp * std::sin(phi);
            p.rwrist.z() += amp * std::sin(phi + M_PI / 3);
            p.head.x() += Scalar(0.3) * amp * std::sin(phi * Scalar(0.5));
        }
        return p;
    };

    Motion m;
    m.layout = layout;
    m.label = spec.id;
    m.frames.setZero(frames, layout.total_channels);
    const int ang = layout.span("root_angular_velocity").offset;
    const int lin = layout.span("root_linear_velocity_xz").offset;
    const int hgt = layout.span("root_height").offset;
    const int pos = layout.span("joint_local_positions").offset;
    const int vel = layout.span("joint_local_velocities").offset;
    const int con = layout.span("foot_contacts").offset;

    auto put3 = [&](int f, int base, int j, const Eigen::Vector3d& v) {
        m.frames(f, base + 3 * (j - 1) + 0) = v.x();
        m.frames(f, base + 3 * (j - 1) + 1) = v.y();
        m.frames(f, base + 3 * (j - 1) + 2) = v.z();
    };

    for (int f = 0; f < frames; ++f) {
        Pose p = pose_at(f);
        m.frames(f, ang) = turn / fps;
        m.frames(f, lin + 0) = 0;
        m.frames(f, lin + 1) = speed / fps;
        m.frames(f, hgt) = p.height;
        put3(f, pos, kHead, p.head);
        put3(f, pos, kLeftWrist, p.lwrist);
        put3(f, pos, kRightWrist, p.rwrist);
        put3(f, pos, kLeftFoot, p.lfoot);
        put3(f, pos, kRightFoot, p.rfoot);
        m.frames(f, con + 0) = p.contact_l;
        m.frames(f, con + 1) = p.contact_r;
    }
    // local velocities: forward differences, last frame repeats the previous
    for (int f = 0; f < frames; ++f) {
        int a = std::min(f, frames - 2);
        for (int c = 0; c < 3 * (layout.joint_count - 1); ++c)
            m.frames(f, vel + c) = m.frames(a + 1, pos + c) - m.frames(a, pos + c);
    }
    return m;
}

void PairClassSpec::validate() const {
    if (start_distance <= 0) throw ValidationError("PairClassSpec '" + name + "': distance must be > 0");
    actor_a.validate();
    actor_b.validate();
}

std::vector<PairClassSpec> standard_pair_classes() {
    auto classes = standard_classes(true);
    auto jittered_copy = [&](const std::string& n) { return class_by_name(classes, n); };
    std::vector<PairClassSpec> ps;
    ps.push_back({0, "approach", 4.0, jittered_copy("walk"), jittered_copy("walk")});
    ps.push_back({1, "mirror", 2.0, jittered_copy("wave"), jittered_copy("wave")});
    ps.push_back({2, "circle_each_other", 0.0, jittered_copy("circle"), jittered_copy("circle")});
    ps.push_back({3, "follow", 1.5, jittered_copy("walk"), jittered_copy("walk")});
    // circle distance is implied by the circle geometry, not start_distance
    ps[2].start_distance = 2.0;
    return ps;
}

namespace {

// Center of the discrete circular path traced from the origin with heading 0,
// per-frame displacement v (local) and per-frame turn delta: c = (I-R(delta))^-1 v.
Eigen::Vector2d circle_center(Scalar vx, Scalar vz, Scalar delta) {
    Eigen::Matrix2d R;
    R << std::cos(delta), -std::sin(delta), std::sin(delta), std::cos(delta);
    Eigen::Matrix2d A = Eigen::Matrix2d::Identity() - R;
    return A.inverse() * Eigen::Vector2d(vx, vz);
}

Motion mirror_motion(const Motion& src) {
    Motion m = src;
    const auto& l = m.layout;
    const int pos = l.span("joint_local_positions").offset;
    const int vel = l.span("joint_local_velocities").offset;
    const int con = l.span("foot_contacts").offset;
    const int ang = l.span("root_angular_velocity").offset;
    const int lin = l.span("root_linear_velocity_xz").offset;
    auto swap3 = [&](int base, int j1, int j2) {
        for (int k = 0; k < 3; ++k)
            m.frames.col(base + 3 * (j1 - 1) + k).swap(m.frames.col(base + 3 * (j2 - 1) + k));
    };
    swap3(pos, kLeftWrist, kRightWrist);
    swap3(pos, kLeftFoot, kRightFoot);
    swap3(vel, kLeftWrist, kRightWrist);
    swap3(vel, kLeftFoot, kRightFoot);
    m.frames.col(con).swap(m.frames.col(con + 1));
    for (int j = 1; j < l.joint_count; ++j) {
        m.frames.col(pos + 3 * (j - 1)) *= -1;  // lateral axis
        m.frames.col(vel + 3 * (j - 1)) *= -1;
    }
    m.frames.col(ang) *= -1;
    m.frames.col(lin) *= -1;
    return m;
}

}  // namespace

PairSample generate_pair(const PairClassSpec& spec, int frames, uint64_t seed, uint32_t sample_index) {
    spec.validate();
    PairSample out;
    out.pair_class = spec.id;
    const Scalar d0 = spec.start_distance;
    if (spec.name == "approach") {
        out.a = generate_motion(spec.actor_a, frames, seed, sample_index);
        out.b = out.a;  // shared jitter keeps the closing geometry exact
        out.d_a = {0, -d0 / 2, 0};
        out.d_b = {0, d0 / 2, M_PI};
    } else if (spec.name == "mirror") {
        out.a = generate_motion(spec.actor_a, frames, seed, sample_index);
        out.b = mirror_motion(out.a);
        out.d_a = {0, -d0 / 2, 0};
        out.d_b = {0, d0 / 2, M_PI};
    } else if (spec.name == "circle_each_other") {
        out.a = generate_motion(spec.actor_a, frames, seed, sample_index);
        out.b = out.a;
        const auto& l = out.a.layout;
        Scalar vz = out.a.frames(0, l.span("root_linear_velocity_xz").offset + 1);
        Scalar delta = out.a.frames(0, l.span("root_angular_velocity").offset);
        Eigen::Vector2d c = circle_center(0, vz, delta);
        out.d_a = {0, 0, 0};
        out.d_b = {2 * c.x(), 2 * c.y(), M_PI};
    } else if (spec.name == "follow") {
        out.a = generate_motion(spec.actor_a, frames, seed, sample_index);
        out.b = out.a;
        out.d_a = {0, 0, 0};
        out.d_b = {0, -d0, 0};
    } else {
        throw ValidationError("generate_pair: unknown pair class '" + spec.name + "'");
    }
    // actor labels stay motion-class ids (set by generate_motion); the pair
    // class is recorded separately so priors can be conditioned as usual
    out.b.label = spec.actor_b.id;
    return out;
}

Scalar pair_template_distance(const PairClassSpec& spec, int frame, int fps) {
    if (spec.name == "approach")
        return std::max(Scalar(0), spec.start_distance - 2 * spec.actor_a.speed * frame / fps);
    if (spec.name == "circle_each_other") {
        Scalar delta = spec.actor_a.turn_rate / fps;
        Scalar v = spec.actor_a.speed / fps;
        return v / std::sin(delta / 2);  // = 2 * |circle center|
    }
    return spec.start_distance;  // mirror, follow
}

NormStats compute_stats(const std::vector<Motion>& motions) {
    if (motions.empty()) throw ValidationError("compute_stats: empty dataset");
    const int C = motions[0].layout.total_channels;
    Vec sum = Vec::Zero(C), sumsq = Vec::Zero(C);
    long n = 0;
    for (const auto& m : motions) {
        if (m.layout.total_channels != C) throw ValidationError("compute_stats: layout mismatch");
        sum += m.frames.colwise().sum().transpose();
        sumsq += m.frames.array().square().colwise().sum().matrix().transpose();
        n += m.frames.rows();
    }
    NormStats s;
    s.mean = sum / Scalar(n);
    s.std.resize(C);
    for (int c = 0; c < C; ++c) {
        Scalar var = sumsq(c) / Scalar(n) - s.mean(c) * s.mean(c);
        Scalar sd = std::sqrt(std::max(var, Scalar(0)));
        if (sd < 1e-6) {
            sd = 1e-6;
            s.clamped_channels.push_back(c);
        }
        s.std(c) = sd;
    }
    return s;
}

void NormStats::validate() const {
    if (mean.size() != std.size()) throw ValidationError("NormStats: size mismatch");
    for (Eigen::Index c = 0; c < std.size(); ++c)
        if (!(std(c) > 0)) throw ValidationError("NormStats: non-positive std at channel " + std::to_string(c));
}

Motion normalize(const Motion& m, const NormStats& stats) {
    stats.validate();
    if (stats.mean.size() != m.layout.total_channels)
        throw ValidationError("normalize: stats channel count mismatch");
    Motion out = m;
    out.frames = (m.frames.rowwise() - stats.mean.transpose()).array().rowwise() /
                 stats.std.transpose().array();
    if (!stats.clamped_channels.empty()) {
        std::string cs;
        for (int c : stats.clamped_channels) cs += (cs.empty() ? "" : ",") + std::to_string(c);
        out.meta["clamped_channels"] = cs;
    }
    return out;
}

Motion denormalize(const Motion& m, const NormStats& stats) {
    stats.validate();
    if (stats.mean.size() != m.layout.total_channels)
        throw ValidationError("denormalize: stats channel count mismatch");
    Motion out = m;
    out.frames = (m.frames.array().rowwise() * stats.std.transpose().array()).rowwise() +
                 stats.mean.transpose().array();
    return out;
}

Dataset build_dataset(const std::vector<MotionClassSpec>& classes, int samples_per_class,
                      int frames, uint64_t seed) {
    Dataset d;
    d.layout = FeatureLayout::standard();
    uint32_t idx = 0;
    for (const auto& cls : classes)
        for (int s = 0; s < samples_per_class; ++s)
            d.motions.push_back(generate_motion(cls, frames, seed, idx++));
    d.stats = compute_stats(d.motions);
    return d;
}

PairDataset build_pair_dataset(const std::vector<PairClassSpec>& classes, int samples_per_class,
                               int frames, uint64_t seed) {
    PairDataset d;
    d.layout = FeatureLayout::standard();
    uint32_t idx = 0;
    for (const auto& cls : classes)
        for (int s = 0; s < samples_per_class; ++s)
            d.pairs.push_back(generate_pair(cls, frames, seed, idx++));
    std::vector<Motion> all;
    for (const auto& p : d.pairs) {
        all.push_back(p.a);
        all.push_back(p.b);
    }
    d.stats = compute_stats(all);
    // initial-pose stats over both actors
    const long n = long(d.pairs.size()) * 2;
    d.d_mean = Vec::Zero(3);
    d.d_std = Vec::Zero(3);
    for (const auto& p : d.pairs)
        for (const auto* dp : {&p.d_a, &p.d_b}) {
            d.d_mean(0) += dp->x;
            d.d_mean(1) += dp->z;
            d.d_mean(2) += dp->heading;
        }
    d.d_mean /= Scalar(n);
    for (const auto& p : d.pairs)
        for (const auto* dp : {&p.d_a, &p.d_b}) {
            d.d_std(0) += (dp->x - d.d_mean(0)) * (dp->x - d.d_mean(0));
            d.d_std(1) += (dp->z - d.d_mean(1)) * (dp->z - d.d_mean(1));
            d.d_std(2) += (dp->heading - d.d_mean(2)) * (dp->heading - d.d_mean(2));
        }
    d.d_std = (d.d_std / Scalar(n)).array().sqrt().max(1e-6);
    return d;
}

Vec velocity_features(const Motion& m) {
    const auto& l = m.layout;
    std::vector<const ChannelSpan*> spans = {&l.span("root_angular_velocity"),
                                             &l.span("root_linear_velocity_xz"),
                                             &l.span("joint_local_velocities")};
    int n = 0;
    for (auto* s : spans) n += s->len;
    Vec out(n);
    int k = 0;
    for (auto* s : spans)
        for (int c = 0; c < s->len; ++c)
            out(k++) = m.frames.col(s->offset + c).array().abs().mean();
    return out;
}

CentroidClassifier CentroidClassifier::fit(const std::vector<Motion>& train) {
    CentroidClassifier cc;
    if (train.empty()) throw ValidationError("CentroidClassifier: empty training set");
    std::vector<Vec> feats;
    for (const auto& m : train) {
        if (!m.label) throw ValidationError("CentroidClassifier: unlabeled motion");
        feats.push_back(velocity_features(m));
    }
    // standardize so low-magnitude channels (e.g. turn rate) carry weight
    const long dim = feats[0].size();
    cc.feat_mean = Vec::Zero(dim);
    for (const auto& f : feats) cc.feat_mean += f;
    cc.feat_mean /= Scalar(feats.size());
    cc.feat_std = Vec::Zero(dim);
    for (const auto& f : feats) cc.feat_std += (f - cc.feat_mean).array().square().matrix();
    cc.feat_std = (cc.feat_std / Scalar(feats.size())).array().sqrt().max(1e-9);

    std::map<int, std::pair<Vec, int>> acc;
    for (size_t i = 0; i < feats.size(); ++i) {
        Vec f = ((feats[i] - cc.feat_mean).array() / cc.feat_std.array()).matrix();
        auto it = acc.find(*train[i].label);
        if (it == acc.end())
            acc.emplace(*train[i].label, std::make_pair(f, 1));
        else {
            it->second.first += f;
            it->second.second += 1;
        }
    }
    for (auto& [label, sf] : acc) {
        cc.labels.push_back(label);
        cc.centroids.push_back(sf.first / Scalar(sf.second));
    }
    return cc;
}

int CentroidClassifier::predict(const Motion& m) const {
    Vec f = ((velocity_features(m) - feat_mean).array() / feat_std.array()).matrix();
    int best = -1;
    Scalar best_d = 0;
    for (size_t i = 0; i < centroids.size(); ++i) {
        Scalar d = (f - centroids[i]).squaredNorm();
        if (best < 0 || d < best_d) {
            best = labels[i];
            best_d = d;
        }
    }
    return best;
}

}  // namespace compose
