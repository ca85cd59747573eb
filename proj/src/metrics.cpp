#include "compose/metrics.hpp"

#include <algorithm>
#include <sstream>

#include <json.hpp>

namespace compose {

std::vector<DiscontinuityStat> transition_discontinuity(const Motion& long_motion,
                                                        const std::vector<int>& boundaries,
                                                        int window) {
    if (window < 0) throw ValidationError("transition_discontinuity: negative window");
    const int F = long_motion.frame_count();
    if (F < 3) throw ValidationError("transition_discontinuity: need at least 3 frames");
    Mat pos = to_global_positions(long_motion);
    // velocity jump at frame f compares v_{f-1} -> v_f, defined for f in [1, F-2]
    std::vector<DiscontinuityStat> out;
    for (int b : boundaries) {
        if (b < 0 || b >= F)
            throw ValidationError("transition_discontinuity: boundary " + std::to_string(b) +
                                  " out of range");
        DiscontinuityStat st;
        st.boundary = b;
        int lo = std::max(1, b - window), hi = std::min(F - 2, b + window);
        int n = 0;
        for (int f = lo; f <= hi; ++f) {
            Scalar jump = ((pos.row(f + 1) - pos.row(f)) - (pos.row(f) - pos.row(f - 1))).norm();
            st.max_jump = std::max(st.max_jump, jump);
            st.mean_jump += jump;
            ++n;
        }
        if (n > 0) st.mean_jump /= n;
        out.push_back(st);
    }
    return out;
}

Scalar control_adherence(const Motion& m, const ControlMask& mask, const Mat& given) {
    if (given.rows() != m.frames.rows() || given.cols() != m.frames.cols())
        throw ValidationError("control_adherence: target shape mismatch");
    Mat dense = mask.dense(m.frame_count(), m.layout);
    Mat dev = (m.frames - given).array() * dense.array();
    return std::sqrt(dev.squaredNorm() / dense.sum());
}

std::vector<PrefixL2Row> prefix_l2(const Motion& pred, const Motion& gt, int prefix_frames,
                                   const std::vector<Scalar>& horizons_s) {
    if (pred.frame_count() != gt.frame_count() || pred.frames.cols() != gt.frames.cols())
        throw ValidationError("prefix_l2: motions must share shape");
    const int F = pred.frame_count();
    if (prefix_frames < 0 || prefix_frames >= F)
        throw ValidationError("prefix_l2: prefix length out of range");
    const int fps = pred.layout.fps;
    const int J = pred.layout.joint_count;
    Mat pp = to_global_positions(pred);
    Mat pg = to_global_positions(gt);

    std::vector<PrefixL2Row> rows;
    for (Scalar h : horizons_s) {
        int end = std::min(F, prefix_frames + int(std::lround(h * fps)));
        if (end <= prefix_frames)
            throw ValidationError("prefix_l2: horizon covers no completion frames");
        PrefixL2Row row;
        row.horizon_s = h;
        int n = end - prefix_frames;
        for (int f = prefix_frames; f < end; ++f) {
            auto root_p = pp.row(f).segment(0, 3);
            auto root_g = pg.row(f).segment(0, 3);
            row.root_error += (root_p - root_g).norm();
            Scalar joint_sum = 0;
            for (int j = 1; j < J; ++j) {
                auto rel_p = pp.row(f).segment(3 * j, 3) - root_p;
                auto rel_g = pg.row(f).segment(3 * j, 3) - root_g;
                joint_sum += (rel_p - rel_g).norm();
            }
            row.joint_error += joint_sum / (J - 1);
        }
        row.root_error /= n;
        row.joint_error /= n;
        rows.push_back(row);
    }
    return rows;
}

Scalar interaction_error(const Motion& a, const Motion& b, const PlanarPose& d_a,
                         const PlanarPose& d_b, const PairClassSpec& pair_class) {
    if (a.frame_count() != b.frame_count())
        throw ValidationError("interaction_error: actors must share frame count");
    Mat ga = apply_planar_pose(to_global_positions(a), d_a);
    Mat gb = apply_planar_pose(to_global_positions(b), d_b);
    const int F = a.frame_count();
    Scalar acc = 0;
    for (int f = 0; f < F; ++f) {
        // planar root distance (x, z)
        Scalar dx = ga(f, 0) - gb(f, 0);
        Scalar dz = ga(f, 2) - gb(f, 2);
        Scalar realized = std::sqrt(dx * dx + dz * dz);
        Scalar tmpl = pair_template_distance(pair_class, f, a.layout.fps);
        acc += (realized - tmpl) * (realized - tmpl);
    }
    return std::sqrt(acc / F);
}

Scalar diversity_proxy(const std::vector<Motion>& motions) {
    const size_t n = motions.size();
    if (n < 2) throw ValidationError("diversity_proxy: need at least two motions");
    std::vector<Vec> feats;
    for (const auto& m : motions) feats.push_back(velocity_features(m));
    Scalar acc = 0;
    size_t pairs = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            acc += (feats[i] - feats[j]).norm();
            ++pairs;
        }
    return acc / Scalar(pairs);
}

FootSlideStat foot_slide(const Motion& m, Scalar contact_threshold) {
    Mat pos = to_global_positions(m);
    const auto& con = m.layout.span("foot_contacts");
    const int F = m.frame_count();
    FootSlideStat st;
    int n = 0;
    const int feet[2] = {kLeftFoot, kRightFoot};
    for (int f = 0; f + 1 < F; ++f)
        for (int side = 0; side < 2; ++side) {
            if (m.frames(f, con.offset + side) < contact_threshold) continue;
            st.any_contact = true;
            int j = feet[side];
            st.mean_speed += (pos.row(f + 1).segment(3 * j, 3) - pos.row(f).segment(3 * j, 3)).norm();
            ++n;
        }
    if (n > 0) st.mean_speed /= n;
    return st;
}

void MetricReport::validate() const {
    if (name.empty()) throw ValidationError("metric report has no name");
    for (const auto& [k, v] : values)
        if (!std::isfinite(v)) throw ValidationError("metric '" + name + "' value '" + k + "' not finite");
    for (Scalar v : per_seed)
        if (!std::isfinite(v)) throw ValidationError("metric '" + name + "' has non-finite per-seed value");
}

void write_report_json(const std::vector<MetricReport>& reports, const std::string& path) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : reports) {
        r.validate();
        nlohmann::json e;
        e["name"] = r.name;
        e["values"] = r.values;
        e["per_seed"] = r.per_seed;
        if (!r.config_echo.empty()) e["config"] = nlohmann::json::parse(r.config_echo);
        j.push_back(e);
    }
    atomic_write(path, j.dump(2) + "\n");
}

void write_report_csv(const std::vector<MetricReport>& reports, const std::string& path) {
    std::ostringstream out;
    out << "metric,key,value\n";
    out.precision(12);
    for (const auto& r : reports) {
        r.validate();
        for (const auto& [k, v] : r.values) out << r.name << "," << k << "," << v << "\n";
        for (size_t i = 0; i < r.per_seed.size(); ++i)
            out << r.name << ",seed" << i << "," << r.per_seed[i] << "\n";
    }
    atomic_write(path, out.str());
}

}  // namespace compose
