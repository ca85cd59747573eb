#include "compose/motion.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace compose {

using nlohmann::json;

FeatureLayout FeatureLayout::standard(int joint_count, int fps) {
    if (joint_count < 2) throw ValidationError("FeatureLayout: joint_count must be >= 2");
    FeatureLayout l;
    l.joint_count = joint_count;
    l.fps = fps;
    int j3 = 3 * (joint_count - 1);
    int off = 0;
    auto add = [&](const std::string& name, int len) {
        l.channel_groups.push_back({name, off, len});
        off += len;
    };
    add("root_angular_velocity", 1);
    add("root_linear_velocity_xz", 2);
    add("root_height", 1);
    add("joint_local_positions", j3);
    add("joint_local_velocities", j3);
    add("foot_contacts", 2);
    l.total_channels = off;
    return l;
}

const ChannelSpan& FeatureLayout::span(const std::string& name) const {
    for (const auto& g : channel_groups)
        if (g.name == name) return g;
    throw ValidationError("FeatureLayout: no channel group named '" + name + "'");
}

bool FeatureLayout::has_span(const std::string& name) const {
    for (const auto& g : channel_groups)
        if (g.name == name) return true;
    return false;
}

void FeatureLayout::validate() const {
    std::vector<int> covered(total_channels, 0);
    for (const auto& g : channel_groups) {
        if (g.offset < 0 || g.len < 0 || g.offset + g.len > total_channels)
            throw ValidationError("FeatureLayout: span '" + g.name + "' out of bounds");
        for (int c = g.offset; c < g.offset + g.len; ++c) {
            if (covered[c]++) throw ValidationError("FeatureLayout: overlapping span at channel " + std::to_string(c));
        }
        for (const auto& other : channel_groups)
            if (&other != &g && other.name == g.name)
                throw ValidationError("FeatureLayout: duplicate group name '" + g.name + "'");
    }
    for (int c = 0; c < total_channels; ++c)
        if (!covered[c]) throw ValidationError("FeatureLayout: channel " + std::to_string(c) + " not covered by any span");
}

bool FeatureLayout::operator==(const FeatureLayout& other) const {
    if (joint_count != other.joint_count || fps != other.fps ||
        total_channels != other.total_channels ||
        channel_groups.size() != other.channel_groups.size())
        return false;
    for (size_t i = 0; i < channel_groups.size(); ++i) {
        const auto &a = channel_groups[i], &b = other.channel_groups[i];
        if (a.name != b.name || a.offset != b.offset || a.len != b.len) return false;
    }
    return true;
}

SkeletonDef SkeletonDef::standard() {
    SkeletonDef s;
    s.joint_names = {"root", "head", "left_wrist", "right_wrist", "left_foot", "right_foot"};
    s.parents = {-1, 0, 0, 0, 0, 0};
    s.rest_offsets = {{0, 0.9, 0}, {0, 0.7, 0}, {-0.25, 0.45, 0}, {0.25, 0.45, 0}, {-0.1, -0.9, 0}, {0.1, -0.9, 0}};
    return s;
}

void SkeletonDef::validate() const {
    if (joint_names.empty() || parents.size() != joint_names.size() ||
        rest_offsets.size() != joint_names.size())
        throw ValidationError("SkeletonDef: inconsistent sizes");
    if (parents[0] != -1) throw ValidationError("SkeletonDef: root parent must be none");
    for (size_t j = 1; j < parents.size(); ++j)
        if (parents[j] < 0 || parents[j] >= int(j))
            throw ValidationError("SkeletonDef: parents must precede children (joint " + std::to_string(j) + ")");
}

void validate_motion(const Motion& m) {
    m.layout.validate();
    if (m.frames.rows() < 1) throw ValidationError("Motion: needs at least one frame");
    if (m.frames.cols() != m.layout.total_channels)
        throw ValidationError("Motion: frames have " + std::to_string(m.frames.cols()) +
                              " channels, layout expects " + std::to_string(m.layout.total_channels));
    for (Eigen::Index f = 0; f < m.frames.rows(); ++f)
        for (Eigen::Index c = 0; c < m.frames.cols(); ++c)
            if (!std::isfinite(m.frames(f, c)))
                throw ValidationError("Motion: non-finite value at frame " + std::to_string(f) +
                                      ", channel " + std::to_string(c));
}

Mat to_global_positions(const Motion& m) {
    validate_motion(m);
    const auto& l = m.layout;
    const int F = m.frame_count();
    const int J = l.joint_count;
    const int ang = l.span("root_angular_velocity").offset;
    const int lin = l.span("root_linear_velocity_xz").offset;
    const int hgt = l.span("root_height").offset;
    const int pos = l.span("joint_local_positions").offset;

    Mat out(F, J * 3);
    Scalar theta = 0, rx = 0, rz = 0;
    for (int f = 0; f < F; ++f) {
        Scalar c = std::cos(theta), s = std::sin(theta);
        out(f, 0) = rx;
        out(f, 1) = m.frames(f, hgt);
        out(f, 2) = rz;
        for (int j = 1; j < J; ++j) {
            Scalar lx = m.frames(f, pos + 3 * (j - 1));
            Scalar ly = m.frames(f, pos + 3 * (j - 1) + 1);
            Scalar lz = m.frames(f, pos + 3 * (j - 1) + 2);
            out(f, 3 * j + 0) = rx + c * lx - s * lz;
            out(f, 3 * j + 1) = m.frames(f, hgt) + ly;
            out(f, 3 * j + 2) = rz + s * lx + c * lz;
        }
        // integrate to the next frame
        Scalar vx = m.frames(f, lin), vz = m.frames(f, lin + 1);
        rx += c * vx - s * vz;
        rz += s * vx + c * vz;
        theta += m.frames(f, ang);
    }
    return out;
}

PlanarPose terminal_pose(const Motion& m) {
    const auto& l = m.layout;
    const int ang = l.span("root_angular_velocity").offset;
    const int lin = l.span("root_linear_velocity_xz").offset;
    PlanarPose p;
    for (int f = 0; f < m.frame_count(); ++f) {
        Scalar c = std::cos(p.heading), s = std::sin(p.heading);
        p.x += c * m.frames(f, lin) - s * m.frames(f, lin + 1);
        p.z += s * m.frames(f, lin) + c * m.frames(f, lin + 1);
        p.heading += m.frames(f, ang);
    }
    return p;
}

Mat apply_planar_pose(const Mat& global, const PlanarPose& pose) {
    Mat out = global;
    Scalar c = std::cos(pose.heading), s = std::sin(pose.heading);
    for (Eigen::Index f = 0; f < global.rows(); ++f) {
        for (Eigen::Index j = 0; j * 3 < global.cols(); ++j) {
            Scalar x = global(f, 3 * j), z = global(f, 3 * j + 2);
            out(f, 3 * j) = pose.x + c * x - s * z;
            out(f, 3 * j + 2) = pose.z + s * x + c * z;
        }
    }
    return out;
}

namespace {

json layout_to_json(const FeatureLayout& l) {
    json groups = json::array();
    for (const auto& g : l.channel_groups)
        groups.push_back({{"name", g.name}, {"offset", g.offset}, {"len", g.len}});
    return {{"joint_count", l.joint_count}, {"channel_groups", groups}};
}

FeatureLayout layout_from_json(const json& j, int fps, const std::string& where) {
    FeatureLayout l;
    l.fps = fps;
    if (!j.contains("joint_count")) throw IoError(where + ": missing \"layout.joint_count\"");
    l.joint_count = j.at("joint_count").get<int>();
    if (!j.contains("channel_groups")) throw IoError(where + ": missing \"layout.channel_groups\"");
    int off = 0;
    for (const auto& g : j.at("channel_groups")) {
        ChannelSpan s{g.at("name").get<std::string>(), g.at("offset").get<int>(), g.at("len").get<int>()};
        l.channel_groups.push_back(s);
        off = std::max(off, s.offset + s.len);
    }
    l.total_channels = off;
    l.validate();
    return l;
}

}  // namespace

json motion_to_json(const Motion& m);

json motion_to_json(const Motion& m) {
    json j;
    j["version"] = 1;
    j["fps"] = m.layout.fps;
    j["layout"] = layout_to_json(m.layout);
    if (m.label)
        j["label"] = *m.label;
    else
        j["label"] = nullptr;
    json rows = json::array();
    for (Eigen::Index f = 0; f < m.frames.rows(); ++f) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.frames.cols(); ++c) row.push_back(m.frames(f, c));
        rows.push_back(std::move(row));
    }
    j["frames"] = std::move(rows);
    j["meta"] = json::object();
    for (const auto& [k, v] : m.meta) j["meta"][k] = v;
    return j;
}

Motion motion_from_json(const json& j, const std::string& where);

Motion motion_from_json(const json& j, const std::string& where) {
    for (const char* field : {"version", "fps", "layout", "frames"})
        if (!j.contains(field)) throw IoError(where + ": missing \"" + field + "\"");
    if (j.at("version").get<int>() != 1)
        throw IoError(where + ": unsupported version " + j.at("version").dump());
    Motion m;
    m.layout = layout_from_json(j.at("layout"), j.at("fps").get<int>(), where);
    const auto& rows = j.at("frames");
    if (!rows.is_array() || rows.empty()) throw IoError(where + ": \"frames\" must be a non-empty array");
    m.frames.resize(rows.size(), m.layout.total_channels);
    for (size_t f = 0; f < rows.size(); ++f) {
        const auto& row = rows[f];
        if (int(row.size()) != m.layout.total_channels)
            throw IoError(where + ": frames row " + std::to_string(f) + " has " +
                          std::to_string(row.size()) + " values, expected " +
                          std::to_string(m.layout.total_channels));
        for (int c = 0; c < m.layout.total_channels; ++c) {
            Scalar v = row[c].get<Scalar>();
            if (!std::isfinite(v))
                throw IoError(where + ": non-finite value at frames[" + std::to_string(f) + "][" +
                              std::to_string(c) + "]");
            m.frames(int(f), c) = v;
        }
    }
    if (j.contains("label") && !j.at("label").is_null()) m.label = j.at("label").get<int>();
    if (j.contains("meta"))
        for (auto& [k, v] : j.at("meta").items()) m.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
    return m;
}

void save_motion(const Motion& m, const std::string& path) {
    validate_motion(m);
    atomic_write(path, motion_to_json(m).dump());
}

Motion load_motion(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_motion: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("load_motion: " + path + ": " + e.what());
    }
    return motion_from_json(j, path);
}

void export_csv(const Motion& m, const std::string& path) {
    Mat global = to_global_positions(m);
    std::ostringstream out;
    out << "frame";
    for (int j = 0; j < m.layout.joint_count; ++j)
        out << ",j" << j << "_x,j" << j << "_y,j" << j << "_z";
    out << "\n";
    char buf[64];
    for (Eigen::Index f = 0; f < global.rows(); ++f) {
        out << f;
        for (Eigen::Index c = 0; c < global.cols(); ++c) {
            std::snprintf(buf, sizeof(buf), ",%.9g", global(f, c));
            out << buf;
        }
        out << "\n";
    }
    atomic_write(path, out.str());
}

void atomic_write(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << contents;
    }
    fs::rename(tmp, target);
}

}  // namespace compose
