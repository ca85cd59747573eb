#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "compose/common.hpp"

namespace compose {

struct ChannelSpan {
    std::string name;
    int offset = 0;
    int len = 0;
};

// Channel layout of a motion matrix. The default 6-joint layout is
//   root_angular_velocity(1) | root_linear_velocity_xz(2) | root_height(1) |
//   joint_local_positions(3*(J-1)) | joint_local_velocities(3*(J-1)) |
//   foot_contacts(2)
// Root velocities are per-frame and root-local; joint positions are relative
// to the root.
struct FeatureLayout {
    int joint_count = 6;
    int fps = 30;
    std::vector<ChannelSpan> channel_groups;
    int total_channels = 0;

    static FeatureLayout standard(int joint_count = 6, int fps = 30);

    const ChannelSpan& span(const std::string& name) const;
    bool has_span(const std::string& name) const;
    void validate() const;  // disjoint spans tiling [0, total_channels), unique names
    bool operator==(const FeatureLayout& other) const;
};

struct Motion {
    FeatureLayout layout;
    Mat frames;  // F x total_channels
    std::optional<int> label;
    std::map<std::string, std::string> meta;

    int frame_count() const { return int(frames.rows()); }
};

struct SkeletonDef {
    std::vector<std::string> joint_names;  // index 0 = root
    std::vector<int> parents;              // -1 for root; parents precede children
    std::vector<Eigen::Vector3d> rest_offsets;

    static SkeletonDef standard();
    void validate() const;
};

// Names joint order in the standard layout.
enum JointIndex { kRoot = 0, kHead = 1, kLeftWrist = 2, kRightWrist = 3, kLeftFoot = 4, kRightFoot = 5 };

// Throws ValidationError naming the first offending frame/channel.
void validate_motion(const Motion& m);

// Integrates root velocities into global coordinates. Frame 0 has the root at
// the planar origin with zero heading. Returns an F x (J*3) matrix; joint j
// occupies columns [3j, 3j+3) as (x, y, z).
Mat to_global_positions(const Motion& m);

// Rigid planar transform (position xz, heading) — the terminal pose of a
// motion, and the frame two unfolded motions are glued in.
struct PlanarPose {
    Scalar x = 0, z = 0, heading = 0;
};
PlanarPose terminal_pose(const Motion& m);
// Applies a planar pose to global positions (rotation about y then translate).
Mat apply_planar_pose(const Mat& global, const PlanarPose& pose);

void save_motion(const Motion& m, const std::string& path);
Motion load_motion(const std::string& path);

// Global joint positions as CSV: header, then one row per frame
// (frame index + J*3 columns), 9 significant digits.
void export_csv(const Motion& m, const std::string& path);

// Write-temp-then-rename; everything the CLI emits goes through this.
void atomic_write(const std::string& path, const std::string& contents);

}  // namespace compose
