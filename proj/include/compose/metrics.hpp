#pragma once

#include "compose/control.hpp"
#include "compose/synth.hpp"

namespace compose {

// Max and mean global-position velocity jump within +/- `window` frames of a
// boundary, in m/frame.
struct DiscontinuityStat {
    int boundary = 0;
    Scalar max_jump = 0;
    Scalar mean_jump = 0;
};

std::vector<DiscontinuityStat> transition_discontinuity(const Motion& long_motion,
                                                        const std::vector<int>& boundaries,
                                                        int window = 5);

// RMSE between m and `given` over the masked entries.
Scalar control_adherence(const Motion& m, const ControlMask& mask, const Mat& given);

struct PrefixL2Row {
    Scalar horizon_s = 0;
    Scalar root_error = 0;   // mean global root distance over frames up to the horizon
    Scalar joint_error = 0;  // mean root-relative joint distance over the same frames
};

std::vector<PrefixL2Row> prefix_l2(const Motion& pred, const Motion& gt, int prefix_frames,
                                   const std::vector<Scalar>& horizons_s = {1.0, 2.0, 3.0});

// RMSE between the realized inter-actor root distance profile and the class
// template. Placements map each canonicalized actor into the shared frame.
Scalar interaction_error(const Motion& a, const Motion& b, const PlanarPose& d_a,
                         const PlanarPose& d_b, const PairClassSpec& pair_class);

// Mean pairwise L2 between velocity-feature vectors.
Scalar diversity_proxy(const std::vector<Motion>& motions);

struct FootSlideStat {
    Scalar mean_speed = 0;  // m/frame, averaged over contact frames
    bool any_contact = false;
};

FootSlideStat foot_slide(const Motion& m, Scalar contact_threshold = 0.5);

struct MetricReport {
    std::string name;
    std::map<std::string, Scalar> values;
    std::vector<Scalar> per_seed;
    std::string config_echo;

    void validate() const;
};

void write_report_json(const std::vector<MetricReport>& reports, const std::string& path);
void write_report_csv(const std::vector<MetricReport>& reports, const std::string& path);

}  // namespace compose
