#pragma once

#include "compose/motion.hpp"
#include "compose/rng.hpp"

namespace compose {

// One labeled motion class. Base values are exact when jitter is zero; jitter
// is uniform in +/- the stated range around the base.
struct MotionClassSpec {
    int id = 0;
    std::string name;
    Scalar speed = 0;       // m/s
    Scalar gait_hz = 1;     // Hz
    Scalar amplitude = 0;   // m
    Scalar turn_rate = 0;   // rad/s
    Scalar speed_jitter = 0;
    Scalar gait_jitter = 0;
    Scalar amp_jitter = 0;
    Scalar turn_jitter = 0;
    Scalar phase_jitter = 0;  // rad, uniform +/- on the gait phase offset

    void validate() const;
};

// The six stock classes: idle, walk, run, circle, wave, squat.
std::vector<MotionClassSpec> standard_classes(bool with_jitter = true);
const MotionClassSpec& class_by_name(const std::vector<MotionClassSpec>& classes, const std::string& name);

struct PairClassSpec {
    int id = 0;
    std::string name;        // approach | mirror | circle_each_other | follow
    Scalar start_distance = 4.0;  // m (approach: initial separation; others: constant)
    MotionClassSpec actor_a;
    MotionClassSpec actor_b;

    void validate() const;
};

std::vector<PairClassSpec> standard_pair_classes();

struct NormStats {
    Vec mean;
    Vec std;
    std::vector<int> clamped_channels;  // empirical std < 1e-6, clamped to 1e-6

    void validate() const;
};

struct Dataset {
    FeatureLayout layout;
    std::vector<Motion> motions;
    NormStats stats;
};

// Global initial placement of one actor (applied to its canonicalized motion).
struct PairSample {
    Motion a, b;
    PlanarPose d_a, d_b;
    int pair_class = 0;
};

struct PairDataset {
    FeatureLayout layout;
    std::vector<PairSample> pairs;
    NormStats stats;    // motion channels, shared by both actors
    Vec d_mean, d_std;  // initial-pose (x, z, heading) stats
};

Motion generate_motion(const MotionClassSpec& spec, int frames, uint64_t seed, uint32_t sample_index = 0);
PairSample generate_pair(const PairClassSpec& spec, int frames, uint64_t seed, uint32_t sample_index = 0);

// Designed inter-actor distance at frame f for a pair class with zero jitter.
Scalar pair_template_distance(const PairClassSpec& spec, int frame, int fps);

Dataset build_dataset(const std::vector<MotionClassSpec>& classes, int samples_per_class,
                      int frames, uint64_t seed);
PairDataset build_pair_dataset(const std::vector<PairClassSpec>& classes, int samples_per_class,
                               int frames, uint64_t seed);

NormStats compute_stats(const std::vector<Motion>& motions);
Motion normalize(const Motion& m, const NormStats& stats);
Motion denormalize(const Motion& m, const NormStats& stats);

// Mean absolute value of each velocity channel — the feature space of the
// nearest-centroid separability oracle.
Vec velocity_features(const Motion& m);

struct CentroidClassifier {
    std::vector<int> labels;
    std::vector<Vec> centroids;  // in standardized feature space
    Vec feat_mean, feat_std;     // fitted on training features

    static CentroidClassifier fit(const std::vector<Motion>& train);
    int predict(const Motion& m) const;
};

}  // namespace compose
