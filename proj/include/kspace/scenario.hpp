#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "kspace/numeric.hpp"

// Synthetic driving maneuvers: hand-made 10-waypoint templates in the ego
// frame (forward = +x, meters) plus Gaussian jitter, each paired with a
// low-dimensional pseudo-feature.

namespace kspace {

struct ManeuverArchetype {
    std::string name;
    Vector trajectory;  // 20 values, (x, y) per waypoint
    double waypoint_noise_sigma = 0.0;
    Vector feature_center;
    double feature_noise_sigma = 0.0;

    void validate() const;
};

/// 0 = stopped, 1 = slow, 2 = cruising, from the last waypoint spacing.
int speed_class(const Vector& trajectory);
inline constexpr int kSpeedClasses = 3;

/// The five built-in archetypes in curriculum order: emergency_brake,
/// traffic_sign_stop, merge, overtake, give_way. Feature centers are
/// 6 * e_a in `feature_dim` dimensions (needs feature_dim >= 5).
std::vector<ManeuverArchetype> default_archetypes(int feature_dim = 16, double waypoint_sigma = 0.2,
                                                  double feature_sigma = 1.0);

struct TaskSpec {
    int task_id = 0;
    std::vector<ManeuverArchetype> archetypes;
    std::vector<int> counts;  // parallel to archetypes
    std::uint64_t seed = 0;

    void validate() const;
};

struct TaskData {
    int task_id = 0;
    RowMatrix trajectories;  // n x 20
    RowMatrix features;      // n x d
    std::vector<int> labels;  // index into the spec's archetypes
    std::vector<int> speed_classes;
    std::vector<std::string> names;  // archetype names, by label

    int size() const { return static_cast<int>(labels.size()); }
};

/// Samples are shuffled; sample i draws its noise from its own counter-based
/// stream, so output depends only on the spec.
TaskData generate_task(const TaskSpec& spec);

inline const std::vector<double> kDefaultVolumeProfile{184, 146, 92, 78, 11};

struct CurriculumOptions {
    std::vector<double> profile = kDefaultVolumeProfile;
    int min_count = 20;  // smallest task gets this many samples, others scale with it
    bool reverse = false;
    std::uint64_t seed = 7;
    int feature_dim = 16;
    double waypoint_sigma = 0.2;
    double feature_sigma = 1.0;
};

/// One task per archetype in profile order; the i-th profile entry sizes the
/// i-th built-in archetype. A profile shorter than five uses the first ones.
std::vector<TaskSpec> make_default_curriculum(const CurriculumOptions& options = {});

/// One JSON object per line: task_id, label, archetype, trajectory, feature.
void write_jsonl(std::ostream& os, const TaskData& data);

}  // namespace kspace
