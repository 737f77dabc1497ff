#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kspace/memovb.hpp"

namespace kspace {

enum class SpaceLabel { feature, trajectory };

std::string to_string(SpaceLabel label);
SpaceLabel parse_space_label(const std::string& text);

inline constexpr int kFeatureDim = 2816;     // 11 tokens x 256 channels, flattened
inline constexpr int kWaypoints = 10;
inline constexpr int kTrajectoryDim = 2 * kWaypoints;  // (x, y) per waypoint, time-major

/// Per-dimension affine map applied to inputs before clustering.
struct Standardization {
    Vector mean;
    Vector scale;
};

struct KnowledgeSpace {
    SpaceLabel label = SpaceLabel::trajectory;
    int dim = kTrajectoryDim;
    MixtureState state;
    MemoStore memo;
    double anchor_weight_floor = 0.0;
    /// When set, the first update fixes a standardization from its data and
    /// every later batch is mapped through it. Anchors come back in raw units.
    bool standardize = false;
    std::optional<Standardization> standardization;
    HyperSpec hyper_spec;

    int num_components() const { return state.num_components(); }
    void validate() const;
};

KnowledgeSpace make_space(SpaceLabel label, int dim, double anchor_weight_floor = 0.0, bool standardize = false);

struct AnchorSet {
    RowMatrix anchors;
    Vector weights;
    std::vector<int> created_task;

    int size() const { return static_cast<int>(anchors.rows()); }
};

/// Folds a task's batches into the space. Batch ids are "t<task>/b<index>",
/// so presenting a task again replaces its earlier caches.
FitReport update_space(KnowledgeSpace& space, const std::vector<RowMatrix>& batches, const InferenceConfig& config,
                       int task_id);

AnchorSet extract_anchors(const KnowledgeSpace& space);

struct AnchorDrift {
    /// Distance for every anchor of `before`; NaN where it was removed.
    std::vector<double> distance;
    std::vector<int> removed;

    double max_distance() const;
};

/// Matches anchors by (created_task, ordinal within that task).
AnchorDrift anchor_drift(const AnchorSet& before, const AnchorSet& after);

inline constexpr int kSnapshotVersion = 1;

std::string snapshot_to_string(const KnowledgeSpace& space);
KnowledgeSpace snapshot_from_string(const std::string& text);
void save_snapshot(const KnowledgeSpace& space, const std::filesystem::path& path);
KnowledgeSpace load_snapshot(const std::filesystem::path& path);

/// Malformed or incompatible snapshot document.
class SnapshotError : public InvalidArgument {
  public:
    using InvalidArgument::InvalidArgument;
};

}  // namespace kspace
