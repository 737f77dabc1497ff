#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kspace/decoder.hpp"
#include "kspace/memovb.hpp"
#include "kspace/metrics.hpp"
#include "kspace/scenario.hpp"

// Experiment configuration shared by every command. Every field has a
// default; unknown keys anywhere are rejected.

namespace kspace {

struct SpacesSection {
    double kappa0 = 1.0;
    double a0 = 1.0;
    double alpha = 1.0;
    double b0_floor = 1e-6;
    double anchor_weight_floor = 0.0;
    bool standardize_feature = false;
    bool standardize_trajectory = false;
    // rows per memoized batch; a task is split into ceil(n / batch_size) batches
    int batch_size = 200;
};

struct DecoderSection {
    int width = 16;
    double temperature = 1.0;
    int top_k = 1;
    bool use_feature_enhancer = true;
    bool use_trajectory_enhancer = true;
    TrainConfig train;
    /// Lifelong success needs the right anchor and ADE below this (meters).
    double success_ade = 1.0;
    /// Size of the standalone decoder task (train-decoder).
    int archetypes = 3;
    int per_archetype = 100;
    int heldout_per_archetype = 100;
};

struct CurriculumSection {
    std::vector<double> profile = kDefaultVolumeProfile;
    int min_count = 20;
    bool reverse = false;
    int feature_dim = 16;
    double waypoint_sigma = 0.2;
    double feature_sigma = 1.0;
    int heldout_per_task = 50;
};

struct MetricsSection {
    ZeroPolicy zero_policy = ZeroPolicy::skip;
};

struct OutputsSection {
    std::string directory = "out";  // empty means the working directory
};

struct RunConfig {
    SpacesSection spaces;
    InferenceConfig inference = default_inference();
    DecoderSection decoder;
    CurriculumSection curriculum;
    MetricsSection metrics;
    OutputsSection outputs;
    std::uint64_t seed = 7;

    static InferenceConfig default_inference();
    void validate() const;
};

/// Throws InvalidArgument naming the offending key path.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

/// Canonical JSON of the fully resolved config (sorted keys, every field).
std::string run_config_json(const RunConfig& c);

/// FNV-1a of the canonical JSON without the output directory, 16 hex digits.
std::string config_hash(const RunConfig& c);

/// Independent stream seeds for the parts of an experiment.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

}  // namespace kspace
