#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kspace/gradcheck.hpp"

namespace kspace {

struct GradSuiteOptions {
    std::uint64_t seed = 0;
    int width = 8;
    int traj_anchors = 3;
    int feature_anchors = 2;
    int feature_dim = 6;
    double step = kGradStep;
    double tolerance = 1e-4;
    /// Test hook: perturbs the first analytic gradient entry of every check.
    bool corrupt = false;
};

struct GradSuiteRow {
    std::string check;   // attention, mlp, enhance, ffem, tfem, decoder, traj_loss, speed_loss, model
    std::string tensor;
    double rel_error = 0.0;
    bool passed = false;
};

/// Every analytic backward pass against central differences on random inputs.
std::vector<GradSuiteRow> run_gradcheck_suite(const GradSuiteOptions& options);

bool all_passed(const std::vector<GradSuiteRow>& rows);

}  // namespace kspace
