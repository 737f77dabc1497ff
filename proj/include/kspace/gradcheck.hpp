#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kspace/numeric.hpp"

namespace kspace {

inline constexpr double kGradNormFloor = 1e-4;
// Small enough that probes rarely straddle a ReLU kink, large enough that
// roundoff stays well under the floor.
inline constexpr double kGradStep = 2e-6;

/// ||a - b|| / max(||a||, ||b||, floor), Frobenius norms. The floor keeps
/// tensors whose whole gradient is tiny from being judged on finite-difference
/// roundoff alone; below it the check is absolute.
double relative_error(const Matrix& a, const Matrix& b, double floor = kGradNormFloor);

struct GradCheckEntry {
    std::string name;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const;
    bool passed(double tol) const { return max_rel_error() <= tol; }
};

struct NamedTensor {
    std::string name;
    Matrix* value;
};

/// Central differences of `loss` over every entry of every tensor, compared
/// tensor by tensor with `analytic` (same order and shapes). Tensors are
/// restored after each probe.
GradCheckReport check_gradients(const std::function<double()>& loss, const std::vector<NamedTensor>& params,
                                const std::vector<Matrix>& analytic, double step = kGradStep);

Matrix numeric_gradient(const std::function<double()>& loss, Matrix& param, double step = kGradStep);

}  // namespace kspace
