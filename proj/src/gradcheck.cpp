#include "kspace/gradcheck.hpp"

#include <algorithm>

namespace kspace {

double relative_error(const Matrix& a, const Matrix& b, double floor) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("relative_error: shape mismatch");
    const double denom = std::max({a.norm(), b.norm(), floor});
    return (a - b).norm() / denom;
}

double GradCheckReport::max_rel_error() const {
    double m = 0.0;
    for (const GradCheckEntry& e : entries) m = std::max(m, e.rel_error);
    return m;
}

Matrix numeric_gradient(const std::function<double()>& loss, Matrix& param, double step) {
    Matrix g(param.rows(), param.cols());
    for (Eigen::Index j = 0; j < param.cols(); ++j) {
        for (Eigen::Index i = 0; i < param.rows(); ++i) {
            const double saved = param(i, j);
            param(i, j) = saved + step;
            const double up = loss();
            param(i, j) = saved - step;
            const double down = loss();
            param(i, j) = saved;
            g(i, j) = (up - down) / (2.0 * step);
        }
    }
    return g;
}

GradCheckReport check_gradients(const std::function<double()>& loss, const std::vector<NamedTensor>& params,
                                const std::vector<Matrix>& analytic, double step) {
    if (params.size() != analytic.size()) throw InvalidArgument("check_gradients: parameter/gradient count mismatch");
    GradCheckReport report;
    for (std::size_t t = 0; t < params.size(); ++t) {
        const Matrix numeric = numeric_gradient(loss, *params[t].value, step);
        report.entries.push_back({params[t].name, relative_error(analytic[t], numeric)});
    }
    return report;
}

}  // namespace kspace
