#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace kspace {

using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Eigen::MatrixXd;

/// Thrown for shape, dimension and precondition violations.
class InvalidArgument : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces a non-finite value.
class NumericalError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Thrown when a file cannot be opened, read or written.
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Neumaier compensated accumulator.
struct CompensatedSum {
    double sum = 0.0;
    double comp = 0.0;

    void add(double x) {
        const double t = sum + x;
        if (std::abs(sum) >= std::abs(x))
            comp += (sum - t) + x;
        else
            comp += (x - t) + sum;
        sum = t;
    }
    void add(const CompensatedSum& other) {
        add(other.sum);
        add(other.comp);
    }
    double value() const { return sum + comp; }
};

double digamma(double x);
double log_beta(double a, double b);
double log_sum_exp(std::span<const double> v);

/// In-place softmax with max subtraction. Returns log normalizer.
double softmax_inplace(std::span<double> v);

double smooth_l1(double x, double beta = 1.0);
double smooth_l1_grad(double x, double beta = 1.0);

/// Adjusted Rand index between two labelings of equal length.
double adjusted_rand_index(std::span<const int> a, std::span<const int> b);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace kspace
