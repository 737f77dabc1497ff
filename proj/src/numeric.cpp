#include "kspace/numeric.hpp"

#include <algorithm>
#include <limits>
#include <map>

#include <boost/math/special_functions/digamma.hpp>

namespace kspace {

double digamma(double x) { return boost::math::digamma(x); }

double log_beta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

double log_sum_exp(std::span<const double> v) {
    if (v.empty()) return -std::numeric_limits<double>::infinity();
    const double mx = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

double softmax_inplace(std::span<double> v) {
    const double lse = log_sum_exp(v);
    for (double& x : v) x = std::exp(x - lse);
    return lse;
}

double smooth_l1(double x, double beta) {
    const double ax = std::abs(x);
    return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
}

double smooth_l1_grad(double x, double beta) {
    if (std::abs(x) < beta) return x / beta;
    return x > 0 ? 1.0 : -1.0;
}

double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
    if (a.size() != b.size()) throw InvalidArgument("adjusted_rand_index: label vectors differ in length");
    const double n = static_cast<double>(a.size());
    if (a.size() < 2) return 1.0;

    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> rows, cols;
    for (std::size_t i = 0; i < a.size(); ++i) {
        joint[{a[i], b[i]}] += 1.0;
        rows[a[i]] += 1.0;
        cols[b[i]] += 1.0;
    }
    auto choose2 = [](double m) { return 0.5 * m * (m - 1.0); };
    double index = 0.0, sum_rows = 0.0, sum_cols = 0.0;
    for (const auto& [_, c] : joint) index += choose2(c);
    for (const auto& [_, c] : rows) sum_rows += choose2(c);
    for (const auto& [_, c] : cols) sum_cols += choose2(c);
    const double expected = sum_rows * sum_cols / choose2(n);
    const double max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index == expected) return 1.0;
    return (index - expected) / (max_index - expected);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace kspace
