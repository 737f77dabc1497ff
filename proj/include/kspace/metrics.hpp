#pragma once

#include <istream>
#include <string>
#include <vector>

#include "kspace/numeric.hpp"

// Lifelong-learning metrics over a success-rate matrix. Row i is the snapshot
// taken after training through task i, column j is task j; values in percent.

namespace kspace {

struct SRMatrix {
    RowMatrix values;
    std::vector<std::string> task_names;
    std::vector<std::string> snapshot_labels;

    int size() const { return static_cast<int>(values.rows()); }
    void validate() const;
};

/// Malformed success-rate CSV; the message names the line.
class ParseError : public InvalidArgument {
  public:
    using InvalidArgument::InvalidArgument;
};

/// Header "<label>,<task 1>,...,<task N>", then one row per snapshot.
/// Blank lines and lines starting with '#' are ignored.
SRMatrix parse_sr_matrix(std::istream& in);
SRMatrix parse_sr_matrix_string(const std::string& text);
SRMatrix load_sr_matrix(const std::string& path);

enum class ZeroPolicy { strict, skip };

struct SkippedTerm {
    std::string metric;
    int i = 0;  // 1-based, as in the formulas
    int j = 0;
    std::string reason;
};

struct MetricsReport {
    double fr = 0.0;
    double pfr = 0.0;
    double ft = 0.0;
    double bt = 0.0;
    std::vector<SkippedTerm> skipped;
};

/// (1/(N-1)) sum_{i<N} (SR_ii - SR_Ni) / SR_ii, in percent.
double forgetting_ratio(const SRMatrix& m, ZeroPolicy policy = ZeroPolicy::strict,
                        std::vector<SkippedTerm>* skipped = nullptr);

/// Deficit against the running best H_ij = max_{i'<i} SR_i'j, averaged over
/// rows below the diagonal, then over columns; in percent. H = 0 terms are
/// always skipped and recorded.
double process_forgetting_ratio(const SRMatrix& m, std::vector<SkippedTerm>* skipped = nullptr);

/// Mean over rows i < N of the mean of SR_ij for j > i.
double forward_transfer(const SRMatrix& m);

/// Mean over rows i >= 2 of the mean of SR_ij for j < i.
double backward_transfer(const SRMatrix& m);

MetricsReport compute_metrics(const SRMatrix& m, ZeroPolicy policy = ZeroPolicy::strict);

double overall_mean(const std::vector<double>& values);

/// Round half to even at `decimals` places, decided on the decimal string.
double round_half_even(double x, int decimals = 2);
std::string format_fixed(double x, int decimals = 2);

/// "metric,value" lines plus one "skipped,..." line per skipped term.
std::string metrics_csv(const MetricsReport& r);

}  // namespace kspace
