#include "kspace/metrics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace kspace {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

[[noreturn]] void fail(int line, const std::string& what) {
    throw ParseError("line " + std::to_string(line) + ": " + what);
}

void need_square(const SRMatrix& m) { m.validate(); }

}  // namespace

void SRMatrix::validate() const {
    const Eigen::Index n = values.rows();
    if (n < 2 || values.cols() != n) throw InvalidArgument("success-rate matrix must be square with N >= 2");
    if (static_cast<Eigen::Index>(task_names.size()) != n || static_cast<Eigen::Index>(snapshot_labels.size()) != n)
        throw InvalidArgument("success-rate matrix: label counts do not match N");
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            const double v = values(i, j);
            if (!std::isfinite(v) || v < 0.0 || v > 100.0)
                throw InvalidArgument("success-rate matrix: entry (" + std::to_string(i + 1) + "," +
                                      std::to_string(j + 1) + ") outside [0, 100]");
        }
}

SRMatrix parse_sr_matrix(std::istream& in) {
    SRMatrix m;
    std::vector<std::vector<double>> rows;
    std::string raw;
    int line_no = 0;
    bool have_header = false;
    std::size_t width = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        const auto cells = split(line);
        if (!have_header) {
            if (cells.size() < 3) fail(line_no, "header needs a label column and at least two tasks");
            m.task_names.assign(cells.begin() + 1, cells.end());
            width = cells.size();
            have_header = true;
            continue;
        }
        if (cells.size() != width)
            fail(line_no, "expected " + std::to_string(width) + " fields, found " + std::to_string(cells.size()));
        m.snapshot_labels.push_back(cells[0]);
        std::vector<double> row;
        for (std::size_t c = 1; c < cells.size(); ++c) {
            const std::string& s = cells[c];
            double v = 0.0;
            const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
            if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size())
                fail(line_no, "field " + std::to_string(c + 1) + " is not a number: '" + s + "'");
            if (!std::isfinite(v) || v < 0.0 || v > 100.0)
                fail(line_no, "field " + std::to_string(c + 1) + " = " + s + " outside [0, 100]");
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    if (!have_header) throw ParseError("line " + std::to_string(line_no) + ": empty input, no header");
    const std::size_t n = m.task_names.size();
    if (rows.size() != n)
        throw ParseError("line " + std::to_string(line_no) + ": matrix is not square (" + std::to_string(rows.size()) +
                         " rows for " + std::to_string(n) + " tasks)");
    m.values.resize(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m.values(i, j) = rows[i][j];
    m.validate();
    return m;
}

SRMatrix parse_sr_matrix_string(const std::string& text) {
    std::istringstream in(text);
    return parse_sr_matrix(in);
}

SRMatrix load_sr_matrix(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return parse_sr_matrix(in);
}

double forgetting_ratio(const SRMatrix& m, ZeroPolicy policy, std::vector<SkippedTerm>* skipped) {
    need_square(m);
    const int n = m.size();
    CompensatedSum acc;
    for (int i = 0; i < n - 1; ++i) {
        const double d = m.values(i, i);
        if (d == 0.0) {
            if (policy == ZeroPolicy::strict)
                throw NumericalError("FR: SR_" + std::to_string(i + 1) + "," + std::to_string(i + 1) + " is zero");
            if (skipped) skipped->push_back({"FR", i + 1, i + 1, "zero diagonal"});
            continue;
        }
        acc.add((d - m.values(n - 1, i)) / d);
    }
    // skipped terms still count in the 1/(N-1) normalizer
    return 100.0 * acc.value() / (n - 1);
}

double process_forgetting_ratio(const SRMatrix& m, std::vector<SkippedTerm>* skipped) {
    need_square(m);
    const int n = m.size();
    CompensatedSum outer;
    for (int j = 0; j < n - 1; ++j) {
        CompensatedSum inner;
        double best = m.values(0, j);
        for (int i = 1; i < n; ++i) {
            best = std::max(best, m.values(i - 1, j));
            if (i <= j) continue;  // rows above the diagonal only feed the running max
            if (best == 0.0) {
                if (skipped) skipped->push_back({"PFR", i + 1, j + 1, "zero historical best"});
                continue;
            }
            inner.add((best - m.values(i, j)) / best);
        }
        outer.add(inner.value() / (n - 1 - j));
    }
    return 100.0 * outer.value() / (n - 1);
}

double forward_transfer(const SRMatrix& m) {
    need_square(m);
    const int n = m.size();
    CompensatedSum outer;
    for (int i = 0; i < n - 1; ++i) {
        CompensatedSum inner;
        for (int j = i + 1; j < n; ++j) inner.add(m.values(i, j));
        outer.add(inner.value() / (n - 1 - i));
    }
    return outer.value() / (n - 1);
}

double backward_transfer(const SRMatrix& m) {
    need_square(m);
    const int n = m.size();
    CompensatedSum outer;
    for (int i = 1; i < n; ++i) {
        CompensatedSum inner;
        for (int j = 0; j < i; ++j) inner.add(m.values(i, j));
        outer.add(inner.value() / i);
    }
    return outer.value() / (n - 1);
}

MetricsReport compute_metrics(const SRMatrix& m, ZeroPolicy policy) {
    MetricsReport r;
    r.fr = forgetting_ratio(m, policy, &r.skipped);
    r.pfr = process_forgetting_ratio(m, &r.skipped);
    if (policy == ZeroPolicy::strict)
        for (const SkippedTerm& s : r.skipped)
            if (s.metric == "PFR")
                throw NumericalError("PFR: historical best for (" + std::to_string(s.i) + "," + std::to_string(s.j) +
                                     ") is zero");
    r.ft = forward_transfer(m);
    r.bt = backward_transfer(m);
    return r;
}

double overall_mean(const std::vector<double>& values) {
    if (values.empty()) throw InvalidArgument("overall_mean: no values");
    CompensatedSum acc;
    for (double v : values) acc.add(v);
    return acc.value() / static_cast<double>(values.size());
}

double round_half_even(double x, int decimals) {
    if (!std::isfinite(x)) return x;
    const double scale = std::pow(10.0, decimals);
    const double y = x * scale;
    const double f = std::floor(y);
    const double frac = y - f;
    // products like 40.245 * 100 land a few ulps off the tie
    const double tie_tol = 1e-9 * std::max(1.0, std::abs(y));
    double r;
    if (std::abs(frac - 0.5) <= tie_tol)
        r = std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
    else
        r = std::round(y);
    return r / scale;
}

std::string format_fixed(double x, int decimals) {
    const double r = round_half_even(x, decimals);
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(decimals);
    os << (r == 0.0 ? 0.0 : r);  // no "-0.00"
    return os.str();
}

std::string metrics_csv(const MetricsReport& r) {
    std::ostringstream os;
    os << "metric,value\n";
    os << "FR," << format_fixed(r.fr) << '\n';
    os << "PFR," << format_fixed(r.pfr) << '\n';
    os << "FT," << format_fixed(r.ft) << '\n';
    os << "BT," << format_fixed(r.bt) << '\n';
    for (const SkippedTerm& s : r.skipped) os << "skipped," << s.metric << ',' << s.i << ',' << s.j << ',' << s.reason << '\n';
    return os.str();
}

}  // namespace kspace
