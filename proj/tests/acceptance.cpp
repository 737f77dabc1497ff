// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include <omp.h>

#include "kspace/gradcheck_suite.hpp"
#include "kspace/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kspace;

namespace {

// Pinned tolerances.
constexpr double kMetricTol = 0.01;
constexpr double kMetricSeconds = 1.0;
constexpr double kBtTol = 1e-10;  // vs literal-sum oracle, values are O(100)
constexpr double kMeanTol = 0.01;
constexpr double kAriMin = 0.95;
constexpr int kRecoveryPasses = 20;
constexpr double kRecoverySeconds = 10.0;
constexpr double kMemoTol = 1e-6;
constexpr int kRevisits = 50;
constexpr double kElboRelTol = 1e-6;
constexpr double kMergeTol = 1e-6;
constexpr double kDriftMax = 0.5;
constexpr double kGradTol = 1e-4;
constexpr int kGradSeeds = 20;
constexpr double kAccuracyMin = 0.90;
constexpr double kAdeMax = 0.5;
constexpr double kDecoderSeconds = 60.0;
constexpr double kKlTol = 1e-12;
constexpr double kIdentityTol = 1e-12;

const std::string kData = KSPACE_DATA_DIR;
const std::string kCli = KSPACE_CLI;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
    std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", n, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(double x, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << x;
    return os.str();
}

void guarded(int n, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        report(n, false, std::string("exception: ") + e.what());
    }
}

// Literal transcription of the backward-transfer sum.
double brute_force_bt(const RowMatrix& s) {
    const int n = static_cast<int>(s.rows());
    double outer = 0.0;
    for (int i = 2; i <= n; ++i) {
        double inner = 0.0;
        for (int j = 1; j <= i - 1; ++j) inner += s(i - 1, j - 1);
        outer += inner / (i - 1);
    }
    return outer / (n - 1);
}

void criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    const SRMatrix base = load_sr_matrix(kData + "/sr_baseline.csv");
    const SRMatrix ours = load_sr_matrix(kData + "/sr_ours.csv");
    const MetricsReport b = compute_metrics(base, ZeroPolicy::strict);
    const MetricsReport o = compute_metrics(ours, ZeroPolicy::strict);
    const double elapsed = seconds_since(t0);
    const double expected[6] = {44.50, 40.25, 41.11, 33.97, 29.80, 42.88};
    const double got[6] = {b.fr, b.pfr, b.ft, o.fr, o.pfr, o.ft};
    bool ok = elapsed < kMetricSeconds;
    for (int i = 0; i < 6; ++i) ok = ok && std::abs(got[i] - expected[i]) <= kMetricTol;
    const double bt_b = brute_force_bt(base.values), bt_o = brute_force_bt(ours.values);
    const double bt_err = std::max(std::abs(b.bt - bt_b), std::abs(o.bt - bt_o));
    ok = ok && bt_err <= kBtTol;
    report(1, ok,
           "baseline FR/PFR/FT " + format_fixed(b.fr) + "/" + format_fixed(b.pfr) + "/" + format_fixed(b.ft) +
               ", ours " + format_fixed(o.fr) + "/" + format_fixed(o.pfr) + "/" + format_fixed(o.ft) + " (tol " +
               fmt(kMetricTol) + "); BT " + format_fixed(b.bt) + "/" + format_fixed(o.bt) + " vs oracle, |diff| " +
               fmt(bt_err) + " (tol " + fmt(kBtTol) + "); " + fmt(elapsed) + " s");
}

std::vector<double> read_column(const std::string& path, int col) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    std::getline(in, line);
    std::vector<double> out;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        for (int c = 0; c <= col; ++c) std::getline(ss, cell, ',');
        out.push_back(std::stod(cell));
    }
    return out;
}

void criterion2() {
    const double b = overall_mean(read_column(kData + "/ds_columns.csv", 1));
    const double o = overall_mean(read_column(kData + "/ds_columns.csv", 2));
    const bool ok = std::abs(b - 70.55) <= kMeanTol && std::abs(o - 74.69) <= kMeanTol;
    report(2, ok, "mean DS baseline " + format_fixed(b) + " (70.55), ours " + format_fixed(o) + " (74.69), tol " +
                      fmt(kMeanTol));
}

// 3 blobs in 2-d, sigma 1, 300 points each, shuffled, 6 batches.
std::vector<Batch> blob_fixture(std::uint64_t seed, std::vector<int>& labels, RowMatrix& all) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    const double means[3][2] = {{-4, 0}, {4, 0}, {0, 8}};
    std::vector<int> order(900);
    for (int i = 0; i < 900; ++i) order[i] = i / 300;
    std::shuffle(order.begin(), order.end(), rng);
    all.resize(900, 2);
    labels = order;
    for (int i = 0; i < 900; ++i)
        for (int j = 0; j < 2; ++j) all(i, j) = means[order[i]][j] + g(rng);
    std::vector<Batch> batches;
    for (int b = 0; b < 6; ++b) batches.push_back({"b" + std::to_string(b), all.middleRows(150 * b, 150)});
    return batches;
}

std::vector<int> assign(const MixtureState& s, const RowMatrix& x) {
    std::vector<int> out(x.rows());
    for (int i = 0; i < x.rows(); ++i) out[i] = predictive_assign(s, x.row(i).transpose()).component;
    return out;
}

void criterion3() {
    std::vector<int> labels;
    RowMatrix x;
    const auto batches = blob_fixture(2024, labels, x);
    InferenceConfig cfg;
    cfg.passes = kRecoveryPasses;
    cfg.prune_count_threshold = 5.0;
    const auto t0 = std::chrono::steady_clock::now();
    const FitResult fit = fit_stream({}, {}, batches, cfg, 0);
    const double elapsed = seconds_since(t0);
    const double ari = adjusted_rand_index(labels, assign(fit.state, x));
    const bool ok = fit.report.final_k == 3 && ari >= kAriMin && elapsed < kRecoverySeconds;
    report(3, ok,
           "final_K " + std::to_string(fit.report.final_k) + ", ARI " + fmt(ari) + " (min " + fmt(kAriMin) + "), " +
               std::to_string(fit.report.births_accepted) + " births, " + fmt(elapsed) + " s (limit " +
               fmt(kRecoverySeconds) + ")");
}

double max_field_diff(const SuffStats& a, const SuffStats& b) {
    double d = (a.count - b.count).cwiseAbs().maxCoeff();
    d = std::max(d, (a.sum - b.sum).cwiseAbs().maxCoeff());
    d = std::max(d, (a.sumsq - b.sumsq).cwiseAbs().maxCoeff());
    if (a.assign_entropy.size() > 0) d = std::max(d, (a.assign_entropy - b.assign_entropy).cwiseAbs().maxCoeff());
    return d;
}

void criterion4() {
    std::vector<int> labels;
    RowMatrix x;
    const auto batches = blob_fixture(77, labels, x);
    InferenceConfig cfg;
    cfg.passes = 3;
    FitResult fit = fit_stream({}, {}, batches, cfg, 0);
    MixtureState state = fit.state;
    MemoStore memo = fit.memo;
    std::mt19937_64 rng(5);
    double worst = 0.0;
    for (int step = 0; step < kRevisits; ++step) {
        const Batch& b = batches[rng() % batches.size()];
        memo.replace(b.id, accumulate_stats(b.data, local_step(state, b.data)));
        state = global_step(state, memo.aggregate());
        SuffStats sum = SuffStats::zeros(memo.num_components(), memo.dim());
        for (const BatchCache& c : memo.caches()) {
            sum.count += c.stats.count;
            sum.sum += c.stats.sum;
            sum.sumsq += c.stats.sumsq;
            sum.assign_entropy += c.stats.assign_entropy;
        }
        worst = std::max(worst, max_field_diff(sum, memo.aggregate()));
    }
    report(4, worst <= kMemoTol,
           std::to_string(kRevisits) + " random revisits, max |aggregate - sum of caches| " + fmt(worst) + " (tol " +
               fmt(kMemoTol) + ")");
}

bool monotone(const std::vector<double>& trace, double& worst_drop) {
    bool ok = true;
    for (std::size_t p = 1; p < trace.size(); ++p) {
        const double drop = (trace[p - 1] - trace[p]) / std::max(1.0, std::abs(trace[p - 1]));
        worst_drop = std::max(worst_drop, drop);
        ok = ok && drop <= kElboRelTol;
    }
    return ok;
}

void criterion5() {
    std::vector<std::vector<Batch>> fixtures;
    for (std::uint64_t seed : {2024ULL, 77ULL}) {
        std::vector<int> labels;
        RowMatrix x;
        fixtures.push_back(blob_fixture(seed, labels, x));
    }
    {
        std::mt19937_64 rng(47);
        std::normal_distribution<double> g(0.0, 1.0);
        RowMatrix left(200, 1), right(200, 1);
        for (int i = 0; i < 200; ++i) {
            left(i, 0) = -5.0 + g(rng);
            right(i, 0) = 5.0 + g(rng);
        }
        fixtures.push_back({{"left", left}, {"right", right}});
    }
    const CurriculumData data = make_curriculum_data(RunConfig{});
    for (const TaskData& t : data.train) fixtures.push_back({{"t", t.trajectories}});

    bool ok = true;
    double worst_drop = 0.0, worst_merge = std::numeric_limits<double>::infinity();
    int merges = 0;
    for (const auto& f : fixtures) {
        InferenceConfig still;
        still.passes = 15;
        still.birth_enabled = false;
        still.merge_enabled = false;
        ok = monotone(fit_stream({}, {}, f, still, 0).report.elbo_trace, worst_drop) && ok;

        InferenceConfig moving;
        moving.passes = 15;
        moving.birth_pool_min = 4;
        for (double d : fit_stream({}, {}, f, moving, 0).report.merge_deltas) {
            ++merges;
            worst_merge = std::min(worst_merge, d);
            ok = ok && d >= -kMergeTol;
        }
    }
    // continuing an existing mixture with moves off
    {
        RunConfig c;
        c.inference.birth_enabled = false;
        c.inference.merge_enabled = false;
        SpacePair spaces = make_spaces(RunConfig{});
        fit_task(spaces, data.train[0], RunConfig{});
        fit_task(spaces, data.train[1], RunConfig{});
        const TaskFitRow row = fit_task(spaces, data.train[2], c);
        ok = monotone(row.trajectory.elbo_trace, worst_drop) && ok;
        ok = monotone(row.feature.elbo_trace, worst_drop) && ok;
    }
    report(5, ok,
           std::to_string(fixtures.size() + 1) + " fixtures; worst relative per-pass ELBO drop " + fmt(worst_drop) +
               " (tol " + fmt(kElboRelTol) + "); " + std::to_string(merges) + " accepted merges, worst delta " +
               fmt(worst_merge) + " (min " + fmt(-kMergeTol) + ")");
}

void criterion6() {
    const RunConfig c;
    const CurriculumFit fit = fit_curriculum(make_curriculum_data(c), c);
    bool nondecreasing = true;
    std::string ks;
    for (std::size_t t = 0; t < fit.rows.size(); ++t) {
        ks += (t ? "," : "") + std::to_string(fit.rows[t].k_trajectory);
        if (t > 0) nondecreasing = nondecreasing && fit.rows[t].k_trajectory >= fit.rows[t - 1].k_trajectory;
    }
    const AnchorSet first = extract_anchors(fit.snapshots.front().trajectory);
    const AnchorDrift d = anchor_drift(first, extract_anchors(fit.snapshots.back().trajectory));
    const double drift = d.max_distance();
    const bool ok = nondecreasing && d.removed.empty() && first.size() >= 1 && drift <= kDriftMax;
    report(6, ok,
           "K_t per task " + ks + "; " + std::to_string(first.size()) + " task-1 anchors, " +
               std::to_string(d.removed.size()) + " removed, max drift " + fmt(drift) + " (max " + fmt(kDriftMax) +
               ")");
}

void criterion7() {
    double worst = 0.0;
    std::string where;
    int checks = 0;
    for (int s = 0; s < kGradSeeds; ++s) {
        GradSuiteOptions o;
        o.seed = static_cast<std::uint64_t>(s);
        o.tolerance = kGradTol;
        for (const GradSuiteRow& r : run_gradcheck_suite(o)) {
            ++checks;
            if (r.rel_error > worst) {
                worst = r.rel_error;
                where = r.check + "/" + r.tensor + " seed " + std::to_string(s);
            }
        }
    }
    report(7, worst <= kGradTol,
           std::to_string(checks) + " tensor checks over " + std::to_string(kGradSeeds) +
               " seeds, max relative error " + fmt(worst) + " at " + where + " (tol " + fmt(kGradTol) + ")");
}

void criterion8() {
    const RunConfig c;
    const auto t0 = std::chrono::steady_clock::now();
    const auto [train, held] = make_decoder_task(c);
    SpacePair spaces = make_spaces(c);
    fit_task(spaces, train, c);
    const DecoderRun run = run_decoder_experiment(c, spaces.trajectory, &spaces.feature);
    const double elapsed = seconds_since(t0);
    const bool ok = run.heldout.accuracy >= kAccuracyMin && run.heldout.ade < kAdeMax && elapsed < kDecoderSeconds;
    report(8, ok,
           std::to_string(run.anchors.trajectory.rows()) + " TKS anchors, held-out accuracy " +
               fmt(run.heldout.accuracy) + " (min " + fmt(kAccuracyMin) + "), ADE " + fmt(run.heldout.ade) +
               " m (max " + fmt(kAdeMax) + "), " + std::to_string(c.decoder.train.steps) + " steps in " +
               fmt(elapsed) + " s (limit " + fmt(kDecoderSeconds) + ")");
}

void criterion9() {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0.0, 2.0);
    Matrix trajs(4, 20);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 20; ++j) trajs(i, j) = g(rng);
    Vector y(20);
    for (int j = 0; j < 20; ++j) y[j] = g(rng);
    const double tau = 1.0;

    // predicted distribution equal to the target one
    DecodeOutput out;
    out.trajs = trajs;
    out.offsets = Matrix::Zero(4, 20);
    out.temperature = tau;
    out.logits.resize(4);
    for (int k = 0; k < 4; ++k) out.logits[k] = -(trajs.row(k).transpose() - y).norm() / tau;
    const Vector e = (out.logits.array() - out.logits.maxCoeff()).exp();
    out.probs = e / e.sum();
    const double kl = traj_loss(out, y, tau).l_prob;

    DecodeOutput exact = out;
    exact.trajs.row(2) = y.transpose();
    const double best = traj_loss(exact, y, tau).l_best;

    const double sl1 = mean_smooth_l1(Vector::Constant(20, 2.0));
    const bool ok = std::abs(kl) <= kKlTol && std::abs(best) <= kIdentityTol && std::abs(sl1 - 1.5) <= kIdentityTol;
    report(9, ok, "KL(p||p) " + fmt(kl) + " (tol " + fmt(kKlTol) + "), l_best on exact match " + fmt(best) +
                      ", smooth-L1(2) " + fmt(sl1, 17));
}

int run_cli(const std::string& args) {
    const int status = std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool same_tree(const fs::path& a, const fs::path& b, int& files) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename().string());
    std::size_t count_b = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++count_b;
    if (names.size() != count_b || names.empty()) return false;
    for (const auto& n : names) {
        std::ifstream fa(a / n, std::ios::binary), fb(b / n, std::ios::binary);
        std::ostringstream sa, sb;
        sa << fa.rdbuf();
        sb << fb.rdbuf();
        if (!fb || sa.str() != sb.str()) return false;
        ++files;
    }
    return true;
}

void criterion10() {
    const fs::path root = fs::temp_directory_path() / "kspace_acceptance";
    fs::remove_all(root);
    const std::string fit_dir = (root / "fit_ref").string();
    if (run_cli("fit --out " + fit_dir) != 0) throw std::runtime_error("reference fit failed");
    const std::vector<std::pair<std::string, std::string>> commands{
        {"fit", "fit"},
        {"anchors", "anchors --snapshot " + fit_dir + "/tks_task4.json"},
        {"metrics", "metrics --matrix " + kData + "/sr_baseline.csv"},
        {"train-decoder", "train-decoder --tks " + fit_dir + "/tks_task2.json --fks " + fit_dir + "/fks_task2.json"},
        {"gradcheck", "gradcheck"},
        {"lifelong-report", "lifelong-report"},
    };
    bool ok = true;
    std::string detail;
    for (const auto& [name, args] : commands) {
        const fs::path a = root / (name + "_a"), b = root / (name + "_b");
        const int ca = run_cli(args + " --seed 7 --out " + a.string());
        const int cb = run_cli(args + " --seed 7 --out " + b.string());
        int files = 0;
        const bool same = ca == 0 && cb == 0 && same_tree(a, b, files);
        ok = ok && same;
        detail += (detail.empty() ? "" : ", ") + name + (same ? " " + std::to_string(files) + " files identical" : " DIFFERS");
    }
    report(10, ok, detail);
}

}  // namespace

int main() {
    omp_set_num_threads(1);  // timings are single-core figures
    guarded(1, criterion1);
    guarded(2, criterion2);
    guarded(3, criterion3);
    guarded(4, criterion4);
    guarded(5, criterion5);
    guarded(6, criterion6);
    guarded(7, criterion7);
    guarded(8, criterion8);
    guarded(9, criterion9);
    guarded(10, criterion10);
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
