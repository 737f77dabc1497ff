// kspace: command-line front end.
// Exit codes: 0 ok, 1 gradient check failed, 2 IO, 3 invalid input, 4 non-finite.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "kspace/gradcheck_suite.hpp"
#include "kspace/pipeline.hpp"

namespace fs = std::filesystem;
using namespace kspace;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kIo = 2, kInvalid = 3, kNumerical = 4 };

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "JSON run configuration");
    cmd->add_option("--seed", c.seed, "overrides the config's seed");
    cmd->add_option("--out", c.out, "output directory (overrides outputs.directory)");
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.outputs.directory = c.out;
    cfg.validate();
    return cfg;
}

class Writer {
  public:
    explicit Writer(const RunConfig& cfg)
        : dir_(cfg.outputs.directory.empty() ? "." : cfg.outputs.directory), hash_(config_hash(cfg)) {
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec || !fs::is_directory(dir_)) throw IoError("cannot create output directory " + dir_.string());
        // the echo leaves out the directory so reruns elsewhere match byte for byte
        RunConfig echo = cfg;
        echo.outputs.directory.clear();
        write("config.json", run_config_json(echo) + "\n");
    }

    void write(const std::string& name, const std::string& body) const {
        const fs::path p = dir_ / name;
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + p.string());
        out << "# config_hash=" << hash_ << '\n' << body;
        if (!out) throw IoError("write failed for " + p.string());
    }

    const fs::path& dir() const { return dir_; }

  private:
    fs::path dir_;
    std::string hash_;
};

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Snapshot files written by `fit` start with a header comment line.
KnowledgeSpace read_snapshot(const std::string& path) {
    std::string text = read_text(path);
    while (!text.empty() && text[0] == '#') {
        const auto nl = text.find('\n');
        text = nl == std::string::npos ? std::string() : text.substr(nl + 1);
    }
    return snapshot_from_string(text);
}

std::string tensors_json(const DrivingModel& m) {
    nlohmann::ordered_json j;
    const auto names = m.tensor_names();
    const auto ts = m.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const Matrix& t = *ts[i];
        std::vector<double> data;
        for (Eigen::Index r = 0; r < t.rows(); ++r)
            for (Eigen::Index c = 0; c < t.cols(); ++c) data.push_back(t(r, c));
        j[names[i]] = {{"rows", t.rows()}, {"cols", t.cols()}, {"data", data}};
    }
    j["temperature"] = m.decoder.temperature;
    j["top_k"] = m.decoder.top_k;
    return j.dump() + "\n";
}

int cmd_fit(const Common& common) {
    const RunConfig cfg = resolve(common);
    const Writer w(cfg);
    const CurriculumData data = make_curriculum_data(cfg);
    const CurriculumFit fit = fit_curriculum(data, cfg);
    for (std::size_t t = 0; t < fit.snapshots.size(); ++t) {
        w.write("fks_task" + std::to_string(t) + ".json", snapshot_to_string(fit.snapshots[t].feature) + "\n");
        w.write("tks_task" + std::to_string(t) + ".json", snapshot_to_string(fit.snapshots[t].trajectory) + "\n");
    }
    w.write("k_growth.csv", k_growth_csv(fit.rows));
    w.write("anchor_drift.csv", anchor_drift_csv(fit.snapshots));
    std::cout << k_growth_csv(fit.rows);
    return kOk;
}

int cmd_anchors(const Common& common, const std::string& snapshot) {
    const RunConfig cfg = resolve(common);
    const KnowledgeSpace space = read_snapshot(snapshot);
    const Writer w(cfg);
    const std::string csv = anchors_csv(extract_anchors(space));
    w.write("anchors_" + fs::path(snapshot).stem().string() + ".csv", csv);
    std::cout << csv;
    return kOk;
}

int cmd_metrics(const Common& common, const std::string& matrix, const std::string& policy) {
    const RunConfig cfg = resolve(common);
    const SRMatrix m = parse_sr_matrix_string(read_text(matrix));
    const ZeroPolicy zp = policy == "skip" ? ZeroPolicy::skip : ZeroPolicy::strict;
    const MetricsReport r = compute_metrics(m, zp);
    const Writer w(cfg);
    w.write("metrics.csv", metrics_csv(r));
    std::cout << metrics_csv(r);
    return kOk;
}

int cmd_train_decoder(const Common& common, const std::string& tks_path, const std::string& fks_path) {
    const RunConfig cfg = resolve(common);
    const KnowledgeSpace tks = read_snapshot(tks_path);
    std::optional<KnowledgeSpace> fks;
    if (!fks_path.empty()) fks = read_snapshot(fks_path);
    const Writer w(cfg);
    const DecoderRun run = run_decoder_experiment(cfg, tks, fks ? &*fks : nullptr);
    w.write("loss_trace.csv", trace_csv(run.train.trace));
    w.write("model.json", tensors_json(run.train.model));
    const std::string report = eval_report_text(run.heldout, static_cast<int>(run.anchors.trajectory.rows()));
    w.write("eval.txt", report);
    std::cout << report;
    return kOk;
}

int cmd_gradcheck(const Common& common, GradSuiteOptions opt, int seeds) {
    const RunConfig cfg = resolve(common);
    const Writer w(cfg);
    std::ostringstream csv;
    csv << "seed,check,tensor,rel_error,status\n";
    bool ok = true;
    double worst = 0.0;
    for (int s = 0; s < seeds; ++s) {
        opt.seed = cfg.seed + static_cast<std::uint64_t>(s);
        const auto rows = run_gradcheck_suite(opt);
        ok = ok && all_passed(rows);
        for (const GradSuiteRow& r : rows) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.3e", r.rel_error);
            csv << opt.seed << ',' << r.check << ',' << r.tensor << ',' << buf << ',' << (r.passed ? "pass" : "FAIL")
                << '\n';
            worst = std::max(worst, r.rel_error);
        }
    }
    w.write("gradcheck.csv", csv.str());
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", worst);
    std::cout << (ok ? "PASS" : "FAIL") << " max_rel_error=" << buf << " tolerance=" << opt.tolerance << '\n';
    return ok ? kOk : kCheckFailed;
}

int cmd_lifelong(const Common& common, bool reverse) {
    RunConfig cfg = resolve(common);
    if (reverse) cfg.curriculum.reverse = true;
    const Writer w(cfg);
    const LifelongResult r = run_lifelong(cfg);
    w.write("sr_matrix.csv", matrix_csv(r.sr));
    SRMatrix ade = r.sr;
    ade.values = r.ade;
    w.write("ade_matrix.csv", matrix_csv(ade, 4));
    w.write("metrics.csv", metrics_csv(r.metrics));
    w.write("plot_data.csv", plot_csv(r.plot));
    w.write("k_growth.csv", k_growth_csv(r.fit));
    w.write("report.txt", lifelong_text(r));
    std::cout << lifelong_text(r);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knowledge-space mixtures, anchor decoder and lifelong metrics"};
    app.require_subcommand(1);

    Common fit_c, anchors_c, metrics_c, train_c, grad_c, life_c;
    CLI::App* fit = app.add_subcommand("fit", "fit feature and trajectory spaces over the curriculum");
    add_common(fit, fit_c);

    CLI::App* anchors = app.add_subcommand("anchors", "dump a snapshot's anchors as CSV");
    add_common(anchors, anchors_c);
    std::string snapshot;
    anchors->add_option("--snapshot", snapshot, "snapshot file")->required();

    CLI::App* metrics = app.add_subcommand("metrics", "lifelong metrics of a success-rate matrix");
    add_common(metrics, metrics_c);
    std::string matrix, policy = "strict";
    metrics->add_option("--matrix", matrix, "success-rate CSV")->required();
    metrics->add_option("--zero-policy", policy, "strict or skip")->check(CLI::IsMember({"strict", "skip"}));

    CLI::App* train = app.add_subcommand("train-decoder", "train and evaluate the anchor decoder");
    add_common(train, train_c);
    std::string tks, fks;
    train->add_option("--tks", tks, "trajectory space snapshot")->required();
    train->add_option("--fks", fks, "feature space snapshot (enables the feature enhancer)");

    CLI::App* grad = app.add_subcommand("gradcheck", "analytic gradients against finite differences");
    add_common(grad, grad_c);
    GradSuiteOptions gopt;
    int seeds = 1;
    grad->add_option("--width", gopt.width, "model width");
    grad->add_option("--anchors", gopt.traj_anchors, "trajectory anchors");
    grad->add_option("--seeds", seeds, "consecutive seeds starting at --seed")->check(CLI::PositiveNumber);
    grad->add_flag("--corrupt", gopt.corrupt, "perturb every analytic gradient (self-test)");

    CLI::App* life = app.add_subcommand("lifelong-report", "sequential training, success matrix and metrics");
    add_common(life, life_c);
    bool reverse = false;
    life->add_flag("--reverse", reverse, "run the curriculum in reverse order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInvalid;
    }

    try {
        if (fit->parsed()) return cmd_fit(fit_c);
        if (anchors->parsed()) return cmd_anchors(anchors_c, snapshot);
        if (metrics->parsed()) return cmd_metrics(metrics_c, matrix, policy);
        if (train->parsed()) return cmd_train_decoder(train_c, tks, fks);
        if (grad->parsed()) return cmd_gradcheck(grad_c, gopt, seeds);
        if (life->parsed()) return cmd_lifelong(life_c, reverse);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kIo;
    } catch (const InvalidArgument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumerical;
    }
    return kInvalid;
}
