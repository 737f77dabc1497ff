#include "kspace/pipeline.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

namespace kspace {

namespace {

// Shortest text that reads back to the same double.
std::string num(double x) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

}  // namespace

std::vector<Example> make_examples(const TaskData& data, int h) {
    std::vector<Example> out;
    out.reserve(data.size());
    for (int i = 0; i < data.size(); ++i)
        out.push_back({lift_feature(data.features.row(i).transpose(), h), data.trajectories.row(i).transpose(),
                       data.speed_classes[i]});
    return out;
}

std::vector<RowMatrix> split_rows(const RowMatrix& x, int parts) {
    if (parts < 1) throw InvalidArgument("split_rows: parts must be positive");
    const int n = static_cast<int>(x.rows());
    parts = std::min(parts, std::max(n, 1));
    std::vector<RowMatrix> out;
    for (int b = 0; b < parts; ++b) {
        const int lo = b * n / parts, hi = (b + 1) * n / parts;
        out.push_back(x.middleRows(lo, hi - lo));
    }
    return out;
}

CurriculumData make_curriculum_data(const RunConfig& c) {
    CurriculumOptions o;
    o.profile = c.curriculum.profile;
    o.min_count = c.curriculum.min_count;
    o.reverse = c.curriculum.reverse;
    o.seed = derive_seed(c.seed, "curriculum");
    o.feature_dim = c.curriculum.feature_dim;
    o.waypoint_sigma = c.curriculum.waypoint_sigma;
    o.feature_sigma = c.curriculum.feature_sigma;
    CurriculumData d;
    d.specs = make_default_curriculum(o);
    for (const TaskSpec& s : d.specs) {
        d.train.push_back(generate_task(s));
        TaskSpec held = s;
        held.counts.assign(s.counts.size(), c.curriculum.heldout_per_task);
        held.seed = derive_seed(s.seed, "heldout");
        d.heldout.push_back(generate_task(held));
    }
    return d;
}

SpacePair make_spaces(const RunConfig& c) {
    SpacePair p{make_space(SpaceLabel::feature, c.curriculum.feature_dim, c.spaces.anchor_weight_floor,
                           c.spaces.standardize_feature),
                make_space(SpaceLabel::trajectory, kTrajectoryDim, c.spaces.anchor_weight_floor,
                           c.spaces.standardize_trajectory)};
    for (KnowledgeSpace* s : {&p.feature, &p.trajectory}) {
        s->hyper_spec.kappa0 = c.spaces.kappa0;
        s->hyper_spec.a0 = c.spaces.a0;
        s->hyper_spec.alpha = c.spaces.alpha;
        s->hyper_spec.b0_floor = c.spaces.b0_floor;
    }
    return p;
}

TaskFitRow fit_task(SpacePair& spaces, const TaskData& data, const RunConfig& c) {
    TaskFitRow row;
    row.task = data.task_id;
    row.name = data.names.size() == 1 ? data.names[0] : "mixed";
    row.samples = data.size();
    const int parts = (data.size() + c.spaces.batch_size - 1) / c.spaces.batch_size;
    row.feature = update_space(spaces.feature, split_rows(data.features, parts), c.inference, data.task_id);
    row.trajectory = update_space(spaces.trajectory, split_rows(data.trajectories, parts), c.inference, data.task_id);
    row.k_feature = spaces.feature.num_components();
    row.k_trajectory = spaces.trajectory.num_components();
    return row;
}

CurriculumFit fit_curriculum(const CurriculumData& data, const RunConfig& c) {
    CurriculumFit fit;
    SpacePair spaces = make_spaces(c);
    for (const TaskData& t : data.train) {
        fit.rows.push_back(fit_task(spaces, t, c));
        fit.snapshots.push_back(spaces);
    }
    return fit;
}

std::string k_growth_csv(const std::vector<TaskFitRow>& rows) {
    std::ostringstream os;
    os << "task,name,samples,k_feature,k_trajectory,births_feature,merges_feature,births_trajectory,"
          "merges_trajectory,elbo_feature,elbo_trajectory\n";
    for (const TaskFitRow& r : rows)
        os << r.task << ',' << r.name << ',' << r.samples << ',' << r.k_feature << ',' << r.k_trajectory << ','
           << r.feature.births_accepted << ',' << r.feature.merges_accepted << ',' << r.trajectory.births_accepted
           << ',' << r.trajectory.merges_accepted << ','
           << num(r.feature.elbo_trace.empty() ? 0.0 : r.feature.elbo_trace.back()) << ','
           << num(r.trajectory.elbo_trace.empty() ? 0.0 : r.trajectory.elbo_trace.back()) << '\n';
    return os.str();
}

std::string anchor_drift_csv(const std::vector<SpacePair>& snapshots) {
    std::ostringstream os;
    os << "after_task,space,created_task,ordinal,distance\n";
    for (std::size_t i = 1; i < snapshots.size(); ++i)
        for (int s = 0; s < 2; ++s) {
            auto space_of = [&](std::size_t k) -> const KnowledgeSpace& {
                return s == 0 ? snapshots[k].feature : snapshots[k].trajectory;
            };
            const AnchorSet now = extract_anchors(space_of(i));
            for (std::size_t c = 0; c < i; ++c) {
                const AnchorSet then = extract_anchors(space_of(c));
                const AnchorDrift d = anchor_drift(then, now);
                int ordinal = 0;
                for (int a = 0; a < then.size(); ++a) {
                    if (then.created_task[a] != static_cast<int>(c)) continue;
                    os << i << ',' << to_string(space_of(i).label) << ',' << c << ',' << ordinal++ << ',';
                    if (std::isnan(d.distance[a]))
                        os << "removed\n";
                    else
                        os << num(d.distance[a]) << '\n';
                }
            }
        }
    return os.str();
}

std::string anchors_csv(const AnchorSet& a) {
    std::ostringstream os;
    os << "created_task,weight";
    for (Eigen::Index j = 0; j < a.anchors.cols(); ++j) os << ",x" << j;
    os << '\n';
    for (int r = 0; r < a.size(); ++r) {
        os << a.created_task[r] << ',' << num(a.weights[r]);
        for (Eigen::Index j = 0; j < a.anchors.cols(); ++j) os << ',' << num(a.anchors(r, j));
        os << '\n';
    }
    return os.str();
}

std::pair<TaskData, TaskData> make_decoder_task(const RunConfig& c) {
    const auto all = default_archetypes(c.curriculum.feature_dim, c.curriculum.waypoint_sigma,
                                        c.curriculum.feature_sigma);
    TaskSpec train;
    train.archetypes.assign(all.begin(), all.begin() + c.decoder.archetypes);
    train.counts.assign(c.decoder.archetypes, c.decoder.per_archetype);
    train.seed = derive_seed(c.seed, "decoder-train");
    TaskSpec held = train;
    held.counts.assign(c.decoder.archetypes, c.decoder.heldout_per_archetype);
    held.seed = derive_seed(c.seed, "decoder-heldout");
    return {generate_task(train), generate_task(held)};
}

DrivingModel initial_model(const RunConfig& c, bool feature_enhancer) {
    std::mt19937_64 rng(derive_seed(c.seed, "model"));
    DrivingModel m = DrivingModel::random(c.decoder.width, kSpeedClasses,
                                          feature_enhancer ? c.curriculum.feature_dim : 0,
                                          c.decoder.use_trajectory_enhancer, rng);
    m.decoder.temperature = c.decoder.temperature;
    m.decoder.top_k = c.decoder.top_k;
    return m;
}

KnowledgeAnchors anchors_from(const KnowledgeSpace& trajectory, const KnowledgeSpace* feature) {
    if (trajectory.label != SpaceLabel::trajectory) throw InvalidArgument("expected a trajectory space");
    KnowledgeAnchors a;
    a.trajectory = extract_anchors(trajectory).anchors;
    if (feature) {
        if (feature->label != SpaceLabel::feature) throw InvalidArgument("expected a feature space");
        a.feature = extract_anchors(*feature).anchors;
    }
    return a;
}

DecoderRun run_decoder_experiment(const RunConfig& c, const KnowledgeSpace& trajectory,
                                  const KnowledgeSpace* feature) {
    const bool use_f = feature != nullptr && c.decoder.use_feature_enhancer;
    if (use_f && feature->dim != c.curriculum.feature_dim)
        throw InvalidArgument("feature space dim " + std::to_string(feature->dim) + " != curriculum.feature_dim " +
                              std::to_string(c.curriculum.feature_dim));
    const auto [train, held] = make_decoder_task(c);
    DecoderRun run;
    run.anchors = anchors_from(trajectory, use_f ? feature : nullptr);
    run.train = train_decoder(make_examples(train, c.decoder.width), run.anchors, initial_model(c, use_f),
                              c.decoder.train);
    run.heldout = evaluate(run.train.model, run.anchors, make_examples(held, c.decoder.width));
    return run;
}

std::string eval_report_text(const EvalReport& r, int anchors) {
    std::ostringstream os;
    os << "samples " << r.correct.size() << '\n';
    os << "trajectory_anchors " << anchors << '\n';
    os << "selection_accuracy " << num(r.accuracy) << '\n';
    os << "ade_m " << num(r.ade) << '\n';
    return os.str();
}

LifelongResult run_lifelong(const RunConfig& c) {
    const CurriculumData data = make_curriculum_data(c);
    const int n = static_cast<int>(data.specs.size());
    if (n < 2) throw InvalidArgument("lifelong report needs at least two tasks");
    const int h = c.decoder.width;
    std::vector<std::vector<Example>> train(n), held(n);
    for (int t = 0; t < n; ++t) {
        train[t] = make_examples(data.train[t], h);
        held[t] = make_examples(data.heldout[t], h);
    }

    LifelongResult out;
    out.sr.values.resize(n, n);
    out.ade.resize(n, n);
    for (int t = 0; t < n; ++t) {
        out.sr.task_names.push_back(data.train[t].names[0]);
        out.sr.snapshot_labels.push_back(std::to_string(t + 1) + "_" + data.train[t].names[0]);
    }

    SpacePair spaces = make_spaces(c);
    DrivingModel model = initial_model(c, c.decoder.use_feature_enhancer);
    for (int i = 0; i < n; ++i) {
        out.fit.push_back(fit_task(spaces, data.train[i], c));
        const KnowledgeAnchors anchors =
            anchors_from(spaces.trajectory, c.decoder.use_feature_enhancer ? &spaces.feature : nullptr);
        // optimizer state starts fresh for every task
        model = train_decoder(train[i], anchors, std::move(model), c.decoder.train).model;

        PlotRow row;
        row.after_task = i + 1;
        row.name = data.train[i].names[0];
        row.k_feature = spaces.feature.num_components();
        row.k_trajectory = spaces.trajectory.num_components();
        for (int j = 0; j < n; ++j) {
            const EvalReport e = evaluate(model, anchors, held[j]);
            int ok = 0;
            for (std::size_t s = 0; s < e.correct.size(); ++s)
                ok += (e.correct[s] && e.displacement[s] < c.decoder.success_ade) ? 1 : 0;
            out.sr.values(i, j) = 100.0 * ok / static_cast<double>(e.correct.size());
            out.ade(i, j) = e.ade;
            row.success_all += out.sr.values(i, j) / n;
            if (j <= i) row.success_seen += out.sr.values(i, j) / (i + 1);
            row.mean_ade += e.ade / n;
            row.selection_accuracy += e.accuracy / n;
        }
        out.plot.push_back(row);
    }
    out.metrics = compute_metrics(out.sr, c.metrics.zero_policy);
    return out;
}

std::string matrix_csv(const SRMatrix& m, int decimals) {
    std::ostringstream os;
    os << "after_task";
    for (const auto& t : m.task_names) os << ',' << t;
    os << '\n';
    for (int i = 0; i < m.size(); ++i) {
        os << m.snapshot_labels[i];
        for (int j = 0; j < m.size(); ++j) os << ',' << format_fixed(m.values(i, j), decimals);
        os << '\n';
    }
    return os.str();
}

std::string plot_csv(const std::vector<PlotRow>& rows) {
    std::ostringstream os;
    os << "after_task,name,success_all,success_seen,mean_ade,selection_accuracy,k_feature,k_trajectory\n";
    for (const PlotRow& r : rows)
        os << r.after_task << ',' << r.name << ',' << format_fixed(r.success_all) << ','
           << format_fixed(r.success_seen) << ',' << format_fixed(r.mean_ade, 4) << ','
           << format_fixed(r.selection_accuracy, 4) << ',' << r.k_feature << ',' << r.k_trajectory << '\n';
    return os.str();
}

std::string lifelong_text(const LifelongResult& r) {
    std::ostringstream os;
    os << "tasks " << r.sr.size() << '\n';
    for (int i = 0; i < r.sr.size(); ++i) os << "task " << i + 1 << ' ' << r.sr.task_names[i] << '\n';
    os << "FR " << format_fixed(r.metrics.fr) << '\n';
    os << "PFR " << format_fixed(r.metrics.pfr) << '\n';
    os << "FT " << format_fixed(r.metrics.ft) << '\n';
    os << "BT " << format_fixed(r.metrics.bt) << '\n';
    std::vector<double> last_row(r.sr.values.row(r.sr.size() - 1).begin(), r.sr.values.row(r.sr.size() - 1).end());
    std::vector<double> seen;
    for (const PlotRow& p : r.plot) seen.push_back(p.success_seen);
    os << "final_mean_success " << format_fixed(overall_mean(last_row)) << '\n';
    os << "mean_success_seen_over_snapshots " << format_fixed(overall_mean(seen)) << '\n';
    for (const SkippedTerm& s : r.metrics.skipped)
        os << "skipped " << s.metric << ' ' << s.i << ' ' << s.j << ' ' << s.reason << '\n';
    return os.str();
}

}  // namespace kspace
