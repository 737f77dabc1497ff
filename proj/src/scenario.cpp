#include "kspace/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "json.hpp"

namespace kspace {

namespace {

constexpr int kSteps = 10;

void require(bool ok, const std::string& message) {
    if (!ok) throw InvalidArgument(message);
}

Vector from_spacing(const std::vector<double>& dx, const std::vector<double>& y) {
    Vector v(2 * kSteps);
    double x = 0.0;
    for (int t = 0; t < kSteps; ++t) {
        x += dx[t];
        v[2 * t] = x;
        v[2 * t + 1] = y[t];
    }
    return v;
}

std::vector<double> zeros() { return std::vector<double>(kSteps, 0.0); }

}  // namespace

void ManeuverArchetype::validate() const {
    require(trajectory.size() == 2 * kSteps && trajectory.allFinite(),
            "archetype '" + name + "': template must be 20 finite values");
    require(waypoint_noise_sigma >= 0.0 && feature_noise_sigma >= 0.0,
            "archetype '" + name + "': noise sigmas must be nonnegative");
    require(feature_center.size() >= 1 && feature_center.allFinite(),
            "archetype '" + name + "': feature center must be non-empty and finite");
}

int speed_class(const Vector& trajectory) {
    const Eigen::Index n = trajectory.size();
    require(n >= 4 && n % 2 == 0, "speed_class: need at least two waypoints");
    const double step = std::hypot(trajectory[n - 2] - trajectory[n - 4], trajectory[n - 1] - trajectory[n - 3]);
    if (step < 0.25) return 0;
    if (step < 1.0) return 1;
    return 2;
}

std::vector<ManeuverArchetype> default_archetypes(int feature_dim, double waypoint_sigma, double feature_sigma) {
    require(feature_dim >= 5, "default archetypes need feature_dim >= 5");
    std::vector<ManeuverArchetype> out;
    auto add = [&](const std::string& name, Vector traj) {
        ManeuverArchetype a;
        a.name = name;
        a.trajectory = std::move(traj);
        a.waypoint_noise_sigma = waypoint_sigma;
        a.feature_center = Vector::Zero(feature_dim);
        a.feature_center[static_cast<Eigen::Index>(out.size())] = 6.0;
        a.feature_noise_sigma = feature_sigma;
        out.push_back(std::move(a));
    };
    // hard deceleration to standstill
    add("emergency_brake", from_spacing({1.6, 1.2, 0.9, 0.6, 0.4, 0.2, 0.1, 0.0, 0.0, 0.0}, zeros()));
    // gradual stop at a line
    add("traffic_sign_stop", from_spacing({1.5, 1.5, 1.4, 1.3, 1.1, 0.9, 0.7, 0.4, 0.2, 0.0}, zeros()));
    // lateral S-curve of 3.5 m
    {
        std::vector<double> y(kSteps);
        for (int t = 0; t < kSteps; ++t) {
            const double s = (t + 1) / static_cast<double>(kSteps);
            y[t] = 3.5 * s * s * (3.0 - 2.0 * s);
        }
        add("merge", from_spacing(std::vector<double>(kSteps, 1.5), y));
    }
    // out into the next lane and back, faster
    {
        std::vector<double> y(kSteps);
        for (int t = 0; t < kSteps; ++t) y[t] = 3.5 * std::sin(std::numbers::pi * (t + 1) / (kSteps + 1));
        add("overtake", from_spacing(std::vector<double>(kSteps, 2.0), y));
    }
    // yield, then pull away
    add("give_way", from_spacing({0.8, 0.6, 0.4, 0.3, 0.3, 0.4, 0.6, 0.8, 1.0, 1.2}, zeros()));
    return out;
}

void TaskSpec::validate() const {
    require(!archetypes.empty(), "task " + std::to_string(task_id) + ": no archetypes");
    require(counts.size() == archetypes.size(), "task " + std::to_string(task_id) + ": counts and archetypes differ in length");
    const Eigen::Index d = archetypes[0].feature_center.size();
    for (std::size_t i = 0; i < archetypes.size(); ++i) {
        archetypes[i].validate();
        require(counts[i] >= 1, "task " + std::to_string(task_id) + ": count for '" + archetypes[i].name +
                                    "' must be at least 1");
        require(archetypes[i].feature_center.size() == d,
                "task " + std::to_string(task_id) + ": feature dimensions differ between archetypes");
    }
}

TaskData generate_task(const TaskSpec& spec) {
    spec.validate();
    TaskData data;
    data.task_id = spec.task_id;
    for (const ManeuverArchetype& a : spec.archetypes) data.names.push_back(a.name);
    for (std::size_t a = 0; a < spec.counts.size(); ++a) data.labels.insert(data.labels.end(), spec.counts[a], static_cast<int>(a));

    const std::uint64_t base = splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(spec.task_id) + 1));
    std::mt19937_64 order_rng(base);
    std::shuffle(data.labels.begin(), data.labels.end(), order_rng);

    const int n = data.size();
    const Eigen::Index d = spec.archetypes[0].feature_center.size();
    data.trajectories.resize(n, 2 * kSteps);
    data.features.resize(n, d);
    data.speed_classes.resize(n);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const ManeuverArchetype& a = spec.archetypes[data.labels[i]];
        std::mt19937_64 rng(splitmix64(base + static_cast<std::uint64_t>(i) + 1));
        std::normal_distribution<double> g(0.0, 1.0);
        for (int j = 0; j < 2 * kSteps; ++j) data.trajectories(i, j) = a.trajectory[j] + a.waypoint_noise_sigma * g(rng);
        for (Eigen::Index j = 0; j < d; ++j) data.features(i, j) = a.feature_center[j] + a.feature_noise_sigma * g(rng);
        data.speed_classes[i] = speed_class(a.trajectory);
    }
    return data;
}

std::vector<TaskSpec> make_default_curriculum(const CurriculumOptions& options) {
    const auto& profile = options.profile;
    require(!profile.empty() && profile.size() <= 5, "curriculum: profile must have 1 to 5 entries");
    require(options.min_count >= 1, "curriculum: min_count must be positive");
    for (double v : profile) require(v > 0.0 && std::isfinite(v), "curriculum: profile entries must be positive");
    const std::vector<ManeuverArchetype> all =
        default_archetypes(options.feature_dim, options.waypoint_sigma, options.feature_sigma);
    const double scale = options.min_count / *std::min_element(profile.begin(), profile.end());

    std::vector<TaskSpec> specs;
    for (std::size_t i = 0; i < profile.size(); ++i) {
        TaskSpec s;
        s.archetypes = {all[i]};
        s.counts = {std::max(options.min_count, static_cast<int>(std::lround(profile[i] * scale)))};
        specs.push_back(std::move(s));
    }
    if (options.reverse) std::reverse(specs.begin(), specs.end());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        specs[i].task_id = static_cast<int>(i);
        specs[i].seed = splitmix64(options.seed + i);
    }
    return specs;
}

void write_jsonl(std::ostream& os, const TaskData& data) {
    for (int i = 0; i < data.size(); ++i) {
        nlohmann::ordered_json row;
        row["task_id"] = data.task_id;
        row["label"] = data.labels[i];
        row["archetype"] = data.names[data.labels[i]];
        row["trajectory"] = std::vector<double>(data.trajectories.row(i).begin(), data.trajectories.row(i).end());
        row["feature"] = std::vector<double>(data.features.row(i).begin(), data.features.row(i).end());
        os << row.dump() << '\n';
    }
}

}  // namespace kspace
