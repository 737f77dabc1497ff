#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "kspace/knowledge_space.hpp"
#include "test_util.hpp"

using namespace kspace;
using namespace kspace::testing;

namespace {

// Task t draws from a blob centred at 10 * e_t in d = 6.
RowMatrix task_data(std::mt19937_64& rng, int task, int n) {
    RowMatrix mean = RowMatrix::Zero(1, 6);
    mean(0, task) = 10.0;
    std::vector<int> labels;
    return gaussian_blobs(rng, mean, n, 1.0, labels);
}

std::vector<RowMatrix> halves(const RowMatrix& x) {
    const int h = static_cast<int>(x.rows()) / 2;
    return {x.topRows(h), x.bottomRows(x.rows() - h)};
}

KnowledgeSpace fitted_two_gaussians() {
    std::mt19937_64 rng(101);
    std::normal_distribution<double> g(0.0, 1.0);
    RowMatrix left(200, 1), right(200, 1);
    for (int i = 0; i < 200; ++i) {
        left(i, 0) = -5.0 + g(rng);
        right(i, 0) = 5.0 + g(rng);
    }
    KnowledgeSpace space = make_space(SpaceLabel::feature, 1);
    InferenceConfig cfg;
    cfg.passes = 20;
    update_space(space, {left, right}, cfg, 0);
    return space;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("kspace_test_" + name);
}

}  // namespace

TEST_CASE("make_space validates its arguments") {
    CHECK_NOTHROW(make_space(SpaceLabel::trajectory, kTrajectoryDim));
    CHECK_THROWS_AS(make_space(SpaceLabel::trajectory, 7), InvalidArgument);
    CHECK_THROWS_AS(make_space(SpaceLabel::feature, 0), InvalidArgument);
    CHECK_THROWS_AS(make_space(SpaceLabel::feature, 4, -1.0), InvalidArgument);
    CHECK(make_space(SpaceLabel::feature, kFeatureDim).dim == 2816);
    CHECK(parse_space_label("feature") == SpaceLabel::feature);
    CHECK_THROWS_AS(parse_space_label("tks"), InvalidArgument);
}

TEST_CASE("update_space rejects bad input") {
    KnowledgeSpace space = make_space(SpaceLabel::feature, 3);
    CHECK_THROWS_WITH_AS(update_space(space, {}, InferenceConfig{}, 0), doctest::Contains("empty batch list"),
                         InvalidArgument);
    CHECK_THROWS_AS(update_space(space, {RowMatrix::Zero(5, 4)}, InferenceConfig{}, 0), InvalidArgument);
}

TEST_CASE("extract_anchors: single component, floor, empty space") {
    KnowledgeSpace space = make_space(SpaceLabel::feature, 2);
    CHECK_THROWS_AS(extract_anchors(space), InvalidArgument);

    RowMatrix means(1, 2);
    means << 1.0, 2.0;
    space.state = state_with_means(means);
    space.state.components[0].m = Eigen::Vector2d(1.0, 2.0);
    space.memo.append_component();
    const AnchorSet one = extract_anchors(space);
    REQUIRE(one.size() == 1);
    CHECK(one.anchors(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(one.anchors(0, 1) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(std::abs(one.weights[0] - 1.0) <= 1e-6);

    RowMatrix three(3, 2);
    three << 0, 0, 5, 5, 9, 9;
    space.state = state_with_means(three);
    space.state.components[0].created_task = 0;
    space.state.components[1].created_task = 1;
    space.state.components[2].created_task = 2;
    space.memo.append_component();
    space.memo.append_component();
    // Equal counts under stick-breaking: weights decrease with index.
    const AnchorSet all = extract_anchors(space);
    REQUIRE(all.size() == 3);
    CHECK(all.weights.sum() <= 1.0 + 1e-12);
    space.anchor_weight_floor = all.weights[2] + 1e-9;
    const AnchorSet floored = extract_anchors(space);
    CHECK(floored.size() == 2);
    CHECK(floored.created_task == std::vector<int>{0, 1});
}

TEST_CASE("anchors of the two-Gaussian fixture sit at the true means") {
    const KnowledgeSpace space = fitted_two_gaussians();
    const AnchorSet a = extract_anchors(space);
    REQUIRE(a.size() == 2);
    std::vector<double> centres{a.anchors(0, 0), a.anchors(1, 0)};
    std::sort(centres.begin(), centres.end());
    CHECK(std::abs(centres[0] + 5.0) <= 0.3);
    CHECK(std::abs(centres[1] - 5.0) <= 0.3);
}

TEST_CASE("anchor_drift matches by provenance") {
    AnchorSet before;
    before.anchors.resize(3, 2);
    before.anchors << 0, 0, 1, 1, 2, 2;
    before.weights = Vector::Constant(3, 1.0 / 3);
    before.created_task = {0, 0, 1};

    const AnchorDrift same = anchor_drift(before, before);
    for (double d : same.distance) CHECK(d == 0.0);
    CHECK(same.removed.empty());

    AnchorSet shifted = before;
    shifted.anchors.row(1) += Eigen::RowVector2d(3.0, 4.0);
    const AnchorDrift moved = anchor_drift(before, shifted);
    CHECK(moved.distance[1] == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(moved.max_distance() == doctest::Approx(5.0).epsilon(1e-15));

    AnchorSet grown;
    grown.anchors.resize(3, 2);
    grown.anchors << 0, 0, 2, 2, 7, 7;
    grown.weights = Vector::Constant(3, 1.0 / 3);
    grown.created_task = {0, 1, 2};
    const AnchorDrift partial = anchor_drift(before, grown);
    CHECK(partial.removed == std::vector<int>{1});
    CHECK(std::isnan(partial.distance[1]));
    CHECK(partial.distance[0] == 0.0);
    CHECK(partial.distance[2] == 0.0);
}

TEST_CASE("sequential tasks grow the space and revisits add nothing") {
    std::mt19937_64 rng(103);
    KnowledgeSpace space = make_space(SpaceLabel::feature, 6);
    InferenceConfig cfg;
    std::vector<RowMatrix> first;
    AnchorSet after_first;
    int prev_k = 0;
    for (int task = 0; task < 5; ++task) {
        const RowMatrix x = task_data(rng, task, 200);
        if (task == 0) first = halves(x);
        update_space(space, halves(x), cfg, task);
        CHECK(space.num_components() >= prev_k);
        CHECK(space.num_components() >= task + 1);
        prev_k = space.num_components();
        if (task == 0) after_first = extract_anchors(space);
    }
    const AnchorDrift drift = anchor_drift(after_first, extract_anchors(space));
    CHECK(drift.removed.empty());
    CHECK(drift.max_distance() <= 0.5);

    const FitReport again = update_space(space, first, cfg, 0);
    CHECK(again.births_accepted == 0);
    CHECK(space.num_components() == prev_k);
}

TEST_CASE("standardized spaces report anchors in raw units") {
    std::mt19937_64 rng(107);
    RowMatrix means(2, 2);
    means << 1000.0, 0.0, 1040.0, 40.0;
    std::vector<int> labels;
    RowMatrix x = gaussian_blobs(rng, means, 200, 1.0, labels);
    x.col(1) *= 0.001;
    KnowledgeSpace space = make_space(SpaceLabel::feature, 2, 0.0, true);
    InferenceConfig cfg;
    cfg.passes = 20;
    cfg.prune_count_threshold = 5.0;
    update_space(space, halves(x), cfg, 0);
    REQUIRE(space.standardization.has_value());
    const AnchorSet a = extract_anchors(space);
    REQUIRE(a.size() == 2);
    std::vector<double> xs{a.anchors(0, 0), a.anchors(1, 0)};
    std::sort(xs.begin(), xs.end());
    CHECK(std::abs(xs[0] - 1000.0) <= 0.3);
    CHECK(std::abs(xs[1] - 1040.0) <= 0.3);
    CHECK(space.standardization->scale[0] == doctest::Approx(20.0).epsilon(0.05));
}

TEST_CASE("snapshot round trip is bitwise") {
    const KnowledgeSpace space = fitted_two_gaussians();
    const std::filesystem::path path = temp_file("roundtrip.json");
    save_snapshot(space, path);
    const KnowledgeSpace loaded = load_snapshot(path);
    std::filesystem::remove(path);

    REQUIRE(loaded.num_components() == space.num_components());
    for (int k = 0; k < space.num_components(); ++k) {
        const ComponentPosterior& a = space.state.components[k];
        const ComponentPosterior& b = loaded.state.components[k];
        CHECK(a.m == b.m);
        CHECK(a.b == b.b);
        CHECK(a.kappa == b.kappa);
        CHECK(a.a == b.a);
        CHECK(a.soft_count == b.soft_count);
        CHECK(a.created_task == b.created_task);
        CHECK(space.state.sticks[k].eta1 == loaded.state.sticks[k].eta1);
        CHECK(space.state.sticks[k].eta0 == loaded.state.sticks[k].eta0);
    }
    CHECK(loaded.state.hyper.m0 == space.state.hyper.m0);
    CHECK(loaded.state.hyper.b0 == space.state.hyper.b0);
    CHECK(loaded.memo.aggregate().sum == space.memo.aggregate().sum);
    CHECK(loaded.memo.caches().size() == space.memo.caches().size());
    CHECK(extract_anchors(loaded).anchors == extract_anchors(space).anchors);
    CHECK(snapshot_to_string(loaded) == snapshot_to_string(space));

    std::mt19937_64 rng(109);
    const RowMatrix eval = random_matrix(rng, 50, 1, 5.0);
    const double e1 = elbo(space.state, eval, local_step(space.state, eval));
    const double e2 = elbo(loaded.state, eval, local_step(loaded.state, eval));
    CHECK(std::abs(e1 - e2) <= 1e-9);
}

TEST_CASE("snapshot errors name the problem") {
    const std::string text = snapshot_to_string(fitted_two_gaussians());

    const std::size_t at = text.find("\"caches\"");
    REQUIRE(at != std::string::npos);
    CHECK_THROWS_WITH_AS(snapshot_from_string(text.substr(0, at + 40)), doctest::Contains("'caches'"),
                         SnapshotError);
    CHECK_THROWS_WITH_AS(snapshot_from_string(""), doctest::Contains("empty"), SnapshotError);

    nlohmann::json doc = nlohmann::json::parse(text);
    doc.erase("sticks");
    CHECK_THROWS_WITH_AS(snapshot_from_string(doc.dump()), doctest::Contains("missing section 'sticks'"),
                         SnapshotError);

    doc = nlohmann::json::parse(text);
    doc["schema_version"] = 2;
    CHECK_THROWS_WITH_AS(snapshot_from_string(doc.dump()), doctest::Contains("schema_version 2"), SnapshotError);

    doc = nlohmann::json::parse(text);
    doc["components"][0]["m"] = {1.0, 2.0};
    CHECK_THROWS_WITH_AS(snapshot_from_string(doc.dump()), doctest::Contains("components[0].m"), SnapshotError);

    CHECK_THROWS_AS(load_snapshot(temp_file("does_not_exist.json")), IoError);
}

TEST_CASE("an empty space survives a snapshot and accepts a first update") {
    const KnowledgeSpace empty = make_space(SpaceLabel::trajectory, 4);
    const KnowledgeSpace loaded = snapshot_from_string(snapshot_to_string(empty));
    CHECK(loaded.num_components() == 0);
    CHECK(loaded.dim == 4);
    KnowledgeSpace space = loaded;
    std::mt19937_64 rng(113);
    update_space(space, {random_matrix(rng, 100, 4)}, InferenceConfig{}, 0);
    CHECK(space.num_components() >= 1);
}
