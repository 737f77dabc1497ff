#include "kspace/knowledge_space.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"

namespace kspace {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw InvalidArgument(message);
}

RowMatrix apply_standardization(const RowMatrix& x, const std::optional<Standardization>& s) {
    if (!s) return x;
    RowMatrix out = x;
    for (int j = 0; j < out.cols(); ++j) out.col(j) = (out.col(j).array() - s->mean[j]) / s->scale[j];
    return out;
}

Standardization fit_standardization(const std::vector<RowMatrix>& batches, int dim) {
    std::vector<CompensatedSum> sum(dim), sumsq(dim);
    double n = 0.0;
    for (const RowMatrix& b : batches) {
        n += static_cast<double>(b.rows());
        for (int i = 0; i < b.rows(); ++i)
            for (int j = 0; j < dim; ++j) sum[j].add(b(i, j));
    }
    Standardization s{Vector(dim), Vector(dim)};
    for (int j = 0; j < dim; ++j) s.mean[j] = sum[j].value() / n;
    for (const RowMatrix& b : batches)
        for (int i = 0; i < b.rows(); ++i)
            for (int j = 0; j < dim; ++j) sumsq[j].add((b(i, j) - s.mean[j]) * (b(i, j) - s.mean[j]));
    for (int j = 0; j < dim; ++j) {
        const double sd = std::sqrt(sumsq[j].value() / n);
        s.scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
}

// ---- JSON encoding ----

json finite_number(double v) {
    if (!std::isfinite(v)) throw NumericalError("snapshot: refusing to write a non-finite value");
    return v;
}

json to_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(finite_number(v[i]));
    return out;
}

json to_json(const RowMatrix& m) {
    json out = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(to_json(Vector(m.row(i).transpose())));
    return out;
}

json to_json(const SuffStats& s) {
    return {{"count", to_json(s.count)},
            {"sum", to_json(s.sum)},
            {"sumsq", to_json(s.sumsq)},
            {"assign_entropy", to_json(s.assign_entropy)}};
}

// ---- JSON decoding with located errors ----

[[noreturn]] void fail(const std::string& where, const std::string& what) {
    throw SnapshotError("snapshot: " + where + ": " + what);
}

const json& field(const json& obj, const std::string& key, const std::string& where) {
    if (!obj.is_object()) fail(where, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(where, "missing field '" + key + "'");
    return *it;
}

double number(const json& j, const std::string& where) {
    if (!j.is_number()) fail(where, "expected a number");
    return j.get<double>();
}

int integer(const json& j, const std::string& where) {
    if (!j.is_number_integer()) fail(where, "expected an integer");
    return j.get<int>();
}

Vector vector_from(const json& j, const std::string& where, int expected = -1) {
    if (!j.is_array()) fail(where, "expected an array");
    if (expected >= 0 && static_cast<int>(j.size()) != expected)
        fail(where, "expected " + std::to_string(expected) + " values, found " + std::to_string(j.size()));
    Vector v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v[i] = number(j[i], where + "[" + std::to_string(i) + "]");
    return v;
}

RowMatrix matrix_from(const json& j, const std::string& where, int rows, int cols) {
    if (!j.is_array() || static_cast<int>(j.size()) != rows)
        fail(where, "expected " + std::to_string(rows) + " rows");
    RowMatrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        m.row(i) = vector_from(j[i], where + "[" + std::to_string(i) + "]", cols).transpose();
    return m;
}

SuffStats stats_from(const json& j, const std::string& where, int k, int dim) {
    SuffStats s;
    s.count = vector_from(field(j, "count", where), where + ".count", k);
    s.sum = matrix_from(field(j, "sum", where), where + ".sum", k, dim);
    s.sumsq = matrix_from(field(j, "sumsq", where), where + ".sumsq", k, dim);
    s.assign_entropy = matrix_from(field(j, "assign_entropy", where), where + ".assign_entropy", k, k);
    return s;
}

// Tracks the top-level key being read so that a truncated or malformed
// document can be reported by section.
struct SectionTracker : nlohmann::json_sax<json> {
    int depth = 0;
    std::string section;
    std::string error;

    bool null() override { return true; }
    bool boolean(bool) override { return true; }
    bool number_integer(number_integer_t) override { return true; }
    bool number_unsigned(number_unsigned_t) override { return true; }
    bool number_float(number_float_t, const string_t&) override { return true; }
    bool string(string_t&) override { return true; }
    bool binary(binary_t&) override { return true; }
    bool start_object(std::size_t) override {
        ++depth;
        return true;
    }
    bool key(string_t& k) override {
        if (depth == 1) section = k;
        return true;
    }
    bool end_object() override {
        --depth;
        return true;
    }
    bool start_array(std::size_t) override {
        ++depth;
        return true;
    }
    bool end_array() override {
        --depth;
        return true;
    }
    bool parse_error(std::size_t position, const std::string&, const nlohmann::detail::exception& ex) override {
        std::ostringstream msg;
        if (section.empty())
            msg << "snapshot: document is empty or malformed before any section";
        else
            msg << "snapshot: document is truncated or malformed in section '" << section << "'";
        msg << " (byte " << position << "; " << ex.what() << ")";
        error = msg.str();
        return false;
    }
};

const char* const kSections[] = {"schema_version", "label", "dim", "hyper_spec", "hyper", "components",
                                 "sticks", "caches", "aggregate"};

}  // namespace

std::string to_string(SpaceLabel label) { return label == SpaceLabel::feature ? "feature" : "trajectory"; }

SpaceLabel parse_space_label(const std::string& text) {
    if (text == "feature") return SpaceLabel::feature;
    if (text == "trajectory") return SpaceLabel::trajectory;
    throw InvalidArgument("unknown space label '" + text + "' (expected feature or trajectory)");
}

void KnowledgeSpace::validate() const {
    require(dim > 0, "knowledge space: dim must be positive");
    require(label != SpaceLabel::trajectory || dim % 2 == 0,
            "knowledge space: trajectory spaces need an even dim (waypoint pairs)");
    require(anchor_weight_floor >= 0.0, "knowledge space: anchor_weight_floor must be >= 0");
    require(!state.hyper.initialized() || state.dim() == dim, "knowledge space: mixture dimension differs from dim");
    require(memo.dim() == dim, "knowledge space: cache dimension differs from dim");
    require(memo.num_components() == state.num_components(), "knowledge space: caches do not match the mixture");
    require(!standardization || (standardization->mean.size() == dim && standardization->scale.size() == dim),
            "knowledge space: standardization has the wrong dimension");
}

KnowledgeSpace make_space(SpaceLabel label, int dim, double anchor_weight_floor, bool standardize) {
    KnowledgeSpace s;
    s.label = label;
    s.dim = dim;
    s.memo = MemoStore(dim);
    s.anchor_weight_floor = anchor_weight_floor;
    s.standardize = standardize;
    s.validate();
    return s;
}

FitReport update_space(KnowledgeSpace& space, const std::vector<RowMatrix>& batches, const InferenceConfig& config,
                       int task_id) {
    space.validate();
    require(!batches.empty(), "update_space: empty batch list");
    for (std::size_t i = 0; i < batches.size(); ++i)
        require(batches[i].cols() == space.dim, "update_space: batch " + std::to_string(i) + " has dimension " +
                                                    std::to_string(batches[i].cols()) + ", space dim is " +
                                                    std::to_string(space.dim));
    if (space.standardize && !space.standardization) space.standardization = fit_standardization(batches, space.dim);

    std::vector<Batch> stream;
    stream.reserve(batches.size());
    for (std::size_t i = 0; i < batches.size(); ++i)
        stream.push_back({"t" + std::to_string(task_id) + "/b" + std::to_string(i),
                          apply_standardization(batches[i], space.standardization)});

    FitResult fit = fit_stream(std::move(space.state), std::move(space.memo), stream, config, task_id,
                               space.hyper_spec);
    space.state = std::move(fit.state);
    space.memo = std::move(fit.memo);
    return fit.report;
}

AnchorSet extract_anchors(const KnowledgeSpace& space) {
    require(space.num_components() > 0, "extract_anchors: space has no components");
    Vector w = expected_stick_weights(space.state);
    w /= w.sum();
    std::vector<int> keep;
    for (int k = 0; k < space.num_components(); ++k)
        if (w[k] >= space.anchor_weight_floor) keep.push_back(k);

    AnchorSet out;
    out.anchors.resize(static_cast<Eigen::Index>(keep.size()), space.dim);
    out.weights.resize(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t r = 0; r < keep.size(); ++r) {
        const ComponentPosterior& c = space.state.components[keep[r]];
        Vector m = c.m;
        if (space.standardization)
            m = m.cwiseProduct(space.standardization->scale) + space.standardization->mean;
        out.anchors.row(r) = m.transpose();
        out.weights[r] = w[keep[r]];
        out.created_task.push_back(c.created_task);
    }
    return out;
}

double AnchorDrift::max_distance() const {
    double m = 0.0;
    for (double d : distance)
        if (!std::isnan(d)) m = std::max(m, d);
    return m;
}

AnchorDrift anchor_drift(const AnchorSet& before, const AnchorSet& after) {
    require(before.size() == 0 || after.size() == 0 || before.anchors.cols() == after.anchors.cols(),
            "anchor_drift: anchor dimensions differ");
    std::map<std::pair<int, int>, int> index_after;
    std::map<int, int> seen;
    for (int r = 0; r < after.size(); ++r) index_after[{after.created_task[r], seen[after.created_task[r]]++}] = r;

    AnchorDrift out;
    seen.clear();
    for (int r = 0; r < before.size(); ++r) {
        const auto it = index_after.find({before.created_task[r], seen[before.created_task[r]]++});
        if (it == index_after.end()) {
            out.distance.push_back(std::numeric_limits<double>::quiet_NaN());
            out.removed.push_back(r);
        } else {
            out.distance.push_back((before.anchors.row(r) - after.anchors.row(it->second)).norm());
        }
    }
    return out;
}

std::string snapshot_to_string(const KnowledgeSpace& space) {
    space.validate();
    json doc;
    doc["schema_version"] = kSnapshotVersion;
    doc["label"] = to_string(space.label);
    doc["dim"] = space.dim;
    doc["anchor_weight_floor"] = finite_number(space.anchor_weight_floor);
    doc["standardize"] = space.standardize;
    if (space.standardization)
        doc["standardization"] = {{"mean", to_json(space.standardization->mean)},
                                  {"scale", to_json(space.standardization->scale)}};
    else
        doc["standardization"] = nullptr;

    const HyperSpec& hs = space.hyper_spec;
    doc["hyper_spec"] = {{"kappa0", finite_number(hs.kappa0)},
                         {"a0", finite_number(hs.a0)},
                         {"alpha", finite_number(hs.alpha)},
                         {"b0_floor", finite_number(hs.b0_floor)},
                         {"m0", hs.m0 ? to_json(*hs.m0) : json(nullptr)},
                         {"b0", hs.b0 ? to_json(*hs.b0) : json(nullptr)}};

    const NIGHyper& h = space.state.hyper;
    if (h.initialized())
        doc["hyper"] = {{"m0", to_json(h.m0)},
                        {"kappa0", finite_number(h.kappa0)},
                        {"a0", finite_number(h.a0)},
                        {"b0", to_json(h.b0)},
                        {"alpha", finite_number(h.alpha)}};
    else
        doc["hyper"] = nullptr;

    doc["components"] = json::array();
    for (const ComponentPosterior& c : space.state.components)
        doc["components"].push_back({{"m", to_json(c.m)},
                                     {"kappa", finite_number(c.kappa)},
                                     {"a", finite_number(c.a)},
                                     {"b", to_json(c.b)},
                                     {"soft_count", finite_number(c.soft_count)},
                                     {"created_task", c.created_task}});
    doc["sticks"] = json::array();
    for (const StickPosterior& s : space.state.sticks)
        doc["sticks"].push_back({{"eta1", finite_number(s.eta1)}, {"eta0", finite_number(s.eta0)}});
    doc["caches"] = json::array();
    for (const BatchCache& c : space.memo.caches())
        doc["caches"].push_back({{"batch_id", c.batch_id}, {"stats", to_json(c.stats)}});
    doc["aggregate"] = to_json(space.memo.aggregate());
    return doc.dump(1) + "\n";
}

KnowledgeSpace snapshot_from_string(const std::string& text) {
    SectionTracker tracker;
    if (!json::sax_parse(text, &tracker)) throw SnapshotError(tracker.error);
    const json doc = json::parse(text);
    if (!doc.is_object()) throw SnapshotError("snapshot: top level must be an object");
    for (const char* key : kSections)
        if (!doc.contains(key)) throw SnapshotError(std::string("snapshot: missing section '") + key + "'");

    const int version = integer(doc["schema_version"], "schema_version");
    if (version != kSnapshotVersion)
        throw SnapshotError("snapshot: unsupported schema_version " + std::to_string(version) + " (expected " +
                            std::to_string(kSnapshotVersion) + ")");

    KnowledgeSpace space;
    if (!doc["label"].is_string()) fail("label", "expected a string");
    try {
        space.label = parse_space_label(doc["label"].get<std::string>());
    } catch (const InvalidArgument& e) {
        fail("label", e.what());
    }
    space.dim = integer(doc["dim"], "dim");
    if (space.dim <= 0) fail("dim", "must be positive");
    const int d = space.dim;
    if (doc.contains("anchor_weight_floor")) space.anchor_weight_floor = number(doc["anchor_weight_floor"], "anchor_weight_floor");
    if (doc.contains("standardize")) {
        if (!doc["standardize"].is_boolean()) fail("standardize", "expected true or false");
        space.standardize = doc["standardize"].get<bool>();
    }
    if (doc.contains("standardization") && !doc["standardization"].is_null()) {
        const json& s = doc["standardization"];
        space.standardization = Standardization{vector_from(field(s, "mean", "standardization"), "standardization.mean", d),
                                                vector_from(field(s, "scale", "standardization"), "standardization.scale", d)};
    }

    const json& hs = doc["hyper_spec"];
    space.hyper_spec.kappa0 = number(field(hs, "kappa0", "hyper_spec"), "hyper_spec.kappa0");
    space.hyper_spec.a0 = number(field(hs, "a0", "hyper_spec"), "hyper_spec.a0");
    space.hyper_spec.alpha = number(field(hs, "alpha", "hyper_spec"), "hyper_spec.alpha");
    space.hyper_spec.b0_floor = number(field(hs, "b0_floor", "hyper_spec"), "hyper_spec.b0_floor");
    if (hs.contains("m0") && !hs["m0"].is_null()) space.hyper_spec.m0 = vector_from(hs["m0"], "hyper_spec.m0", d);
    if (hs.contains("b0") && !hs["b0"].is_null()) space.hyper_spec.b0 = vector_from(hs["b0"], "hyper_spec.b0", d);

    if (!doc["hyper"].is_null()) {
        const json& h = doc["hyper"];
        NIGHyper& hyper = space.state.hyper;
        hyper.m0 = vector_from(field(h, "m0", "hyper"), "hyper.m0", d);
        hyper.kappa0 = number(field(h, "kappa0", "hyper"), "hyper.kappa0");
        hyper.a0 = number(field(h, "a0", "hyper"), "hyper.a0");
        hyper.b0 = vector_from(field(h, "b0", "hyper"), "hyper.b0", d);
        hyper.alpha = number(field(h, "alpha", "hyper"), "hyper.alpha");
        try {
            hyper.validate();
        } catch (const InvalidArgument& e) {
            fail("hyper", e.what());
        }
    }

    const json& comps = doc["components"];
    if (!comps.is_array()) fail("components", "expected an array");
    for (std::size_t k = 0; k < comps.size(); ++k) {
        const std::string where = "components[" + std::to_string(k) + "]";
        const json& c = comps[k];
        ComponentPosterior p;
        p.m = vector_from(field(c, "m", where), where + ".m", d);
        p.kappa = number(field(c, "kappa", where), where + ".kappa");
        p.a = number(field(c, "a", where), where + ".a");
        p.b = vector_from(field(c, "b", where), where + ".b", d);
        p.soft_count = number(field(c, "soft_count", where), where + ".soft_count");
        p.created_task = integer(field(c, "created_task", where), where + ".created_task");
        space.state.components.push_back(std::move(p));
    }
    const int k = static_cast<int>(comps.size());
    if (k > 0 && !space.state.hyper.initialized()) fail("hyper", "components present but no prior");

    const json& sticks = doc["sticks"];
    if (!sticks.is_array() || static_cast<int>(sticks.size()) != k)
        fail("sticks", "expected one entry per component (" + std::to_string(k) + ")");
    for (std::size_t i = 0; i < sticks.size(); ++i) {
        const std::string where = "sticks[" + std::to_string(i) + "]";
        space.state.sticks.push_back({number(field(sticks[i], "eta1", where), where + ".eta1"),
                                      number(field(sticks[i], "eta0", where), where + ".eta0")});
    }

    const json& caches = doc["caches"];
    if (!caches.is_array()) fail("caches", "expected an array");
    std::vector<BatchCache> parts;
    for (std::size_t i = 0; i < caches.size(); ++i) {
        const std::string where = "caches[" + std::to_string(i) + "]";
        const json& id = field(caches[i], "batch_id", where);
        if (!id.is_string()) fail(where + ".batch_id", "expected a string");
        parts.push_back({id.get<std::string>(), stats_from(field(caches[i], "stats", where), where + ".stats", k, d)});
    }
    SuffStats aggregate = stats_from(doc["aggregate"], "aggregate", k, d);
    space.memo = MemoStore::from_parts(d, std::move(parts), std::move(aggregate));

    try {
        space.validate();
    } catch (const InvalidArgument& e) {
        throw SnapshotError(std::string("snapshot: ") + e.what());
    }
    return space;
}

void save_snapshot(const KnowledgeSpace& space, const std::filesystem::path& path) {
    const std::string text = snapshot_to_string(space);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

KnowledgeSpace load_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open snapshot '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return snapshot_from_string(buf.str());
}

}  // namespace kspace
