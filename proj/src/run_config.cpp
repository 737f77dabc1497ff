#include "kspace/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "kspace/knowledge_space.hpp"

namespace kspace {

using nlohmann::json;

namespace {

class Reader {
  public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw InvalidArgument("config: '" + path_ + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception&) {
            throw InvalidArgument("config: '" + where(key) + "' has the wrong type");
        }
    }

    const json* section(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw InvalidArgument("config: unknown key '" + where(it.key()) + "'");
    }

  private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_spaces(const json& j, SpacesSection& s) {
    Reader r(j, "spaces");
    r.get("kappa0", s.kappa0);
    r.get("a0", s.a0);
    r.get("alpha", s.alpha);
    r.get("b0_floor", s.b0_floor);
    r.get("anchor_weight_floor", s.anchor_weight_floor);
    r.get("standardize_feature", s.standardize_feature);
    r.get("standardize_trajectory", s.standardize_trajectory);
    r.get("batch_size", s.batch_size);
    r.finish();
}

void read_inference(const json& j, InferenceConfig& c) {
    Reader r(j, "inference");
    r.get("passes", c.passes);
    r.get("birth_enabled", c.birth_enabled);
    r.get("birth_pool_min", c.birth_pool_min);
    r.get("birth_loglik_percentile", c.birth_loglik_percentile);
    r.get("birth_sweeps", c.birth_sweeps);
    r.get("birth_batch_margin", c.birth_batch_margin);
    r.get("merge_enabled", c.merge_enabled);
    r.get("merge_candidate_count", c.merge_candidate_count);
    r.get("prune_count_threshold", c.prune_count_threshold);
    r.get("rng_seed", c.rng_seed);
    r.get("elbo_tol", c.elbo_tol);
    r.finish();
}

void read_train(const json& j, TrainConfig& t) {
    Reader r(j, "decoder.train");
    r.get("steps", t.steps);
    r.get("learning_rate", t.learning_rate);
    r.get("adam", t.adam);
    r.get("beta1", t.beta1);
    r.get("beta2", t.beta2);
    r.get("adam_eps", t.adam_eps);
    r.finish();
}

void read_decoder(const json& j, DecoderSection& d) {
    Reader r(j, "decoder");
    r.get("width", d.width);
    r.get("temperature", d.temperature);
    r.get("top_k", d.top_k);
    r.get("use_feature_enhancer", d.use_feature_enhancer);
    r.get("use_trajectory_enhancer", d.use_trajectory_enhancer);
    if (const json* t = r.section("train")) read_train(*t, d.train);
    r.get("success_ade", d.success_ade);
    r.get("archetypes", d.archetypes);
    r.get("per_archetype", d.per_archetype);
    r.get("heldout_per_archetype", d.heldout_per_archetype);
    r.finish();
}

void read_curriculum(const json& j, CurriculumSection& c) {
    Reader r(j, "curriculum");
    r.get("profile", c.profile);
    r.get("min_count", c.min_count);
    r.get("reverse", c.reverse);
    r.get("feature_dim", c.feature_dim);
    r.get("waypoint_sigma", c.waypoint_sigma);
    r.get("feature_sigma", c.feature_sigma);
    r.get("heldout_per_task", c.heldout_per_task);
    r.finish();
}

void read_metrics(const json& j, MetricsSection& m) {
    Reader r(j, "metrics");
    std::string policy = m.zero_policy == ZeroPolicy::strict ? "strict" : "skip";
    r.get("zero_policy", policy);
    if (policy == "strict")
        m.zero_policy = ZeroPolicy::strict;
    else if (policy == "skip")
        m.zero_policy = ZeroPolicy::skip;
    else
        throw InvalidArgument("config: 'metrics.zero_policy' must be \"strict\" or \"skip\"");
    r.finish();
}

void check(bool ok, const std::string& message) {
    if (!ok) throw InvalidArgument("config: " + message);
}

}  // namespace

InferenceConfig RunConfig::default_inference() {
    InferenceConfig c;
    c.passes = 20;
    c.prune_count_threshold = 5.0;
    c.birth_pool_min = 4;
    return c;
}

void RunConfig::validate() const {
    check(spaces.kappa0 > 0 && spaces.a0 > 0 && spaces.alpha > 0 && spaces.b0_floor > 0,
          "spaces: kappa0, a0, alpha, b0_floor must be positive");
    check(spaces.anchor_weight_floor >= 0 && spaces.anchor_weight_floor < 1,
          "spaces.anchor_weight_floor must be in [0, 1)");
    check(spaces.batch_size >= 1, "spaces.batch_size must be >= 1");
    try {
        inference.validate();
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(std::string("config: inference: ") + e.what());
    }
    check(decoder.width >= 2 && decoder.width % 2 == 0, "decoder.width must be even and >= 2");
    check(decoder.temperature > 0, "decoder.temperature must be positive");
    check(decoder.top_k >= 1, "decoder.top_k must be >= 1");
    check(decoder.train.steps >= 0, "decoder.train.steps must be >= 0");
    check(decoder.train.learning_rate >= 0, "decoder.train.learning_rate must be >= 0");
    check(decoder.train.beta1 >= 0 && decoder.train.beta1 < 1 && decoder.train.beta2 >= 0 && decoder.train.beta2 < 1,
          "decoder.train betas must be in [0, 1)");
    check(decoder.train.adam_eps > 0, "decoder.train.adam_eps must be positive");
    check(decoder.success_ade > 0, "decoder.success_ade must be positive");
    check(decoder.archetypes >= 1 && decoder.archetypes <= 5, "decoder.archetypes must be in 1..5");
    check(decoder.per_archetype >= 1 && decoder.heldout_per_archetype >= 1,
          "decoder.per_archetype and heldout_per_archetype must be >= 1");
    check(!curriculum.profile.empty() && curriculum.profile.size() <= 5, "curriculum.profile must have 1 to 5 entries");
    for (double v : curriculum.profile) check(v > 0 && std::isfinite(v), "curriculum.profile entries must be positive");
    check(curriculum.min_count >= 1, "curriculum.min_count must be >= 1");
    check(curriculum.feature_dim >= 5 && curriculum.feature_dim <= kFeatureDim,
          "curriculum.feature_dim must be in 5..2816");
    check(curriculum.waypoint_sigma >= 0 && curriculum.feature_sigma >= 0, "curriculum sigmas must be >= 0");
    check(curriculum.heldout_per_task >= 1, "curriculum.heldout_per_task must be >= 1");
}

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw InvalidArgument(std::string("config: ") + e.what());
    }
    RunConfig c;
    Reader r(j, "");
    if (const json* s = r.section("spaces")) read_spaces(*s, c.spaces);
    if (const json* s = r.section("inference")) read_inference(*s, c.inference);
    if (const json* s = r.section("decoder")) read_decoder(*s, c.decoder);
    if (const json* s = r.section("curriculum")) read_curriculum(*s, c.curriculum);
    if (const json* s = r.section("metrics")) read_metrics(*s, c.metrics);
    if (const json* s = r.section("outputs")) {
        Reader o(*s, "outputs");
        o.get("directory", c.outputs.directory);
        o.finish();
    }
    r.get("seed", c.seed);
    r.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    // skip header comment lines such as the one on emitted config.json
    std::string line, text;
    bool header = true;
    while (std::getline(in, line)) {
        if (header && !line.empty() && line[0] == '#') continue;
        header = false;
        text += line + '\n';
    }
    return parse_run_config(text);
}

std::string run_config_json(const RunConfig& c) {
    json j;
    j["spaces"] = {{"kappa0", c.spaces.kappa0},
                   {"a0", c.spaces.a0},
                   {"alpha", c.spaces.alpha},
                   {"b0_floor", c.spaces.b0_floor},
                   {"anchor_weight_floor", c.spaces.anchor_weight_floor},
                   {"standardize_feature", c.spaces.standardize_feature},
                   {"standardize_trajectory", c.spaces.standardize_trajectory},
                   {"batch_size", c.spaces.batch_size}};
    const InferenceConfig& i = c.inference;
    j["inference"] = {{"passes", i.passes},
                      {"birth_enabled", i.birth_enabled},
                      {"birth_pool_min", i.birth_pool_min},
                      {"birth_loglik_percentile", i.birth_loglik_percentile},
                      {"birth_sweeps", i.birth_sweeps},
                      {"birth_batch_margin", i.birth_batch_margin},
                      {"merge_enabled", i.merge_enabled},
                      {"merge_candidate_count", i.merge_candidate_count},
                      {"prune_count_threshold", i.prune_count_threshold},
                      {"rng_seed", i.rng_seed},
                      {"elbo_tol", i.elbo_tol}};
    const DecoderSection& d = c.decoder;
    j["decoder"] = {{"width", d.width},
                    {"temperature", d.temperature},
                    {"top_k", d.top_k},
                    {"use_feature_enhancer", d.use_feature_enhancer},
                    {"use_trajectory_enhancer", d.use_trajectory_enhancer},
                    {"train",
                     {{"steps", d.train.steps},
                      {"learning_rate", d.train.learning_rate},
                      {"adam", d.train.adam},
                      {"beta1", d.train.beta1},
                      {"beta2", d.train.beta2},
                      {"adam_eps", d.train.adam_eps}}},
                    {"success_ade", d.success_ade},
                    {"archetypes", d.archetypes},
                    {"per_archetype", d.per_archetype},
                    {"heldout_per_archetype", d.heldout_per_archetype}};
    j["curriculum"] = {{"profile", c.curriculum.profile},
                       {"min_count", c.curriculum.min_count},
                       {"reverse", c.curriculum.reverse},
                       {"feature_dim", c.curriculum.feature_dim},
                       {"waypoint_sigma", c.curriculum.waypoint_sigma},
                       {"feature_sigma", c.curriculum.feature_sigma},
                       {"heldout_per_task", c.curriculum.heldout_per_task}};
    j["metrics"] = {{"zero_policy", c.metrics.zero_policy == ZeroPolicy::strict ? "strict" : "skip"}};
    j["outputs"] = {{"directory", c.outputs.directory}};
    j["seed"] = c.seed;
    return j.dump(2);  // std::map keys: sorted
}

std::string config_hash(const RunConfig& c) {
    // where outputs go does not change what they contain
    RunConfig copy = c;
    copy.outputs.directory.clear();
    const std::string text = run_config_json(copy);
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
    std::uint64_t h = splitmix64(seed);
    for (unsigned char ch : purpose) h = splitmix64(h ^ ch);
    return h;
}

}  // namespace kspace
