#include "kspace/memovb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace kspace {

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw InvalidArgument(message);
}

// Counts that went negative through subtract-then-add round-off.
void clamp_roundoff(SuffStats& s) {
    for (int k = 0; k < s.num_components(); ++k) {
        if (s.count[k] < 0.0 && s.count[k] > -1e-9 * (1.0 + s.count.cwiseAbs().sum())) s.count[k] = 0.0;
    }
}

ComponentPosterior posterior_from_stats(const NIGHyper& h, double n, const Vector& sum, const Vector& sumsq,
                                        int created_task) {
    MixtureState one;
    one.hyper = h;
    one.components.push_back(prior_component(h, created_task));
    one.sticks.push_back({});
    SuffStats s = SuffStats::zeros(1, h.dim());
    s.count[0] = n;
    s.sum.row(0) = sum.transpose();
    s.sumsq.row(0) = sumsq.transpose();
    return global_step(one, s).components[0];
}

}  // namespace

const BatchCache* MemoStore::find(const std::string& batch_id) const {
    for (const BatchCache& c : caches_)
        if (c.batch_id == batch_id) return &c;
    return nullptr;
}

void MemoStore::replace(const std::string& batch_id, SuffStats fresh) {
    require(fresh.dim() == dim_ && fresh.num_components() == num_components(),
            "MemoStore::replace: statistics shape mismatch");
    auto it = std::find_if(caches_.begin(), caches_.end(),
                           [&](const BatchCache& c) { return c.batch_id == batch_id; });
    if (it != caches_.end()) {
        aggregate_ -= it->stats;
        aggregate_ += fresh;
        it->stats = std::move(fresh);
    } else {
        aggregate_ += fresh;
        caches_.push_back({batch_id, std::move(fresh)});
    }
    clamp_roundoff(aggregate_);
}

void MemoStore::append_component() {
    for (BatchCache& c : caches_) c.stats.append_empty();
    aggregate_.append_empty();
}

void MemoStore::remove_component(int k) {
    for (BatchCache& c : caches_) c.stats.remove(k);
    aggregate_.remove(k);
}

void MemoStore::merge_components(int a, int b) {
    for (BatchCache& c : caches_) c.stats.merge_into(a, b);
    aggregate_.merge_into(a, b);
}

SuffStats MemoStore::sum_of_caches() const {
    SuffStats total = SuffStats::zeros(num_components(), dim_);
    for (const BatchCache& c : caches_) total += c.stats;
    return total;
}

MemoStore MemoStore::from_parts(int dim, std::vector<BatchCache> caches, SuffStats aggregate) {
    MemoStore m(dim);
    for (const BatchCache& c : caches)
        require(c.stats.dim() == dim && c.stats.num_components() == aggregate.num_components(),
                "MemoStore: cache '" + c.batch_id + "' has the wrong shape");
    require(aggregate.dim() == dim, "MemoStore: aggregate has the wrong dimension");
    m.caches_ = std::move(caches);
    m.aggregate_ = std::move(aggregate);
    return m;
}

void InferenceConfig::validate() const {
    require(passes >= 1, "inference: passes must be >= 1");
    require(birth_pool_min >= 1, "inference: birth_pool_min must be >= 1");
    require(birth_sweeps >= 1, "inference: birth_sweeps must be >= 1");
    require(birth_batch_margin >= 0.0, "inference: birth_batch_margin must be nonnegative");
    require(birth_loglik_percentile > 0.0 && birth_loglik_percentile < 100.0,
            "inference: birth_loglik_percentile must lie in (0, 100)");
    require(merge_candidate_count >= 1, "inference: merge_candidate_count must be >= 1");
    require(prune_count_threshold >= 0.0, "inference: prune_count_threshold must be >= 0");
    require(elbo_tol > 0.0, "inference: elbo_tol must be positive");
}

MoveOutcome birth_move(MixtureState& state, MemoStore& memo, const Batch& batch,
                       const InferenceConfig& config, int task_id) {
    MoveOutcome out;
    if (!config.birth_enabled || state.num_components() == 0) return out;
    const BatchCache* cache = memo.find(batch.id);
    require(cache != nullptr, "birth_move: batch '" + batch.id + "' has no cache");

    const int n = static_cast<int>(batch.data.rows());
    const int d = state.dim();
    const LoglikTerms terms = loglik_terms(state);
    std::vector<double> best(n);
    std::vector<int> owner(n);
    for (int i = 0; i < n; ++i) {
        double b = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < terms.num_components(); ++k) {
            const double quad = (terms.precision.row(k).array() *
                                 (batch.data.row(i) - terms.mean.row(k)).array().square())
                                    .sum();
            if (terms.constant[k] - 0.5 * quad > b) {
                b = terms.constant[k] - 0.5 * quad;
                owner[i] = k;
            }
        }
        best[i] = b;
    }
    std::vector<double> sorted = best;
    std::sort(sorted.begin(), sorted.end());
    const int rank = std::max(1, static_cast<int>(std::ceil(config.birth_loglik_percentile / 100.0 * n)));
    const double threshold = sorted[rank - 1];

    // Anchors: the worst pool point of each component that owns pool points,
    // most pool mass first.
    std::vector<int> pool_mass(state.num_components(), 0), anchor(state.num_components(), -1);
    for (int i = 0; i < n; ++i) {
        if (best[i] > threshold) continue;
        ++pool_mass[owner[i]];
        if (anchor[owner[i]] < 0 || best[i] < best[anchor[owner[i]]]) anchor[owner[i]] = i;
    }
    std::vector<int> order;
    for (int k = 0; k < state.num_components(); ++k)
        if (pool_mass[k] > 0) order.push_back(k);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return pool_mass[a] > pool_mass[b]; });

    // Two gates, either of which accepts. The stream gate compares the
    // surrogate ELBO of the memo aggregate before and after the sweep. The
    // batch gate compares the batch on its own: the current components refit
    // to its cached statistics versus the proposal refit after the sweep.
    const SuffStats& agg = memo.aggregate();
    const SuffStats& batch_stats = cache->stats;
    const double stream_before = elbo_from_stats(state, agg);
    const double batch_before = elbo_from_stats(global_step(state, batch_stats), batch_stats);
    out.elbo_before = stream_before;
    out.elbo_after = stream_before;

    for (int k_anchor : order) {
        const int worst = anchor[k_anchor];
        // The pool is the anchor's neighbourhood: as many of its component's
        // points as that component has poorly explained ones, nearest first.
        if (pool_mass[k_anchor] < config.birth_pool_min) continue;
        std::vector<std::pair<double, int>> near;
        for (int i = 0; i < n; ++i) {
            if (owner[i] != k_anchor) continue;
            near.push_back({(batch.data.row(i) - batch.data.row(worst)).squaredNorm(), i});
        }
        std::stable_sort(near.begin(), near.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        const int pool_size = pool_mass[k_anchor];
        Vector sum = Vector::Zero(d), sumsq = Vector::Zero(d);
        Vector moved = Vector::Zero(state.num_components() + 1);
        moved[k_anchor] = pool_size;
        for (int j = 0; j < pool_size; ++j) {
            sum += batch.data.row(near[j].second).transpose();
            sumsq += batch.data.row(near[j].second).transpose().cwiseAbs2();
        }
        if (pool_size < config.birth_pool_min) continue;

        // Sticks of the proposal reflect the pool's mass moving to the newcomer.
        MixtureState proposal = state;
        proposal.components.push_back(posterior_from_stats(state.hyper, pool_size, sum, sumsq, task_id));
        proposal.sticks.push_back({});
        Vector counts(state.num_components() + 1);
        counts.head(state.num_components()) = batch_stats.count;
        counts -= moved;
        counts[state.num_components()] = pool_size;
        counts = counts.cwiseMax(0.0);
        double tail = 0.0;
        for (int k = proposal.num_components() - 1; k >= 0; --k) {
            proposal.sticks[k] = {1.0 + counts[k], state.hyper.alpha + tail};
            tail += counts[k];
        }

        SuffStats old_cache = batch_stats;
        old_cache.append_empty();
        auto stream_stats = [&](const SuffStats& fresh) {
            SuffStats s = agg;
            s.append_empty();
            s -= old_cache;
            s += fresh;
            clamp_roundoff(s);
            return s;
        };
        // Stream track: one sweep, judged against the whole memo.
        MixtureState stream_prop = proposal;
        SuffStats stream_fresh = accumulate_stats(batch.data, local_step(stream_prop, batch.data));
        // Batch track: further sweeps with components refit to this batch alone.
        MixtureState batch_prop = proposal;
        SuffStats batch_fresh = stream_fresh;
        for (int sweep = 1; sweep < config.birth_sweeps; ++sweep) {
            batch_prop = global_step(batch_prop, batch_fresh);
            batch_fresh = accumulate_stats(batch.data, local_step(batch_prop, batch.data));
        }
        const SuffStats new_agg = stream_stats(stream_fresh);
        const double stream_after = elbo_from_stats(global_step(stream_prop, new_agg), new_agg);
        const double batch_after = elbo_from_stats(global_step(batch_prop, batch_fresh), batch_fresh);
        SuffStats fresh;
        if (stream_after > stream_before + config.elbo_tol) {
            out.elbo_after = stream_after;
            fresh = std::move(stream_fresh);
            proposal = std::move(stream_prop);
        } else if (batch_after > batch_before + config.birth_batch_margin) {
            out.elbo_before = batch_before;
            out.elbo_after = batch_after;
            fresh = std::move(batch_fresh);
            proposal = std::move(batch_prop);
        } else {
            out.elbo_after = stream_after;
            continue;
        }

        memo.append_component();
        memo.replace(batch.id, std::move(fresh));
        state = global_step(proposal, memo.aggregate());
        out.accepted = true;
        return out;
    }
    return out;
}

std::vector<std::pair<int, int>> merge_candidates(const MixtureState& state, int max_count) {
    struct Scored {
        double score;
        int a, b;
    };
    std::vector<Scored> all;
    const int k_count = state.num_components();
    for (int a = 0; a < k_count; ++a) {
        for (int b = a + 1; b < k_count; ++b) {
            const ComponentPosterior& ca = state.components[a];
            const ComponentPosterior& cb = state.components[b];
            const Vector pooled = ca.b / ca.a + cb.b / cb.a;
            const double dist = ((ca.m - cb.m).array().square() / pooled.array()).sum();
            all.push_back({std::sqrt(dist), a, b});
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const Scored& x, const Scored& y) { return x.score < y.score; });
    std::vector<std::pair<int, int>> out;
    for (const Scored& s : all) {
        if (static_cast<int>(out.size()) >= max_count) break;
        out.emplace_back(s.a, s.b);
    }
    return out;
}

std::vector<MoveOutcome> merge_move(MixtureState& state, MemoStore& memo, const InferenceConfig& config) {
    std::vector<MoveOutcome> accepted;
    if (!config.merge_enabled || state.num_components() < 2) return accepted;

    const auto candidates = merge_candidates(state, config.merge_candidate_count);
    // Current index of every original component; -1 once merged away.
    std::vector<int> where(state.num_components());
    std::iota(where.begin(), where.end(), 0);
    std::vector<bool> used(state.num_components(), false);

    for (const auto& [orig_a, orig_b] : candidates) {
        if (used[orig_a] || used[orig_b]) continue;
        const int a = where[orig_a];
        const int b = where[orig_b];

        MoveOutcome move;
        move.elbo_before = elbo_from_stats(state, memo.aggregate());
        SuffStats merged = memo.aggregate();
        merged.merge_into(a, b);
        MixtureState shrunk = state;
        shrunk.components[a].created_task =
            std::min(state.components[a].created_task, state.components[b].created_task);
        shrunk.components.erase(shrunk.components.begin() + b);
        shrunk.sticks.erase(shrunk.sticks.begin() + b);
        MixtureState next = global_step(shrunk, merged);
        move.elbo_after = elbo_from_stats(next, merged);
        if (move.elbo_after < move.elbo_before - config.elbo_tol) continue;

        memo.merge_components(a, b);
        state = std::move(next);
        move.accepted = true;
        accepted.push_back(move);
        used[orig_a] = used[orig_b] = true;
        where[orig_b] = -1;
        for (int& w : where)
            if (w > b) --w;
    }
    return accepted;
}

int prune(MixtureState& state, MemoStore& memo, double threshold) {
    require(threshold >= 0.0, "prune: threshold must be >= 0");
    int removed = 0;
    for (int k = state.num_components() - 1; k >= 0; --k) {
        if (state.components[k].soft_count < threshold) {
            state.components.erase(state.components.begin() + k);
            state.sticks.erase(state.sticks.begin() + k);
            memo.remove_component(k);
            ++removed;
        }
    }
    if (removed > 0 && state.num_components() > 0) state = global_step(state, memo.aggregate());
    return removed;
}

FitResult fit_stream(MixtureState state, MemoStore memo, const std::vector<Batch>& batches,
                     const InferenceConfig& config, int task_id, const HyperSpec& hyper_spec) {
    config.validate();
    require(!batches.empty(), "fit_stream: empty stream");
    const int d = static_cast<int>(batches.front().data.cols());
    for (const Batch& b : batches) {
        require(b.data.rows() > 0, "fit_stream: batch '" + b.id + "' is empty");
        require(b.data.cols() == d, "fit_stream: batch '" + b.id + "' has dimension " +
                                        std::to_string(b.data.cols()) + ", expected " + std::to_string(d));
        require(b.data.allFinite(), "fit_stream: batch '" + b.id + "' has non-finite values");
    }

    if (state.num_components() == 0) {
        if (!state.hyper.initialized()) state.hyper = make_default_hyper(batches.front().data, hyper_spec);
        require(state.dim() == d, "fit_stream: batch dimension differs from the prior's");
        if (memo.dim() == 0 && memo.caches().empty()) memo = MemoStore(d);
        require(memo.num_components() == 0, "fit_stream: empty mixture with non-empty caches");
        state = seed_state(state.hyper, batches.front().data, task_id);
        memo.append_component();
    }
    require(state.dim() == d, "fit_stream: batch dimension " + std::to_string(d) +
                                  " differs from the mixture's " + std::to_string(state.dim()));
    require(memo.dim() == d && memo.num_components() == state.num_components(),
            "fit_stream: caches do not match the mixture");

    FitReport report;
    std::mt19937_64 rng(config.rng_seed);
    std::vector<int> order(batches.size());
    std::iota(order.begin(), order.end(), 0);

    for (int pass = 0; pass < config.passes; ++pass) {
        if (pass > 0) std::shuffle(order.begin(), order.end(), rng);
        for (int bi : order) {
            const Batch& batch = batches[bi];
            const Responsibilities resp = local_step(state, batch.data);
            memo.replace(batch.id, accumulate_stats(batch.data, resp));
            state = global_step(state, memo.aggregate());
            if (config.birth_enabled && birth_move(state, memo, batch, config, task_id).accepted)
                ++report.births_accepted;
        }
        if (config.merge_enabled) {
            for (const MoveOutcome& m : merge_move(state, memo, config)) {
                ++report.merges_accepted;
                report.merge_deltas.push_back(m.elbo_after - m.elbo_before);
            }
        }
        const double value = elbo_from_stats(state, memo.aggregate());
        if (!std::isfinite(value)) throw NumericalError("fit_stream: non-finite ELBO at pass " + std::to_string(pass));
        report.elbo_trace.push_back(value);
    }
    if (config.prune_count_threshold > 0.0) prune(state, memo, config.prune_count_threshold);

    report.final_k = state.num_components();
    for (const ComponentPosterior& c : state.components) report.provenance.push_back(c.created_task);
    return {std::move(state), std::move(memo), std::move(report)};
}

}  // namespace kspace
