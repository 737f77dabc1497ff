#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kspace/mixture.hpp"

namespace kspace {

struct BatchCache {
    std::string batch_id;
    SuffStats stats;
};

/// Per-batch statistics as of each batch's last visit plus their running
/// aggregate. The aggregate always equals the sum of the caches up to
/// round-off.
class MemoStore {
  public:
    MemoStore() = default;
    explicit MemoStore(int dim) : dim_(dim), aggregate_(SuffStats::zeros(0, dim)) {}

    int dim() const { return dim_; }
    int num_components() const { return aggregate_.num_components(); }
    const SuffStats& aggregate() const { return aggregate_; }
    const std::vector<BatchCache>& caches() const { return caches_; }

    const BatchCache* find(const std::string& batch_id) const;

    /// Swaps in fresh statistics for a batch: subtracts its previous cache
    /// (if any) from the aggregate and adds the new one.
    void replace(const std::string& batch_id, SuffStats fresh);

    void append_component();
    void remove_component(int k);
    void merge_components(int a, int b);

    /// Elementwise sum of all caches, recomputed from scratch.
    SuffStats sum_of_caches() const;

    /// Restores a store from serialized parts.
    static MemoStore from_parts(int dim, std::vector<BatchCache> caches, SuffStats aggregate);

  private:
    int dim_ = 0;
    std::vector<BatchCache> caches_;
    SuffStats aggregate_;
};

struct InferenceConfig {
    int passes = 10;
    bool birth_enabled = true;
    int birth_pool_min = 10;
    /// Points whose best expected log-likelihood is at or below this
    /// percentile of the batch form the birth pool.
    double birth_loglik_percentile = 20.0;
    /// Local/global sweeps of a birth proposal refit to its batch alone
    /// (the batch gate); the stream gate always uses one sweep.
    int birth_sweeps = 2;
    /// Improvement (nats) the batch-local birth gate must exceed.
    double birth_batch_margin = 1.0;
    bool merge_enabled = true;
    int merge_candidate_count = 5;
    double prune_count_threshold = 0.0;
    std::uint64_t rng_seed = 0;
    /// Absolute gate for moves; relative (times max(1, |ELBO|)) for the
    /// per-pass monotonicity check.
    double elbo_tol = 1e-6;

    void validate() const;
};

struct FitReport {
    std::vector<double> elbo_trace;
    int births_accepted = 0;
    int merges_accepted = 0;
    int final_k = 0;
    std::vector<int> provenance;
    /// Surrogate ELBO change of every accepted merge.
    std::vector<double> merge_deltas;
};

struct Batch {
    std::string id;
    RowMatrix data;
};

struct FitResult {
    MixtureState state;
    MemoStore memo;
    FitReport report;
};

FitResult fit_stream(MixtureState state, MemoStore memo, const std::vector<Batch>& batches,
                     const InferenceConfig& config, int task_id, const HyperSpec& hyper_spec = {});

struct MoveOutcome {
    bool accepted = false;
    double elbo_before = 0.0;
    double elbo_after = 0.0;
};

/// Tries to add one component built from the batch's poorly explained
/// points. For each component owning such points (most first), its worst
/// point anchors a pool: that many of the component's batch points nearest the
/// anchor, whose moments seed the proposal. The proposal is accepted when one
/// sweep raises the aggregate ELBO, or when refitting to the batch alone
/// raises the batch's standalone ELBO by more than birth_batch_margin. The
/// batch must already have a cache in `memo`. On rejection `state` and `memo`
/// are left untouched.
MoveOutcome birth_move(MixtureState& state, MemoStore& memo, const Batch& batch,
                       const InferenceConfig& config, int task_id);

/// Tries up to merge_candidate_count pair merges; returns the accepted ones'
/// outcomes. Each component takes part in at most one merge per call.
std::vector<MoveOutcome> merge_move(MixtureState& state, MemoStore& memo, const InferenceConfig& config);

/// Candidate pairs (a < b) ordered by scaled mean distance.
std::vector<std::pair<int, int>> merge_candidates(const MixtureState& state, int max_count);

/// Drops components with soft_count below threshold. Returns how many.
int prune(MixtureState& state, MemoStore& memo, double threshold);

}  // namespace kspace
