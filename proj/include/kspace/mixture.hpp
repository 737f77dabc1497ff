#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "kspace/numeric.hpp"

// Dirichlet process mixture with diagonal Gaussian components.
//
// Each component carries d independent Normal-Gamma posteriors
//   lambda_j ~ Gamma(a, b_j)   (shape, rate)
//   mu_j | lambda_j ~ Normal(m_j, 1 / (kappa * lambda_j))
// and a Beta(eta1, eta0) posterior over its stick-breaking fraction. The
// component list is truncation-free: K is exactly the number of components
// that exist, and new ones only appear through birth moves.

namespace kspace {

struct NIGHyper {
    Vector m0;
    double kappa0 = 1.0;
    double a0 = 1.0;
    Vector b0;
    double alpha = 1.0;

    int dim() const { return static_cast<int>(m0.size()); }
    bool initialized() const { return m0.size() > 0; }
    void validate() const;
};

/// Overrides for the data-scaled default prior. Unset fields are derived from
/// the first batch the mixture sees.
struct HyperSpec {
    double kappa0 = 1.0;
    double a0 = 1.0;
    double alpha = 1.0;
    std::optional<Vector> m0;
    std::optional<Vector> b0;
    double b0_floor = 1e-6;
};

NIGHyper make_default_hyper(const RowMatrix& first_batch, const HyperSpec& spec);

struct ComponentPosterior {
    Vector m;
    double kappa = 1.0;
    double a = 1.0;
    Vector b;
    double soft_count = 0.0;
    int created_task = 0;
};

struct StickPosterior {
    double eta1 = 1.0;
    double eta0 = 1.0;
};

struct MixtureState {
    NIGHyper hyper;
    std::vector<ComponentPosterior> components;
    std::vector<StickPosterior> sticks;

    int num_components() const { return static_cast<int>(components.size()); }
    int dim() const { return hyper.dim(); }
};

ComponentPosterior prior_component(const NIGHyper& hyper, int created_task);

/// Responsibility-weighted statistics of a batch.
///
/// `assign_entropy` is K x K: the diagonal holds -sum_i r_ik log r_ik, and
/// entry (a, b) holds the entropy of the column r_a + r_b, which is what the
/// assignment entropy of a merged component would be.
struct SuffStats {
    Vector count;
    RowMatrix sum;
    RowMatrix sumsq;
    RowMatrix assign_entropy;

    static SuffStats zeros(int k, int d);

    int num_components() const { return static_cast<int>(count.size()); }
    int dim() const { return static_cast<int>(sum.cols()); }

    SuffStats& operator+=(const SuffStats& other);
    SuffStats& operator-=(const SuffStats& other);

    /// Appends an empty component column.
    void append_empty();
    /// Drops component k.
    void remove(int k);
    /// Folds component b into component a (a < b); b is removed.
    void merge_into(int a, int b);
};

/// Per-point responsibilities, n x K, rows on the simplex.
using Responsibilities = RowMatrix;

/// Component-wise constants of E_q[log N(x | mu_k, lambda_k)] so that
///   value_k(x) = constant_k - 1/2 sum_j precision_kj (x_j - mean_kj)^2.
struct LoglikTerms {
    Vector constant;
    RowMatrix precision;
    RowMatrix mean;

    int num_components() const { return static_cast<int>(constant.size()); }
};

LoglikTerms loglik_terms(const MixtureState& state);

Vector expected_log_stick_weights(const MixtureState& state);
/// E[pi_k] = E[beta_k] prod_{j<k} E[1 - beta_j].
Vector expected_stick_weights(const MixtureState& state);

Vector expected_log_likelihood(const MixtureState& state, const Vector& x);

Responsibilities local_step(const MixtureState& state, const RowMatrix& batch);

SuffStats accumulate_stats(const RowMatrix& batch, const Responsibilities& resp);

MixtureState global_step(const MixtureState& state, const SuffStats& stats);

/// ELBO split into its component-local part, which is equivariant under
/// relabeling, and the stick-breaking part, which depends on component order.
struct ElboTerms {
    double likelihood = 0.0;     // sum_k E[log p(x | theta_k)] under r
    double entropy = 0.0;        // -sum r log r
    double component_kl = 0.0;   // sum_k KL(q(theta_k) || prior)
    double stick = 0.0;          // sum_k N_k E[log pi_k] - KL(q(beta_k) || Beta(1, alpha))

    double total() const { return likelihood + entropy - component_kl + stick; }
};

ElboTerms elbo_terms(const MixtureState& state, const SuffStats& stats);

/// Mean-field ELBO evaluated from (aggregated) sufficient statistics.
double elbo_from_stats(const MixtureState& state, const SuffStats& stats);

double elbo(const MixtureState& state, const RowMatrix& batch, const Responsibilities& resp);

struct Assignment {
    int component = -1;
    double log_resp = 0.0;
};

/// Most responsible component for x; ties go to the lowest index.
Assignment predictive_assign(const MixtureState& state, const Vector& x);

/// Builds a state with one component fitted to `batch` (all responsibility 1).
MixtureState seed_state(const NIGHyper& hyper, const RowMatrix& batch, int created_task);

}  // namespace kspace
