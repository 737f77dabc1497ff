#include "kspace/mixture.hpp"

#include <algorithm>
#include <numbers>
#include <string>

#include "kspace/kernels.hpp"

namespace kspace {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // log(2 pi) / 2

void require(bool ok, const std::string& message) {
    if (!ok) throw InvalidArgument(message);
}

double kl_gamma(double shape, double rate, double shape0, double rate0) {
    return (shape - shape0) * digamma(shape) - std::lgamma(shape) + std::lgamma(shape0) +
           shape0 * (std::log(rate) - std::log(rate0)) + shape * (rate0 - rate) / rate;
}

double kl_beta(double a, double b, double a0, double b0) {
    return log_beta(a0, b0) - log_beta(a, b) + (a - a0) * digamma(a) + (b - b0) * digamma(b) +
           (a0 - a + b0 - b) * digamma(a + b);
}

}  // namespace

void NIGHyper::validate() const {
    require(initialized(), "hyper: prior mean is empty");
    require(b0.size() == m0.size(), "hyper: b0 and m0 differ in length");
    require(kappa0 > 0.0, "hyper: kappa0 must be positive");
    require(a0 > 0.5, "hyper: a0 must exceed 0.5");
    require(alpha > 0.0, "hyper: alpha must be positive");
    require((b0.array() > 0.0).all(), "hyper: b0 entries must be positive");
    require(m0.allFinite(), "hyper: m0 must be finite");
}

NIGHyper make_default_hyper(const RowMatrix& first_batch, const HyperSpec& spec) {
    require(first_batch.rows() > 0 && first_batch.cols() > 0, "default hyper needs a non-empty batch");
    const double n = static_cast<double>(first_batch.rows());
    NIGHyper h;
    const Vector mean = first_batch.colwise().mean().transpose();
    h.m0 = spec.m0 ? *spec.m0 : mean;
    if (spec.b0) {
        h.b0 = *spec.b0;
    } else {
        const Vector var =
            (first_batch.rowwise() - mean.transpose()).array().square().colwise().sum().transpose() / n;
        h.b0 = var.cwiseMax(spec.b0_floor);
    }
    h.kappa0 = spec.kappa0;
    h.a0 = spec.a0;
    h.alpha = spec.alpha;
    require(h.m0.size() == first_batch.cols(), "hyper override m0 has the wrong dimension");
    require(h.b0.size() == first_batch.cols(), "hyper override b0 has the wrong dimension");
    h.validate();
    return h;
}

ComponentPosterior prior_component(const NIGHyper& hyper, int created_task) {
    ComponentPosterior c;
    c.m = hyper.m0;
    c.kappa = hyper.kappa0;
    c.a = hyper.a0;
    c.b = hyper.b0;
    c.soft_count = 0.0;
    c.created_task = created_task;
    return c;
}

SuffStats SuffStats::zeros(int k, int d) {
    SuffStats s;
    s.count = Vector::Zero(k);
    s.sum = RowMatrix::Zero(k, d);
    s.sumsq = RowMatrix::Zero(k, d);
    s.assign_entropy = RowMatrix::Zero(k, k);
    return s;
}

SuffStats& SuffStats::operator+=(const SuffStats& o) {
    require(o.num_components() == num_components() && o.dim() == dim(), "SuffStats shape mismatch");
    count += o.count;
    sum += o.sum;
    sumsq += o.sumsq;
    assign_entropy += o.assign_entropy;
    return *this;
}

SuffStats& SuffStats::operator-=(const SuffStats& o) {
    require(o.num_components() == num_components() && o.dim() == dim(), "SuffStats shape mismatch");
    count -= o.count;
    sum -= o.sum;
    sumsq -= o.sumsq;
    assign_entropy -= o.assign_entropy;
    return *this;
}

void SuffStats::append_empty() {
    const int k = num_components();
    const int d = dim();
    count.conservativeResize(k + 1);
    count[k] = 0.0;
    sum.conservativeResize(k + 1, d);
    sum.row(k).setZero();
    sumsq.conservativeResize(k + 1, d);
    sumsq.row(k).setZero();
    // An empty column leaves the entropy of any union with it unchanged.
    RowMatrix e = RowMatrix::Zero(k + 1, k + 1);
    e.topLeftCorner(k, k) = assign_entropy;
    for (int a = 0; a < k; ++a) {
        e(a, k) = assign_entropy(a, a);
        e(k, a) = assign_entropy(a, a);
    }
    assign_entropy = std::move(e);
}

namespace {

template <class M>
M drop_row(const M& m, int k) {
    M out(m.rows() - 1, m.cols());
    out.topRows(k) = m.topRows(k);
    out.bottomRows(m.rows() - 1 - k) = m.bottomRows(m.rows() - 1 - k);
    return out;
}

}  // namespace

void SuffStats::remove(int k) {
    require(k >= 0 && k < num_components(), "SuffStats::remove: index out of range");
    const int n = num_components();
    Vector c(n - 1);
    c.head(k) = count.head(k);
    c.tail(n - 1 - k) = count.tail(n - 1 - k);
    count = std::move(c);
    sum = drop_row(sum, k);
    sumsq = drop_row(sumsq, k);
    RowMatrix e = drop_row(assign_entropy, k);
    RowMatrix et = drop_row(RowMatrix(e.transpose()), k);
    assign_entropy = et.transpose();
}

void SuffStats::merge_into(int a, int b) {
    require(a >= 0 && a < b && b < num_components(), "SuffStats::merge_into: need a < b in range");
    const int n = num_components();
    count[a] += count[b];
    sum.row(a) += sum.row(b);
    sumsq.row(a) += sumsq.row(b);
    const double merged = assign_entropy(a, b);
    // Union entropies with the merged column are unknown; subadditivity of
    // -p log p gives the upper bound H(a+b) + H(c).
    for (int c = 0; c < n; ++c) {
        if (c == a || c == b) continue;
        assign_entropy(a, c) = merged + assign_entropy(c, c);
        assign_entropy(c, a) = assign_entropy(a, c);
    }
    assign_entropy(a, a) = merged;
    remove(b);
}

LoglikTerms loglik_terms(const MixtureState& state) {
    const int k_count = state.num_components();
    const int d = state.dim();
    LoglikTerms t;
    t.constant.resize(k_count);
    t.precision.resize(k_count, d);
    t.mean.resize(k_count, d);
    for (int k = 0; k < k_count; ++k) {
        const ComponentPosterior& c = state.components[k];
        const double psi_a = digamma(c.a);
        double constant = 0.0;
        for (int j = 0; j < d; ++j) {
            constant += -kHalfLog2Pi + 0.5 * (psi_a - std::log(c.b[j])) - 0.5 / c.kappa;
            t.precision(k, j) = c.a / c.b[j];
            t.mean(k, j) = c.m[j];
        }
        t.constant[k] = constant;
    }
    return t;
}

Vector expected_log_stick_weights(const MixtureState& state) {
    const int k_count = state.num_components();
    require(k_count >= 1, "expected_log_stick_weights: no components");
    Vector out(k_count);
    double tail = 0.0;
    for (int k = 0; k < k_count; ++k) {
        const StickPosterior& s = state.sticks[k];
        const double psi_total = digamma(s.eta1 + s.eta0);
        out[k] = digamma(s.eta1) - psi_total + tail;
        tail += digamma(s.eta0) - psi_total;
    }
    return out;
}

Vector expected_stick_weights(const MixtureState& state) {
    const int k_count = state.num_components();
    require(k_count >= 1, "expected_stick_weights: no components");
    Vector out(k_count);
    double remaining = 1.0;
    for (int k = 0; k < k_count; ++k) {
        const StickPosterior& s = state.sticks[k];
        const double total = s.eta1 + s.eta0;
        out[k] = remaining * s.eta1 / total;
        remaining *= s.eta0 / total;
    }
    return out;
}

Vector expected_log_likelihood(const MixtureState& state, const Vector& x) {
    require(x.size() == state.dim(), "expected_log_likelihood: dimension mismatch");
    const LoglikTerms t = loglik_terms(state);
    Vector out(state.num_components());
    for (int k = 0; k < state.num_components(); ++k) {
        const double quad = (t.precision.row(k).transpose().array() *
                             (x - t.mean.row(k).transpose()).array().square())
                                .sum();
        out[k] = t.constant[k] - 0.5 * quad;
    }
    return out;
}

Responsibilities local_step(const MixtureState& state, const RowMatrix& batch) {
    require(state.num_components() >= 1,
            "local_step: mixture has no components; seed one from a batch first");
    require(batch.rows() >= 1, "local_step: empty batch");
    require(batch.cols() == state.dim(), "local_step: batch dimension mismatch");
    Responsibilities resp;
    kernels::omp::local_step(batch, expected_log_stick_weights(state), loglik_terms(state), resp);
    return resp;
}

SuffStats accumulate_stats(const RowMatrix& batch, const Responsibilities& resp) {
    require(resp.rows() == batch.rows(), "accumulate_stats: responsibilities and batch differ in rows");
    return kernels::omp::accumulate(batch, resp);
}

MixtureState global_step(const MixtureState& state, const SuffStats& stats) {
    const int k_count = state.num_components();
    const int d = state.dim();
    require(stats.num_components() == k_count, "global_step: stats and state differ in K");
    require(stats.dim() == d, "global_step: stats and state differ in dimension");
    require((stats.count.array() >= 0.0).all(), "global_step: negative soft counts");

    const NIGHyper& h = state.hyper;
    MixtureState next;
    next.hyper = h;
    next.components.resize(k_count);
    next.sticks.resize(k_count);

    for (int k = 0; k < k_count; ++k) {
        const double n = stats.count[k];
        ComponentPosterior c = prior_component(h, state.components[k].created_task);
        c.soft_count = n;
        if (n > 0.0) {
            c.kappa = h.kappa0 + n;
            c.a = h.a0 + 0.5 * n;
            for (int j = 0; j < d; ++j) {
                const double s = stats.sum(k, j);
                const double mean = s / n;
                const double scatter = std::max(0.0, stats.sumsq(k, j) - s * mean);
                const double dev = mean - h.m0[j];
                c.m[j] = (h.kappa0 * h.m0[j] + s) / c.kappa;
                c.b[j] = h.b0[j] + 0.5 * scatter + h.kappa0 * n * dev * dev / (2.0 * c.kappa);
            }
        }
        next.components[k] = std::move(c);
    }

    CompensatedSum tail;
    for (int k = k_count - 1; k >= 0; --k) {
        next.sticks[k].eta1 = 1.0 + stats.count[k];
        next.sticks[k].eta0 = h.alpha + tail.value();
        tail.add(stats.count[k]);
    }
    return next;
}

ElboTerms elbo_terms(const MixtureState& state, const SuffStats& stats) {
    const int k_count = state.num_components();
    const int d = state.dim();
    require(stats.num_components() == k_count, "elbo: stats and state differ in K");
    require(stats.dim() == d, "elbo: stats and state differ in dimension");
    ElboTerms out;
    if (k_count == 0) return out;

    const NIGHyper& h = state.hyper;
    const Vector elog_pi = expected_log_stick_weights(state);
    CompensatedSum like, ent, kl, stick;
    for (int k = 0; k < k_count; ++k) {
        const ComponentPosterior& c = state.components[k];
        const double n = stats.count[k];
        const double psi_a = digamma(c.a);
        for (int j = 0; j < d; ++j) {
            const double prec = c.a / c.b[j];
            const double m = c.m[j];
            const double quad = stats.sumsq(k, j) - 2.0 * m * stats.sum(k, j) + n * m * m;
            like.add(n * (-kHalfLog2Pi + 0.5 * (psi_a - std::log(c.b[j])) - 0.5 / c.kappa));
            like.add(-0.5 * prec * quad);

            const double dm = m - h.m0[j];
            kl.add(kl_gamma(c.a, c.b[j], h.a0, h.b0[j]));
            kl.add(0.5 * (h.kappa0 / c.kappa - 1.0 + std::log(c.kappa / h.kappa0) + h.kappa0 * prec * dm * dm));
        }
        ent.add(stats.assign_entropy(k, k));
        const StickPosterior& s = state.sticks[k];
        stick.add(n * elog_pi[k]);
        stick.add(-kl_beta(s.eta1, s.eta0, 1.0, h.alpha));
    }
    out.likelihood = like.value();
    out.entropy = ent.value();
    out.component_kl = kl.value();
    out.stick = stick.value();
    return out;
}

double elbo_from_stats(const MixtureState& state, const SuffStats& stats) {
    const double value = elbo_terms(state, stats).total();
    if (!std::isfinite(value)) throw NumericalError("elbo: non-finite value");
    return value;
}

double elbo(const MixtureState& state, const RowMatrix& batch, const Responsibilities& resp) {
    require(resp.cols() == state.num_components(), "elbo: responsibilities and state differ in K");
    require(batch.cols() == state.dim(), "elbo: batch dimension mismatch");
    return elbo_from_stats(state, accumulate_stats(batch, resp));
}

Assignment predictive_assign(const MixtureState& state, const Vector& x) {
    require(state.num_components() >= 1, "predictive_assign: mixture has no components");
    require(x.size() == state.dim(), "predictive_assign: dimension mismatch");
    const Vector score = expected_log_stick_weights(state) + expected_log_likelihood(state, x);
    const double lse = log_sum_exp({score.data(), static_cast<std::size_t>(score.size())});
    Assignment best{0, score[0] - lse};
    for (int k = 1; k < score.size(); ++k) {
        if (score[k] > score[best.component]) best = {k, score[k] - lse};
    }
    return best;
}

MixtureState seed_state(const NIGHyper& hyper, const RowMatrix& batch, int created_task) {
    hyper.validate();
    require(batch.cols() == hyper.dim(), "seed_state: batch dimension mismatch");
    MixtureState s;
    s.hyper = hyper;
    s.components.push_back(prior_component(hyper, created_task));
    s.sticks.push_back({1.0, hyper.alpha});
    const Responsibilities ones = Responsibilities::Ones(batch.rows(), 1);
    return global_step(s, accumulate_stats(batch, ones));
}

}  // namespace kspace
