#include "kspace/kernels.hpp"

#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kspace::kernels {

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace omp {

void local_step(const RowMatrix& batch, const Vector& log_weights, const LoglikTerms& terms,
                Responsibilities& resp) {
    const int n = static_cast<int>(batch.rows());
    const int k_count = terms.num_components();
    const int d = static_cast<int>(batch.cols());
    resp.resize(n, k_count);

#pragma omp parallel
    {
        std::vector<double> score(k_count);
#pragma omp for schedule(static)
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < k_count; ++k) {
                double quad = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double diff = batch(i, j) - terms.mean(k, j);
                    quad += terms.precision(k, j) * diff * diff;
                }
                score[k] = log_weights[k] + terms.constant[k] - 0.5 * quad;
            }
            softmax_inplace(score);
            for (int k = 0; k < k_count; ++k) resp(i, k) = score[k];
        }
    }
}

namespace {

struct ChunkSums {
    std::vector<CompensatedSum> count, sum, sumsq, entropy;
};

}  // namespace

SuffStats accumulate(const RowMatrix& batch, const Responsibilities& resp) {
    const int n = static_cast<int>(batch.rows());
    const int d = static_cast<int>(batch.cols());
    const int k_count = static_cast<int>(resp.cols());
    const int chunks = (n + kReductionChunk - 1) / kReductionChunk;

    std::vector<ChunkSums> partial(chunks);

#pragma omp parallel for schedule(static)
    for (int c = 0; c < chunks; ++c) {
        ChunkSums& p = partial[c];
        p.count.assign(k_count, {});
        p.sum.assign(k_count * d, {});
        p.sumsq.assign(k_count * d, {});
        p.entropy.assign(k_count * k_count, {});
        const int end = std::min(n, (c + 1) * kReductionChunk);
        for (int i = c * kReductionChunk; i < end; ++i) {
            for (int k = 0; k < k_count; ++k) {
                const double r = resp(i, k);
                p.count[k].add(r);
                for (int j = 0; j < d; ++j) {
                    const double x = batch(i, j);
                    p.sum[k * d + j].add(r * x);
                    p.sumsq[k * d + j].add(r * x * x);
                }
                for (int l = k; l < k_count; ++l) {
                    const double q = l == k ? r : r + resp(i, l);
                    if (q > 0.0) p.entropy[k * k_count + l].add(-q * std::log(q));
                }
            }
        }
    }

    // Fixed-order merge of the chunk partials.
    std::vector<CompensatedSum> count(k_count), sum(k_count * d), sumsq(k_count * d),
        entropy(k_count * k_count);
    for (const ChunkSums& p : partial) {
        for (int k = 0; k < k_count; ++k) count[k].add(p.count[k]);
        for (int t = 0; t < k_count * d; ++t) {
            sum[t].add(p.sum[t]);
            sumsq[t].add(p.sumsq[t]);
        }
        for (int t = 0; t < k_count * k_count; ++t) entropy[t].add(p.entropy[t]);
    }

    SuffStats out = SuffStats::zeros(k_count, d);
    for (int k = 0; k < k_count; ++k) {
        out.count[k] = count[k].value();
        for (int j = 0; j < d; ++j) {
            out.sum(k, j) = sum[k * d + j].value();
            out.sumsq(k, j) = sumsq[k * d + j].value();
        }
        for (int l = k; l < k_count; ++l) {
            out.assign_entropy(k, l) = entropy[k * k_count + l].value();
            out.assign_entropy(l, k) = out.assign_entropy(k, l);
        }
    }
    return out;
}

}  // namespace omp
}  // namespace kspace::kernels
