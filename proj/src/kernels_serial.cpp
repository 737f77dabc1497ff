#include "kspace/kernels.hpp"

#include <vector>

namespace kspace::kernels::serial {

void local_step(const RowMatrix& batch, const Vector& log_weights, const LoglikTerms& terms,
                Responsibilities& resp) {
    const int n = static_cast<int>(batch.rows());
    const int k_count = terms.num_components();
    const int d = static_cast<int>(batch.cols());
    resp.resize(n, k_count);
    std::vector<double> score(k_count);
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

SuffStats accumulate(const RowMatrix& batch, const Responsibilities& resp) {
    const int n = static_cast<int>(batch.rows());
    const int d = static_cast<int>(batch.cols());
    const int k_count = static_cast<int>(resp.cols());

    std::vector<CompensatedSum> count(k_count), sum(k_count * d), sumsq(k_count * d),
        entropy(k_count * k_count);
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < k_count; ++k) {
            const double r = resp(i, k);
            count[k].add(r);
            for (int j = 0; j < d; ++j) {
                const double x = batch(i, j);
                sum[k * d + j].add(r * x);
                sumsq[k * d + j].add(r * x * x);
            }
            for (int l = k; l < k_count; ++l) {
                const double p = l == k ? r : r + resp(i, l);
                if (p > 0.0) entropy[k * k_count + l].add(-p * std::log(p));
            }
        }
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

}  // namespace kspace::kernels::serial
