// Serial reference vs OpenMP kernels. Args: rows, components; dim fixed at 16.

#include <random>

#include <benchmark/benchmark.h>

#include "kspace/kernels.hpp"

namespace {

using namespace kspace;

constexpr int kDim = 16;

struct Fixture {
    RowMatrix batch;
    Vector log_weights;
    LoglikTerms terms;
    Responsibilities resp;

    Fixture(int n, int k) {
        std::mt19937_64 rng(11);
        std::normal_distribution<double> g(0.0, 1.0);
        std::uniform_real_distribution<double> u(0.5, 2.0);
        batch.resize(n, kDim);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < kDim; ++j) batch(i, j) = 3.0 * g(rng);
        log_weights = Vector::Constant(k, -std::log(static_cast<double>(k)));
        terms.constant = Vector::Zero(k);
        terms.precision.resize(k, kDim);
        terms.mean.resize(k, kDim);
        for (int c = 0; c < k; ++c)
            for (int j = 0; j < kDim; ++j) {
                terms.precision(c, j) = u(rng);
                terms.mean(c, j) = 3.0 * g(rng);
            }
        kernels::serial::local_step(batch, log_weights, terms, resp);
    }
};

template <bool Omp>
void BM_LocalStep(benchmark::State& st) {
    Fixture f(static_cast<int>(st.range(0)), static_cast<int>(st.range(1)));
    Responsibilities out;
    for (auto _ : st) {
        if constexpr (Omp)
            kernels::omp::local_step(f.batch, f.log_weights, f.terms, out);
        else
            kernels::serial::local_step(f.batch, f.log_weights, f.terms, out);
        benchmark::DoNotOptimize(out.data());
    }
    st.SetItemsProcessed(st.iterations() * st.range(0));
    st.counters["threads"] = Omp ? kernels::max_threads() : 1;
}

template <bool Omp>
void BM_Accumulate(benchmark::State& st) {
    Fixture f(static_cast<int>(st.range(0)), static_cast<int>(st.range(1)));
    for (auto _ : st) {
        SuffStats s = Omp ? kernels::omp::accumulate(f.batch, f.resp) : kernels::serial::accumulate(f.batch, f.resp);
        benchmark::DoNotOptimize(s.count.data());
    }
    st.SetItemsProcessed(st.iterations() * st.range(0));
    st.counters["threads"] = Omp ? kernels::max_threads() : 1;
}

void sizes(benchmark::internal::Benchmark* b) {
    for (int n : {200, 2000, 20000})
        for (int k : {4, 16}) b->Args({n, k});
}

BENCHMARK(BM_LocalStep<false>)->Name("local_step/serial")->Apply(sizes);
BENCHMARK(BM_LocalStep<true>)->Name("local_step/omp")->Apply(sizes);
BENCHMARK(BM_Accumulate<false>)->Name("accumulate/serial")->Apply(sizes);
BENCHMARK(BM_Accumulate<true>)->Name("accumulate/omp")->Apply(sizes);

}  // namespace

BENCHMARK_MAIN();
