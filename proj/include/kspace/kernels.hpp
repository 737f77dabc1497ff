#pragma once

#include "kspace/mixture.hpp"

// Hot loops of the mixture. `serial` is the plain reference kept for tests and
// benchmarks; `omp` is what the library calls. Row-local kernels (the local
// step) are bitwise identical between the two. Reductions in `omp` run over
// fixed-size row chunks merged in chunk order, so they are bitwise identical
// for any thread count but may differ from `serial` in the last few ulps.

namespace kspace::kernels {

inline constexpr int kReductionChunk = 128;

namespace serial {

void local_step(const RowMatrix& batch, const Vector& log_weights, const LoglikTerms& terms,
                Responsibilities& resp);

SuffStats accumulate(const RowMatrix& batch, const Responsibilities& resp);

}  // namespace serial

namespace omp {

void local_step(const RowMatrix& batch, const Vector& log_weights, const LoglikTerms& terms,
                Responsibilities& resp);

SuffStats accumulate(const RowMatrix& batch, const Responsibilities& resp);

}  // namespace omp

int max_threads();

}  // namespace kspace::kernels
