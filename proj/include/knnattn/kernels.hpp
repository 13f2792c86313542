#pragma once

#include <cstddef>
#include <string>

namespace knnattn::kernels {

// Arithmetic inner loops used by every hot path (matmul, scores, softmax,
// norms). Each kernel exists as a scalar reference and, where the target
// supports it, an AVX2 or NEON variant selected at runtime.
//
// Contract: every variant of a kernel produces bit-identical output to the
// scalar reference. Reductions accumulate into four interleaved partial sums
// over complete 4-element blocks, a sequential tail accumulator for the
// remainder, and combine as ((s0+s1)+(s2+s3))+tail. Elementwise kernels
// perform the same multiply/add sequence per element (no FMA contraction;
// the build sets -ffp-contract=off). exp() is always libm's std::exp.

enum class Level { scalar, avx2, neon };

const char* level_name(Level level);
bool level_supported(Level level);

// Active level: highest supported unless overridden by set_level() or the
// KNN_ATTN_SIMD environment variable (values: scalar, avx2, neon).
Level active_level();
void set_level(Level level);  // throws std::invalid_argument if unsupported

struct Ops {
    // y[i] += a * x[i]
    void (*axpy)(std::size_t n, double a, const double* x, double* y);
    // striped dot product, order per contract above
    double (*dot)(std::size_t n, const double* x, const double* y);
    // max over x; n >= 1
    double (*max)(std::size_t n, const double* x);
    // out[i] = exp((x[i] - shift) * scale); returns striped sum of out
    double (*exp_shift_sum)(std::size_t n, const double* x, double shift, double scale,
                            double* out);
    // x[i] *= s
    void (*scale)(std::size_t n, double s, double* x);
    // y[i] += x[i]
    void (*add)(std::size_t n, const double* x, double* y);
    // striped sum / sum of squares
    double (*sum)(std::size_t n, const double* x);
    double (*sum_sq)(std::size_t n, const double* x);
};

const Ops& ops();               // active variant
const Ops& ops_for(Level level);  // specific variant (used by equivalence tests)

}  // namespace knnattn::kernels
