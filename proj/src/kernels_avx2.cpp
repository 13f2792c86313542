#if defined(KNNATTN_HAVE_AVX2)

#include <immintrin.h>

#include <cmath>
#include <cstddef>

#include "kernels_impl.hpp"

// AVX2 kernels. Mul and add stay separate (no FMA) so each lane performs
// exactly the scalar reference's operations; exp stays libm.

namespace knnattn::kernels::detail {
namespace {

inline double combine4(__m256d acc) {
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, acc);
    return (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
}

void axpy_avx2(std::size_t n, double a, const double* x, double* y) {
    const __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(x + i);
        __m256d yv = _mm256_loadu_pd(y + i);
        yv = _mm256_add_pd(yv, _mm256_mul_pd(av, xv));
        _mm256_storeu_pd(y + i, yv);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(x + i);
        __m256d yv = _mm256_loadu_pd(y + i);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(xv, yv));
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i] * y[i];
    return combine4(acc) + tail;
}

double max_avx2(std::size_t n, const double* x) {
    if (n < 4) {
        double m = x[0];
        for (std::size_t i = 1; i < n; ++i) m = (m > x[i]) ? m : x[i];
        return m;
    }
    __m256d acc = _mm256_loadu_pd(x);
    std::size_t i = 4;
    for (; i + 4 <= n; i += 4) {
        // maxpd(acc, v) = (acc > v) ? acc : v, matching the scalar rule
        acc = _mm256_max_pd(acc, _mm256_loadu_pd(x + i));
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, acc);
    double a = (lanes[0] > lanes[1]) ? lanes[0] : lanes[1];
    double b = (lanes[2] > lanes[3]) ? lanes[2] : lanes[3];
    double m = (a > b) ? a : b;
    for (; i < n; ++i) m = (m > x[i]) ? m : x[i];
    return m;
}

double exp_shift_sum_avx2(std::size_t n, const double* x, double shift, double scale,
                          double* out) {
    const __m256d sh = _mm256_set1_pd(shift);
    const __m256d sc = _mm256_set1_pd(scale);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    alignas(32) double t[4];
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(x + i);
        _mm256_store_pd(t, _mm256_mul_pd(_mm256_sub_pd(xv, sh), sc));
        t[0] = std::exp(t[0]);
        t[1] = std::exp(t[1]);
        t[2] = std::exp(t[2]);
        t[3] = std::exp(t[3]);
        const __m256d ev = _mm256_load_pd(t);
        _mm256_storeu_pd(out + i, ev);
        acc = _mm256_add_pd(acc, ev);
    }
    double tail = 0.0;
    for (; i < n; ++i) {
        const double e = std::exp((x[i] - shift) * scale);
        out[i] = e;
        tail += e;
    }
    return combine4(acc) + tail;
}

void scale_avx2(std::size_t n, double s, double* x) {
    const __m256d sv = _mm256_set1_pd(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(x + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), sv));
    }
    for (; i < n; ++i) x[i] *= s;
}

void add_avx2(std::size_t n, const double* x, double* y) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) y[i] += x[i];
}

double sum_avx2(std::size_t n, const double* x) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i];
    return combine4(acc) + tail;
}

double sum_sq_avx2(std::size_t n, const double* x) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(x + i);
        acc = _mm256_add_pd(acc, _mm256_mul_pd(xv, xv));
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i] * x[i];
    return combine4(acc) + tail;
}

}  // namespace

const Ops avx2_ops = {
    axpy_avx2, dot_avx2,  max_avx2, exp_shift_sum_avx2,
    scale_avx2, add_avx2, sum_avx2, sum_sq_avx2,
};

}  // namespace knnattn::kernels::detail

#endif  // KNNATTN_HAVE_AVX2
