#include <cmath>
#include <cstddef>

#include "kernels_impl.hpp"

// Scalar reference kernels. These define the arithmetic order that the SIMD
// variants reproduce bit-for-bit: reductions keep four interleaved partial
// sums over complete 4-blocks plus a sequential tail, combined as
// ((s0+s1)+(s2+s3))+tail. max uses (m > x) ? m : x per lane.

namespace knnattn::kernels::detail {
namespace {

void axpy_scalar(std::size_t n, double a, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i] * y[i];
    return ((s0 + s1) + (s2 + s3)) + tail;
}

double max_scalar(std::size_t n, const double* x) {
    if (n < 4) {
        double m = x[0];
        for (std::size_t i = 1; i < n; ++i) m = (m > x[i]) ? m : x[i];
        return m;
    }
    double m0 = x[0], m1 = x[1], m2 = x[2], m3 = x[3];
    std::size_t i = 4;
    for (; i + 4 <= n; i += 4) {
        m0 = (m0 > x[i]) ? m0 : x[i];
        m1 = (m1 > x[i + 1]) ? m1 : x[i + 1];
        m2 = (m2 > x[i + 2]) ? m2 : x[i + 2];
        m3 = (m3 > x[i + 3]) ? m3 : x[i + 3];
    }
    double a = (m0 > m1) ? m0 : m1;
    double b = (m2 > m3) ? m2 : m3;
    double m = (a > b) ? a : b;
    for (; i < n; ++i) m = (m > x[i]) ? m : x[i];
    return m;
}

double exp_shift_sum_scalar(std::size_t n, const double* x, double shift, double scale,
                            double* out) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const double e0 = std::exp((x[i] - shift) * scale);
        const double e1 = std::exp((x[i + 1] - shift) * scale);
        const double e2 = std::exp((x[i + 2] - shift) * scale);
        const double e3 = std::exp((x[i + 3] - shift) * scale);
        out[i] = e0;
        out[i + 1] = e1;
        out[i + 2] = e2;
        out[i + 3] = e3;
        s0 += e0;
        s1 += e1;
        s2 += e2;
        s3 += e3;
    }
    double tail = 0.0;
    for (; i < n; ++i) {
        const double e = std::exp((x[i] - shift) * scale);
        out[i] = e;
        tail += e;
    }
    return ((s0 + s1) + (s2 + s3)) + tail;
}

void scale_scalar(std::size_t n, double s, double* x) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= s;
}

void add_scalar(std::size_t n, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

double sum_scalar(std::size_t n, const double* x) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i];
        s1 += x[i + 1];
        s2 += x[i + 2];
        s3 += x[i + 3];
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i];
    return ((s0 + s1) + (s2 + s3)) + tail;
}

double sum_sq_scalar(std::size_t n, const double* x) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * x[i];
        s1 += x[i + 1] * x[i + 1];
        s2 += x[i + 2] * x[i + 2];
        s3 += x[i + 3] * x[i + 3];
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i] * x[i];
    return ((s0 + s1) + (s2 + s3)) + tail;
}

}  // namespace

const Ops scalar_ops = {
    axpy_scalar, dot_scalar,   max_scalar, exp_shift_sum_scalar,
    scale_scalar, add_scalar, sum_scalar, sum_sq_scalar,
};

}  // namespace knnattn::kernels::detail
