#if defined(KNNATTN_HAVE_NEON)

#include <arm_neon.h>

#include <cmath>
#include <cstddef>

#include "kernels_impl.hpp"

// NEON kernels. float64x2_t is two lanes, so reductions carry a pair of
// accumulators to reproduce the scalar reference's four-lane striping.
// max selects with (m > x) ? m : x via compare+bsl rather than vmaxq, which
// would differ on signed zeros.

namespace knnattn::kernels::detail {
namespace {

inline double combine4(float64x2_t lo, float64x2_t hi) {
    const double s0 = vgetq_lane_f64(lo, 0);
    const double s1 = vgetq_lane_f64(lo, 1);
    const double s2 = vgetq_lane_f64(hi, 0);
    const double s3 = vgetq_lane_f64(hi, 1);
    return (s0 + s1) + (s2 + s3);
}

inline float64x2_t max_rule(float64x2_t m, float64x2_t x) {
    return vbslq_f64(vcgtq_f64(m, x), m, x);
}

void axpy_neon(std::size_t n, double a, const double* x, double* y) {
    const float64x2_t av = vdupq_n_f64(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        float64x2_t y0 = vld1q_f64(y + i);
        float64x2_t y1 = vld1q_f64(y + i + 2);
        y0 = vaddq_f64(y0, vmulq_f64(av, vld1q_f64(x + i)));
        y1 = vaddq_f64(y1, vmulq_f64(av, vld1q_f64(x + i + 2)));
        vst1q_f64(y + i, y0);
        vst1q_f64(y + i + 2, y1);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

double dot_neon(std::size_t n, const double* x, const double* y) {
    float64x2_t lo = vdupq_n_f64(0.0), hi = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        lo = vaddq_f64(lo, vmulq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
        hi = vaddq_f64(hi, vmulq_f64(vld1q_f64(x + i + 2), vld1q_f64(y + i + 2)));
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i] * y[i];
    return combine4(lo, hi) + tail;
}

double max_neon(std::size_t n, const double* x) {
    if (n < 4) {
        double m = x[0];
        for (std::size_t i = 1; i < n; ++i) m = (m > x[i]) ? m : x[i];
        return m;
    }
    float64x2_t lo = vld1q_f64(x);
    float64x2_t hi = vld1q_f64(x + 2);
    std::size_t i = 4;
    for (; i + 4 <= n; i += 4) {
        lo = max_rule(lo, vld1q_f64(x + i));
        hi = max_rule(hi, vld1q_f64(x + i + 2));
    }
    const double m0 = vgetq_lane_f64(lo, 0);
    const double m1 = vgetq_lane_f64(lo, 1);
    const double m2 = vgetq_lane_f64(hi, 0);
    const double m3 = vgetq_lane_f64(hi, 1);
    double a = (m0 > m1) ? m0 : m1;
    double b = (m2 > m3) ? m2 : m3;
    double m = (a > b) ? a : b;
    for (; i < n; ++i) m = (m > x[i]) ? m : x[i];
    return m;
}

double exp_shift_sum_neon(std::size_t n, const double* x, double shift, double scale,
                          double* out) {
    const float64x2_t sh = vdupq_n_f64(shift);
    const float64x2_t sc = vdupq_n_f64(scale);
    float64x2_t lo = vdupq_n_f64(0.0), hi = vdupq_n_f64(0.0);
    std::size_t i = 0;
    double t[4];
    for (; i + 4 <= n; i += 4) {
        vst1q_f64(t, vmulq_f64(vsubq_f64(vld1q_f64(x + i), sh), sc));
        vst1q_f64(t + 2, vmulq_f64(vsubq_f64(vld1q_f64(x + i + 2), sh), sc));
        t[0] = std::exp(t[0]);
        t[1] = std::exp(t[1]);
        t[2] = std::exp(t[2]);
        t[3] = std::exp(t[3]);
        const float64x2_t e0 = vld1q_f64(t);
        const float64x2_t e1 = vld1q_f64(t + 2);
        vst1q_f64(out + i, e0);
        vst1q_f64(out + i + 2, e1);
        lo = vaddq_f64(lo, e0);
        hi = vaddq_f64(hi, e1);
    }
    double tail = 0.0;
    for (; i < n; ++i) {
        const double e = std::exp((x[i] - shift) * scale);
        out[i] = e;
        tail += e;
    }
    return combine4(lo, hi) + tail;
}

void scale_neon(std::size_t n, double s, double* x) {
    const float64x2_t sv = vdupq_n_f64(s);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        vst1q_f64(x + i, vmulq_f64(vld1q_f64(x + i), sv));
        vst1q_f64(x + i + 2, vmulq_f64(vld1q_f64(x + i + 2), sv));
    }
    for (; i < n; ++i) x[i] *= s;
}

void add_neon(std::size_t n, const double* x, double* y) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        vst1q_f64(y + i, vaddq_f64(vld1q_f64(y + i), vld1q_f64(x + i)));
        vst1q_f64(y + i + 2, vaddq_f64(vld1q_f64(y + i + 2), vld1q_f64(x + i + 2)));
    }
    for (; i < n; ++i) y[i] += x[i];
}

double sum_neon(std::size_t n, const double* x) {
    float64x2_t lo = vdupq_n_f64(0.0), hi = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        lo = vaddq_f64(lo, vld1q_f64(x + i));
        hi = vaddq_f64(hi, vld1q_f64(x + i + 2));
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i];
    return combine4(lo, hi) + tail;
}

double sum_sq_neon(std::size_t n, const double* x) {
    float64x2_t lo = vdupq_n_f64(0.0), hi = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const float64x2_t a = vld1q_f64(x + i);
        const float64x2_t b = vld1q_f64(x + i + 2);
        lo = vaddq_f64(lo, vmulq_f64(a, a));
        hi = vaddq_f64(hi, vmulq_f64(b, b));
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i] * x[i];
    return combine4(lo, hi) + tail;
}

}  // namespace

const Ops neon_ops = {
    axpy_neon, dot_neon,  max_neon, exp_shift_sum_neon,
    scale_neon, add_neon, sum_neon, sum_sq_neon,
};

}  // namespace knnattn::kernels::detail

#endif  // KNNATTN_HAVE_NEON
