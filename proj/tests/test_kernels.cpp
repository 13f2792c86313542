#include <doctest.h>

#include <cstring>
#include <vector>

#include "knnattn/kernels.hpp"
#include "knnattn/rng.hpp"

using namespace knnattn;

namespace {

std::vector<double> random_buf(std::size_t n, RngStream& rng) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.next_normal() * 2.5;
    return v;
}

bool bits_equal(double a, double b) {
    return std::memcmp(&a, &b, sizeof(double)) == 0;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

// Every compiled variant must be bit-identical to the scalar reference on
// every kernel, for lengths around the 4-lane block boundary.
TEST_CASE("SIMD variants match the scalar reference bit for bit") {
    std::vector<kernels::Level> variants;
    for (kernels::Level lv : {kernels::Level::avx2, kernels::Level::neon}) {
        if (kernels::level_supported(lv)) variants.push_back(lv);
    }
    if (variants.empty()) {
        MESSAGE("no SIMD variant available on this host; scalar only");
        return;
    }
    const auto& ref = kernels::ops_for(kernels::Level::scalar);
    RngStream rng(1234);
    for (kernels::Level lv : variants) {
        const auto& simd = kernels::ops_for(lv);
        for (std::size_t n : {1u, 2u, 3u, 4u, 5u, 7u, 8u, 15u, 16u, 33u, 257u}) {
            const auto x = random_buf(n, rng);
            const auto y = random_buf(n, rng);

            CHECK(bits_equal(ref.dot(n, x.data(), y.data()), simd.dot(n, x.data(), y.data())));
            CHECK(bits_equal(ref.max(n, x.data()), simd.max(n, x.data())));
            CHECK(bits_equal(ref.sum(n, x.data()), simd.sum(n, x.data())));
            CHECK(bits_equal(ref.sum_sq(n, x.data()), simd.sum_sq(n, x.data())));

            auto ya = y, yb = y;
            ref.axpy(n, 1.7, x.data(), ya.data());
            simd.axpy(n, 1.7, x.data(), yb.data());
            CHECK(bits_equal(ya, yb));

            auto xa = x, xb = x;
            ref.scale(n, -0.3, xa.data());
            simd.scale(n, -0.3, xb.data());
            CHECK(bits_equal(xa, xb));

            auto za = y, zb = y;
            ref.add(n, x.data(), za.data());
            simd.add(n, x.data(), zb.data());
            CHECK(bits_equal(za, zb));

            std::vector<double> ea(n), eb(n);
            const double shift = ref.max(n, x.data());
            const double sa = ref.exp_shift_sum(n, x.data(), shift, 0.8, ea.data());
            const double sb = simd.exp_shift_sum(n, x.data(), shift, 0.8, eb.data());
            CHECK(bits_equal(sa, sb));
            CHECK(bits_equal(ea, eb));
        }
    }
}

TEST_CASE("scalar kernels agree with plain formulas") {
    RngStream rng(99);
    const auto& ref = kernels::ops_for(kernels::Level::scalar);
    const auto x = random_buf(11, rng);
    const auto y = random_buf(11, rng);
    double dot = 0.0, sum = 0.0, sq = 0.0, mx = x[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
        dot += x[i] * y[i];
        sum += x[i];
        sq += x[i] * x[i];
        mx = std::max(mx, x[i]);
    }
    CHECK(ref.dot(x.size(), x.data(), y.data()) == doctest::Approx(dot).epsilon(1e-14));
    CHECK(ref.sum(x.size(), x.data()) == doctest::Approx(sum).epsilon(1e-14));
    CHECK(ref.sum_sq(x.size(), x.data()) == doctest::Approx(sq).epsilon(1e-14));
    CHECK(ref.max(x.size(), x.data()) == mx);
}

TEST_CASE("level control") {
    const kernels::Level before = kernels::active_level();
    kernels::set_level(kernels::Level::scalar);
    CHECK(kernels::active_level() == kernels::Level::scalar);
    kernels::set_level(before);
    CHECK(kernels::active_level() == before);
    CHECK(kernels::level_supported(kernels::Level::scalar));
}
