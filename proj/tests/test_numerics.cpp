#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "knnattn/matrix.hpp"
#include "knnattn/numerics.hpp"
#include "knnattn/rng.hpp"

using namespace knnattn;

namespace {

// Independent oracle: naive triple loop, plain sequential accumulation.
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < a.cols(); ++t) acc += a(i, t) * b(t, j);
            c(i, j) = acc;
        }
    return c;
}

// Independent oracle: exp-normalize in extended precision.
std::vector<double> softmax_oracle(std::span<const double> row) {
    long double mx = row[0];
    for (double v : row) mx = std::max<long double>(mx, v);
    long double total = 0.0L;
    std::vector<long double> e(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) {
        e[i] = expl(static_cast<long double>(row[i]) - mx);
        total += e[i];
    }
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(e[i] / total);
    return out;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    RngStream rng(1);
    const Matrix m = random_normal(3, 3, rng);
    CHECK(max_abs_diff(matmul(Matrix::identity(3), m), m) == 0.0);

    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{1}, {1}});
    const Matrix c = matmul(a, b);
    CHECK(c(0, 0) == 3.0);
    CHECK(c(1, 0) == 7.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    RngStream rng(2);
    const Matrix a = random_normal(5, 4, rng);
    const Matrix b = random_normal(4, 3, rng);
    CHECK(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-15);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    const Matrix a(2, 3), b(2, 2);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
}

TEST_CASE("matmul associativity on random triples") {
    RngStream rng(3);
    for (int rep = 0; rep < 5; ++rep) {
        const Matrix a = random_normal(4, 6, rng);
        const Matrix b = random_normal(6, 5, rng);
        const Matrix c = random_normal(5, 3, rng);
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        const double scale = std::max(1.0, frobenius_norm(left));
        CHECK(max_abs_diff(left, right) / scale < 1e-10);
    }
}

TEST_CASE("softmax basics") {
    const Matrix uniform = softmax_rows(Matrix::from_rows({{0, 0, 0}}));
    for (std::size_t j = 0; j < 3; ++j) CHECK(uniform(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-14));

    const Matrix single =
        softmax_rows(Matrix::from_rows({{5.0, kMaskSentinel, kMaskSentinel}}));
    CHECK(single(0, 0) == 1.0);
    CHECK(single(0, 1) == 0.0);
    CHECK(single(0, 2) == 0.0);

    const Matrix row = Matrix::from_rows({{1, 2, 3}});
    const auto oracle = softmax_oracle(row.row(0));
    const Matrix got = softmax_rows(row);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::fabs(got(0, j) - oracle[j]) < 1e-15);
}

TEST_CASE("softmax rejects an all-sentinel row") {
    Matrix m = Matrix::full(2, 3, kMaskSentinel);
    m(0, 1) = 0.5;
    CHECK_THROWS_WITH_AS(softmax_rows(m), doctest::Contains("empty attention row"),
                         std::domain_error);
}

TEST_CASE("softmax rows sum to one, entries in [0,1], shift invariant") {
    RngStream rng(4);
    for (int rep = 0; rep < 10; ++rep) {
        Matrix m = random_normal(6, 9, rng, 3.0);
        const Matrix s = softmax_rows(m);
        for (std::size_t i = 0; i < s.rows(); ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < s.cols(); ++j) {
                CHECK(s(i, j) >= 0.0);
                CHECK(s(i, j) <= 1.0);
                total += s(i, j);
            }
            CHECK(std::fabs(total - 1.0) < 1e-12);
        }
        Matrix shifted = m;
        const double c = rng.next_normal() * 10.0;
        for (std::size_t i = 0; i < m.rows(); ++i)
            for (std::size_t j = 0; j < m.cols(); ++j) shifted(i, j) += c;
        CHECK(max_abs_diff(softmax_rows(shifted), s) < 1e-12);
    }
}

TEST_CASE("finite differences: linear and quadratic") {
    RngStream rng(5);
    const Matrix x = random_normal(3, 4, rng);

    auto sum_entries = [](const Matrix& m) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) acc += m.data()[i];
        return acc;
    };
    const Matrix g1 = finite_diff_grad(sum_entries, x, 1e-5);
    CHECK(max_abs_diff(g1, Matrix::full(3, 4, 1.0)) < 1e-9);

    auto half_sq = [](const Matrix& m) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) acc += m.data()[i] * m.data()[i];
        return 0.5 * acc;
    };
    const Matrix g2 = finite_diff_grad(half_sq, x, 1e-5);
    CHECK(max_abs_diff(g2, x) < 1e-8);
}

TEST_CASE("finite differences flags non-finite values with the entry") {
    const Matrix x(2, 2);
    auto bad = [](const Matrix& m) { return m(1, 0) > 0 ? 1.0 / 0.0 : 0.0; };
    CHECK_THROWS_WITH_AS(finite_diff_grad(bad, x, 1e-3), doctest::Contains("(1,0)"),
                         std::domain_error);
}

TEST_CASE("norms") {
    CHECK(frobenius_norm(Matrix(3, 3)) == 0.0);
    CHECK(frobenius_norm(Matrix::identity(2)) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));

    RngStream rng(6);
    const Matrix m = random_normal(3, 3, rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) acc += m.data()[i] * m.data()[i];
    CHECK(frobenius_norm(m) == doctest::Approx(std::sqrt(acc)).epsilon(1e-14));
    double racc = 0.0;
    for (std::size_t j = 0; j < 3; ++j) racc += m(1, j) * m(1, j);
    CHECK(row_norm(m, 1) == doctest::Approx(std::sqrt(racc)).epsilon(1e-14));
}

TEST_CASE("population std uses the n denominator") {
    const std::vector<double> v{1.0, 0.0};
    CHECK(stddev_population(v) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("rng streams are deterministic and splittable") {
    RngStream a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    // a consumed 100 values, b the same; splits depend only on the key
    RngStream sa = a.split(7), sb = b.split(7);
    for (int i = 0; i < 10; ++i) CHECK(sa.next_u64() == sb.next_u64());

    RngStream other = a.split(8);
    CHECK(other.next_u64() != a.split(7).next_u64());

    RngStream n1(9), n2(9);
    for (int i = 0; i < 50; ++i) {
        const double x = n1.next_normal();
        CHECK(x == n2.next_normal());
        CHECK(std::isfinite(x));
    }
}

TEST_CASE("rng bounded draws are in range") {
    RngStream rng(10);
    for (int i = 0; i < 200; ++i) CHECK(rng.next_below(13) < 13);
}
