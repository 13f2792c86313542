#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "knnattn/attention.hpp"
#include "knnattn/numerics.hpp"
#include "knnattn/rng.hpp"

using namespace knnattn;

namespace {

// Independent two-pass reimplementation of dense attention.
Matrix dense_oracle(const Matrix& q, const Matrix& k, const Matrix& v, double t) {
    const std::size_t n = q.rows();
    Matrix out(n, v.cols());
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) acc += q(i, c) * k(j, c);
            s[j] = acc / (std::sqrt(static_cast<double>(q.cols())) * t);
            mx = std::max(mx, s[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            s[j] = std::exp(s[j] - mx);
            total += s[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            const double a = s[j] / total;
            for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) += a * v(j, c);
        }
    }
    return out;
}

// Masked attention forward with a fixed selection, assembled from scratch.
Matrix frozen_forward(const Matrix& q, const Matrix& k, const Matrix& v, const TopKMask& mask,
                      double t) {
    const Matrix scores = scaled_scores(q, k, t);
    Matrix masked(scores.rows(), scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i)
        for (std::size_t j = 0; j < scores.cols(); ++j)
            masked(i, j) = mask.selected(i, j) ? scores(i, j) : kMaskSentinel;
    return matmul(softmax_rows(masked), v);
}

struct Instance {
    Matrix x;
    ProjectionWeights w;
};

Instance random_instance(std::size_t n, std::size_t d_m, std::size_t d, RngStream& rng) {
    Instance inst;
    inst.x = random_normal(n, d_m, rng);
    const double s = 1.0 / std::sqrt(static_cast<double>(d_m));
    inst.w = {random_normal(d_m, d, rng, s), random_normal(d_m, d, rng, s),
              random_normal(d_m, d, rng, s)};
    return inst;
}

}  // namespace

TEST_CASE("project_qkv") {
    RngStream rng(11);
    const Matrix w = random_normal(4, 4, rng);
    auto [q1, k1, v1] = project_qkv(Matrix::identity(4), {w, w, w});
    CHECK(max_abs_diff(q1, w) == 0.0);

    auto [q2, k2, v2] = project_qkv(Matrix(3, 4), {w, w, w});
    CHECK(frobenius_norm(q2) == 0.0);
    CHECK(frobenius_norm(v2) == 0.0);

    const Instance inst = random_instance(5, 4, 3, rng);
    auto [q3, k3, v3] = project_qkv(inst.x, inst.w);
    CHECK(max_abs_diff(q3, matmul(inst.x, inst.w.wq)) == 0.0);
    CHECK(max_abs_diff(k3, matmul(inst.x, inst.w.wk)) == 0.0);
}

TEST_CASE("dense attention: single token and uniform cases") {
    RngStream rng(12);
    const Matrix q = random_normal(1, 4, rng);
    const Matrix k = random_normal(1, 4, rng);
    const Matrix v = random_normal(1, 4, rng);
    const auto res = dense_attention(q, k, v);
    CHECK(res.attn(0, 0) == 1.0);
    CHECK(max_abs_diff(res.vhat, v) == 0.0);

    const Matrix q0(4, 3);
    const Matrix k2 = random_normal(4, 3, rng);
    const Matrix v2 = random_normal(4, 5, rng);
    const auto res2 = dense_attention(q0, k2, v2);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(res2.attn(i, j) == doctest::Approx(0.25).epsilon(1e-14));
    for (std::size_t c = 0; c < 5; ++c) {
        double colmean = 0.0;
        for (std::size_t j = 0; j < 4; ++j) colmean += v2(j, c);
        colmean /= 4.0;
        CHECK(res2.vhat(0, c) == doctest::Approx(colmean).epsilon(1e-13));
    }
}

TEST_CASE("dense attention matches the two-pass oracle") {
    RngStream rng(13);
    for (int rep = 0; rep < 5; ++rep) {
        const Matrix q = random_normal(7, 5, rng);
        const Matrix k = random_normal(7, 5, rng);
        const Matrix v = random_normal(7, 6, rng);
        const auto res = dense_attention(q, k, v, 1.0);
        CHECK(max_abs_diff(res.vhat, dense_oracle(q, k, v, 1.0)) < 1e-13);
    }
}

TEST_CASE("row_topk_mask selection and ties") {
    const Matrix s1 = Matrix::from_rows({{3, 1, 2}});
    const TopKMask m1 = row_topk_mask(s1, 2);
    CHECK(m1.row_indices(0) == std::vector<std::size_t>{0, 2});

    const Matrix s2 = Matrix::from_rows({{1, 1, 1}});
    const TopKMask m2 = row_topk_mask(s2, 2);
    CHECK(m2.row_indices(0) == std::vector<std::size_t>{0, 1});

    RngStream rng(14);
    const Matrix s3 = random_normal(6, 6, rng);
    const TopKMask m3 = row_topk_mask(s3, 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(m3.row_indices(i).size() == 6);
    m3.validate();

    CHECK_THROWS_AS(row_topk_mask(s3, 0), std::out_of_range);
    CHECK_THROWS_AS(row_topk_mask(s3, 7), std::out_of_range);
}

TEST_CASE("fast knn with k=n reduces to dense attention") {
    RngStream rng(15);
    for (int rep = 0; rep < 10; ++rep) {
        const Matrix q = random_normal(8, 4, rng);
        const Matrix k = random_normal(8, 4, rng);
        const Matrix v = random_normal(8, 4, rng);
        const auto knn = knn_attention_fast(q, k, v, 8);
        const auto dense = dense_attention(q, k, v);
        CHECK(max_abs_diff(knn.vhat, dense.vhat) < 1e-12);
        CHECK(max_abs_diff(knn.attn, dense.attn) < 1e-12);
    }
}

TEST_CASE("fast knn with k=1 picks the argmax key") {
    RngStream rng(16);
    const Matrix q = random_normal(6, 3, rng);
    const Matrix k = random_normal(6, 3, rng);
    const Matrix v = random_normal(6, 4, rng);
    const auto res = knn_attention_fast(q, k, v, 1);
    const Matrix scores = matmul_nt(q, k);
    for (std::size_t i = 0; i < 6; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < 6; ++j)
            if (scores(i, j) > scores(i, best)) best = j;
        for (std::size_t c = 0; c < 4; ++c) CHECK(res.vhat(i, c) == v(best, c));
        CHECK(res.attn(i, best) == 1.0);
    }
}

TEST_CASE("slow(dot) equals fast exactly on random instances") {
    RngStream rng(17);
    for (int rep = 0; rep < 20; ++rep) {
        const Matrix q = random_normal(8, 4, rng);
        const Matrix k = random_normal(8, 4, rng);
        const Matrix v = random_normal(8, 4, rng);
        const auto fast = knn_attention_fast(q, k, v, 3);
        const auto slow = knn_attention_slow(q, k, v, 3, SelectionMetric::dot);
        for (std::size_t i = 0; i < 8; ++i) {
            CHECK(slow.selected[i] == fast.mask.row_indices(i));
        }
        CHECK(max_abs_diff(slow.vhat, fast.vhat) == 0.0);
    }
}

TEST_CASE("slow with k=n equals dense for either metric") {
    RngStream rng(18);
    const Matrix q = random_normal(5, 4, rng);
    const Matrix k = random_normal(5, 4, rng);
    const Matrix v = random_normal(5, 4, rng);
    const auto dense = dense_attention(q, k, v);
    for (auto metric : {SelectionMetric::dot, SelectionMetric::euclidean}) {
        const auto slow = knn_attention_slow(q, k, v, 5, metric);
        CHECK(max_abs_diff(slow.vhat, dense.vhat) < 1e-12);
    }
}

TEST_CASE("unit-norm keys make euclidean and dot selections identical") {
    RngStream rng(19);
    const Matrix q = random_normal(7, 5, rng);
    Matrix k = random_normal(7, 5, rng);
    for (std::size_t j = 0; j < 7; ++j) {
        const double norm = row_norm(k, j);
        for (std::size_t c = 0; c < 5; ++c) k(j, c) /= norm;
    }
    const Matrix v = random_normal(7, 5, rng);
    const auto dot = knn_attention_slow(q, k, v, 3, SelectionMetric::dot);
    const auto euc = knn_attention_slow(q, k, v, 3, SelectionMetric::euclidean);
    for (std::size_t i = 0; i < 7; ++i) CHECK(dot.selected[i] == euc.selected[i]);
    CHECK(max_abs_diff(dot.vhat, euc.vhat) == 0.0);
}

TEST_CASE("masked rows have exactly k positive entries summing to one") {
    RngStream rng(20);
    for (int rep = 0; rep < 12; ++rep) {
        const std::size_t n = 2 + rng.next_below(14);
        const std::size_t k = 1 + rng.next_below(n);
        const Matrix qm = random_normal(n, 4, rng);
        const Matrix km = random_normal(n, 4, rng);
        const Matrix vm = random_normal(n, 4, rng);
        const auto res = knn_attention_fast(qm, km, vm, k);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t positive = 0;
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (res.mask.selected(i, j)) {
                    CHECK(res.attn(i, j) > 0.0);
                    ++positive;
                } else {
                    CHECK(res.attn(i, j) == 0.0);
                }
                total += res.attn(i, j);
            }
            CHECK(positive == k);
            CHECK(std::fabs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("per-row score shifts leave attention and selection unchanged") {
    RngStream rng(21);
    const std::size_t n = 9;
    Matrix scores = random_normal(n, n, rng);
    const TopKMask base = row_topk_mask(scores, 4);
    const Matrix soft = softmax_rows(scores);
    Matrix shifted = scores;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = rng.next_normal() * 5.0;
        for (std::size_t j = 0; j < n; ++j) shifted(i, j) += c;
    }
    const TopKMask moved = row_topk_mask(shifted, 4);
    for (std::size_t i = 0; i < n; ++i) CHECK(base.row_indices(i) == moved.row_indices(i));
    CHECK(max_abs_diff(softmax_rows(shifted), soft) < 1e-12);
}

TEST_CASE("temperature one is bit-identical to the unscaled baseline") {
    RngStream rng(22);
    const Matrix q = random_normal(6, 4, rng);
    const Matrix k = random_normal(6, 4, rng);
    const Matrix v = random_normal(6, 4, rng);
    const auto base = dense_attention(q, k, v);
    const auto t1 = dense_attention(q, k, v, 1.0);
    CHECK(base.vhat == t1.vhat);
    CHECK(base.attn == t1.attn);
}

TEST_CASE("attention row entropy is non-decreasing in temperature") {
    RngStream rng(23);
    for (int rep = 0; rep < 10; ++rep) {
        const Matrix q = random_normal(5, 4, rng);
        const Matrix k = random_normal(5, 4, rng);
        const Matrix v = random_normal(5, 4, rng);
        double prev = -1.0;
        for (double t : {0.25, 0.5, 1.0, 2.0, 4.0, 16.0}) {
            const auto res = dense_attention(q, k, v, t);
            double h = 0.0;
            for (std::size_t i = 0; i < 5; ++i) h += row_entropy(res.attn.row(i));
            CHECK(h >= prev - 1e-12);
            prev = h;
        }
    }
}

TEST_CASE("weighted covariance: degenerate and hand-computed cases") {
    Matrix same(4, 3);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 3; ++c) same(i, c) = 1.0 + static_cast<double>(c);
    const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
    CHECK(frobenius_norm(weighted_covariance(same, uniform)) < 1e-14);

    RngStream rng(24);
    const Matrix x = random_normal(4, 3, rng);
    const std::vector<double> onehot{0.0, 0.0, 1.0, 0.0};
    CHECK(frobenius_norm(weighted_covariance(x, onehot)) < 1e-14);

    const Matrix basis = Matrix::from_rows({{1, 0}, {0, 1}});
    const std::vector<double> half{0.5, 0.5};
    const Matrix cov = weighted_covariance(basis, half);
    CHECK(cov(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(cov(0, 1) == doctest::Approx(-0.25).epsilon(1e-15));
    CHECK(cov(1, 0) == doctest::Approx(-0.25).epsilon(1e-15));
    CHECK(cov(1, 1) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("weighted covariance is symmetric and PSD up to tolerance") {
    RngStream rng(25);
    for (int rep = 0; rep < 10; ++rep) {
        const Matrix x = random_normal(6, 5, rng);
        std::vector<double> w(6);
        double total = 0.0;
        for (auto& e : w) {
            e = rng.next_unit() + 1e-3;
            total += e;
        }
        for (auto& e : w) e /= total;
        const Matrix cov = weighted_covariance(x, w);
        for (std::size_t r = 0; r < 5; ++r)
            for (std::size_t c = 0; c < 5; ++c) CHECK(cov(r, c) == cov(c, r));
        // quadratic form nonnegative up to roundoff
        for (int probe = 0; probe < 20; ++probe) {
            const Matrix z = random_normal(1, 5, rng);
            const Matrix quad = matmul_nt(matmul(z, cov), z);
            CHECK(quad(0, 0) >= -1e-10);
        }
    }
}

TEST_CASE("weighted covariance rejects non-distributions") {
    const Matrix x(3, 2);
    CHECK_THROWS_AS(weighted_covariance(x, std::vector<double>{0.5, 0.5, 0.5}),
                    std::invalid_argument);
    CHECK_THROWS_AS(weighted_covariance(x, std::vector<double>{1.5, -0.5, 0.0}),
                    std::invalid_argument);
}

TEST_CASE("attention config validation") {
    AttentionConfig cfg{.n = 8, .d = 4, .d_m = 8, .heads = 2, .k = 4};
    CHECK_NOTHROW(cfg.validate());
    cfg.k = 9;
    CHECK_THROWS_AS(cfg.validate(), std::out_of_range);
    cfg.k = 4;
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.temperature = 1.0;
    cfg.d_m = 9;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
