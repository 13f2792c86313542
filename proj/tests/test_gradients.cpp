#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "knnattn/attention.hpp"
#include "knnattn/numerics.hpp"
#include "knnattn/rng.hpp"

using namespace knnattn;

namespace {

Matrix frozen_forward(const Matrix& q, const Matrix& k, const Matrix& v, const TopKMask* mask,
                      double t) {
    const Matrix scores = scaled_scores(q, k, t);
    if (mask == nullptr) return matmul(softmax_rows(scores), v);
    Matrix masked(scores.rows(), scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i)
        for (std::size_t j = 0; j < scores.cols(); ++j)
            masked(i, j) = mask->selected(i, j) ? scores(i, j) : kMaskSentinel;
    return matmul(softmax_rows(masked), v);
}

double weighted_sum(const Matrix& a, const Matrix& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
    return acc;
}

double rel_err(const Matrix& got, const Matrix& want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        num = std::max(num, std::fabs(got.data()[i] - want.data()[i]));
        den = std::max(den, std::fabs(want.data()[i]));
    }
    return num / std::max(den, 1e-12);
}

}  // namespace

TEST_CASE("attention_backward: zero upstream gives zero gradients") {
    RngStream rng(31);
    const Matrix q = random_normal(5, 3, rng);
    const Matrix k = random_normal(5, 3, rng);
    const Matrix v = random_normal(5, 3, rng);
    const auto g = attention_backward(q, k, v, nullptr, Matrix(5, 3));
    CHECK(frobenius_norm(g.dq) == 0.0);
    CHECK(frobenius_norm(g.dk) == 0.0);
    CHECK(frobenius_norm(g.dv) == 0.0);
}

TEST_CASE("attention_backward with the all-true mask equals the dense backward") {
    RngStream rng(32);
    const Matrix q = random_normal(6, 3, rng);
    const Matrix k = random_normal(6, 3, rng);
    const Matrix v = random_normal(6, 3, rng);
    const Matrix up = random_normal(6, 3, rng);
    const TopKMask full = TopKMask::all(6);
    const auto dense = attention_backward(q, k, v, nullptr, up);
    const auto masked = attention_backward(q, k, v, &full, up);
    CHECK(max_abs_diff(dense.dq, masked.dq) == 0.0);
    CHECK(max_abs_diff(dense.dk, masked.dk) == 0.0);
    CHECK(max_abs_diff(dense.dv, masked.dv) == 0.0);
}

TEST_CASE("attention_backward matches central differences at tie-free points") {
    RngStream rng(33);
    const std::size_t n = 6, d = 3, k = 2;
    for (int rep = 0; rep < 8; ++rep) {
        const Matrix q = random_normal(n, d, rng);
        const Matrix kk = random_normal(n, d, rng);
        const Matrix v = random_normal(n, d, rng);
        const Matrix up = random_normal(n, d, rng);
        const TopKMask mask = row_topk_mask(scaled_scores(q, kk, 1.0), k);
        const auto g = attention_backward(q, kk, v, &mask, up);

        const double h = 1e-5;
        const Matrix fdq = finite_diff_grad(
            [&](const Matrix& qq) { return weighted_sum(up, frozen_forward(qq, kk, v, &mask, 1.0)); },
            q, h);
        const Matrix fdk = finite_diff_grad(
            [&](const Matrix& m) { return weighted_sum(up, frozen_forward(q, m, v, &mask, 1.0)); },
            kk, h);
        const Matrix fdv = finite_diff_grad(
            [&](const Matrix& m) { return weighted_sum(up, frozen_forward(q, kk, m, &mask, 1.0)); },
            v, h);
        CHECK(rel_err(g.dq, fdq) < 1e-6);
        CHECK(rel_err(g.dk, fdk) < 1e-6);
        CHECK(rel_err(g.dv, fdv) < 1e-6);
    }
}

TEST_CASE("covariance-form row gradient: zero input or collapsed patches give zero") {
    RngStream rng(34);
    const std::size_t n = 5, d_m = 4, d = 3;
    const double s = 1.0 / std::sqrt(static_cast<double>(d_m));
    const ProjectionWeights w{random_normal(d_m, d, rng, s), random_normal(d_m, d, rng, s),
                              random_normal(d_m, d, rng, s)};

    const Matrix zero_x(n, d_m);
    const TopKMask full = TopKMask::all(n);
    const Matrix g0 = vhat_row_grad(zero_x, w, 1, 2, 1, full, ProjectionSide::query);
    CHECK(frobenius_norm(g0) == 0.0);

    // all selected patches identical -> zero covariance -> zero gradient
    Matrix same(n, d_m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d_m; ++c) same(i, c) = 0.3 * static_cast<double>(c) - 0.1;
    const Matrix g1 = vhat_row_grad(same, w, 0, 1, 1, full, ProjectionSide::query);
    CHECK(frobenius_norm(g1) < 1e-12);
}

TEST_CASE("covariance-form row gradient matches central differences") {
    RngStream rng(35);
    const std::size_t n = 7, d_m = 5, d = 4, k = 3;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_m));
    for (int rep = 0; rep < 10; ++rep) {
        const Matrix x = random_normal(n, d_m, rng);
        const ProjectionWeights w{random_normal(d_m, d, rng, scale),
                                  random_normal(d_m, d, rng, scale),
                                  random_normal(d_m, d, rng, scale)};
        auto [q, kk, v] = project_qkv(x, w);
        const TopKMask mask = row_topk_mask(scaled_scores(q, kk, 1.0), k);

        const std::size_t row = rng.next_below(n);
        const std::size_t i = rng.next_below(d_m);
        const std::size_t j = rng.next_below(d);
        const double h = 1e-5;

        for (ProjectionSide side : {ProjectionSide::query, ProjectionSide::key}) {
            const Matrix analytic = vhat_row_grad(x, w, row, i, j, mask, side);
            ProjectionWeights wp = w;
            Matrix& target = side == ProjectionSide::query ? wp.wq : wp.wk;
            Matrix fd(1, d);
            const double orig = target(i, j);
            target(i, j) = orig + h;
            auto [qp, kp, vp] = project_qkv(x, wp);
            const Matrix plus = frozen_forward(qp, kp, vp, &mask, 1.0);
            target(i, j) = orig - h;
            auto [qm, km, vm] = project_qkv(x, wp);
            const Matrix minus = frozen_forward(qm, km, vm, &mask, 1.0);
            target(i, j) = orig;
            for (std::size_t c = 0; c < d; ++c) {
                fd(0, c) = (plus(row, c) - minus(row, c)) / (2.0 * h);
            }
            CHECK(rel_err(analytic, fd) < 1e-6);
        }
    }
}

TEST_CASE("covariance-form gradient rejects out-of-range indices") {
    RngStream rng(36);
    const Matrix x = random_normal(4, 3, rng);
    const ProjectionWeights w{random_normal(3, 2, rng), random_normal(3, 2, rng),
                              random_normal(3, 2, rng)};
    const TopKMask full = TopKMask::all(4);
    CHECK_THROWS_AS(vhat_row_grad(x, w, 4, 0, 0, full, ProjectionSide::query),
                    std::out_of_range);
    CHECK_THROWS_AS(vhat_row_grad(x, w, 0, 3, 0, full, ProjectionSide::query),
                    std::out_of_range);
    CHECK_THROWS_AS(vhat_row_grad(x, w, 0, 0, 2, full, ProjectionSide::key), std::out_of_range);
}

// Sample-mean comparison with standard normal X and W; the fixed seed makes
// the outcome reproducible.
TEST_CASE("knn gradient of the squared-norm loss is smaller than dense on average") {
    const std::size_t n = 32, d_m = 16, d = 16, k = 16;
    double knn_acc = 0.0, dense_acc = 0.0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        RngStream rng = RngStream(1).split(t);
        const Matrix x = random_normal(n, d_m, rng);
        const ProjectionWeights w{random_normal(d_m, d, rng), random_normal(d_m, d, rng),
                                  random_normal(d_m, d, rng)};
        auto [q, kk, v] = project_qkv(x, w);
        const TopKMask mask = row_topk_mask(scaled_scores(q, kk, 1.0), k);
        auto inf_norm = [](const Matrix& m) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m.size(); ++i)
                acc = std::max(acc, std::fabs(m.data()[i]));
            return acc;
        };
        knn_acc += inf_norm(frobenius_loss_weight_grads(x, w, &mask).dwq);
        dense_acc += inf_norm(frobenius_loss_weight_grads(x, w, nullptr).dwq);
    }
    CHECK(knn_acc / trials <= dense_acc / trials);
}
