#include <doctest.h>

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "knnattn/lemma_lab.hpp"
#include "knnattn/numerics.hpp"

using namespace knnattn;
using namespace knnattn::lemma;

TEST_CASE("cluster config construction and validation") {
    const auto cfg = make_cluster_config(16, 8, 4, 2.0, 3, 0.5, 10, 99);
    CHECK(cfg.relevant_mean.size() == 8);
    CHECK(cfg.noise_means.size() == 3);
    double rel_norm = 0.0;
    for (double v : cfg.relevant_mean) rel_norm += v * v;
    CHECK(std::sqrt(rel_norm) == doctest::Approx(2.0).epsilon(1e-12));
    for (const auto& nm : cfg.noise_means) {
        double dot = 0.0, norm = 0.0;
        for (std::size_t c = 0; c < 8; ++c) {
            dot += nm[c] * cfg.relevant_mean[c];
            norm += nm[c] * nm[c];
        }
        CHECK(std::fabs(dot) < 1e-12);                                  // orthogonal
        CHECK(std::sqrt(norm) == doctest::Approx(2.0).epsilon(1e-12));  // matched norm
    }

    ClusterModelConfig bad = cfg;
    bad.k1 = 17;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.sigma = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("cluster sampling: vanishing noise pins rows to their means") {
    auto cfg = make_cluster_config(12, 6, 5, 1.5, 2, 1e-9, 1, 7);
    RngStream rng(1);
    const auto s = sample_cluster_patches(cfg, rng);
    std::size_t relevant_count = 0;
    for (std::size_t i = 0; i < cfg.n; ++i) {
        if (s.relevant[i]) {
            ++relevant_count;
            for (std::size_t c = 0; c < cfg.d_m; ++c) {
                CHECK(std::fabs(s.x(i, c) - cfg.relevant_mean[c]) < 1e-6);
            }
        }
    }
    CHECK(relevant_count == cfg.k1);
}

TEST_CASE("cluster sampling: relevant sample mean approaches the configured mean") {
    auto cfg = make_cluster_config(8, 4, 8, 1.0, 1, 0.8, 1, 21);
    RngStream rng(2);
    const std::size_t draws = 10000;
    std::vector<double> acc(cfg.d_m, 0.0);
    for (std::size_t rep = 0; rep < draws / cfg.n; ++rep) {
        const auto s = sample_cluster_patches(cfg, rng);
        for (std::size_t i = 0; i < cfg.n; ++i)
            for (std::size_t c = 0; c < cfg.d_m; ++c) acc[c] += s.x(i, c);
    }
    const double per_coord_sigma = cfg.sigma / std::sqrt(static_cast<double>(cfg.d_m));
    const double tol = 3.0 * per_coord_sigma / std::sqrt(static_cast<double>(draws));
    for (std::size_t c = 0; c < cfg.d_m; ++c) {
        CHECK(std::fabs(acc[c] / draws - cfg.relevant_mean[c]) < tol * 2.0);
    }
}

TEST_CASE("cluster sampling is bit-deterministic in the seed") {
    auto cfg = make_cluster_config(10, 5, 3, 1.0, 2, 0.7, 1, 5);
    RngStream r1(77), r2(77);
    const auto a = sample_cluster_patches(cfg, r1);
    const auto b = sample_cluster_patches(cfg, r2);
    CHECK(a.x == b.x);
    CHECK(a.relevant == b.relevant);
}

TEST_CASE("separated weights satisfy the self-vs-cross inequality") {
    auto cfg = make_cluster_config(16, 8, 4, 2.0, 3, 0.5, 1, 11);
    RngStream rng(3);
    const auto w = draw_separated_weights(cfg, 8, rng);
    const Matrix mu(1, 8, cfg.relevant_mean);
    const Matrix qm = matmul(mu, w.wq);
    const double self = matmul_nt(qm, matmul(mu, w.wk))(0, 0);
    CHECK(self > 0.0);
    for (const auto& nm : cfg.noise_means) {
        const double cross = matmul_nt(qm, matmul(Matrix(1, 8, nm), w.wk))(0, 0);
        CHECK(self > std::fabs(cross));
    }
}

TEST_CASE("noise distillation: vanishing noise at k=k1 drives the error to zero") {
    auto cfg = make_cluster_config(16, 8, 4, 2.0, 3, 1e-8, 20, 13);
    const std::size_t grid[] = {4};
    const auto res = noise_distillation_experiment(cfg, grid, 8);
    // rows are sorted by k; first row is k=k1
    REQUIRE(res.rows.size() >= 2);
    CHECK(res.rows[0].sweep_value == 4.0);
    CHECK(res.rows[0].mean_value < 1e-6);
    // rho at k=k1 with vanishing noise: selection is perfect
    CHECK(res.extra[0].mean_value == 0.0);
}

TEST_CASE("noise distillation: k=k1 beats the dense baseline at moderate noise") {
    auto cfg = make_cluster_config(32, 16, 8, 2.0, 3, 0.6, 60, 17);
    const std::size_t grid[] = {8, 32};
    const auto res = noise_distillation_experiment(cfg, grid, 16, {}, 20, 0.95);
    REQUIRE(res.rows.size() == 2);
    CHECK(res.rows[0].mean_value < res.rows[1].mean_value);
    CHECK(res.pass);
}

TEST_CASE("survivor count: all-relevant and noiseless limits") {
    // k1 == n: every patch scores at least the worst relevant one
    {
        const std::size_t grid[] = {8};
        const auto res = survivor_count_experiment(12, 12, 1.5, 1, 0.5, grid, 10, 23);
        CHECK(res.rows[0].mean_value == 12.0);
        CHECK(res.rows[0].stddev == 0.0);
        CHECK(res.pass);  // vacuous
    }
    // vanishing noise with strict separation: survivors = k1 exactly
    {
        const std::size_t grid[] = {16};
        const auto res = survivor_count_experiment(12, 5, 1.5, 2, 1e-8, grid, 10, 29);
        CHECK(res.rows[0].mean_value == 5.0);
        CHECK(res.rows[0].stddev == 0.0);
    }
}

TEST_CASE("gradient scale experiment: analytic-vs-fd rows are present and tight") {
    GradientScaleOptions opt;
    opt.n = 12;
    opt.d_m = 8;
    opt.d = 8;
    opt.k = 6;
    opt.trials = 40;
    opt.fd_instances = 8;
    opt.batch = 20;
    const auto res = gradient_scale_experiment(opt);
    REQUIRE(res.extra.size() == 1);
    CHECK(res.extra[0].mean_value < opt.fd_tolerance);
    CHECK(res.extra[0].pass);
    REQUIRE(res.rows.size() == 4);
}

TEST_CASE("sweep csv format") {
    std::vector<SweepRow> rows{{4.0, 0.5, 0.125, 20, "demo", true}};
    std::ostringstream os;
    write_sweep_csv(rows, os);
    CHECK(os.str() ==
          "sweep_value,mean,std,trials,criterion,pass\n4,0.5,0.125,20,\"demo\",1\n");
}

TEST_CASE("experiments are deterministic functions of config and seed") {
    auto cfg = make_cluster_config(16, 8, 4, 2.0, 2, 0.5, 15, 31);
    const std::size_t grid[] = {4, 16};
    const auto a = noise_distillation_experiment(cfg, grid, 8);
    const auto b = noise_distillation_experiment(cfg, grid, 8);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].mean_value == b.rows[i].mean_value);
        CHECK(a.rows[i].stddev == b.rows[i].stddev);
    }
    // threads must not change the aggregate
    const auto c = noise_distillation_experiment(cfg, grid, 8, {}, 20, 0.95, 2);
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].mean_value == c.rows[i].mean_value);
    }
}

TEST_CASE("dense baseline in the noise experiment equals dense attention exactly") {
    auto cfg = make_cluster_config(12, 6, 4, 2.0, 2, 0.5, 5, 37);
    // k = n row of the sweep must equal a dense-attention recomputation
    RngStream rng = RngStream(cfg.seed).split(0);
    const auto w = draw_separated_weights(cfg, 6, rng);
    const auto s = sample_cluster_patches(cfg, rng);
    std::size_t query = 0;
    while (!s.relevant[query]) ++query;
    auto [q, k, v] = project_qkv(s.x, w);
    const auto fast = knn_attention_fast(q, k, v, cfg.n);
    const auto dense = dense_attention(q, k, v);
    CHECK(max_abs_diff(fast.vhat, dense.vhat) < 1e-12);
}
