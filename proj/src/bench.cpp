#include "knnattn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <ostream>

#include "knnattn/attention.hpp"
#include "knnattn/numerics.hpp"
#include "knnattn/rng.hpp"
#include "knnattn/util.hpp"

namespace knnattn::bench {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double time_ms(F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
}

}  // namespace

Options default_options() {
    Options opt;
    opt.sizes = {{64, 32, 32}, {128, 64, 64}, {196, 64, 100}, {256, 64, 128}};
    return opt;
}

BenchResult run(const Options& opt) {
    BenchResult result;
    result.ordering_pass = true;
    volatile double sink = 0.0;
    for (const auto& [n, d, k] : opt.sizes) {
        RngStream rng = RngStream(opt.seed).split(n * 131 + d * 7 + k);
        const Matrix q = random_normal(n, d, rng);
        const Matrix kk = random_normal(n, d, rng);
        const Matrix v = random_normal(n, d, rng);

        std::vector<double> dense_times, fast_times, slow_times;
        for (std::size_t rep = 0; rep < opt.reps; ++rep) {
            dense_times.push_back(time_ms([&] { sink = sink + dense_attention(q, kk, v).vhat(0, 0); }));
            fast_times.push_back(
                time_ms([&] { sink = sink + knn_attention_fast(q, kk, v, k).vhat(0, 0); }));
            slow_times.push_back(time_ms([&] {
                sink = sink + knn_attention_slow(q, kk, v, k, SelectionMetric::euclidean).vhat(0, 0);
            }));
        }
        BenchRow row{n, d, k, median(dense_times), median(fast_times), median(slow_times)};
        if (!(row.fast_ms <= opt.slow_factor * row.slow_ms)) result.ordering_pass = false;
        result.rows.push_back(row);
    }
    return result;
}

void write_csv(const BenchResult& result, std::ostream& os) {
    os << "n,d,k,dense_ms,fast_knn_ms,slow_knn_ms\n";
    for (const auto& r : result.rows) {
        os << r.n << ',' << r.d << ',' << r.k << ',' << fmt_g17(r.dense_ms) << ','
           << fmt_g17(r.fast_ms) << ',' << fmt_g17(r.slow_ms) << '\n';
    }
}

}  // namespace knnattn::bench
