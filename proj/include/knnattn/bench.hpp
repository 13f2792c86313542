#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

namespace knnattn::bench {

struct BenchRow {
    std::size_t n = 0, d = 0, k = 0;
    double dense_ms = 0.0;
    double fast_ms = 0.0;
    double slow_ms = 0.0;
};

struct Options {
    std::vector<std::array<std::size_t, 3>> sizes;  // (n, d, k)
    std::size_t reps = 5;
    std::uint64_t seed = 9;
    // fast must run within slow_factor x slow at every grid point
    double slow_factor = 1.0;
};

Options default_options();

struct BenchResult {
    std::vector<BenchRow> rows;
    bool ordering_pass = false;
};

// Median wall time per kernel over reps.
BenchResult run(const Options& opt);

// columns: n,d,k,dense_ms,fast_knn_ms,slow_knn_ms
void write_csv(const BenchResult& result, std::ostream& os);

}  // namespace knnattn::bench
