#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace knnattn::verify {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct Options {
    std::size_t instances = 20;
    std::size_t n = 24;
    std::size_t d = 8;
    std::uint64_t seed = 42;
    double attention_grad_tol = 1e-6;
    double model_grad_tol = 1e-5;
    std::size_t threads = 1;
};

// Runs the equivalence, mask, gradient, and metric-oracle suites.
std::vector<CheckResult> run_all(const Options& opt);

bool all_passed(std::span<const CheckResult> results);

}  // namespace knnattn::verify
