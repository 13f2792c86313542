#pragma once

#include <functional>
#include <limits>

#include "knnattn/matrix.hpp"
#include "knnattn/rng.hpp"

namespace knnattn {

// Masked score entries carry this value instead of -inf so that arithmetic
// before the softmax stays NaN-free; softmax maps it to an exact zero weight.
inline constexpr double kMaskSentinel = std::numeric_limits<double>::lowest();

// c = a * b. Per output entry the contraction runs in ascending k order.
Matrix matmul(const Matrix& a, const Matrix& b);

// c = a * b^T for row-major operands with matching inner dimension.
// Used for score matrices; each entry is one dot-kernel call.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);

// Row-wise softmax: exp(x - rowmax) scaled by the reciprocal row sum.
// Sentinel entries become exactly 0; a row of only sentinels throws.
Matrix softmax_rows(const Matrix& m);

// Shannon entropy of one probability row; 0 log 0 = 0.
double row_entropy(std::span<const double> p);

// Central differences (f(x+h e_ij) - f(x-h e_ij)) / 2h per entry.
// Throws if f evaluates to a non-finite value, naming the entry.
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& at,
                        double h);

double frobenius_norm(const Matrix& m);
double row_norm(const Matrix& m, std::size_t i);
double mean(std::span<const double> v);
// Population standard deviation (denominator n).
double stddev_population(std::span<const double> v);

void fill_normal(Matrix& m, RngStream& rng, double scale = 1.0);
Matrix random_normal(std::size_t rows, std::size_t cols, RngStream& rng, double scale = 1.0);

}  // namespace knnattn
