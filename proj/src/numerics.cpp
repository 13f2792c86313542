#include "knnattn/numerics.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "knnattn/kernels.hpp"

namespace knnattn {

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_multiplicable(a, b);
    Matrix c(a.rows(), b.cols());
    const auto& k = kernels::ops();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row_ptr(i);
        for (std::size_t t = 0; t < a.cols(); ++t) {
            k.axpy(b.cols(), a(i, t), b.row_ptr(t), ci);
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_nt shape mismatch: " + a.shape_str() + " * " +
                                    b.shape_str() + "^T");
    }
    Matrix c(a.rows(), b.rows());
    const auto& k = kernels::ops();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            c(i, j) = k.dot(a.cols(), a.row_ptr(i), b.row_ptr(j));
        }
    }
    return c;
}

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    const auto& k = kernels::ops();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double rowmax = k.max(m.cols(), m.row_ptr(i));
        if (rowmax == kMaskSentinel) {
            throw std::domain_error("empty attention row " + std::to_string(i));
        }
        const double total = k.exp_shift_sum(m.cols(), m.row_ptr(i), rowmax, 1.0, out.row_ptr(i));
        k.scale(m.cols(), 1.0 / total, out.row_ptr(i));
    }
    return out;
}

double row_entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& at,
                        double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    Matrix grad(at.rows(), at.cols());
    Matrix x = at;
    for (std::size_t i = 0; i < at.rows(); ++i) {
        for (std::size_t j = 0; j < at.cols(); ++j) {
            const double orig = x(i, j);
            x(i, j) = orig + h;
            const double fp = f(x);
            x(i, j) = orig - h;
            const double fm = f(x);
            x(i, j) = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::domain_error("finite_diff_grad: non-finite value at entry (" +
                                        std::to_string(i) + "," + std::to_string(j) + ")");
            }
            grad(i, j) = (fp - fm) / (2.0 * h);
        }
    }
    return grad;
}

double frobenius_norm(const Matrix& m) {
    return std::sqrt(kernels::ops().sum_sq(m.size(), m.data()));
}

double row_norm(const Matrix& m, std::size_t i) {
    return std::sqrt(kernels::ops().sum_sq(m.cols(), m.row_ptr(i)));
}

double mean(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return kernels::ops().sum(v.size(), v.data()) / static_cast<double>(v.size());
}

double stddev_population(std::span<const double> v) {
    if (v.empty()) return 0.0;
    const double mu = mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - mu) * (x - mu);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

void fill_normal(Matrix& m, RngStream& rng, double scale) {
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.next_normal() * scale;
}

Matrix random_normal(std::size_t rows, std::size_t cols, RngStream& rng, double scale) {
    Matrix m(rows, cols);
    fill_normal(m, rng, scale);
    return m;
}

}  // namespace knnattn
