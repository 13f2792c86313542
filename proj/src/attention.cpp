#include "knnattn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "knnattn/kernels.hpp"

namespace knnattn {

void AttentionConfig::validate() const {
    if (k < 1 || k > n) {
        throw std::out_of_range("k out of range: k=" + std::to_string(k) +
                                ", n=" + std::to_string(n));
    }
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (d_m != heads * d) {
        throw std::invalid_argument("d_m (" + std::to_string(d_m) + ") != heads*d (" +
                                    std::to_string(heads) + "*" + std::to_string(d) + ")");
    }
}

TopKMask TopKMask::all(std::size_t n) {
    TopKMask m(n, n, n);
    std::fill(m.sel_.begin(), m.sel_.end(), 1);
    return m;
}

std::vector<std::size_t> TopKMask::row_indices(std::size_t i) const {
    std::vector<std::size_t> out;
    out.reserve(k_);
    for (std::size_t j = 0; j < cols_; ++j)
        if (selected(i, j)) out.push_back(j);
    return out;
}

void TopKMask::validate() const {
    for (std::size_t i = 0; i < rows_; ++i) {
        std::size_t count = 0;
        for (std::size_t j = 0; j < cols_; ++j) count += selected(i, j) ? 1 : 0;
        if (count != k_) {
            throw std::logic_error("mask row " + std::to_string(i) + " has " +
                                   std::to_string(count) + " selected, expected " +
                                   std::to_string(k_));
        }
    }
}

double score_scale(std::size_t d, double temperature) {
    return 1.0 / (std::sqrt(static_cast<double>(d)) * temperature);
}

Matrix scaled_scores(const Matrix& q, const Matrix& k, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    Matrix s = matmul_nt(q, k);
    kernels::ops().scale(s.size(), score_scale(q.cols(), temperature), s.data());
    if (!s.all_finite()) throw std::domain_error("non-finite attention scores");
    return s;
}

QkvTriple project_qkv(const Matrix& x, const ProjectionWeights& w) {
    if (!w.wq.same_shape(w.wk) || !w.wq.same_shape(w.wv)) {
        throw std::invalid_argument("projection weights disagree in shape: " +
                                    w.wq.shape_str() + ", " + w.wk.shape_str() + ", " +
                                    w.wv.shape_str());
    }
    return {matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv)};
}

DenseAttentionResult dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                     double temperature) {
    Matrix attn = softmax_rows(scaled_scores(q, k, temperature));
    Matrix vhat = matmul(attn, v);
    return {std::move(vhat), std::move(attn)};
}

TopKMask row_topk_mask(const Matrix& scores, std::size_t k) {
    const std::size_t n = scores.cols();
    if (k < 1 || k > n) {
        throw std::out_of_range("k out of range: k=" + std::to_string(k) +
                                ", n=" + std::to_string(n));
    }
    TopKMask mask(scores.rows(), scores.cols(), k);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        const double* row = scores.row_ptr(i);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [row](std::size_t a, std::size_t b) {
                              if (row[a] != row[b]) return row[a] > row[b];
                              return a < b;
                          });
        for (std::size_t t = 0; t < k; ++t) mask.select(i, order[t]);
    }
    return mask;
}

namespace {

// Masked row softmax followed by the weighted sum of v rows; identical
// arithmetic for the fast and slow paths.
void masked_row_attention(const double* scaled_row, std::size_t n, const TopKMask& mask,
                          std::size_t i, const Matrix& v, double* attn_row, double* out_row) {
    const auto& k = kernels::ops();
    std::vector<double> masked(n);
    for (std::size_t j = 0; j < n; ++j) {
        masked[j] = mask.selected(i, j) ? scaled_row[j] : kMaskSentinel;
    }
    const double rowmax = k.max(n, masked.data());
    if (rowmax == kMaskSentinel) {
        throw std::domain_error("empty attention row " + std::to_string(i));
    }
    const double total = k.exp_shift_sum(n, masked.data(), rowmax, 1.0, attn_row);
    k.scale(n, 1.0 / total, attn_row);
    for (std::size_t j = 0; j < n; ++j) {
        k.axpy(v.cols(), attn_row[j], v.row_ptr(j), out_row);
    }
}

}  // namespace

KnnAttentionResult knn_attention_fast(const Matrix& q, const Matrix& k, const Matrix& v,
                                      std::size_t top_k, double temperature) {
    const Matrix scores = scaled_scores(q, k, temperature);
    TopKMask mask = row_topk_mask(scores, top_k);
    const std::size_t n = scores.cols();
    Matrix attn(scores.rows(), n);
    Matrix vhat(scores.rows(), v.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        masked_row_attention(scores.row_ptr(i), n, mask, i, v, attn.row_ptr(i),
                             vhat.row_ptr(i));
    }
    return {std::move(vhat), std::move(attn), std::move(mask)};
}

SlowKnnResult knn_attention_slow(const Matrix& q, const Matrix& k, const Matrix& v,
                                 std::size_t top_k, SelectionMetric metric,
                                 double temperature) {
    const std::size_t n = k.rows();
    if (top_k < 1 || top_k > n) {
        throw std::out_of_range("k out of range: k=" + std::to_string(top_k) +
                                ", n=" + std::to_string(n));
    }
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    const auto& ops = kernels::ops();
    const double inv = score_scale(q.cols(), temperature);

    SlowKnnResult result{Matrix(q.rows(), v.cols()), {}};
    result.selected.resize(q.rows());
    std::vector<double> key_dist(n);
    std::vector<double> scaled_row(n);
    std::vector<std::size_t> order(n);
    std::vector<double> attn_row(n);
    TopKMask row_mask(1, n, top_k);

    for (std::size_t i = 0; i < q.rows(); ++i) {
        const double* qi = q.row_ptr(i);
        for (std::size_t j = 0; j < n; ++j) {
            scaled_row[j] = ops.dot(q.cols(), qi, k.row_ptr(j)) * inv;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (metric == SelectionMetric::euclidean) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                const double* kj = k.row_ptr(j);
                for (std::size_t c = 0; c < q.cols(); ++c) {
                    const double diff = qi[c] - kj[c];
                    acc += diff * diff;
                }
                key_dist[j] = acc;
            }
            std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                              [&key_dist](std::size_t a, std::size_t b) {
                                  if (key_dist[a] != key_dist[b])
                                      return key_dist[a] < key_dist[b];
                                  return a < b;
                              });
        } else {
            std::partial_sort(order.begin(), order.begin() + top_k, order.end(),
                              [&scaled_row](std::size_t a, std::size_t b) {
                                  if (scaled_row[a] != scaled_row[b])
                                      return scaled_row[a] > scaled_row[b];
                                  return a < b;
                              });
        }
        auto& sel = result.selected[i];
        sel.assign(order.begin(), order.begin() + top_k);
        std::sort(sel.begin(), sel.end());

        row_mask = TopKMask(1, n, top_k);
        for (std::size_t s : sel) row_mask.select(0, s);
        std::fill(attn_row.begin(), attn_row.end(), 0.0);
        masked_row_attention(scaled_row.data(), n, row_mask, 0, v, attn_row.data(),
                             result.vhat.row_ptr(i));
    }
    return result;
}

Matrix weighted_covariance(const Matrix& x, std::span<const double> weights) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    if (weights.size() != n) {
        throw std::invalid_argument("weights length " + std::to_string(weights.size()) +
                                    " != patch count " + std::to_string(n));
    }
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("weights must be nonnegative");
        total += w;
    }
    if (std::fabs(total - 1.0) > 1e-10) {
        throw std::invalid_argument("weights sum to " + std::to_string(total) +
                                    "; not a distribution");
    }
    const auto& ops = kernels::ops();
    Matrix m(1, d);
    for (std::size_t i = 0; i < n; ++i) ops.axpy(d, weights[i], x.row_ptr(i), m.data());

    // Upper triangle, mirrored, so the result is exactly symmetric.
    Matrix cov(d, d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x.row_ptr(i);
        for (std::size_t r = 0; r < d; ++r) {
            ops.axpy(d - r, weights[i] * xi[r], xi + r, cov.row_ptr(r) + r);
        }
    }
    for (std::size_t r = 0; r < d; ++r) {
        ops.axpy(d - r, -m(0, r), m.data() + r, cov.row_ptr(r) + r);
    }
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = r + 1; c < d; ++c) cov(c, r) = cov(r, c);
    return cov;
}

Matrix vhat_row_grad(const Matrix& x, const ProjectionWeights& w, std::size_t row,
                     std::size_t i, std::size_t j, const TopKMask& mask, ProjectionSide side,
                     double temperature) {
    const std::size_t n = x.rows();
    const std::size_t d_m = x.cols();
    const std::size_t d = w.wq.cols();
    if (row >= n) throw std::out_of_range("query row " + std::to_string(row) + " out of range");
    if (i >= d_m || j >= d) {
        throw std::out_of_range("weight entry (" + std::to_string(i) + "," + std::to_string(j) +
                                ") out of range for " + w.wq.shape_str());
    }

    auto [q, k, v] = project_qkv(x, w);
    const Matrix scores = scaled_scores(q, k, temperature);
    std::vector<double> masked(n);
    for (std::size_t c = 0; c < n; ++c) {
        masked[c] = mask.selected(row, c) ? scores(row, c) : kMaskSentinel;
    }
    const auto& ops = kernels::ops();
    const double rowmax = ops.max(n, masked.data());
    if (rowmax == kMaskSentinel) throw std::domain_error("empty attention row");
    std::vector<double> a(n);
    const double total = ops.exp_shift_sum(n, masked.data(), rowmax, 1.0, a.data());
    ops.scale(n, 1.0 / total, a.data());

    const Matrix var = weighted_covariance(x, a);
    const double inv = score_scale(d, temperature);

    Matrix left(1, d_m);
    double factor;
    if (side == ProjectionSide::query) {
        // d vhat_row / d wq_ij = x(row,i) * inv * wk_col_j^T Var(x) wv
        for (std::size_t r = 0; r < d_m; ++r) left(0, r) = w.wk(r, j);
        factor = x(row, i) * inv;
    } else {
        // d vhat_row / d wk_ij = (x_row . wq_col_j) * inv * e_i^T Var(x) wv
        for (std::size_t c = 0; c < d_m; ++c) left(0, c) = var(i, c);
        double proj = 0.0;
        for (std::size_t r = 0; r < d_m; ++r) proj += x(row, r) * w.wq(r, j);
        factor = proj * inv;
        Matrix g = matmul(left, w.wv);
        ops.scale(g.size(), factor, g.data());
        return g;
    }
    Matrix g = matmul(matmul(left, var), w.wv);
    ops.scale(g.size(), factor, g.data());
    return g;
}

AttentionGrads attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                  const TopKMask* mask, const Matrix& upstream,
                                  double temperature) {
    const std::size_t n = q.rows();
    if (upstream.rows() != n || upstream.cols() != v.cols()) {
        throw std::invalid_argument("upstream shape " + upstream.shape_str() +
                                    " does not match attention output " + std::to_string(n) +
                                    "x" + std::to_string(v.cols()));
    }
    const Matrix scores = scaled_scores(q, k, temperature);
    Matrix attn;
    if (mask != nullptr) {
        Matrix masked(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                masked(i, j) = mask->selected(i, j) ? scores(i, j) : kMaskSentinel;
        attn = softmax_rows(masked);
    } else {
        attn = softmax_rows(scores);
    }

    Matrix dv = matmul(transpose(attn), upstream);
    Matrix da = matmul_nt(upstream, v);

    // Softmax backward per row; zero weights stay zero, so no gradient flows
    // through non-selected entries.
    const auto& ops = kernels::ops();
    Matrix ds(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        const double inner = ops.dot(n, attn.row_ptr(i), da.row_ptr(i));
        for (std::size_t j = 0; j < n; ++j) {
            ds(i, j) = attn(i, j) * (da(i, j) - inner);
        }
    }
    ops.scale(ds.size(), score_scale(q.cols(), temperature), ds.data());

    Matrix dq = matmul(ds, k);
    Matrix dk = matmul(transpose(ds), q);
    return {std::move(dq), std::move(dk), std::move(dv)};
}

ProjectionGrads frobenius_loss_weight_grads(const Matrix& x, const ProjectionWeights& w,
                                            const TopKMask* mask, double temperature) {
    auto [q, k, v] = project_qkv(x, w);
    const std::size_t n = x.rows();
    const Matrix scores = scaled_scores(q, k, temperature);
    Matrix attn;
    if (mask != nullptr) {
        Matrix masked(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                masked(i, j) = mask->selected(i, j) ? scores(i, j) : kMaskSentinel;
        attn = softmax_rows(masked);
    } else {
        attn = softmax_rows(scores);
    }
    Matrix upstream = matmul(attn, v);
    kernels::ops().scale(upstream.size(), 2.0, upstream.data());
    AttentionGrads g = attention_backward(q, k, v, mask, upstream, temperature);
    const Matrix xt = transpose(x);
    return {matmul(xt, g.dq), matmul(xt, g.dk), matmul(xt, g.dv)};
}

}  // namespace knnattn
