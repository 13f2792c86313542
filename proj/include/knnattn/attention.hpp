#pragma once

#include <cstddef>
#include <vector>

#include "knnattn/matrix.hpp"
#include "knnattn/numerics.hpp"

namespace knnattn {

enum class SelectionMetric { dot, euclidean };

struct AttentionConfig {
    std::size_t n = 0;      // tokens
    std::size_t d = 0;      // head dimension
    std::size_t d_m = 0;    // model dimension
    std::size_t heads = 1;
    std::size_t k = 0;      // neighbors per query
    SelectionMetric metric = SelectionMetric::dot;
    double temperature = 1.0;

    void validate() const;  // 1 <= k <= n, temperature > 0, d_m == heads*d
};

struct ProjectionWeights {
    Matrix wq, wk, wv;  // each d_m x d
};

// Per-row selection of exactly k columns; ties go to the lowest column index.
// Square (n x n) in attention use, but any row count is accepted.
class TopKMask {
public:
    TopKMask(std::size_t rows, std::size_t cols, std::size_t k)
        : rows_(rows), cols_(cols), k_(k), sel_(rows * cols, 0) {}
    static TopKMask all(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t k() const { return k_; }
    bool selected(std::size_t i, std::size_t j) const { return sel_[i * cols_ + j] != 0; }
    void select(std::size_t i, std::size_t j) { sel_[i * cols_ + j] = 1; }
    std::vector<std::size_t> row_indices(std::size_t i) const;  // ascending

    // Throws unless every row has exactly k selected entries.
    void validate() const;

private:
    std::size_t rows_, cols_, k_;
    std::vector<std::uint8_t> sel_;
};

struct DenseAttentionResult {
    Matrix vhat;  // n x d
    Matrix attn;  // n x n, row-stochastic
};

struct KnnAttentionResult {
    Matrix vhat;
    Matrix attn;  // exactly k nonzeros per row
    TopKMask mask;
};

struct SlowKnnResult {
    Matrix vhat;
    std::vector<std::vector<std::size_t>> selected;  // per query, ascending
};

// 1 / (sqrt(d) * temperature)
double score_scale(std::size_t d, double temperature);

// Q K^T scaled by score_scale; throws on non-finite entries.
Matrix scaled_scores(const Matrix& q, const Matrix& k, double temperature);

// (X Wq, X Wk, X Wv)
struct QkvTriple {
    Matrix q, k, v;
};
QkvTriple project_qkv(const Matrix& x, const ProjectionWeights& w);

DenseAttentionResult dense_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                     double temperature = 1.0);

// Per row, the k largest score entries; k out of range throws (no clamping).
TopKMask row_topk_mask(const Matrix& scores, std::size_t k);

KnnAttentionResult knn_attention_fast(const Matrix& q, const Matrix& k, const Matrix& v,
                                      std::size_t top_k, double temperature = 1.0);

// Per-query neighbor selection (euclidean: nearest keys; dot: largest scores)
// followed by softmax of scaled dot products over the selected keys only.
SlowKnnResult knn_attention_slow(const Matrix& q, const Matrix& k, const Matrix& v,
                                 std::size_t top_k, SelectionMetric metric,
                                 double temperature = 1.0);

// sum_i a_i x_i^T x_i - (sum_i a_i x_i)^T (sum_i a_i x_i); exactly symmetric
// by construction. Throws unless weights are a probability distribution.
Matrix weighted_covariance(const Matrix& x, std::span<const double> weights);

// Closed-form derivative of attention output row `row` with respect to the
// single projection-weight entry (i, j), expressed through the weighted patch
// covariance under that row's attention distribution. The mask is held fixed.
enum class ProjectionSide { query, key };
Matrix vhat_row_grad(const Matrix& x, const ProjectionWeights& w, std::size_t row,
                     std::size_t i, std::size_t j, const TopKMask& mask, ProjectionSide side,
                     double temperature = 1.0);

// Reverse-mode derivatives of (masked) softmax attention with the selection
// held fixed; pass mask = nullptr for dense attention.
struct AttentionGrads {
    Matrix dq, dk, dv;
};
AttentionGrads attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                  const TopKMask* mask, const Matrix& upstream,
                                  double temperature = 1.0);

// Gradients of loss = |vhat|_F^2 with respect to the projection weights.
struct ProjectionGrads {
    Matrix dwq, dwk, dwv;
};
ProjectionGrads frobenius_loss_weight_grads(const Matrix& x, const ProjectionWeights& w,
                                            const TopKMask* mask, double temperature = 1.0);

}  // namespace knnattn
