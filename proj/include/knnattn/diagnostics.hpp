#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "knnattn/matrix.hpp"

namespace knnattn::diag {

// Forward-pass capture for one input: per layer, the tokens entering the
// layer, each head's attention matrix, and the two residual-branch outputs.
// Spatial tokens map to the patch grid in row-major order; when a
// classification token is present it sits at index 0.
struct LayerTrace {
    Matrix tokens;              // n x d_m
    std::vector<Matrix> attn;   // per head, n x n row-stochastic
    Matrix attn_branch;         // n x d_m
    Matrix ffn_branch;          // n x d_m
};

struct AttentionTrace {
    std::vector<LayerTrace> layers;
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
    bool cls_present = false;

    // grid_rows*grid_cols (+1 with cls) must equal n; attention rows must
    // sum to 1 within 1e-10.
    void validate() const;
};

struct LayerDiagnostics {
    double cos_sim = 0.0;
    double attn_std = 0.0;
    double attn_ratio = 0.0;
    double ffn_ratio = 0.0;
    double nonlocality_mean = 0.0;
    std::vector<double> nonlocality_per_head;
};

struct DiagnosticsReport {
    std::vector<LayerDiagnostics> layers;

    void write_csv(std::ostream& os) const;
    std::string to_json_string() const;
};

// Mean pairwise cosine over ordered pairs i != j. Throws on a zero-norm
// token, naming its index.
double cos_sim(const Matrix& tokens);

// Per-row population std of the attention weights, averaged over rows, then
// over heads.
double attn_std(std::span<const Matrix> heads);

// Frobenius-norm ratio |branch_out| / |block_in|; zero input norm throws.
double branch_ratio(const Matrix& branch_out, const Matrix& block_in);

// Attention-weighted mean grid distance from each query patch to its keys,
// in grid units. A classification token has no grid position: it is dropped
// from queries and keys and each spatial row's attention mass is
// renormalized over spatial keys.
struct NonlocalityResult {
    std::vector<double> per_head;
    double layer_mean = 0.0;
};
NonlocalityResult nonlocality(std::span<const Matrix> heads, std::size_t grid_rows,
                              std::size_t grid_cols, bool cls_present);

DiagnosticsReport diagnose(const AttentionTrace& trace);

}  // namespace knnattn::diag
