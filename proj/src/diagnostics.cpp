#include "knnattn/diagnostics.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "knnattn/kernels.hpp"
#include "knnattn/numerics.hpp"
#include "knnattn/util.hpp"

namespace knnattn::diag {

void AttentionTrace::validate() const {
    const std::size_t expected = grid_rows * grid_cols + (cls_present ? 1 : 0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& layer = layers[l];
        if (layer.tokens.rows() != expected) {
            throw std::invalid_argument("layer " + std::to_string(l) + " has " +
                                        std::to_string(layer.tokens.rows()) +
                                        " tokens; grid implies " + std::to_string(expected));
        }
        for (const Matrix& a : layer.attn) {
            if (a.rows() != expected || a.cols() != expected) {
                throw std::invalid_argument("attention matrix shape " + a.shape_str() +
                                            " in layer " + std::to_string(l));
            }
            for (std::size_t i = 0; i < a.rows(); ++i) {
                const double s = kernels::ops().sum(a.cols(), a.row_ptr(i));
                if (std::fabs(s - 1.0) > 1e-10) {
                    throw std::invalid_argument("attention row " + std::to_string(i) +
                                                " of layer " + std::to_string(l) +
                                                " sums to " + fmt_g17(s));
                }
            }
        }
    }
}

double cos_sim(const Matrix& tokens) {
    const std::size_t n = tokens.rows();
    if (n < 2) throw std::invalid_argument("cos_sim needs at least 2 tokens");
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = row_norm(tokens, i);
        if (norms[i] == 0.0) {
            throw std::domain_error("zero-norm token at index " + std::to_string(i));
        }
    }
    const auto& ops = kernels::ops();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            acc += ops.dot(tokens.cols(), tokens.row_ptr(i), tokens.row_ptr(j)) /
                   (norms[i] * norms[j]);
        }
    }
    return acc / static_cast<double>(n * (n - 1));
}

double attn_std(std::span<const Matrix> heads) {
    if (heads.empty()) return 0.0;
    double head_acc = 0.0;
    for (const Matrix& a : heads) {
        double row_acc = 0.0;
        for (std::size_t i = 0; i < a.rows(); ++i) {
            row_acc += stddev_population(a.row(i));
        }
        head_acc += row_acc / static_cast<double>(a.rows());
    }
    return head_acc / static_cast<double>(heads.size());
}

double branch_ratio(const Matrix& branch_out, const Matrix& block_in) {
    const double denom = frobenius_norm(block_in);
    if (denom == 0.0) throw std::domain_error("branch_ratio: zero input norm");
    return frobenius_norm(branch_out) / denom;
}

NonlocalityResult nonlocality(std::span<const Matrix> heads, std::size_t grid_rows,
                              std::size_t grid_cols, bool cls_present) {
    const std::size_t spatial = grid_rows * grid_cols;
    const std::size_t offset = cls_present ? 1 : 0;
    if (!heads.empty() && heads.front().rows() != spatial + offset) {
        throw std::invalid_argument("grid " + std::to_string(grid_rows) + "x" +
                                    std::to_string(grid_cols) + (cls_present ? "+cls" : "") +
                                    " inconsistent with n=" + std::to_string(heads.front().rows()));
    }

    NonlocalityResult result;
    result.per_head.reserve(heads.size());
    for (const Matrix& a : heads) {
        double query_acc = 0.0;
        for (std::size_t i = 0; i < spatial; ++i) {
            const double ri = static_cast<double>(i / grid_cols);
            const double ci = static_cast<double>(i % grid_cols);
            double mass = 0.0;
            if (cls_present) {
                for (std::size_t j = 0; j < spatial; ++j) mass += a(i + offset, j + offset);
            } else {
                mass = 1.0;
            }
            if (mass <= 0.0) continue;  // row attends only to the cls token
            double dist_acc = 0.0;
            for (std::size_t j = 0; j < spatial; ++j) {
                const double rj = static_cast<double>(j / grid_cols);
                const double cj = static_cast<double>(j % grid_cols);
                const double dr = ri - rj;
                const double dc = ci - cj;
                dist_acc += a(i + offset, j + offset) * std::sqrt(dr * dr + dc * dc);
            }
            query_acc += dist_acc / mass;
        }
        result.per_head.push_back(query_acc / static_cast<double>(spatial));
    }
    result.layer_mean =
        result.per_head.empty() ? 0.0 : mean({result.per_head.data(), result.per_head.size()});
    return result;
}

DiagnosticsReport diagnose(const AttentionTrace& trace) {
    trace.validate();
    DiagnosticsReport report;
    report.layers.reserve(trace.layers.size());
    for (const auto& layer : trace.layers) {
        LayerDiagnostics d;
        d.cos_sim = cos_sim(layer.tokens);
        d.attn_std = attn_std(layer.attn);
        d.attn_ratio = branch_ratio(layer.attn_branch, layer.tokens);
        d.ffn_ratio = branch_ratio(layer.ffn_branch, layer.tokens);
        auto nl = nonlocality(layer.attn, trace.grid_rows, trace.grid_cols, trace.cls_present);
        d.nonlocality_mean = nl.layer_mean;
        d.nonlocality_per_head = std::move(nl.per_head);
        report.layers.push_back(std::move(d));
    }
    return report;
}

void DiagnosticsReport::write_csv(std::ostream& os) const {
    os << "# attn_std uses the population denominator (n)\n";
    os << "layer,cos_sim,attn_std,attn_ratio,ffn_ratio,nonlocality_mean,nonlocality_per_head\n";
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& d = layers[l];
        os << l << ',' << fmt_g17(d.cos_sim) << ',' << fmt_g17(d.attn_std) << ','
           << fmt_g17(d.attn_ratio) << ',' << fmt_g17(d.ffn_ratio) << ','
           << fmt_g17(d.nonlocality_mean) << ',';
        for (std::size_t h = 0; h < d.nonlocality_per_head.size(); ++h) {
            if (h) os << ';';
            os << fmt_g17(d.nonlocality_per_head[h]);
        }
        os << '\n';
    }
}

std::string DiagnosticsReport::to_json_string() const {
    nlohmann::json j;
    j["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& d = layers[l];
        j["layers"].push_back({{"layer", l},
                               {"cos_sim", d.cos_sim},
                               {"attn_std", d.attn_std},
                               {"attn_ratio", d.attn_ratio},
                               {"ffn_ratio", d.ffn_ratio},
                               {"nonlocality_mean", d.nonlocality_mean},
                               {"nonlocality_per_head", d.nonlocality_per_head}});
    }
    return j.dump(2);
}

}  // namespace knnattn::diag
