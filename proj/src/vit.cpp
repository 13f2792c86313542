#include "knnattn/vit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include "knnattn/kernels.hpp"
#include "knnattn/numerics.hpp"
#include "knnattn/util.hpp"

namespace knnattn::vit {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double gelu(double x) { return 0.5 * x * std::erfc(-x * M_SQRT1_2); }

double gelu_grad(double x) {
    return 0.5 * std::erfc(-x * M_SQRT1_2) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void add_row_bias(Matrix& m, const Matrix& bias) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        kernels::ops().add(m.cols(), bias.data(), m.row_ptr(i));
    }
}

void accumulate_col_sums(const Matrix& m, Matrix& out) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        kernels::ops().add(m.cols(), m.row_ptr(i), out.data());
    }
}

// grad_out += a^T b, accumulated row by row
void accumulate_outer(const Matrix& a, const Matrix& b, Matrix& grad_out) {
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t r = 0; r < a.cols(); ++r) {
            kernels::ops().axpy(b.cols(), a(i, r), b.row_ptr(i), grad_out.row_ptr(r));
        }
    }
}

// y = (x - mu)/sqrt(var + eps) * g + b per row; population variance.
Matrix layer_norm_forward(const Matrix& x, const Matrix& g, const Matrix& b, Matrix* x_hat,
                          std::vector<double>* inv_std) {
    const std::size_t d = x.cols();
    Matrix y(x.rows(), d);
    *x_hat = Matrix(x.rows(), d);
    inv_std->assign(x.rows(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.row_ptr(i);
        const double mu = kernels::ops().sum(d, xi) / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t c = 0; c < d; ++c) var += (xi[c] - mu) * (xi[c] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + kLnEps);
        (*inv_std)[i] = is;
        for (std::size_t c = 0; c < d; ++c) {
            const double xh = (xi[c] - mu) * is;
            (*x_hat)(i, c) = xh;
            y(i, c) = xh * g(0, c) + b(0, c);
        }
    }
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& x_hat,
                           const std::vector<double>& inv_std, const Matrix& g, Matrix& dg,
                           Matrix& db) {
    const std::size_t d = dy.cols();
    Matrix dx(dy.rows(), d);
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double dyc = dy(i, c);
            dg(0, c) += dyc * x_hat(i, c);
            db(0, c) += dyc;
            const double dxh = dyc * g(0, c);
            mean_dxh += dxh;
            mean_dxh_xh += dxh * x_hat(i, c);
        }
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
            const double dxh = dy(i, c) * g(0, c);
            dx(i, c) = inv_std[i] * (dxh - mean_dxh - x_hat(i, c) * mean_dxh_xh);
        }
    }
    return dx;
}

struct BlockCache {
    Matrix t_in;
    Matrix x_hat1;
    std::vector<double> inv_std1;
    Matrix y1;
    std::vector<Matrix> q, k, v;
    std::vector<TopKMask> masks;  // knn only
    std::vector<Matrix> attn;
    Matrix concat;
    Matrix attn_out;
    Matrix t_mid;
    Matrix x_hat2;
    std::vector<double> inv_std2;
    Matrix y2;
    Matrix h1;
    Matrix act;
    Matrix ffn_out;
};

struct ForwardCache {
    Matrix patches;
    std::vector<BlockCache> blocks;
    Matrix t_last;
    Matrix x_hatf;
    std::vector<double> inv_stdf;
    Matrix t_norm;
    Matrix pooled;
    Matrix logits;
};

bool is_bias_tensor(const std::string& name) {
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0) return true;
    const auto dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    return leaf == "bo" || leaf == "b1" || leaf == "b2";
}

bool is_gain_tensor(const std::string& name) {
    return name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0;
}

ForwardCache run_forward(const ModelConfig& cfg, const Params& p, const Matrix& patches,
                         diag::AttentionTrace* trace) {
    if (patches.rows() != cfg.n_patches() || patches.cols() != cfg.d_m) {
        throw std::invalid_argument("patch matrix " + patches.shape_str() +
                                    " does not match the model (" +
                                    std::to_string(cfg.n_patches()) + "x" +
                                    std::to_string(cfg.d_m) + ")");
    }
    const std::size_t n = cfg.n_tokens();
    const std::size_t dh = cfg.head_dim;
    const std::size_t off = cfg.pooling == Pooling::cls ? 1 : 0;

    ForwardCache fc;
    fc.patches = patches;
    Matrix emb = matmul(patches, p.embed_w);
    add_row_bias(emb, p.embed_b);
    Matrix tokens(n, cfg.d_m);
    if (off == 1) {
        for (std::size_t c = 0; c < cfg.d_m; ++c) tokens(0, c) = p.cls(0, c);
    }
    for (std::size_t i = 0; i < cfg.n_patches(); ++i)
        for (std::size_t c = 0; c < cfg.d_m; ++c) tokens(i + off, c) = emb(i, c);
    kernels::ops().add(tokens.size(), p.pos.data(), tokens.data());

    fc.blocks.resize(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        BlockCache& bc = fc.blocks[l];
        const BlockParams& bp = p.blocks[l];
        bc.t_in = tokens;
        bc.y1 = layer_norm_forward(bc.t_in, bp.ln1_g, bp.ln1_b, &bc.x_hat1, &bc.inv_std1);

        bc.concat = Matrix(n, cfg.d_m);
        bc.q.resize(cfg.heads);
        bc.k.resize(cfg.heads);
        bc.v.resize(cfg.heads);
        bc.attn.resize(cfg.heads);
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            bc.q[h] = matmul(bc.y1, bp.heads[h].wq);
            bc.k[h] = matmul(bc.y1, bp.heads[h].wk);
            bc.v[h] = matmul(bc.y1, bp.heads[h].wv);
            Matrix vhat;
            if (cfg.kind == AttentionKind::knn) {
                auto res = knn_attention_fast(bc.q[h], bc.k[h], bc.v[h], cfg.k,
                                              cfg.temperature);
                bc.attn[h] = std::move(res.attn);
                bc.masks.push_back(std::move(res.mask));
                vhat = std::move(res.vhat);
            } else {
                auto res = dense_attention(bc.q[h], bc.k[h], bc.v[h], cfg.temperature);
                bc.attn[h] = std::move(res.attn);
                vhat = std::move(res.vhat);
            }
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) bc.concat(i, h * dh + c) = vhat(i, c);
        }
        bc.attn_out = matmul(bc.concat, bp.wo);
        add_row_bias(bc.attn_out, bp.bo);

        bc.t_mid = bc.t_in;
        kernels::ops().add(bc.t_mid.size(), bc.attn_out.data(), bc.t_mid.data());

        bc.y2 = layer_norm_forward(bc.t_mid, bp.ln2_g, bp.ln2_b, &bc.x_hat2, &bc.inv_std2);
        bc.h1 = matmul(bc.y2, bp.w1);
        add_row_bias(bc.h1, bp.b1);
        bc.act = Matrix(n, cfg.mlp_hidden);
        for (std::size_t i = 0; i < bc.h1.size(); ++i) bc.act.data()[i] = gelu(bc.h1.data()[i]);
        bc.ffn_out = matmul(bc.act, bp.w2);
        add_row_bias(bc.ffn_out, bp.b2);

        tokens = bc.t_mid;
        kernels::ops().add(tokens.size(), bc.ffn_out.data(), tokens.data());

        if (trace != nullptr) {
            diag::LayerTrace lt;
            lt.tokens = bc.t_in;
            lt.attn = bc.attn;
            lt.attn_branch = bc.attn_out;
            lt.ffn_branch = bc.ffn_out;
            trace->layers.push_back(std::move(lt));
        }
    }

    fc.t_last = tokens;
    fc.t_norm = layer_norm_forward(fc.t_last, p.lnf_g, p.lnf_b, &fc.x_hatf, &fc.inv_stdf);

    fc.pooled = Matrix(1, cfg.d_m);
    if (cfg.pooling == Pooling::cls) {
        for (std::size_t c = 0; c < cfg.d_m; ++c) fc.pooled(0, c) = fc.t_norm(0, c);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            kernels::ops().axpy(cfg.d_m, 1.0 / static_cast<double>(n), fc.t_norm.row_ptr(i),
                                fc.pooled.data());
        }
    }
    fc.logits = matmul(fc.pooled, p.head_w);
    add_row_bias(fc.logits, p.head_b);

    if (trace != nullptr) {
        trace->grid_rows = cfg.grid_rows;
        trace->grid_cols = cfg.grid_cols;
        trace->cls_present = cfg.pooling == Pooling::cls;
    }
    return fc;
}

}  // namespace

void ModelConfig::validate() const {
    if (grid_rows == 0 || grid_cols == 0) throw std::invalid_argument("empty patch grid");
    if (d_m != heads * head_dim) {
        throw std::invalid_argument("d_m (" + std::to_string(d_m) + ") != heads*head_dim (" +
                                    std::to_string(heads) + "*" + std::to_string(head_dim) +
                                    ")");
    }
    if (depth == 0 || mlp_hidden == 0) throw std::invalid_argument("empty model");
    if (num_classes < 2) throw std::invalid_argument("need at least two classes");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (kind == AttentionKind::knn && (k < 1 || k > n_tokens())) {
        throw std::out_of_range("k out of range: k=" + std::to_string(k) +
                                ", n=" + std::to_string(n_tokens()));
    }
}

void SyntheticTaskConfig::validate(std::size_t n_patches, std::size_t patch_dim) const {
    if (classes < 2) throw std::invalid_argument("need at least two classes");
    if (classes > patch_dim) {
        throw std::invalid_argument(
            "more classes than patch dimensions; class means cannot be orthogonal");
    }
    if (signal_patches < 1 || signal_patches >= n_patches) {
        throw std::invalid_argument("signal_patches must be in [1, n_patches)");
    }
    if (!(mean_norm > 0.0)) throw std::invalid_argument("mean_norm must be positive");
    if (sigma < 0.0 || clutter_sigma < 0.0) throw std::invalid_argument("negative noise scale");
    if (train_per_class == 0 || eval_per_class == 0) throw std::invalid_argument("empty split");
}

void TrainConfig::validate() const {
    if (epochs == 0 || batch_size == 0) throw std::invalid_argument("empty training run");
    if (!(lr >= 0.0) || !(eps > 0.0)) throw std::invalid_argument("bad optimizer constants");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("betas must lie in [0,1)");
    }
    if (weight_decay < 0.0) throw std::invalid_argument("negative weight decay");
}

std::uint64_t Dataset::content_hash() const {
    std::uint64_t h = fnv1a(&patch_count, sizeof(patch_count));
    h = fnv1a(&patch_dim, sizeof(patch_dim), h);
    for (const auto* split : {&train, &eval}) {
        for (const Sample& s : *split) {
            h = fnv1a(s.patches.data(), s.patches.size() * sizeof(double), h);
            h = fnv1a(&s.label, sizeof(s.label), h);
        }
        const char sep = '|';
        h = fnv1a(&sep, 1, h);
    }
    return h;
}

Dataset generate_synthetic(const SyntheticTaskConfig& cfg, std::size_t n_patches,
                           std::size_t patch_dim, std::uint64_t seed) {
    cfg.validate(n_patches, patch_dim);
    Dataset ds;
    ds.patch_count = n_patches;
    ds.patch_dim = patch_dim;

    // Orthogonal class directions scaled to mean_norm (Gram-Schmidt).
    RngStream mean_rng = RngStream(seed).split(1);
    ds.class_means = Matrix(cfg.classes, patch_dim);
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        for (int attempt = 0; attempt < 100; ++attempt) {
            for (std::size_t j = 0; j < patch_dim; ++j) {
                ds.class_means(c, j) = mean_rng.next_normal();
            }
            for (std::size_t prev = 0; prev < c; ++prev) {
                const double dot = kernels::ops().dot(patch_dim, ds.class_means.row_ptr(c),
                                                      ds.class_means.row_ptr(prev));
                const double prev_sq =
                    kernels::ops().sum_sq(patch_dim, ds.class_means.row_ptr(prev));
                kernels::ops().axpy(patch_dim, -dot / prev_sq, ds.class_means.row_ptr(prev),
                                    ds.class_means.row_ptr(c));
            }
            const double norm =
                std::sqrt(kernels::ops().sum_sq(patch_dim, ds.class_means.row_ptr(c)));
            if (norm > 1e-8) {
                kernels::ops().scale(patch_dim, cfg.mean_norm / norm,
                                     ds.class_means.row_ptr(c));
                break;
            }
        }
    }

    const double signal_scale = cfg.sigma / std::sqrt(static_cast<double>(patch_dim));
    const double clutter_scale = cfg.clutter_sigma / std::sqrt(static_cast<double>(patch_dim));

    auto build_split = [&](RngStream rng, std::size_t per_class, std::vector<Sample>& out) {
        out.reserve(per_class * cfg.classes);
        std::vector<std::size_t> positions(n_patches);
        for (std::size_t rep = 0; rep < per_class; ++rep) {
            for (std::size_t c = 0; c < cfg.classes; ++c) {
                Sample s;
                s.label = c;
                s.patches = Matrix(n_patches, patch_dim);
                for (std::size_t i = 0; i < n_patches; ++i) {
                    for (std::size_t j = 0; j < patch_dim; ++j) {
                        s.patches(i, j) = clutter_scale * rng.next_normal();
                    }
                }
                std::iota(positions.begin(), positions.end(), std::size_t{0});
                for (std::size_t t = 0; t < cfg.signal_patches; ++t) {
                    const std::size_t j = t + rng.next_below(n_patches - t);
                    std::swap(positions[t], positions[j]);
                }
                for (std::size_t t = 0; t < cfg.signal_patches; ++t) {
                    double* row = s.patches.row_ptr(positions[t]);
                    for (std::size_t j = 0; j < patch_dim; ++j) {
                        row[j] = ds.class_means(c, j) + signal_scale * rng.next_normal();
                    }
                }
                out.push_back(std::move(s));
            }
        }
    };
    build_split(RngStream(seed).split(2), cfg.train_per_class, ds.train);
    build_split(RngStream(seed).split(3), cfg.eval_per_class, ds.eval);
    return ds;
}

Params Params::shaped(const ModelConfig& cfg) {
    Params p;
    p.embed_w = Matrix(cfg.d_m, cfg.d_m);
    p.embed_b = Matrix(1, cfg.d_m);
    p.pos = Matrix(cfg.n_tokens(), cfg.d_m);
    if (cfg.pooling == Pooling::cls) p.cls = Matrix(1, cfg.d_m);
    p.blocks.resize(cfg.depth);
    for (auto& b : p.blocks) {
        b.ln1_g = Matrix(1, cfg.d_m);
        b.ln1_b = Matrix(1, cfg.d_m);
        b.heads.resize(cfg.heads);
        for (auto& h : b.heads) {
            h.wq = Matrix(cfg.d_m, cfg.head_dim);
            h.wk = Matrix(cfg.d_m, cfg.head_dim);
            h.wv = Matrix(cfg.d_m, cfg.head_dim);
        }
        b.wo = Matrix(cfg.d_m, cfg.d_m);
        b.bo = Matrix(1, cfg.d_m);
        b.ln2_g = Matrix(1, cfg.d_m);
        b.ln2_b = Matrix(1, cfg.d_m);
        b.w1 = Matrix(cfg.d_m, cfg.mlp_hidden);
        b.b1 = Matrix(1, cfg.mlp_hidden);
        b.w2 = Matrix(cfg.mlp_hidden, cfg.d_m);
        b.b2 = Matrix(1, cfg.d_m);
    }
    p.lnf_g = Matrix(1, cfg.d_m);
    p.lnf_b = Matrix(1, cfg.d_m);
    p.head_w = Matrix(cfg.d_m, cfg.num_classes);
    p.head_b = Matrix(1, cfg.num_classes);
    return p;
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
    Model model(cfg);
    RngStream rng = RngStream(seed).split(0x1417);
    auto trunc_normal = [&rng]() {
        double z;
        do {
            z = rng.next_normal();
        } while (std::fabs(z) > 2.0);
        return 0.02 * z;
    };
    model.params_.for_each([&](const std::string& name, Matrix& m) {
        if (is_gain_tensor(name)) {
            std::fill(m.data(), m.data() + m.size(), 1.0);
        } else if (is_bias_tensor(name)) {
            std::fill(m.data(), m.data() + m.size(), 0.0);
        } else {
            for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = trunc_normal();
        }
    });
    return model;
}

std::size_t Model::parameter_count() const {
    std::size_t total = 0;
    params_.for_each([&](const std::string&, const Matrix& m) { total += m.size(); });
    return total;
}

Matrix Model::logits(const Matrix& patches, diag::AttentionTrace* trace) const {
    return run_forward(cfg_, params_, patches, trace).logits;
}

double Model::loss_and_grad(const Sample& sample, double grad_scale, Params& grads,
                            bool* correct) const {
    const ForwardCache fc = run_forward(cfg_, params_, sample.patches, nullptr);
    const std::size_t classes = cfg_.num_classes;
    const std::size_t n = cfg_.n_tokens();
    const std::size_t dh = cfg_.head_dim;

    const double* lg = fc.logits.data();
    double mx = lg[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, lg[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(lg[c] - mx);
    const double lse = mx + std::log(total);
    const double loss = lse - lg[sample.label];
    if (correct != nullptr) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (lg[c] > lg[best]) best = c;
        *correct = best == sample.label;
    }

    Matrix dlogits(1, classes);
    for (std::size_t c = 0; c < classes; ++c) {
        dlogits(0, c) = (std::exp(lg[c] - lse) - (c == sample.label ? 1.0 : 0.0)) * grad_scale;
    }

    accumulate_outer(fc.pooled, dlogits, grads.head_w);
    kernels::ops().add(classes, dlogits.data(), grads.head_b.data());
    const Matrix dpooled = matmul_nt(dlogits, params_.head_w);  // 1 x d_m

    Matrix dt_norm(n, cfg_.d_m);
    if (cfg_.pooling == Pooling::cls) {
        for (std::size_t c = 0; c < cfg_.d_m; ++c) dt_norm(0, c) = dpooled(0, c);
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            kernels::ops().axpy(cfg_.d_m, 1.0 / static_cast<double>(n), dpooled.data(),
                                dt_norm.row_ptr(i));
        }
    }
    Matrix dtokens = layer_norm_backward(dt_norm, fc.x_hatf, fc.inv_stdf, params_.lnf_g,
                                         grads.lnf_g, grads.lnf_b);

    for (std::size_t l = cfg_.depth; l-- > 0;) {
        const BlockCache& bc = fc.blocks[l];
        const BlockParams& bp = params_.blocks[l];
        BlockParams& bg = grads.blocks[l];

        // t_out = t_mid + ffn(LN2(t_mid))
        const Matrix& dffn_out = dtokens;
        accumulate_outer(bc.act, dffn_out, bg.w2);
        accumulate_col_sums(dffn_out, bg.b2);
        Matrix dh1 = matmul_nt(dffn_out, bp.w2);
        for (std::size_t i = 0; i < dh1.size(); ++i) {
            dh1.data()[i] *= gelu_grad(bc.h1.data()[i]);
        }
        accumulate_outer(bc.y2, dh1, bg.w1);
        accumulate_col_sums(dh1, bg.b1);
        const Matrix dy2 = matmul_nt(dh1, bp.w1);
        Matrix dt_mid = layer_norm_backward(dy2, bc.x_hat2, bc.inv_std2, bp.ln2_g, bg.ln2_g,
                                            bg.ln2_b);
        kernels::ops().add(dt_mid.size(), dtokens.data(), dt_mid.data());

        // t_mid = t_in + wo(concat of heads(LN1(t_in)))
        const Matrix& dattn_out = dt_mid;
        accumulate_outer(bc.concat, dattn_out, bg.wo);
        accumulate_col_sums(dattn_out, bg.bo);
        const Matrix dconcat = matmul_nt(dattn_out, bp.wo);

        Matrix dy1(n, cfg_.d_m);
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            Matrix dvhat(n, dh);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < dh; ++c) dvhat(i, c) = dconcat(i, h * dh + c);
            const TopKMask* mask = cfg_.kind == AttentionKind::knn ? &bc.masks[h] : nullptr;
            const AttentionGrads ag =
                attention_backward(bc.q[h], bc.k[h], bc.v[h], mask, dvhat, cfg_.temperature);
            HeadParams& hg = bg.heads[h];
            accumulate_outer(bc.y1, ag.dq, hg.wq);
            accumulate_outer(bc.y1, ag.dk, hg.wk);
            accumulate_outer(bc.y1, ag.dv, hg.wv);
            const Matrix dyq = matmul_nt(ag.dq, bp.heads[h].wq);
            const Matrix dyk = matmul_nt(ag.dk, bp.heads[h].wk);
            const Matrix dyv = matmul_nt(ag.dv, bp.heads[h].wv);
            kernels::ops().add(dy1.size(), dyq.data(), dy1.data());
            kernels::ops().add(dy1.size(), dyk.data(), dy1.data());
            kernels::ops().add(dy1.size(), dyv.data(), dy1.data());
        }
        Matrix dt_in = layer_norm_backward(dy1, bc.x_hat1, bc.inv_std1, bp.ln1_g, bg.ln1_g,
                                           bg.ln1_b);
        kernels::ops().add(dt_in.size(), dt_mid.data(), dt_in.data());
        dtokens = std::move(dt_in);
    }

    // tokens0 = [cls; patches embed_w + embed_b] + pos
    kernels::ops().add(dtokens.size(), dtokens.data(), grads.pos.data());
    const std::size_t off = cfg_.pooling == Pooling::cls ? 1 : 0;
    if (off == 1) {
        kernels::ops().add(cfg_.d_m, dtokens.row_ptr(0), grads.cls.data());
    }
    for (std::size_t i = 0; i < cfg_.n_patches(); ++i) {
        const double* drow = dtokens.row_ptr(i + off);
        for (std::size_t r = 0; r < cfg_.d_m; ++r) {
            kernels::ops().axpy(cfg_.d_m, fc.patches(i, r), drow, grads.embed_w.row_ptr(r));
        }
        kernels::ops().add(cfg_.d_m, drow, grads.embed_b.data());
    }
    return loss;
}

void write_metrics_csv(std::span<const MetricsRow> rows, std::ostream& os) {
    os << "epoch,train_loss,train_acc,eval_acc,wall_ms\n";
    for (const auto& r : rows) {
        os << r.epoch << ',' << fmt_g17(r.train_loss) << ',' << fmt_g17(r.train_acc) << ','
           << fmt_g17(r.eval_acc) << ',' << fmt_g17(r.wall_ms) << '\n';
    }
}

AdamState AdamState::shaped(const ModelConfig& cfg) {
    return {Params::shaped(cfg), Params::shaped(cfg), 0};
}

TrainResult train(Model& model, const TrainConfig& cfg, const Dataset& data, AdamState* adam,
                  std::size_t start_epoch, std::size_t eval_threads) {
    cfg.validate();
    if (adam == nullptr) throw std::invalid_argument("train needs an optimizer state");
    if (data.train.empty()) throw std::invalid_argument("empty training split");

    Params grads = Params::shaped(model.config());
    std::vector<Matrix*> ps, gs, ms, vs;
    model.params().for_each([&](const std::string&, Matrix& m) { ps.push_back(&m); });
    grads.for_each([&](const std::string&, Matrix& m) { gs.push_back(&m); });
    adam->m.for_each([&](const std::string&, Matrix& m) { ms.push_back(&m); });
    adam->v.for_each([&](const std::string&, Matrix& m) { vs.push_back(&m); });

    const std::size_t n_train = data.train.size();
    std::vector<std::size_t> order(n_train);

    TrainResult result;
    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // The permutation depends only on (seed, epoch) so a resumed run
        // replays the original trajectory.
        RngStream shuffle_rng = RngStream(cfg.seed).split(0x5E0000 + epoch);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = n_train; i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
        }

        double epoch_loss = 0.0;
        std::size_t epoch_correct = 0;
        std::size_t batch_index = 0;
        for (std::size_t begin = 0; begin < n_train; begin += cfg.batch_size, ++batch_index) {
            const std::size_t end = std::min(begin + cfg.batch_size, n_train);
            const double inv_batch = 1.0 / static_cast<double>(end - begin);
            for (Matrix* g : gs) std::fill(g->data(), g->data() + g->size(), 0.0);

            double batch_loss = 0.0;
            for (std::size_t s = begin; s < end; ++s) {
                bool correct = false;
                batch_loss +=
                    model.loss_and_grad(data.train[order[s]], inv_batch, grads, &correct);
                epoch_correct += correct ? 1 : 0;
            }
            if (!std::isfinite(batch_loss)) throw TrainAbort(epoch + 1, batch_index + 1);
            epoch_loss += batch_loss;

            adam->step += 1;
            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam->step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam->step));
            for (std::size_t t = 0; t < ps.size(); ++t) {
                double* p = ps[t]->data();
                const double* g = gs[t]->data();
                double* m = ms[t]->data();
                double* v = vs[t]->data();
                for (std::size_t i = 0; i < ps[t]->size(); ++i) {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    const double mh = m[i] / bc1;
                    const double vh = v[i] / bc2;
                    p[i] -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p[i]);
                }
            }
        }

        MetricsRow row;
        row.epoch = epoch + 1;
        row.train_loss = epoch_loss / static_cast<double>(n_train);
        row.train_acc = static_cast<double>(epoch_correct) / static_cast<double>(n_train);
        row.eval_acc = evaluate(model, data.eval, eval_threads);
        row.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        result.history.push_back(row);
    }
    return result;
}

double evaluate(const Model& model, std::span<const Sample> samples, std::size_t threads) {
    if (samples.empty()) return 0.0;
    std::vector<std::uint8_t> correct(samples.size(), 0);
    parallel_for(samples.size(), threads, [&](std::size_t i) {
        const Matrix lg = model.logits(samples[i].patches);
        std::size_t best = 0;
        for (std::size_t c = 1; c < lg.cols(); ++c)
            if (lg(0, c) > lg(0, best)) best = c;
        correct[i] = best == samples[i].label ? 1 : 0;
    });
    std::size_t total = 0;
    for (std::uint8_t c : correct) total += c;
    return static_cast<double>(total) / static_cast<double>(samples.size());
}

diag::AttentionTrace capture_trace(const Model& model, std::span<const Sample> batch) {
    if (batch.empty()) throw std::invalid_argument("capture_trace: empty batch");
    diag::AttentionTrace trace;
    model.logits(batch.front().patches, &trace);
    return trace;
}

double min_selection_gap(const Model& model, const Matrix& patches) {
    const ModelConfig& cfg = model.config();
    if (cfg.kind == AttentionKind::dense) return std::numeric_limits<double>::infinity();
    const ForwardCache fc = run_forward(cfg, model.params(), patches, nullptr);
    const std::size_t n = cfg.n_tokens();
    double gap = std::numeric_limits<double>::infinity();
    if (cfg.k >= n) return gap;
    std::vector<double> row(n);
    for (const BlockCache& bc : fc.blocks) {
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const Matrix scores = scaled_scores(bc.q[h], bc.k[h], cfg.temperature);
            for (std::size_t i = 0; i < n; ++i) {
                row.assign(scores.row_ptr(i), scores.row_ptr(i) + n);
                std::partial_sort(row.begin(), row.begin() + cfg.k + 1, row.end(),
                                  std::greater<>());
                gap = std::min(gap, row[cfg.k - 1] - row[cfg.k]);
            }
        }
    }
    return gap;
}

}  // namespace knnattn::vit
