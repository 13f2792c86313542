#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "knnattn/attention.hpp"
#include "knnattn/diagnostics.hpp"
#include "knnattn/matrix.hpp"
#include "knnattn/rng.hpp"

namespace knnattn::vit {

enum class AttentionKind { dense, knn };
enum class Pooling { gap, cls };

struct ModelConfig {
    std::size_t grid_rows = 4;
    std::size_t grid_cols = 4;
    std::size_t d_m = 16;  // patch dimension == model width
    std::size_t depth = 2;
    std::size_t heads = 2;
    std::size_t head_dim = 8;
    std::size_t mlp_hidden = 32;
    AttentionKind kind = AttentionKind::dense;
    std::size_t k = 8;  // neighbors per query when kind == knn
    Pooling pooling = Pooling::gap;
    std::size_t num_classes = 4;
    double temperature = 1.0;

    std::size_t n_patches() const { return grid_rows * grid_cols; }
    std::size_t n_tokens() const { return n_patches() + (pooling == Pooling::cls ? 1 : 0); }
    void validate() const;
};

// Relevant-vs-clutter patch classification task: s patches carry the class
// signal mean, the rest are clutter noise. Norm-level convention: mean_norm,
// sigma and clutter_sigma are total-vector scales (per-coordinate std is
// scale/sqrt(d_m)).
struct SyntheticTaskConfig {
    std::size_t classes = 4;
    double mean_norm = 3.0;
    std::size_t signal_patches = 2;
    double sigma = 0.5;
    double clutter_sigma = 1.0;
    std::size_t train_per_class = 60;
    std::size_t eval_per_class = 20;

    void validate(std::size_t n_patches, std::size_t patch_dim) const;
};

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 16;
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 1;
    SyntheticTaskConfig task;

    void validate() const;
};

struct Sample {
    Matrix patches;  // n_patches x d_m
    std::size_t label = 0;
};

struct Dataset {
    std::size_t patch_count = 0;
    std::size_t patch_dim = 0;
    Matrix class_means;  // classes x d_m
    std::vector<Sample> train;
    std::vector<Sample> eval;

    std::uint64_t content_hash() const;
};

// Class-balanced by construction (round-robin over classes), deterministic
// in the seed.
Dataset generate_synthetic(const SyntheticTaskConfig& cfg, std::size_t n_patches,
                           std::size_t patch_dim, std::uint64_t seed);

struct HeadParams {
    Matrix wq, wk, wv;  // d_m x head_dim
};

struct BlockParams {
    Matrix ln1_g, ln1_b;  // 1 x d_m
    std::vector<HeadParams> heads;
    Matrix wo, bo;  // d_m x d_m, 1 x d_m
    Matrix ln2_g, ln2_b;
    Matrix w1, b1;  // d_m x mlp, 1 x mlp
    Matrix w2, b2;  // mlp x d_m, 1 x d_m
};

struct Params {
    Matrix embed_w, embed_b;  // d_m x d_m, 1 x d_m
    Matrix pos;               // n_tokens x d_m
    Matrix cls;               // 1 x d_m when pooling == cls, else empty
    std::vector<BlockParams> blocks;
    Matrix lnf_g, lnf_b;
    Matrix head_w, head_b;  // d_m x classes, 1 x classes

    static Params shaped(const ModelConfig& cfg);  // zero tensors of the right shapes

    // f(name, Matrix&) over every tensor, in a fixed order
    template <class F>
    void for_each(F&& f) {
        f("embed_w", embed_w);
        f("embed_b", embed_b);
        f("pos", pos);
        if (cls.size() > 0) f("cls", cls);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            auto& b = blocks[l];
            f(p + "ln1_g", b.ln1_g);
            f(p + "ln1_b", b.ln1_b);
            for (std::size_t h = 0; h < b.heads.size(); ++h) {
                const std::string hp = p + "head" + std::to_string(h) + ".";
                f(hp + "wq", b.heads[h].wq);
                f(hp + "wk", b.heads[h].wk);
                f(hp + "wv", b.heads[h].wv);
            }
            f(p + "wo", b.wo);
            f(p + "bo", b.bo);
            f(p + "ln2_g", b.ln2_g);
            f(p + "ln2_b", b.ln2_b);
            f(p + "w1", b.w1);
            f(p + "b1", b.b1);
            f(p + "w2", b.w2);
            f(p + "b2", b.b2);
        }
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
        f("head_w", head_w);
        f("head_b", head_b);
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<Params*>(this)->for_each(
            [&f](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
    }
};

class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), params_(Params::shaped(cfg_)) {
        cfg_.validate();
    }

    // Truncated normal init (std 0.02, cut at two sigma), zero biases, unit
    // layer-norm gains.
    static Model init(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    Params& params() { return params_; }
    const Params& params() const { return params_; }
    std::size_t parameter_count() const;

    // Logits (1 x classes) for one image; optionally records the layer trace.
    Matrix logits(const Matrix& patches, diag::AttentionTrace* trace = nullptr) const;

    // Cross-entropy loss for one sample; accumulates parameter gradients
    // scaled by grad_scale and reports whether the argmax was correct.
    double loss_and_grad(const Sample& sample, double grad_scale, Params& grads,
                         bool* correct) const;

private:
    ModelConfig cfg_;
    Params params_;
};

struct MetricsRow {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    double eval_acc = 0.0;
    double wall_ms = 0.0;
};

// header: epoch,train_loss,train_acc,eval_acc,wall_ms
void write_metrics_csv(std::span<const MetricsRow> rows, std::ostream& os);

struct AdamState {
    Params m, v;
    std::size_t step = 0;

    static AdamState shaped(const ModelConfig& cfg);
};

// Thrown when the loss stops being finite; carries the 1-based coordinates.
struct TrainAbort : std::runtime_error {
    TrainAbort(std::size_t epoch_, std::size_t batch_)
        : std::runtime_error("non-finite loss at epoch " + std::to_string(epoch_) + ", batch " +
                             std::to_string(batch_)),
          epoch(epoch_),
          batch(batch_) {}
    std::size_t epoch, batch;
};

struct TrainResult {
    std::vector<MetricsRow> history;
};

// AdamW steps over shuffled minibatches; single-threaded and deterministic
// in (config, seed). Epoch e's shuffle depends only on (seed, e), so passing
// a restored adam state and start_epoch continues an interrupted run on its
// original trajectory. eval_threads parallelizes evaluation only (counts are
// reduced in index order; results match the serial path exactly).
TrainResult train(Model& model, const TrainConfig& cfg, const Dataset& data, AdamState* adam,
                  std::size_t start_epoch = 0, std::size_t eval_threads = 1);

// Top-1 accuracy.
double evaluate(const Model& model, std::span<const Sample> samples, std::size_t threads = 1);

// Forward-pass trace of the first sample of the batch.
diag::AttentionTrace capture_trace(const Model& model, std::span<const Sample> batch);

// Smallest margin between the k-th and (k+1)-th attention score over all
// layers, heads, and rows of one forward pass; +inf for dense models. Used
// to certify tie-free points before finite-difference checks.
double min_selection_gap(const Model& model, const Matrix& patches);

}  // namespace knnattn::vit
