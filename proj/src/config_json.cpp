#include "knnattn/config_json.hpp"

namespace knnattn::vit {

namespace {

std::string kind_name(AttentionKind k) {
    return k == AttentionKind::dense ? "dense" : "knn";
}

AttentionKind kind_from(const std::string& s) {
    if (s == "dense") return AttentionKind::dense;
    if (s == "knn") return AttentionKind::knn;
    throw std::invalid_argument("attention kind must be 'dense' or 'knn', got '" + s + "'");
}

std::string pooling_name(Pooling p) { return p == Pooling::gap ? "gap" : "cls"; }

Pooling pooling_from(const std::string& s) {
    if (s == "gap") return Pooling::gap;
    if (s == "cls") return Pooling::cls;
    throw std::invalid_argument("pooling must be 'gap' or 'cls', got '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
    j = {{"grid_rows", cfg.grid_rows},
         {"grid_cols", cfg.grid_cols},
         {"d_m", cfg.d_m},
         {"depth", cfg.depth},
         {"heads", cfg.heads},
         {"head_dim", cfg.head_dim},
         {"mlp_hidden", cfg.mlp_hidden},
         {"kind", kind_name(cfg.kind)},
         {"k", cfg.k},
         {"pooling", pooling_name(cfg.pooling)},
         {"num_classes", cfg.num_classes},
         {"temperature", cfg.temperature}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
    require_keys(j,
                 {"grid_rows", "grid_cols", "d_m", "depth", "heads", "head_dim", "mlp_hidden",
                  "kind", "k", "pooling", "num_classes", "temperature"},
                 "model config");
    cfg = ModelConfig{};
    if (j.contains("grid_rows")) cfg.grid_rows = j.at("grid_rows").get<std::size_t>();
    if (j.contains("grid_cols")) cfg.grid_cols = j.at("grid_cols").get<std::size_t>();
    if (j.contains("d_m")) cfg.d_m = j.at("d_m").get<std::size_t>();
    if (j.contains("depth")) cfg.depth = j.at("depth").get<std::size_t>();
    if (j.contains("heads")) cfg.heads = j.at("heads").get<std::size_t>();
    if (j.contains("head_dim")) cfg.head_dim = j.at("head_dim").get<std::size_t>();
    if (j.contains("mlp_hidden")) cfg.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
    if (j.contains("kind")) cfg.kind = kind_from(j.at("kind").get<std::string>());
    if (j.contains("k")) cfg.k = j.at("k").get<std::size_t>();
    if (j.contains("pooling")) cfg.pooling = pooling_from(j.at("pooling").get<std::string>());
    if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("temperature")) cfg.temperature = j.at("temperature").get<double>();
    cfg.validate();
}

void to_json(nlohmann::json& j, const SyntheticTaskConfig& cfg) {
    j = {{"classes", cfg.classes},
         {"mean_norm", cfg.mean_norm},
         {"signal_patches", cfg.signal_patches},
         {"sigma", cfg.sigma},
         {"clutter_sigma", cfg.clutter_sigma},
         {"train_per_class", cfg.train_per_class},
         {"eval_per_class", cfg.eval_per_class}};
}

void from_json(const nlohmann::json& j, SyntheticTaskConfig& cfg) {
    require_keys(j,
                 {"classes", "mean_norm", "signal_patches", "sigma", "clutter_sigma",
                  "train_per_class", "eval_per_class"},
                 "task config");
    cfg = SyntheticTaskConfig{};
    if (j.contains("classes")) cfg.classes = j.at("classes").get<std::size_t>();
    if (j.contains("mean_norm")) cfg.mean_norm = j.at("mean_norm").get<double>();
    if (j.contains("signal_patches"))
        cfg.signal_patches = j.at("signal_patches").get<std::size_t>();
    if (j.contains("sigma")) cfg.sigma = j.at("sigma").get<double>();
    if (j.contains("clutter_sigma")) cfg.clutter_sigma = j.at("clutter_sigma").get<double>();
    if (j.contains("train_per_class"))
        cfg.train_per_class = j.at("train_per_class").get<std::size_t>();
    if (j.contains("eval_per_class"))
        cfg.eval_per_class = j.at("eval_per_class").get<std::size_t>();
}

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
    j = {{"epochs", cfg.epochs},
         {"batch_size", cfg.batch_size},
         {"lr", cfg.lr},
         {"beta1", cfg.beta1},
         {"beta2", cfg.beta2},
         {"eps", cfg.eps},
         {"weight_decay", cfg.weight_decay},
         {"seed", cfg.seed},
         {"task", cfg.task}};
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
    require_keys(j,
                 {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay",
                  "seed", "task"},
                 "train config");
    cfg = TrainConfig{};
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
    if (j.contains("beta1")) cfg.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) cfg.beta2 = j.at("beta2").get<double>();
    if (j.contains("eps")) cfg.eps = j.at("eps").get<double>();
    if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("task")) cfg.task = j.at("task").get<SyntheticTaskConfig>();
    cfg.validate();
}

}  // namespace knnattn::vit
