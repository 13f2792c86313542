// Command-line front end: verification suites, statistical experiments,
// training, diagnostics, and kernel benchmarks. All outputs are
// machine-readable; every run writes a manifest with its resolved config
// before doing any work.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "knnattn/bench.hpp"
#include "knnattn/checkpoint.hpp"
#include "knnattn/config_json.hpp"
#include "knnattn/lemma_lab.hpp"
#include "knnattn/manifest.hpp"
#include "knnattn/util.hpp"
#include "knnattn/verify.hpp"
#include "knnattn/vit.hpp"

namespace {

using nlohmann::json;
using namespace knnattn;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitInvalidInput = 2;
constexpr int kExitNumericalAbort = 3;

struct InvalidInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw InvalidInput("cannot open config file: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw InvalidInput("config parse error in " + path + ": " + e.what());
    }
    // A manifest is accepted wherever a config is: its snapshot reproduces
    // the run it describes.
    if (j.is_object() && j.contains("config_snapshot")) {
        return j.at("config_snapshot");
    }
    return j;
}

std::string resolve_out_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("KNN_ATTN_OUT")) return env;
    throw InvalidInput("no output directory: pass --out or set KNN_ATTN_OUT");
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << content;
}

RunManifest start_manifest(const std::string& subcommand, const std::string& config_path,
                           json snapshot, std::uint64_t seed, const std::string& out_dir) {
    RunManifest m;
    m.subcommand = subcommand;
    m.config_path = config_path;
    m.config_snapshot = std::move(snapshot);
    m.seed = seed;
    m.out_dir = out_dir;
    m.start_time = iso8601_now();
    m.write();
    return m;
}

void finish_manifest(RunManifest& m) {
    m.end_time = iso8601_now();
    m.write();
}

// ---------------------------------------------------------------- verify

struct VerifyArgs {
    verify::Options opt;
    bool json_output = false;
    std::string out_dir;
    bool tolerance_set = false;
    double tolerance = 0.0;
};

int run_verify(VerifyArgs& args) {
    if (args.tolerance_set) {
        args.opt.attention_grad_tol = args.tolerance;
        args.opt.model_grad_tol = args.tolerance;
    }
    std::optional<RunManifest> manifest;
    if (!args.out_dir.empty()) {
        json snapshot = {{"instances", args.opt.instances},
                         {"n", args.opt.n},
                         {"d", args.opt.d},
                         {"seed", args.opt.seed},
                         {"attention_grad_tol", args.opt.attention_grad_tol},
                         {"model_grad_tol", args.opt.model_grad_tol},
                         {"threads", args.opt.threads}};
        manifest = start_manifest("verify", "", snapshot, args.opt.seed, args.out_dir);
    }
    const auto results = verify::run_all(args.opt);
    json out = json::array();
    for (const auto& r : results) {
        out.push_back({{"check", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    }
    if (args.json_output) {
        std::cout << out.dump(2) << '\n';
    } else {
        for (const auto& r : results) {
            std::cout << (r.pass ? "PASS  " : "FAIL  ") << r.name << "  (" << r.detail << ")\n";
        }
    }
    const bool ok = verify::all_passed(results);
    if (!args.json_output) {
        std::cout << (ok ? "all checks passed" : "CHECKS FAILED") << '\n';
    }
    if (manifest) {
        write_text_file(manifest->out_dir + "/verify.json", out.dump(2) + "\n");
        finish_manifest(*manifest);
    }
    return ok ? kExitOk : kExitCheckFailed;
}

// ----------------------------------------------------------------- lemma

void write_experiment_csv(const lemma::ExperimentResult& result, const std::string& path,
                          const std::string& extra_path) {
    std::ostringstream os;
    lemma::write_sweep_csv(result.rows, os);
    write_text_file(path, os.str());
    if (!result.extra.empty() && !extra_path.empty()) {
        std::ostringstream es;
        lemma::write_sweep_csv(result.extra, es);
        write_text_file(extra_path, es.str());
    }
}

int run_lemma(int which, const std::string& config_path, const std::string& out_flag,
              std::optional<std::uint64_t> seed_override, std::size_t threads) {
    const std::string out_dir = resolve_out_dir(out_flag);
    json cfg = load_config_file(config_path);
    check_schema_version(cfg, "lemma config");
    if (seed_override) cfg["seed"] = *seed_override;

    bool pass = false;
    if (which == 1) {
        require_keys(cfg,
                     {"schema_version", "n", "d_m", "d", "k", "x_scale", "trials", "seed",
                      "fd_instances", "fd_step", "fd_tolerance", "batch", "required_fraction"},
                     "lemma 1 config");
        lemma::GradientScaleOptions opt;
        opt.n = cfg.value("n", opt.n);
        opt.d_m = cfg.value("d_m", opt.d_m);
        opt.d = cfg.value("d", opt.d);
        opt.k = cfg.value("k", opt.k);
        opt.x_scale = cfg.value("x_scale", opt.x_scale);
        opt.trials = cfg.value("trials", opt.trials);
        opt.seed = cfg.value("seed", opt.seed);
        opt.fd_instances = cfg.value("fd_instances", opt.fd_instances);
        opt.fd_step = cfg.value("fd_step", opt.fd_step);
        opt.fd_tolerance = cfg.value("fd_tolerance", opt.fd_tolerance);
        opt.batch = cfg.value("batch", opt.batch);
        opt.required_fraction = cfg.value("required_fraction", opt.required_fraction);
        opt.threads = threads;
        RunManifest manifest = start_manifest("lemma1", config_path, cfg, opt.seed, out_dir);
        const auto result = lemma::gradient_scale_experiment(opt);
        write_experiment_csv(result, out_dir + "/lemma1.csv",
                             out_dir + "/lemma1_fd_rel_error.csv");
        pass = result.pass;
        finish_manifest(manifest);
    } else if (which == 2) {
        require_keys(cfg,
                     {"schema_version", "n", "k1", "mean_norm", "noise_means", "sigma",
                      "d_m_grid", "trials_per_d", "seed", "batch", "required_fraction"},
                     "lemma 2 config");
        const auto grid = cfg.at("d_m_grid").get<std::vector<std::size_t>>();
        const std::uint64_t seed = cfg.value("seed", 23ull);
        RunManifest manifest = start_manifest("lemma2", config_path, cfg, seed, out_dir);
        const auto result = lemma::survivor_count_experiment(
            cfg.value("n", std::size_t{64}), cfg.value("k1", std::size_t{16}),
            cfg.value("mean_norm", 1.0), cfg.value("noise_means", std::size_t{4}),
            cfg.value("sigma", 2.0), grid, cfg.value("trials_per_d", std::size_t{200}), seed,
            cfg.value("batch", std::size_t{20}), cfg.value("required_fraction", 0.90),
            threads);
        write_experiment_csv(result, out_dir + "/lemma2.csv", "");
        pass = result.pass;
        finish_manifest(manifest);
    } else if (which == 3) {
        require_keys(cfg,
                     {"schema_version", "n", "d_m", "d", "k1", "mean_norm", "noise_means",
                      "sigma_grid", "k_grid", "trials", "seed", "batch", "required_fraction"},
                     "lemma 3 config");
        const auto sigma_grid = cfg.at("sigma_grid").get<std::vector<double>>();
        const auto k_grid = cfg.value("k_grid", std::vector<std::size_t>{});
        const std::uint64_t seed = cfg.value("seed", 3ull);
        RunManifest manifest = start_manifest("lemma3", config_path, cfg, seed, out_dir);
        pass = true;
        for (std::size_t si = 0; si < sigma_grid.size(); ++si) {
            const auto cluster = lemma::make_cluster_config(
                cfg.value("n", std::size_t{64}), cfg.value("d_m", std::size_t{32}),
                cfg.value("k1", std::size_t{16}), cfg.value("mean_norm", 2.0),
                cfg.value("noise_means", std::size_t{4}), sigma_grid[si],
                cfg.value("trials", std::size_t{500}), RngStream(seed).split(si).next_u64());
            const auto result = lemma::noise_distillation_experiment(
                cluster, k_grid, cfg.value("d", std::size_t{32}), {},
                cfg.value("batch", std::size_t{20}), cfg.value("required_fraction", 0.95),
                threads);
            const std::string tag = "_sigma" + std::to_string(si);
            write_experiment_csv(result, out_dir + "/lemma3" + tag + ".csv",
                                 out_dir + "/lemma3" + tag + "_rho.csv");
            pass = pass && result.pass;
        }
        finish_manifest(manifest);
    } else {
        throw InvalidInput("--which must be 1, 2, or 3");
    }
    std::cout << (pass ? "PASS" : "FAIL") << "  lemma " << which << " directional criterion\n";
    return pass ? kExitOk : kExitCheckFailed;
}

// ----------------------------------------------------------------- train

struct TrainRunConfig {
    vit::ModelConfig model;
    vit::TrainConfig train;
};

TrainRunConfig parse_train_config(const json& cfg) {
    require_keys(cfg, {"schema_version", "model", "train"}, "train config");
    check_schema_version(cfg, "train config");
    TrainRunConfig out;
    out.model = cfg.at("model").get<vit::ModelConfig>();
    out.train = cfg.at("train").get<vit::TrainConfig>();
    return out;
}

std::size_t epochs_to_threshold(const vit::TrainResult& result, double threshold) {
    for (const auto& row : result.history) {
        if (row.train_acc >= threshold) return row.epoch;
    }
    return result.history.size() + 1;  // sentinel: never reached
}

void write_metrics_file(const std::string& path, const vit::TrainResult& result) {
    std::ostringstream os;
    vit::write_metrics_csv(result.history, os);
    write_text_file(path, os.str());
}

int run_train(const std::string& config_path, const std::string& out_flag,
              std::optional<std::uint64_t> seed_override, std::size_t threads,
              const std::string& compare, const std::string& resume_path) {
    const std::string out_dir = resolve_out_dir(out_flag);
    json cfg_json = load_config_file(config_path);
    TrainRunConfig cfg = parse_train_config(cfg_json);
    if (seed_override) {
        cfg.train.seed = *seed_override;
        cfg_json["train"]["seed"] = *seed_override;
    }
    RunManifest manifest =
        start_manifest("train", config_path, cfg_json, cfg.train.seed, out_dir);

    const vit::Dataset data = vit::generate_synthetic(
        cfg.train.task, cfg.model.n_patches(), cfg.model.d_m, cfg.train.seed);

    try {
        if (!compare.empty()) {
            // paired arms sharing the dataset and the init seed
            constexpr double kThreshold = 0.9;
            std::ostringstream summary;
            summary << "arm,epochs_to_90,final_train_acc,final_eval_acc\n";
            std::string::size_type pos = 0;
            while (pos != std::string::npos) {
                const auto comma = compare.find(',', pos);
                const std::string arm = compare.substr(
                    pos, comma == std::string::npos ? std::string::npos : comma - pos);
                pos = comma == std::string::npos ? std::string::npos : comma + 1;
                if (arm.empty()) continue;
                vit::ModelConfig arm_cfg = cfg.model;
                if (arm == "dense") {
                    arm_cfg.kind = vit::AttentionKind::dense;
                } else if (arm == "knn") {
                    arm_cfg.kind = vit::AttentionKind::knn;
                } else {
                    throw InvalidInput("unknown compare arm '" + arm + "'");
                }
                vit::Model model = vit::Model::init(arm_cfg, cfg.train.seed);
                vit::AdamState adam = vit::AdamState::shaped(arm_cfg);
                const vit::TrainResult result =
                    vit::train(model, cfg.train, data, &adam, 0, threads);
                write_metrics_file(out_dir + "/metrics_" + arm + ".csv", result);
                vit::save_checkpoint(out_dir + "/checkpoint_" + arm + ".ckpt", model, &adam,
                                     cfg.train.epochs);
                summary << arm << ',' << epochs_to_threshold(result, kThreshold) << ','
                        << fmt_g17(result.history.back().train_acc) << ','
                        << fmt_g17(result.history.back().eval_acc) << '\n';
            }
            write_text_file(out_dir + "/summary.csv", summary.str());
            finish_manifest(manifest);
            return kExitOk;
        }

        vit::Model model(cfg.model);
        vit::AdamState adam = vit::AdamState::shaped(cfg.model);
        std::size_t start_epoch = 0;
        if (!resume_path.empty()) {
            vit::LoadedCheckpoint loaded = vit::load_checkpoint(resume_path);
            model = std::move(loaded.model);
            adam = std::move(loaded.adam);
            start_epoch = loaded.epochs_done;
        } else {
            model = vit::Model::init(cfg.model, cfg.train.seed);
        }
        const vit::TrainResult result =
            vit::train(model, cfg.train, data, &adam, start_epoch, threads);
        write_metrics_file(out_dir + "/metrics.csv", result);
        vit::save_checkpoint(out_dir + "/checkpoint.ckpt", model, &adam, cfg.train.epochs);
        finish_manifest(manifest);
        return kExitOk;
    } catch (const vit::TrainAbort& abort) {
        std::cerr << "numerical abort: " << abort.what() << '\n';
        return kExitNumericalAbort;
    }
}

// ------------------------------------------------------------------ eval

int run_eval(const std::string& checkpoint_path, const std::string& config_path,
             bool json_output, std::size_t threads) {
    const vit::LoadedCheckpoint loaded = vit::load_checkpoint(checkpoint_path);
    const TrainRunConfig cfg = parse_train_config(load_config_file(config_path));
    const vit::Dataset data = vit::generate_synthetic(
        cfg.train.task, loaded.model.config().n_patches(), loaded.model.config().d_m,
        cfg.train.seed);
    const double acc = vit::evaluate(loaded.model, data.eval, threads);
    if (json_output) {
        std::cout << json{{"eval_accuracy", acc}, {"samples", data.eval.size()}}.dump(2)
                  << '\n';
    } else {
        std::cout << "eval accuracy: " << fmt_g17(acc) << " (" << data.eval.size()
                  << " samples)\n";
    }
    return kExitOk;
}

// -------------------------------------------------------------- diagnose

int run_diagnose(const std::string& checkpoint_path, const std::string& config_path,
                 const std::string& out_flag) {
    const std::string out_dir = resolve_out_dir(out_flag);
    const vit::LoadedCheckpoint loaded = vit::load_checkpoint(checkpoint_path);
    json cfg_json = load_config_file(config_path);
    const TrainRunConfig cfg = parse_train_config(cfg_json);
    RunManifest manifest =
        start_manifest("diagnose", config_path, cfg_json, cfg.train.seed, out_dir);
    const vit::Dataset data = vit::generate_synthetic(
        cfg.train.task, loaded.model.config().n_patches(), loaded.model.config().d_m,
        cfg.train.seed);
    const diag::AttentionTrace trace = vit::capture_trace(loaded.model, data.eval);
    const diag::DiagnosticsReport report = diag::diagnose(trace);
    std::ostringstream os;
    report.write_csv(os);
    write_text_file(out_dir + "/report.csv", os.str());
    write_text_file(out_dir + "/report.json", report.to_json_string() + "\n");
    finish_manifest(manifest);
    std::cout << "diagnostics written to " << out_dir << "/report.{csv,json}\n";
    return kExitOk;
}

// ----------------------------------------------------------------- bench

int run_bench(const std::string& out_flag, const std::string& sizes, std::size_t reps,
              std::uint64_t seed) {
    const std::string out_dir = resolve_out_dir(out_flag);
    bench::Options opt = bench::default_options();
    opt.reps = reps;
    opt.seed = seed;
    if (!sizes.empty()) {
        opt.sizes.clear();
        std::string::size_type pos = 0;
        while (pos != std::string::npos) {
            const auto semi = sizes.find(';', pos);
            const std::string triple =
                sizes.substr(pos, semi == std::string::npos ? std::string::npos : semi - pos);
            pos = semi == std::string::npos ? std::string::npos : semi + 1;
            if (triple.empty()) continue;
            std::size_t n = 0, d = 0, k = 0;
            if (std::sscanf(triple.c_str(), "%zu,%zu,%zu", &n, &d, &k) != 3) {
                throw InvalidInput("bad --sizes entry '" + triple + "'; want n,d,k");
            }
            opt.sizes.push_back({n, d, k});
        }
    }
    json snapshot = {{"reps", opt.reps}, {"seed", opt.seed}, {"slow_factor", opt.slow_factor}};
    snapshot["sizes"] = json::array();
    for (const auto& s : opt.sizes) snapshot["sizes"].push_back({s[0], s[1], s[2]});
    RunManifest manifest = start_manifest("bench", "", snapshot, opt.seed, out_dir);
    const bench::BenchResult result = bench::run(opt);
    std::ostringstream os;
    bench::write_csv(result, os);
    write_text_file(out_dir + "/bench.csv", os.str());
    std::cout << os.str();
    std::cout << (result.ordering_pass ? "PASS" : "FAIL") << "  fast knn within "
              << fmt_g17(opt.slow_factor) << "x of slow knn\n";
    finish_manifest(manifest);
    return result.ordering_pass ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"k-NN attention numerics: verification, experiments, training, diagnostics"};
    app.require_subcommand(1);

    VerifyArgs vargs;
    auto* verify_cmd = app.add_subcommand("verify", "run the built-in check suites");
    verify_cmd->add_option("--instances", vargs.opt.instances, "instances per check");
    verify_cmd->add_option("--n", vargs.opt.n, "token count for random instances");
    verify_cmd->add_option("--d", vargs.opt.d, "head dimension for random instances");
    verify_cmd->add_option("--seed", vargs.opt.seed, "base seed");
    verify_cmd->add_option("--threads", vargs.opt.threads, "worker threads");
    verify_cmd->add_flag("--json", vargs.json_output, "machine-readable output");
    verify_cmd->add_option("--out", vargs.out_dir, "output directory (manifest + results)");
    auto* tol_opt =
        verify_cmd->add_option("--tolerance", vargs.tolerance, "gradient check tolerance");

    int which = 0;
    std::string lemma_config, lemma_out;
    std::uint64_t seed_flag = 0;
    std::size_t threads = 1;
    auto* lemma_cmd = app.add_subcommand("lemma", "run a statistical experiment");
    lemma_cmd->add_option("--which", which, "experiment id (1, 2, or 3)")->required();
    lemma_cmd->add_option("--config", lemma_config, "JSON config path")->required();
    lemma_cmd->add_option("--out", lemma_out, "output directory");
    auto* lemma_seed = lemma_cmd->add_option("--seed", seed_flag, "seed override");
    lemma_cmd->add_option("--threads", threads, "worker threads");

    std::string train_config, train_out, compare, resume_path;
    auto* train_cmd = app.add_subcommand("train", "train the toy model");
    train_cmd->add_option("--config", train_config, "JSON config path")->required();
    train_cmd->add_option("--out", train_out, "output directory");
    auto* train_seed = train_cmd->add_option("--seed", seed_flag, "seed override");
    train_cmd->add_option("--threads", threads, "evaluation threads");
    train_cmd->add_option("--compare", compare, "comma-separated arms (dense,knn)");
    train_cmd->add_option("--resume", resume_path, "checkpoint to continue from");

    std::string eval_ckpt, eval_config;
    bool eval_json = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--config", eval_config, "train config for the dataset")->required();
    eval_cmd->add_flag("--json", eval_json, "machine-readable output");
    eval_cmd->add_option("--threads", threads, "evaluation threads");

    std::string diag_ckpt, diag_config, diag_out;
    auto* diag_cmd = app.add_subcommand("diagnose", "attention metrics from a checkpoint");
    diag_cmd->add_option("--checkpoint", diag_ckpt, "checkpoint path")->required();
    diag_cmd->add_option("--config", diag_config, "train config for the dataset")->required();
    diag_cmd->add_option("--out", diag_out, "output directory");

    std::string bench_out, bench_sizes;
    std::size_t reps = 5;
    std::uint64_t bench_seed = 9;
    auto* bench_cmd = app.add_subcommand("bench", "time the attention kernels");
    bench_cmd->add_option("--out", bench_out, "output directory");
    bench_cmd->add_option("--sizes", bench_sizes, "grid as n,d,k;n,d,k;...");
    bench_cmd->add_option("--reps", reps, "repetitions per point (median)");
    bench_cmd->add_option("--seed", bench_seed, "input seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInvalidInput;
    }

    const bool seed_given = lemma_seed->count() > 0 || train_seed->count() > 0;
    vargs.tolerance_set = tol_opt->count() > 0;

    try {
        if (verify_cmd->parsed()) return run_verify(vargs);
        if (lemma_cmd->parsed()) {
            return run_lemma(
                which, lemma_config, lemma_out,
                seed_given ? std::optional<std::uint64_t>(seed_flag) : std::nullopt, threads);
        }
        if (train_cmd->parsed()) {
            return run_train(
                train_config, train_out,
                seed_given ? std::optional<std::uint64_t>(seed_flag) : std::nullopt, threads,
                compare, resume_path);
        }
        if (eval_cmd->parsed()) return run_eval(eval_ckpt, eval_config, eval_json, threads);
        if (diag_cmd->parsed()) return run_diagnose(diag_ckpt, diag_config, diag_out);
        if (bench_cmd->parsed()) return run_bench(bench_out, bench_sizes, reps, bench_seed);
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalidInput;
    } catch (const vit::CheckpointError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalidInput;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalidInput;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInvalidInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitCheckFailed;
    }
    return kExitInvalidInput;
}
