// slimmat: desk-scale channel pruning for alpha-matting networks, guided by
// knowledge distillation.
//
// Subcommands: gen-data, train-teacher, prune, train, eval, report.
// Exit codes: 0 ok, 2 invalid flags/config, 3 refused overwrite,
// 4 missing input artifact, 1 other failure.

#include <CLI11.hpp>
#include <iostream>

#include "slimmat/pipeline.hpp"

using namespace slimmat;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRefused = 3;
constexpr int kExitMissing = 4;

RunConfig load_run_config(const std::string& path) {
    if (!fs::exists(path)) throw MissingArtifact(path);
    std::ifstream is(path);
    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return run_config_from_json(doc);
}

std::pair<fs::path, std::string> resolve_split(const fs::path& data) {
    if (fs::exists(data / "manifest.csv")) return {data, "test"};
    const fs::path parent = data.parent_path();
    if (fs::exists(parent / "manifest.csv")) return {parent, data.filename().string()};
    throw MissingArtifact(data / "manifest.csv");
}

void print_metric_row(const MetricRow& m) {
    std::cout << "mse,sad,grad,conn,params,flops\n";
    std::cout << m.mse << "," << m.sad << "," << m.grad << "," << m.conn << "," << m.params << ","
              << m.flops << "\n";
}

int dispatch(int argc, char** argv) {
    CLI::App app{"slimmat: distillation-guided channel pruning for alpha matting"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic matting dataset");
    std::string gen_out;
    int n_train = 200, n_test = 20, size = 64;
    std::uint64_t gen_seed = 7;
    bool force = false;
    gen->add_option("--out", gen_out, "dataset directory")->required();
    gen->add_option("--n-train", n_train, "training samples");
    gen->add_option("--n-test", n_test, "test samples");
    gen->add_option("--size", size, "square sample size (>= 32, multiple of 16)");
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_flag("--force", force, "overwrite an existing non-empty directory");

    // shared options
    std::string config_path, data_path, teacher_path, model_path, pruned_path;
    std::string teach_run = "teacher", prune_run = "prune", train_run = "train";
    std::string runs_dir = default_runs_root().string();
    double ratio_override = -1.0;
    bool no_kd = false;

    auto* teach = app.add_subcommand("train-teacher", "pretrain the teacher (plain alpha loss)");
    teach->add_option("--config", config_path, "slimmat/v1 config file")->required();
    teach->add_option("--data", data_path, "dataset root")->required();
    teach->add_option("--run", teach_run, "run name");
    teach->add_option("--runs-dir", runs_dir, "runs root (overrides SLIMMAT_RUNS_DIR)");

    auto* prune = app.add_subcommand("prune", "pruning stage: sparsify then cut channels");
    prune->add_option("--config", config_path, "slimmat/v1 config file")->required();
    prune->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    prune->add_option("--data", data_path, "dataset root")->required();
    prune->add_option("--ratio", ratio_override, "override prune.ratio");
    prune->add_option("--run", prune_run, "run name");
    prune->add_option("--runs-dir", runs_dir, "runs root");

    auto* train = app.add_subcommand("train", "training stage: retrain the pruned student");
    train->add_option("--config", config_path, "slimmat/v1 config file")->required();
    train->add_option("--student", pruned_path, "pruned student checkpoint")->required();
    train->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    train->add_option("--data", data_path, "dataset root")->required();
    train->add_flag("--no-kd", no_kd, "train from scratch without distillation");
    train->add_option("--run", train_run, "run name");
    train->add_option("--runs-dir", runs_dir, "runs root");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    eval->add_option("--model", model_path, "model checkpoint")->required();
    eval->add_option("--data", data_path, "dataset root or <root>/<split>")->required();
    std::string eval_csv;
    eval->add_option("--per-image-csv", eval_csv, "write per-image metrics here");

    auto* report = app.add_subcommand("report", "run a scripted experiment preset");
    std::string preset;
    report->add_option("--preset", preset,
                       "one of motivation|main|ratio_sweep|mismatch|no_kd_baseline")->required();
    report->add_option("--config", config_path, "slimmat/v1 config file")->required();
    report->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    report->add_option("--data", data_path, "dataset root")->required();
    report->add_option("--runs-dir", runs_dir, "runs root");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    if (gen->parsed()) {
        if (size < kMinSampleSize || size % 16 != 0) {
            std::cerr << "gen-data: --size must be >= " << kMinSampleSize
                      << " and a multiple of 16\n";
            return kExitUsage;
        }
        const fs::path manifest = generate_dataset(gen_out, n_train, n_test, size, gen_seed, force);
        std::cout << manifest.string() << "\n";
        return 0;
    }

    if (teach->parsed()) {
        RunConfig cfg = load_run_config(config_path);
        if (!fs::exists(fs::path(data_path) / "manifest.csv"))
            throw MissingArtifact(fs::path(data_path) / "manifest.csv");
        auto train_set = load_split(data_path, "train");
        auto test_set = load_split(data_path, "test");
        RunDir rd = RunDir::create(teach_run, runs_dir);
        rd.freeze_config(cfg);
        StageOutcome out = train_teacher(cfg, train_set);
        out.log.write_csv(rd.logs() / "teacher_train.csv");
        save_checkpoint(out.net, rd.checkpoints() / "teacher.ckpt");
        save_graph_json(out.net, rd.checkpoints() / "teacher.graph.json");
        const EvalResult ev = evaluate_model(out.net, test_set);
        write_eval_csv(ev, rd.logs() / "teacher_eval.csv");
        std::cout << "teacher checkpoint: " << (rd.checkpoints() / "teacher.ckpt").string() << "\n";
        print_metric_row(ev.aggregate);
        return 0;
    }

    if (prune->parsed()) {
        RunConfig cfg = load_run_config(config_path);
        if (ratio_override >= 0.0) cfg.prune.ratio = ratio_override;
        NetworkGraph teacher = load_checkpoint_or_die(teacher_path);
        auto train_set = load_split(data_path, "train");
        RunDir rd = RunDir::create(prune_run, runs_dir);
        rd.freeze_config(cfg);
        StageOutcome sparse = run_prune_stage(teacher, cfg.prune, train_set);
        sparse.log.write_csv(rd.logs() / "prune_stage.csv");
        save_checkpoint(sparse.net, rd.checkpoints() / "sparsified.ckpt");
        auto [pruned, rep] = prune_student(sparse.net, cfg.prune.ratio, cfg.prune.min_keep);
        save_checkpoint(pruned, rd.checkpoints() / "pruned.ckpt");
        save_graph_json(pruned, rd.checkpoints() / "pruned.graph.json");
        write_prune_report(rep, rd.root / "prune_report.json", rd.logs() / "gamma_hist.csv");
        std::cout << "pruned checkpoint: " << (rd.checkpoints() / "pruned.ckpt").string() << "\n";
        std::cout << "tau_enc=" << rep.tau_enc << " tau_dec=" << rep.tau_dec
                  << " params_before=" << rep.params_before << " params_after=" << rep.params_after
                  << " flops_before=" << rep.flops_before << " flops_after=" << rep.flops_after
                  << "\n";
        return 0;
    }

    if (train->parsed()) {
        RunConfig cfg = load_run_config(config_path);
        NetworkGraph pruned = load_checkpoint_or_die(pruned_path);
        NetworkGraph teacher = load_checkpoint_or_die(teacher_path);
        auto train_set = load_split(data_path, "train");
        auto test_set = load_split(data_path, "test");
        RunDir rd = RunDir::create(train_run, runs_dir);
        rd.freeze_config(cfg);
        StageOutcome out = run_train_stage(pruned, teacher, cfg.train, train_set, !no_kd);
        out.log.write_csv(rd.logs() / "train_stage.csv");
        save_checkpoint(out.net, rd.checkpoints() / "trained.ckpt");
        const EvalResult ev = evaluate_model(out.net, test_set);
        write_eval_csv(ev, rd.logs() / "train_eval.csv");
        std::cout << "trained checkpoint: " << (rd.checkpoints() / "trained.ckpt").string() << "\n";
        print_metric_row(ev.aggregate);
        return 0;
    }

    if (eval->parsed()) {
        NetworkGraph net = load_checkpoint_or_die(model_path);
        const auto [root, split] = resolve_split(data_path);
        auto samples = load_split(root, split);
        const EvalResult ev = evaluate_model(net, samples);
        if (!eval_csv.empty()) write_eval_csv(ev, eval_csv);
        print_metric_row(ev.aggregate);
        return 0;
    }

    if (report->parsed()) {
        PresetContext ctx;
        ctx.cfg = load_run_config(config_path);
        ctx.data_root = data_path;
        ctx.teacher_ckpt = teacher_path;
        ctx.runs_root = runs_dir;
        const PresetResult result = run_experiment_preset(preset_from_name(preset), ctx);
        std::cout << "report: " << result.report_md.string() << "\n";
        std::ifstream md(result.report_md);
        std::cout << md.rdbuf();
        return 0;
    }

    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const RefusedOverwrite& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRefused;
    } catch (const MissingArtifact& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitMissing;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
