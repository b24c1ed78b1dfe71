#pragma once

#include <cstdlib>

#include "slimmat/graph_io.hpp"
#include "slimmat/pruner.hpp"

namespace slimmat {

/// A required input file (checkpoint, dataset) is absent.
struct MissingArtifact : std::runtime_error {
    fs::path path;
    explicit MissingArtifact(const fs::path& p)
        : std::runtime_error("missing required artifact: " + p.string()), path(p) {}
};

inline fs::path default_runs_root() {
    if (const char* env = std::getenv("SLIMMAT_RUNS_DIR")) return fs::path(env);
    return fs::path("runs");
}

/// runs/<name>/{config, checkpoints/, logs/, report.md, report.csv}
struct RunDir {
    fs::path root;

    static RunDir create(const std::string& name, const fs::path& runs_root) {
        RunDir rd{runs_root / name};
        fs::create_directories(rd.checkpoints());
        fs::create_directories(rd.logs());
        return rd;
    }

    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path logs() const { return root / "logs"; }
    fs::path config_path() const { return root / "config"; }
    fs::path report_md() const { return root / "report.md"; }
    fs::path report_csv() const { return root / "report.csv"; }

    void freeze_config(const RunConfig& cfg) const {
        std::ofstream os(config_path());
        os << run_config_to_json(cfg).dump(2) << "\n";
    }
};

inline NetworkGraph load_checkpoint_or_die(const fs::path& path) {
    if (!fs::exists(path)) throw MissingArtifact(path);
    return load_checkpoint(path);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

/// Supervised teacher pretraining (plain alpha loss, no distillation).
inline StageOutcome train_teacher(const RunConfig& cfg,
                                  const std::vector<TrainingSample>& data) {
    NetworkGraph net = build_mini_matting_net(cfg.width_multiplier,
                                              mix_seed(cfg.teacher.seed, 0x7EA));
    reinit_weights(net, mix_seed(cfg.teacher.seed, 0x7EA));
    return run_stage(net, nullptr, cfg.teacher, /*include_sparsity=*/false, data);
}

/// Training stage: the pruned architecture is re-initialized (trained from
/// scratch, including any distillation regressors) and optimized under the
/// training-stage loss against the frozen teacher.
inline StageOutcome run_train_stage(const NetworkGraph& pruned, const NetworkGraph& teacher,
                                    const StageConfig& cfg,
                                    const std::vector<TrainingSample>& data, bool use_kd = true) {
    NetworkGraph student = pruned;
    reinit_weights(student, mix_seed(cfg.seed, 0x5C7A7C8));
    return run_stage(student, use_kd ? &teacher : nullptr, cfg, /*include_sparsity=*/false, data);
}

// ---------------------------------------------------------------------------
// experiment presets
// ---------------------------------------------------------------------------

enum class PresetName { motivation, main, ratio_sweep, mismatch, no_kd_baseline };

inline PresetName preset_from_name(const std::string& s) {
    if (s == "motivation") return PresetName::motivation;
    if (s == "main") return PresetName::main;
    if (s == "ratio_sweep") return PresetName::ratio_sweep;
    if (s == "mismatch") return PresetName::mismatch;
    if (s == "no_kd_baseline") return PresetName::no_kd_baseline;
    throw ConfigError("unknown preset: " + s +
                      " (expected motivation|main|ratio_sweep|mismatch|no_kd_baseline)");
}

inline const char* preset_name(PresetName p) {
    switch (p) {
        case PresetName::motivation: return "motivation";
        case PresetName::main: return "main";
        case PresetName::ratio_sweep: return "ratio_sweep";
        case PresetName::mismatch: return "mismatch";
        case PresetName::no_kd_baseline: return "no_kd_baseline";
    }
    return "?";
}

struct ReportRow {
    std::string kd;     // distillation method column ("-" when none)
    std::string prune;  // pruning method column
    bool has_metrics = false;
    MetricRow metrics;
};

struct PresetResult {
    std::vector<ReportRow> rows;
    fs::path report_md;
    fs::path report_csv;
};

struct PresetContext {
    fs::path data_root;
    fs::path teacher_ckpt;
    RunConfig cfg;
    fs::path runs_root = default_runs_root();
};

namespace detail {

inline void write_report(const std::vector<ReportRow>& rows, const RunDir& rd,
                         const std::string& title) {
    std::ofstream md(rd.report_md());
    md << "# " << title << "\n\n";
    md << "| KD | Prune | MSE | SAD | Grad | Conn | #Param | FLOPs |\n";
    md << "|----|-------|-----|-----|------|------|--------|-------|\n";
    std::ofstream csv(rd.report_csv());
    csv << "kd,prune,mse,sad,grad,conn,params,flops\n";
    for (const auto& r : rows) {
        if (r.has_metrics) {
            char buf[256];
            std::snprintf(buf, sizeof(buf), "| %s | %s | %.4f | %.3f | %.3f | %.3f | %zu | %zu |\n",
                          r.kd.c_str(), r.prune.c_str(), r.metrics.mse, r.metrics.sad,
                          r.metrics.grad, r.metrics.conn, r.metrics.params, r.metrics.flops);
            md << buf;
            csv << r.kd << "," << r.prune << "," << r.metrics.mse << "," << r.metrics.sad << ","
                << r.metrics.grad << "," << r.metrics.conn << "," << r.metrics.params << ","
                << r.metrics.flops << "\n";
        } else {
            md << "| " << r.kd << " | " << r.prune << " | n/a | n/a | n/a | n/a | "
               << r.metrics.params << " | " << r.metrics.flops << " |\n";
            csv << r.kd << "," << r.prune << ",n/a,n/a,n/a,n/a," << r.metrics.params << ","
                << r.metrics.flops << "\n";
        }
    }
}

struct PresetRunner {
    const PresetContext& ctx;
    RunDir rd;
    NetworkGraph teacher;
    std::vector<TrainingSample> train_set;
    std::vector<TrainingSample> test_set;

    explicit PresetRunner(const PresetContext& c, PresetName name)
        : ctx(c), rd(RunDir::create(preset_name(name), c.runs_root)) {
        if (!fs::exists(ctx.data_root / "manifest.csv")) throw MissingArtifact(ctx.data_root / "manifest.csv");
        teacher = load_checkpoint_or_die(ctx.teacher_ckpt);
        train_set = load_split(ctx.data_root, "train");
        test_set = load_split(ctx.data_root, "test");
        rd.freeze_config(ctx.cfg);
    }

    ReportRow evaluated(const NetworkGraph& net, const std::string& kd, const std::string& prune,
                        const std::string& cell) {
        save_checkpoint(net, rd.checkpoints() / (cell + ".ckpt"));
        const EvalResult ev = evaluate_model(net, test_set);
        write_eval_csv(ev, rd.logs() / (cell + "_eval.csv"));
        ReportRow row{kd, prune, true, ev.aggregate};
        return row;
    }

    /// Ours pipeline for a given prune-stage config: sparsify, cut at ratio.
    NetworkGraph ours_pruned(const StageConfig& prune_cfg, real ratio, const std::string& cell) {
        StageOutcome sparse = run_prune_stage(teacher, prune_cfg, train_set);
        sparse.log.write_csv(rd.logs() / (cell + "_prune_stage.csv"));
        save_checkpoint(sparse.net, rd.checkpoints() / (cell + "_sparsified.ckpt"));
        auto [pruned, report] = prune_student(sparse.net, ratio, prune_cfg.min_keep);
        write_prune_report(report, rd.logs() / (cell + "_prune_report.json"),
                           rd.logs() / (cell + "_gamma_hist.csv"));
        return pruned;
    }

    NetworkGraph uni_pruned(real ratio) const {
        NetworkGraph fresh = teacher;  // architecture only
        reinit_weights(fresh, mix_seed(ctx.cfg.seed, 0x0141));
        return uniform_prune(fresh, ratio, LevelScope::all, ctx.cfg.prune.min_keep);
    }

    ReportRow train_and_eval(const NetworkGraph& arch, const StageConfig& train_cfg, bool use_kd,
                             const std::string& kd_label, const std::string& prune_label,
                             const std::string& cell) {
        StageOutcome trained = run_train_stage(arch, teacher, train_cfg, train_set, use_kd);
        trained.log.write_csv(rd.logs() / (cell + "_train_stage.csv"));
        return evaluated(trained.net, kd_label, prune_label, cell);
    }
};

}  // namespace detail

/// Scripted comparisons emitting a markdown + CSV report in the run directory.
inline PresetResult run_experiment_preset(PresetName name, const PresetContext& ctx) {
    detail::PresetRunner run(ctx, name);
    std::vector<ReportRow> rows;
    const std::string kd_label = kd_name(ctx.cfg.train.kd.name);

    switch (name) {
        case PresetName::motivation: {
            // uniform 50% cuts of the trained teacher, low- vs high-level
            // layers, each retrained from scratch without distillation
            for (auto [scope, label] : {std::pair{LevelScope::low, std::string("low-level")},
                                        std::pair{LevelScope::high, std::string("high-level")}}) {
                NetworkGraph cut =
                    uniform_prune(run.teacher, 0.5, scope, ctx.cfg.prune.min_keep);
                save_checkpoint(cut, run.rd.checkpoints() / (label + "_pruned_arch.ckpt"));
                rows.push_back(run.train_and_eval(cut, ctx.cfg.train, /*use_kd=*/false, "-",
                                                  label + " pruned", label));
            }
            break;
        }
        case PresetName::main: {
            rows.push_back(run.evaluated(run.teacher, "-", "unpruned (teacher)", "teacher"));
            const real ratio = ctx.cfg.prune.ratio;
            rows.push_back(run.train_and_eval(run.uni_pruned(ratio), ctx.cfg.train, true, kd_label,
                                              "UNI", "uni"));
            StageConfig ns_cfg = ctx.cfg.prune;  // network slimming: no distillation terms
            ns_cfg.lambda_alpha_teacher = 0.0;
            ns_cfg.lambda_kd = 0.0;
            rows.push_back(run.train_and_eval(run.ours_pruned(ns_cfg, ratio, "ns"), ctx.cfg.train,
                                              true, kd_label, "NS", "ns"));
            rows.push_back(run.train_and_eval(run.ours_pruned(ctx.cfg.prune, ratio, "ours"),
                                              ctx.cfg.train, true, kd_label, "Ours", "ours"));
            break;
        }
        case PresetName::ratio_sweep: {
            // one sparsified student serves every cut ratio
            StageOutcome sparse = run_prune_stage(run.teacher, ctx.cfg.prune, run.train_set);
            sparse.log.write_csv(run.rd.logs() / "prune_stage.csv");
            save_checkpoint(sparse.net, run.rd.checkpoints() / "sparsified.ckpt");
            for (real ratio : {0.3, 0.5, 0.7}) {
                const std::string pct = std::to_string(static_cast<int>(ratio * 100 + 0.5));
                rows.push_back(run.train_and_eval(run.uni_pruned(ratio), ctx.cfg.train, true,
                                                  kd_label, "UNI-" + pct + "%", "uni" + pct));
                auto [cut, report] = prune_student(sparse.net, ratio, ctx.cfg.prune.min_keep);
                write_prune_report(report, run.rd.logs() / ("ours" + pct + "_prune_report.json"),
                                   run.rd.logs() / ("ours" + pct + "_gamma_hist.csv"));
                rows.push_back(run.train_and_eval(cut, ctx.cfg.train, true, kd_label,
                                                  "Ours-" + pct + "%", "ours" + pct));
            }
            break;
        }
        case PresetName::mismatch: {
            for (auto prune_kd : {KDMethod::Name::NST, KDMethod::Name::OFD, KDMethod::Name::SPKD}) {
                StageConfig pcfg = ctx.cfg.prune;
                pcfg.kd.name = prune_kd;
                const std::string pcell = std::string("prune_") + kd_name(prune_kd);
                NetworkGraph cut = run.ours_pruned(pcfg, ctx.cfg.prune.ratio, pcell);
                for (auto train_kd : {KDMethod::Name::NST, KDMethod::Name::OFD, KDMethod::Name::SPKD}) {
                    StageConfig tcfg = ctx.cfg.train;
                    tcfg.kd.name = train_kd;
                    rows.push_back(run.train_and_eval(
                        cut, tcfg, true, kd_name(train_kd), std::string("Ours+") + kd_name(prune_kd),
                        pcell + "_train_" + kd_name(train_kd)));
                }
            }
            break;
        }
        case PresetName::no_kd_baseline: {
            NetworkGraph cut = run.ours_pruned(ctx.cfg.prune, ctx.cfg.prune.ratio, "ours");
            rows.push_back(
                run.train_and_eval(cut, ctx.cfg.train, true, kd_label, "Ours", "with_kd"));
            rows.push_back(
                run.train_and_eval(cut, ctx.cfg.train, false, "-", "Ours (scratch)", "scratch"));
            break;
        }
    }

    detail::write_report(rows, run.rd, std::string("preset: ") + preset_name(name));
    return {std::move(rows), run.rd.report_md(), run.rd.report_csv()};
}

}  // namespace slimmat
