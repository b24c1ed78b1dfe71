#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "slimmat/config.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code;
    std::string output;
};

CliResult run_cli(const std::string& args) {
    const std::string cmd = std::string(SLIMMAT_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string out;
    char buf[512];
    while (fgets(buf, sizeof(buf), pipe)) out += buf;
    const int status = pclose(pipe);
    return {WEXITSTATUS(status), out};
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_tiny_config(const fs::path& path) {
    slimmat::RunConfig cfg;
    cfg.width_multiplier = 0.25;
    cfg.crop = 32;
    cfg.teacher.epochs = 2;
    cfg.prune.epochs = 1;
    cfg.train.epochs = 1;
    cfg.teacher.batch_size = cfg.prune.batch_size = cfg.train.batch_size = 4;
    std::ofstream os(path);
    os << slimmat::run_config_to_json(cfg).dump(2) << "\n";
}

}  // namespace

TEST_CASE("cli: full workflow") {
    const fs::path base = fresh_dir("slimmat_cli_t");
    const fs::path data = base / "d1";
    const fs::path runs = base / "runs";
    const fs::path cfg = base / "cfg.json";
    write_tiny_config(cfg);

    SECTION("gen-data validation and refusal codes") {
        auto r = run_cli("gen-data --out " + data.string() + " --size 8");
        REQUIRE(r.exit_code == 2);

        r = run_cli("gen-data --out " + data.string() +
                    " --n-train 6 --n-test 2 --size 32 --seed 7");
        REQUIRE(r.exit_code == 0);
        REQUIRE(r.output.find("manifest.csv") != std::string::npos);
        REQUIRE(fs::exists(data / "train" / "00005" / "image.pfm"));

        r = run_cli("gen-data --out " + data.string() +
                    " --n-train 6 --n-test 2 --size 32 --seed 7");
        REQUIRE(r.exit_code == 3);  // refuses to overwrite

        std::ifstream m1(data / "manifest.csv", std::ios::binary);
        const std::string before((std::istreambuf_iterator<char>(m1)), {});
        r = run_cli("gen-data --out " + data.string() +
                    " --n-train 6 --n-test 2 --size 32 --seed 7 --force");
        REQUIRE(r.exit_code == 0);
        std::ifstream m2(data / "manifest.csv", std::ios::binary);
        const std::string after((std::istreambuf_iterator<char>(m2)), {});
        REQUIRE(before == after);
    }

    SECTION("teacher -> prune -> train -> eval -> report") {
        REQUIRE(run_cli("gen-data --out " + data.string() +
                        " --n-train 6 --n-test 2 --size 32 --seed 7")
                    .exit_code == 0);

        auto r = run_cli("train-teacher --config " + cfg.string() + " --data " + data.string() +
                         " --runs-dir " + runs.string());
        REQUIRE(r.exit_code == 0);
        const fs::path teacher = runs / "teacher" / "checkpoints" / "teacher.ckpt";
        REQUIRE(fs::exists(teacher));
        REQUIRE(fs::exists(runs / "teacher" / "config"));  // frozen copy

        r = run_cli("prune --config " + cfg.string() + " --teacher " + teacher.string() +
                    " --data " + data.string() + " --ratio 0.5 --runs-dir " + runs.string());
        REQUIRE(r.exit_code == 0);
        REQUIRE(r.output.find("tau_enc=") != std::string::npos);
        REQUIRE(r.output.find("params_before=") != std::string::npos);
        const fs::path pruned = runs / "prune" / "checkpoints" / "pruned.ckpt";
        REQUIRE(fs::exists(pruned));
        REQUIRE(fs::exists(runs / "prune" / "prune_report.json"));
        REQUIRE(fs::exists(runs / "prune" / "logs" / "gamma_hist.csv"));

        r = run_cli("train --config " + cfg.string() + " --student " + pruned.string() +
                    " --teacher " + teacher.string() + " --data " + data.string() +
                    " --runs-dir " + runs.string());
        REQUIRE(r.exit_code == 0);
        const fs::path trained = runs / "train" / "checkpoints" / "trained.ckpt";
        REQUIRE(fs::exists(trained));

        r = run_cli("eval --model " + trained.string() + " --data " + (data / "test").string());
        REQUIRE(r.exit_code == 0);
        REQUIRE(r.output.find("mse,sad,grad,conn,params,flops") != std::string::npos);
        // aggregate row has exactly six comma-separated fields
        const auto header_at = r.output.find("mse,sad");
        const auto line_start = r.output.find('\n', header_at) + 1;
        const auto line = r.output.substr(line_start, r.output.find('\n', line_start) - line_start);
        REQUIRE(std::count(line.begin(), line.end(), ',') == 5);

        r = run_cli("report --preset motivation --config " + cfg.string() + " --teacher " +
                    teacher.string() + " --data " + data.string() + " --runs-dir " + runs.string());
        REQUIRE(r.exit_code == 0);
        REQUIRE(r.output.find("| KD | Prune |") != std::string::npos);
        REQUIRE(fs::exists(runs / "motivation" / "report.csv"));
    }

    SECTION("SLIMMAT_RUNS_DIR env var sets the runs root") {
        REQUIRE(run_cli("gen-data --out " + data.string() +
                        " --n-train 4 --n-test 1 --size 32 --seed 5")
                    .exit_code == 0);
        const fs::path env_runs = base / "env_runs";
        const std::string cmd = "SLIMMAT_RUNS_DIR=" + env_runs.string() + " " +
                                std::string(SLIMMAT_CLI_PATH) + " train-teacher --config " +
                                cfg.string() + " --data " + data.string() + " 2>&1";
        FILE* pipe = popen(cmd.c_str(), "r");
        REQUIRE(pipe != nullptr);
        char buf[256];
        while (fgets(buf, sizeof(buf), pipe)) {}
        REQUIRE(WEXITSTATUS(pclose(pipe)) == 0);
        REQUIRE(fs::exists(env_runs / "teacher" / "checkpoints" / "teacher.ckpt"));
    }

    SECTION("error codes: missing checkpoint is 4, bad config is 2") {
        REQUIRE(run_cli("gen-data --out " + data.string() +
                        " --n-train 2 --n-test 1 --size 32 --seed 3")
                    .exit_code == 0);

        auto r = run_cli("eval --model " + (base / "missing.ckpt").string() + " --data " +
                         data.string());
        REQUIRE(r.exit_code == 4);
        REQUIRE(r.output.find("missing.ckpt") != std::string::npos);

        const fs::path bad_cfg = base / "bad.json";
        {
            std::ofstream os(bad_cfg);
            os << R"({"schema":"slimmat/v1","prune":{"bogus_key":1,"ratio":2.0}})";
        }
        r = run_cli("train-teacher --config " + bad_cfg.string() + " --data " + data.string() +
                    " --runs-dir " + runs.string());
        REQUIRE(r.exit_code == 2);
        REQUIRE(r.output.find("prune.bogus_key") != std::string::npos);
        REQUIRE(r.output.find("prune.ratio") != std::string::npos);

        r = run_cli("definitely-not-a-subcommand");
        REQUIRE(r.exit_code == 2);
    }

    fs::remove_all(base);
}
