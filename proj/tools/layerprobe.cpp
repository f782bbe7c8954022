// layerprobe: train a VGG-style CNN, generate coverage-guided adversarial
// examples, and quantify per-layer Grad-CAM deviation against matched
// Gaussian noise.
//
//   layerprobe train|attack|analyze|report --config <path> [--out <dir>]
//                                          [--jobs <n>] [--seed <u64>]
//
// Exit codes: 0 success, 1 validation error, 2 data/format error,
// 3 numeric error.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "layerprobe/pipeline.hpp"

namespace {

int default_jobs() {
    if (const char* env = std::getenv("LAYERPROBE_JOBS")) {
        try {
            const int n = std::stoi(env);
            if (n >= 1) return n;
        } catch (...) {
        }
        std::cerr << "warning: ignoring invalid LAYERPROBE_JOBS value\n";
    }
    return 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"layer-wise adversarial attention deviation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int jobs = default_jobs();

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run configuration JSON")->required();
        cmd->add_option("--out", out_dir, "output directory override");
        cmd->add_option("--jobs", jobs, "worker threads (env LAYERPROBE_JOBS)");
        cmd->add_option("--seed", seed, "base seed overriding the config's train/attack/noise seeds")
            ->each([&](const std::string&) { seed_given = true; });
    };
    CLI::App* train_cmd = app.add_subcommand("train", "train the model and write a checkpoint");
    CLI::App* attack_cmd = app.add_subcommand("attack", "generate the adversarial corpus");
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "compute per-layer deviation statistics");
    CLI::App* report_cmd = app.add_subcommand("report", "emit figure CSVs, heatmap gallery, summary");
    for (CLI::App* cmd : {train_cmd, attack_cmd, analyze_cmd, report_cmd}) add_common(cmd);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        const std::optional<std::filesystem::path> out_override =
            out_dir.empty() ? std::nullopt : std::optional<std::filesystem::path>(out_dir);
        const std::optional<std::uint64_t> seed_override =
            seed_given ? std::optional<std::uint64_t>(seed) : std::nullopt;
        const layerprobe::RunConfig cfg =
            layerprobe::RunConfig::load(config_path, out_override, seed_override, jobs);

        if (app.got_subcommand(train_cmd)) {
            const layerprobe::TrainReport report = layerprobe::cmd_train(cfg);
            std::cout << "trained " << report.epochs << " epochs, held-out accuracy "
                      << layerprobe::fmt_float(report.final_heldout_accuracy) << "\n";
        } else if (app.got_subcommand(attack_cmd)) {
            const layerprobe::AttackStageResult r = layerprobe::cmd_attack(cfg);
            std::cout << "attacked " << r.attempted << " seeds, " << r.succeeded
                      << " adversarial examples (yield " << layerprobe::fmt_float(r.yield_rate)
                      << ")\n";
        } else if (app.got_subcommand(analyze_cmd)) {
            const layerprobe::VulnerabilityReport rep = layerprobe::cmd_analyze(cfg);
            std::cout << "analyzed " << rep.corpus_size << " examples across "
                      << rep.layer_order.size() << " conv layers; most vulnerable: "
                      << rep.ranking.front() << "\n";
        } else if (app.got_subcommand(report_cmd)) {
            layerprobe::cmd_report(cfg);
            std::cout << "report written to " << cfg.output_dir.string() << "\n";
        }
        return 0;
    } catch (const layerprobe::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return layerprobe::exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

#ifndef LAYERPROBE_NO_MAIN
int main(int argc, char** argv) { return run_cli(argc, argv); }
#endif
