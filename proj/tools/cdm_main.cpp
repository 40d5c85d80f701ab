// cdm: counterfactual tumor-growth prediction with a causal diffusion model.
//
// Subcommands: simulate | train | evaluate | sweep | ablate | seedvar | report
// Exit codes:  0 success, 1 config error, 2 runtime/numeric error, 3 IO error.
// CDM_THREADS caps the worker-thread count of the numeric kernels.
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cdm/errors.hpp"
#include "cdm/harness.hpp"

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_dir;
    std::vector<double> gammas;
    std::vector<std::uint64_t> seeds;
    bool paper_scale = false;
    bool desk_scale = false;
};

void add_common_options(CLI::App* cmd, CliOptions& opt) {
    cmd->add_option("--config", opt.config_path,
                    "Experiment config JSON, overlaid on the scale profile")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", opt.out_dir, "Output directory (overrides the config)");
    cmd->add_option("--gamma", opt.gammas,
                    "Confounding level(s); overrides the config list")
        ->delimiter(',');
    cmd->add_option("--seed", opt.seeds, "Seed(s); overrides the config list")
        ->delimiter(',');
    const auto paper = cmd->add_flag("--paper-scale", opt.paper_scale,
                                     "Published cohort sizes and horizon");
    cmd->add_flag("--desk-scale", opt.desk_scale,
                  "Workstation-sized cohorts and horizon (default)")
        ->excludes(paper);
}

cdm::ExperimentConfig build_config(const CliOptions& opt) {
    cdm::ExperimentConfig cfg = opt.paper_scale ? cdm::ExperimentConfig::paper_scale()
                                                : cdm::ExperimentConfig::desk_scale();
    if (!opt.config_path.empty())
        cfg = cdm::load_experiment_config(opt.config_path, cfg);
    if (!opt.gammas.empty()) cfg.gammas = opt.gammas;
    if (!opt.seeds.empty()) cfg.seeds = opt.seeds;
    if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
    cfg.validate();
    return cfg;
}

int report_outcome(const cdm::CommandResult& res) {
    for (const std::filesystem::path& p : res.outputs)
        std::printf("wrote %s\n", p.string().c_str());
    if (res.all_ok()) return 0;
    for (const cdm::PointOutcome& p : res.points)
        if (!p.ok) {
            std::string label;
            if (!p.variant.empty()) label += "variant=" + p.variant + " ";
            std::fprintf(stderr, "failed: %sgamma=%g seed=%llu: %s\n", label.c_str(),
                         p.gamma, static_cast<unsigned long long>(p.seed),
                         p.error.c_str());
        }
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Counterfactual tumor-growth prediction with a causal diffusion model"};
    app.require_subcommand(1);

    CliOptions opt;
    std::string cmd_name;
    for (const char* name : {"simulate", "train", "evaluate", "sweep", "ablate",
                             "seedvar", "report"}) {
        CLI::App* sub = app.add_subcommand(name, "");
        add_common_options(sub, opt);
        sub->callback([&cmd_name, name] { cmd_name = name; });
    }
    app.get_subcommand("simulate")
        ->description("Generate train/val/test cohorts and ground-truth cells");
    app.get_subcommand("train")->description("Fit the denoiser on simulated cohorts");
    app.get_subcommand("evaluate")
        ->description("Score a trained checkpoint on the counterfactual cells");
    app.get_subcommand("sweep")
        ->description("simulate+train+evaluate across the gamma grid, with report");
    app.get_subcommand("ablate")
        ->description("Run the six-variant ablation study across gammas");
    app.get_subcommand("seedvar")
        ->description("Repeat the pipeline across seeds and report mean/std");
    app.get_subcommand("report")
        ->description("Regenerate Markdown/SVG reports from the raw CSVs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (cmd_name == "report") {
            std::string dir = opt.out_dir;
            if (dir.empty() && !opt.config_path.empty()) {
                const cdm::ExperimentConfig cfg = build_config(opt);
                dir = cfg.out_dir;
            }
            if (dir.empty())
                throw cdm::ConfigError("report: --out (or a config with out_dir) is required");
            for (const std::filesystem::path& p : cdm::cmd_report(dir))
                std::printf("wrote %s\n", p.string().c_str());
            return 0;
        }
        const cdm::ExperimentConfig cfg = build_config(opt);
        if (cmd_name == "simulate") return report_outcome(cdm::cmd_simulate(cfg));
        if (cmd_name == "train") return report_outcome(cdm::cmd_train(cfg));
        if (cmd_name == "evaluate") return report_outcome(cdm::cmd_evaluate(cfg));
        if (cmd_name == "sweep") return report_outcome(cdm::cmd_sweep(cfg));
        if (cmd_name == "ablate") return report_outcome(cdm::cmd_ablate(cfg));
        if (cmd_name == "seedvar") return report_outcome(cdm::cmd_seedvar(cfg));
        std::fprintf(stderr, "error: unknown command\n");
        return 1;
    } catch (const cdm::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const cdm::FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 3;
    } catch (const cdm::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const cdm::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
