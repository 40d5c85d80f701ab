#pragma once

// Experiment orchestration: cohort generation, training, evaluation,
// confounding sweeps, the ablation grid, seed-variability runs, and
// report/plot emission.
//
// Artifact layout under ExperimentConfig::out_dir, one directory per
// (gamma, seed) point:
//
//   sim_g<G>_s<S>_<hash8>/   train.cohort val.cohort test.cohort
//                            cells.cdc manifest.json
//   run_g<G>_s<S>_<hash8>/   model.ckpt loss.csv results.csv timings.csv
//
// The sim directory is keyed by a hash of the simulation-facing config only,
// so every model variant trained against the same cohorts shares it. The run
// directory is keyed by the full point config. Completed stages are detected
// via their artifacts and skipped, which makes every command resumable and
// lets later runs reuse earlier work.
//
// Determinism: all artifacts except timings.csv are pure functions of
// (config, gamma, seed) — re-running any command reproduces them
// byte-identically. Wall-clock measurements are therefore quarantined in
// timings.csv, which is excluded from that guarantee.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdm/data_io.hpp"
#include "cdm/denoiser.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/schedule.hpp"
#include "cdm/sim.hpp"

namespace cdm {

// Progress reporting for the long-running commands. The default sink prints
// one line per stage/epoch to stdout; install an empty function to silence.
using LogFn = std::function<void(const std::string&)>;
void set_harness_logger(LogFn fn);

// Evaluation protocol: per counterfactual cell, model_samples draws from the
// model are scored against truth_samples simulator draws. max_patients and
// time_stride subsample the evaluated cells (the ground-truth cell files
// always cover every cell).
struct EvalConfig {
    int model_samples = 20;
    int truth_samples = 100;
    int max_patients = 0; // 0 = every test patient
    int time_stride = 1;  // evaluate t = 1, 1 + stride, ...
    void validate() const; // throws ConfigError
};

struct ExperimentConfig {
    SimConfig sim;         // per-point, gamma_chemo/gamma_radio := the point's gamma
    std::vector<double> gammas{0.0, 5.0, 10.0};
    int train_patients = 1000;
    int val_patients = 200;
    int test_patients = 200;

    DenoiserConfig model;  // diffusion_steps is kept in sync with `steps`
    TrainHyper hyper;
    ScheduleKind kind = ScheduleKind::cosine;
    int steps = 5;
    EvalConfig eval;

    // Optional validation-loss-selected grids; empty = use model.lr0/embed_dim
    // as-is. When non-empty, every (lr0, embed_dim) combination is trained and
    // the one with the best validation loss is kept.
    std::vector<double> lr0_grid;
    std::vector<int> embed_dim_grid;

    std::vector<std::uint64_t> seeds{1};
    std::string out_dir = "cdm_out";

    // Profiles: desk scale fits a full gamma sweep on one workstation CPU;
    // paper scale matches the published cohort sizes and horizon.
    static ExperimentConfig desk_scale();
    static ExperimentConfig paper_scale();
    void validate() const; // throws ConfigError
};

nlohmann::json to_json(const ExperimentConfig& c);
// Strict parse starting from `base` (absent keys keep the base value,
// unknown keys throw ConfigError).
ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                             const ExperimentConfig& base);
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const ExperimentConfig& base);

// One scored metric for one experiment point. Values are percentages of
// V_max. wall_s is the wall-clock cost of the producing stage; it lives in
// timings.csv rather than results.csv so that result files stay
// byte-deterministic.
struct ResultRow {
    double gamma = 0.0;
    std::uint64_t seed = 0;
    std::string config_hash; // 16 hex digits, full point config
    std::string metric;      // rmse_q025 | rmse_median | rmse_q975 | w1
    double value = 0.0;
    double wall_s = 0.0;     // not serialized into results.csv
};

extern const std::vector<std::string> kMetricNames;

void write_result_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> read_result_csv(const std::filesystem::path& path);

// Resolved per-point paths and config hashes.
struct PointPaths {
    std::filesystem::path sim_dir, run_dir;
    std::filesystem::path train_cohort, val_cohort, test_cohort, cells, manifest;
    std::filesystem::path checkpoint, loss_csv, results_csv, timings_csv;
    std::string sim_hash, full_hash; // 16 hex digits each
};
PointPaths point_paths(const ExperimentConfig& cfg, double gamma, std::uint64_t seed);

// Pipeline stages for one (gamma, seed) point. Each stage validates the
// config, skips itself if its artifacts already exist for this exact config,
// and otherwise (re)creates them atomically.
//
// run_simulate writes the train/val/test cohorts plus the ground-truth
// counterfactual cells of every (test patient, t, choice).
// run_train fits the model (resuming from a per-epoch checkpoint when one is
// present) and writes the final checkpoint plus the per-epoch loss curve.
// run_evaluate scores the checkpoint on the evaluation cells and writes
// results.csv; it returns the rows.
void run_simulate(const ExperimentConfig& cfg, double gamma, std::uint64_t seed);
void run_train(const ExperimentConfig& cfg, double gamma, std::uint64_t seed);
std::vector<ResultRow> run_evaluate(const ExperimentConfig& cfg, double gamma,
                                    std::uint64_t seed);
std::vector<ResultRow> run_point(const ExperimentConfig& cfg, double gamma,
                                 std::uint64_t seed);

// Draws n model samples of the raw next-step volume (cm^3) for one
// counterfactual cell. Injectable so tests can score oracle samplers with the
// same evaluation loop as the real model.
using CellSampler = std::function<std::vector<double>(
    const Trajectory& traj, const PatientParams& p, int patient_index, int t,
    TreatmentChoice choice, Rng& rng)>;

// Evaluation core: iterates the configured subset of cells, pairs sampler
// draws with the stored ground-truth samples, and scores all four metrics.
// Throws FormatError when the cell files lack a needed cell.
std::vector<ResultRow> evaluate_cells(const ExperimentConfig& cfg, double gamma,
                                      std::uint64_t seed, const CellSampler& sampler);

// Outcome of one sweep/ablation/seedvar point; failures are isolated so a
// bad point cannot take down the rest of a sweep.
struct PointOutcome {
    std::string variant; // empty outside cmd_ablate
    double gamma = 0.0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::vector<ResultRow> rows;
};

struct CommandResult {
    std::vector<PointOutcome> points;
    std::vector<std::filesystem::path> outputs; // files written at the out root
    bool all_ok() const;
};

// Subcommand drivers. simulate/train/evaluate run their single stage over the
// whole (gammas x seeds) grid and stop at the first failure; sweep, ablate
// and seedvar run the full pipeline per point with per-point failure
// isolation and then emit combined CSVs, Markdown reports, and SVG plots.
CommandResult cmd_simulate(const ExperimentConfig& cfg);
CommandResult cmd_train(const ExperimentConfig& cfg);
CommandResult cmd_evaluate(const ExperimentConfig& cfg);
CommandResult cmd_sweep(const ExperimentConfig& cfg);
CommandResult cmd_ablate(const ExperimentConfig& cfg);  // 6 variants x gammas
CommandResult cmd_seedvar(const ExperimentConfig& cfg); // needs >= 2 seeds

// Regenerates every report (Markdown tables, SVG plots) purely from the raw
// CSVs under out_dir; returns the files written. The report layer adds no
// information: cmd_sweep and friends call exactly this after writing CSVs.
std::vector<std::filesystem::path> cmd_report(const std::filesystem::path& out_dir);

// The six ablation variants, in report order: full | steps_20 |
// linear_schedule | residual_3 | embed_8 | mlp_backbone.
struct AblationVariant {
    std::string name;
    ExperimentConfig cfg;
};
std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base);

// Report builders (exposed for tests; cmd_report wires them to files).
std::string markdown_sweep_report(const std::vector<ResultRow>& rows,
                                  const std::vector<PointOutcome>& failures);
std::string markdown_ablation_report(
    const std::vector<std::pair<std::string, ResultRow>>& rows);
std::string markdown_seedvar_report(const std::vector<ResultRow>& rows);
std::string svg_metric_plot(const std::vector<ResultRow>& rows, const std::string& metric);

void write_ablation_csv(const std::filesystem::path& path,
                        const std::vector<std::pair<std::string, ResultRow>>& rows);
std::vector<std::pair<std::string, ResultRow>> read_ablation_csv(
    const std::filesystem::path& path);

} // namespace cdm
