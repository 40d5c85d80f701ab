#include "cdm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "cdm/errors.hpp"
#include "cdm/metrics.hpp"
#include "json_reader.hpp"
#include "text_io.hpp"

namespace fs = std::filesystem;

namespace cdm {

namespace {

LogFn& logger_slot() {
    static LogFn fn = [](const std::string& line) { std::printf("%s\n", line.c_str()); };
    return fn;
}

void log(const std::string& line) {
    if (logger_slot()) logger_slot()(line);
}

std::string point_label(const char* stage, double gamma, std::uint64_t seed) {
    return std::string(stage) + " gamma=" + detail::strf("%g", gamma) + " seed=" +
           std::to_string(seed);
}

// Derived-stream tags: one per independent consumer of the point seed.
constexpr std::uint64_t kCohortTag = 0x636f686fULL; // per-split cohort seeds
constexpr std::uint64_t kTruthTag = 0x74727574ULL;  // per-patient truth cells
constexpr std::uint64_t kEvalTag = 0x6576616cULL;   // per-cell model draws

std::string format_gamma(double g) { return detail::strf("%g", g); }

SimConfig sim_with_gamma(const ExperimentConfig& cfg, double gamma) {
    SimConfig s = cfg.sim;
    s.gamma_chemo = gamma;
    s.gamma_radio = gamma;
    return s;
}

// The model config actually trained: diffusion_steps follows the schedule.
DenoiserConfig effective_model(const ExperimentConfig& cfg) {
    DenoiserConfig m = cfg.model;
    m.diffusion_steps = cfg.steps;
    return m;
}

nlohmann::json eval_to_json(const EvalConfig& e) {
    return nlohmann::json{{"model_samples", e.model_samples},
                          {"truth_samples", e.truth_samples},
                          {"max_patients", e.max_patients},
                          {"time_stride", e.time_stride}};
}

EvalConfig eval_from_json(const nlohmann::json& j, const EvalConfig& base) {
    EvalConfig e = base;
    detail::JsonReader r(j, "eval config");
    r.get("model_samples", e.model_samples);
    r.get("truth_samples", e.truth_samples);
    r.get("max_patients", e.max_patients);
    r.get("time_stride", e.time_stride);
    r.finish();
    return e;
}

// Everything the simulation stage depends on; shared across model variants.
nlohmann::json sim_point_json(const ExperimentConfig& cfg, double gamma,
                              std::uint64_t seed) {
    return nlohmann::json{{"sim", to_json(sim_with_gamma(cfg, gamma))},
                          {"train_patients", cfg.train_patients},
                          {"val_patients", cfg.val_patients},
                          {"test_patients", cfg.test_patients},
                          {"truth_samples", cfg.eval.truth_samples},
                          {"seed", seed}};
}

// Everything any stage of the point depends on (out_dir deliberately
// excluded: relocating artifacts must not invalidate them).
nlohmann::json full_point_json(const ExperimentConfig& cfg, double gamma,
                               std::uint64_t seed) {
    return nlohmann::json{{"sim", to_json(sim_with_gamma(cfg, gamma))},
                          {"train_patients", cfg.train_patients},
                          {"val_patients", cfg.val_patients},
                          {"test_patients", cfg.test_patients},
                          {"model", to_json(effective_model(cfg))},
                          {"hyper", to_json(cfg.hyper)},
                          {"schedule", schedule_to_json(cfg.kind, cfg.steps)},
                          {"eval", eval_to_json(cfg.eval)},
                          {"lr0_grid", cfg.lr0_grid},
                          {"embed_dim_grid", cfg.embed_dim_grid},
                          {"seed", seed}};
}

// Updates one stage's wall-clock entry in a point's timings.csv.
void record_timing(const fs::path& path, const std::string& stage, double secs) {
    std::map<std::string, double> entries;
    std::vector<std::string> order;
    if (fs::exists(path)) {
        std::istringstream is(detail::read_text_file(path));
        std::string line;
        std::getline(is, line); // header
        while (std::getline(is, line)) {
            const std::size_t comma = line.find(',');
            if (comma == std::string::npos) continue;
            const std::string name = line.substr(0, comma);
            if (!entries.count(name)) order.push_back(name);
            entries[name] = std::strtod(line.c_str() + comma + 1, nullptr);
        }
    }
    if (!entries.count(stage)) order.push_back(stage);
    entries[stage] = secs;
    std::string out = "stage,wall_s\n";
    for (const std::string& name : order)
        out += name + "," + detail::strf("%.3f", entries[name]) + "\n";
    fs::create_directories(path.parent_path());
    detail::atomic_write_text(path, out);
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw IoError(what + " not found: " + p.string());
}

} // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void set_harness_logger(LogFn fn) { logger_slot() = std::move(fn); }

void EvalConfig::validate() const {
    if (model_samples < 1) throw ConfigError("eval: model_samples must be >= 1");
    if (truth_samples < 1) throw ConfigError("eval: truth_samples must be >= 1");
    if (max_patients < 0) throw ConfigError("eval: max_patients must be >= 0");
    if (time_stride < 1) throw ConfigError("eval: time_stride must be >= 1");
}

ExperimentConfig ExperimentConfig::desk_scale() {
    ExperimentConfig c;
    c.sim = SimConfig::defaults(); // horizon 30
    c.train_patients = 1000;
    c.val_patients = 200;
    c.test_patients = 200;
    // The published batch size (200) gives only 5 optimizer steps per epoch
    // at this cohort size; smaller batches over more epochs restore a step
    // count comparable to the full-scale regime.
    c.hyper.epochs = 300;
    c.hyper.batch_size = 50;
    // Deterministic exponential decay (plateau triggers every epoch): the
    // small-cohort validation loss is too noisy for plateau detection, and a
    // smooth anneal to ~1e-5 is what lets the terminal denoising step reach
    // the precision the W1 bound needs.
    c.hyper.patience = 1;
    c.hyper.plateau_min_delta = 1.0;
    c.hyper.lr_decay_factor = 0.985;
    // Dropout costs more here than it protects against: with per-epoch
    // re-noising the stream never repeats, and the regularization noise floor
    // it imposes dominates the final-step error budget.
    c.model.dropout = 0.0;
    c.eval.max_patients = 48;
    c.eval.time_stride = 2;
    return c;
}

ExperimentConfig ExperimentConfig::paper_scale() {
    ExperimentConfig c;
    c.sim = SimConfig::defaults();
    c.sim.horizon = 60;
    c.model.max_time = 64;
    c.train_patients = 10000;
    c.val_patients = 1000;
    c.test_patients = 1000;
    c.hyper = TrainHyper{}; // 25 epochs, batch 200
    c.eval.max_patients = 0;
    c.eval.time_stride = 1;
    return c;
}

void ExperimentConfig::validate() const {
    sim.validate();
    if (gammas.empty()) throw ConfigError("experiment: gammas must be nonempty");
    for (double g : gammas)
        if (!std::isfinite(g) || g < 0.0)
            throw ConfigError("experiment: gammas must be finite and >= 0");
    if (seeds.empty()) throw ConfigError("experiment: seeds must be nonempty");
    if (train_patients < 1 || val_patients < 1 || test_patients < 1)
        throw ConfigError("experiment: cohort sizes must be >= 1");
    if (steps < 1) throw ConfigError("experiment: schedule steps must be >= 1");
    hyper.validate();
    eval.validate();
    DenoiserConfig m = effective_model(*this);
    m.validate();
    if (m.num_features != kNumChannels)
        throw ConfigError("experiment: model num_features must equal the " +
                          std::to_string(kNumChannels) + "-channel patient layout");
    if (m.max_time < sim.horizon + 1)
        throw ConfigError("experiment: model max_time must be >= horizon + 1");
    for (double lr : lr0_grid)
        if (!(lr > 0.0)) throw ConfigError("experiment: lr0_grid entries must be > 0");
    for (int e : embed_dim_grid) {
        DenoiserConfig g = m;
        g.embed_dim = e;
        g.validate();
    }
    if (out_dir.empty()) throw ConfigError("experiment: out_dir must be nonempty");
}

nlohmann::json to_json(const ExperimentConfig& c) {
    return nlohmann::json{{"sim", to_json(c.sim)},
                          {"gammas", c.gammas},
                          {"train_patients", c.train_patients},
                          {"val_patients", c.val_patients},
                          {"test_patients", c.test_patients},
                          {"model", to_json(c.model)},
                          {"hyper", to_json(c.hyper)},
                          {"schedule", schedule_to_json(c.kind, c.steps)},
                          {"eval", eval_to_json(c.eval)},
                          {"lr0_grid", c.lr0_grid},
                          {"embed_dim_grid", c.embed_dim_grid},
                          {"seeds", c.seeds},
                          {"out_dir", c.out_dir}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j,
                                             const ExperimentConfig& base) {
    ExperimentConfig c = base;
    detail::JsonReader r(j, "experiment config");
    nlohmann::json sub;
    r.get("sim", sub);
    if (!sub.is_null()) c.sim = sim_config_from_json(sub, base.sim);
    r.get("gammas", c.gammas);
    r.get("train_patients", c.train_patients);
    r.get("val_patients", c.val_patients);
    r.get("test_patients", c.test_patients);
    sub = nlohmann::json();
    r.get("model", sub);
    if (!sub.is_null()) c.model = denoiser_config_from_json(sub, base.model);
    sub = nlohmann::json();
    r.get("hyper", sub);
    if (!sub.is_null()) c.hyper = train_hyper_from_json(sub, base.hyper);
    sub = nlohmann::json();
    r.get("schedule", sub);
    if (!sub.is_null()) schedule_from_json(sub, c.kind, c.steps);
    sub = nlohmann::json();
    r.get("eval", sub);
    if (!sub.is_null()) c.eval = eval_from_json(sub, base.eval);
    r.get("lr0_grid", c.lr0_grid);
    r.get("embed_dim_grid", c.embed_dim_grid);
    r.get("seeds", c.seeds);
    r.get("out_dir", c.out_dir);
    r.finish();
    return c;
}

ExperimentConfig load_experiment_config(const fs::path& path, const ExperimentConfig& base) {
    const std::string text = detail::read_text_file(path);
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded())
        throw ConfigError("config file is not valid JSON: " + path.string());
    return experiment_config_from_json(j, base);
}

// ---------------------------------------------------------------------------
// Point paths
// ---------------------------------------------------------------------------

PointPaths point_paths(const ExperimentConfig& cfg, double gamma, std::uint64_t seed) {
    PointPaths p;
    p.sim_hash = config_hash(sim_point_json(cfg, gamma, seed));
    p.full_hash = config_hash(full_point_json(cfg, gamma, seed));
    const std::string tail =
        "_g" + format_gamma(gamma) + "_s" + std::to_string(seed) + "_";
    const fs::path root(cfg.out_dir);
    p.sim_dir = root / ("sim" + tail + p.sim_hash.substr(0, 8));
    p.run_dir = root / ("run" + tail + p.full_hash.substr(0, 8));
    p.train_cohort = p.sim_dir / "train.cohort";
    p.val_cohort = p.sim_dir / "val.cohort";
    p.test_cohort = p.sim_dir / "test.cohort";
    p.cells = p.sim_dir / "cells.cdc";
    p.manifest = p.sim_dir / "manifest.json";
    p.checkpoint = p.run_dir / "model.ckpt";
    p.loss_csv = p.run_dir / "loss.csv";
    p.results_csv = p.run_dir / "results.csv";
    p.timings_csv = p.run_dir / "timings.csv";
    return p;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

namespace {

bool simulate_is_cached(const PointPaths& p) {
    if (!fs::exists(p.manifest)) return false;
    nlohmann::json m = nlohmann::json::parse(detail::read_text_file(p.manifest),
                                             nullptr, false);
    if (m.is_discarded() || !m.is_object()) return false;
    if (m.value("sim_hash", std::string()) != p.sim_hash) return false;
    return fs::exists(p.train_cohort) && fs::exists(p.val_cohort) &&
           fs::exists(p.test_cohort) && fs::exists(p.cells);
}

} // namespace

void run_simulate(const ExperimentConfig& cfg, double gamma, std::uint64_t seed) {
    cfg.validate();
    const SimConfig sim = sim_with_gamma(cfg, gamma);
    sim.validate();
    const PointPaths p = point_paths(cfg, gamma, seed);
    const auto t0 = std::chrono::steady_clock::now();
    if (simulate_is_cached(p)) {
        log(point_label("simulate", gamma, seed) + ": cached");
        return;
    }
    fs::create_directories(p.sim_dir);

    const std::uint64_t train_seed = derive_seed(seed, kCohortTag, 0);
    const std::uint64_t val_seed = derive_seed(seed, kCohortTag, 1);
    const std::uint64_t test_seed = derive_seed(seed, kCohortTag, 2);
    const Cohort train = simulate_cohort(sim, cfg.train_patients, train_seed);
    const Cohort val = simulate_cohort(sim, cfg.val_patients, val_seed);
    const Cohort test = simulate_cohort(sim, cfg.test_patients, test_seed);
    write_cohort(p.train_cohort, train, sim, train_seed);
    write_cohort(p.val_cohort, val, sim, val_seed);
    write_cohort(p.test_cohort, test, sim, test_seed);

    // Ground-truth counterfactual cells for every (test patient, t, choice):
    // per patient a [active_len - 2, 4, truth_samples] tensor, row t - 1
    // holding the four choice distributions of V_{t+1}. Only in-horizon
    // transitions are covered (t + 1 must be a recorded index): the
    // observational record never contains a target beyond the last recorded
    // step, so no model trained on it has support there.
    const int s_truth = cfg.eval.truth_samples;
    Container cells;
    cells.meta = {{"type", "cells"},
                  {"gamma", gamma},
                  {"seed", seed},
                  {"truth_samples", s_truth},
                  {"sim_hash", p.sim_hash}};
    for (int i = 0; i < test.size(); ++i) {
        const Trajectory& traj = test.trajectories[static_cast<std::size_t>(i)];
        const PatientParams& pp = test.params[static_cast<std::size_t>(i)];
        const int n_t = std::max(0, traj.active_len - 2);
        Tensor tens(Dtype::f64, {static_cast<std::uint64_t>(n_t), 4,
                                 static_cast<std::uint64_t>(s_truth)});
        Rng trng(derive_seed(seed, kTruthTag, static_cast<std::uint64_t>(i)));
        for (int t = 1; t <= traj.active_len - 2; ++t) {
            const auto four = counterfactual_samples(traj, t, pp, sim, s_truth, trng);
            for (const CounterfactualCell& cell : four) {
                const std::size_t base =
                    (static_cast<std::size_t>(t - 1) * 4 +
                     static_cast<std::size_t>(cell.choice)) *
                    static_cast<std::size_t>(s_truth);
                double* dst = reinterpret_cast<double*>(tens.raw().data());
                std::copy(cell.samples.begin(), cell.samples.end(), dst + base);
            }
        }
        cells.add("p" + std::to_string(i), std::move(tens));
    }
    write_container(p.cells, cells);

    nlohmann::json manifest{
        {"type", "manifest"},
        {"gamma", gamma},
        {"seed", seed},
        {"sim_hash", p.sim_hash},
        {"config", sim_point_json(cfg, gamma, seed)},
        {"files",
         {{"train", "train.cohort"},
          {"val", "val.cohort"},
          {"test", "test.cohort"},
          {"cells", "cells.cdc"}}},
        {"patients",
         {{"train", train.size()}, {"val", val.size()}, {"test", test.size()}}}};
    detail::atomic_write_text(p.manifest, manifest.dump(2) + "\n");
    const double secs = elapsed(t0);
    record_timing(p.timings_csv, "simulate", secs);
    log(point_label("simulate", gamma, seed) + detail::strf(": %d+%d+%d patients in %.1fs",
                                                            train.size(), val.size(),
                                                            test.size(), secs));
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace {

std::string loss_history_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,train_loss,val_loss,lr\n";
    for (const EpochStats& e : history)
        out += detail::strf("%d,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss,
                            e.val_loss, e.lr);
    return out;
}

struct TrainJob {
    DenoiserConfig model;
    TrainHyper hyper;
};

bool checkpoint_matches(const Checkpoint& ck, const TrainJob& job, ScheduleKind kind,
                        int steps, std::uint64_t seed) {
    return to_json(ck.model_cfg) == to_json(job.model) &&
           to_json(ck.hyper) == to_json(job.hyper) && ck.kind == kind &&
           ck.steps == steps && ck.seed == seed;
}

} // namespace

void run_train(const ExperimentConfig& cfg, double gamma, std::uint64_t seed) {
    cfg.validate();
    const PointPaths p = point_paths(cfg, gamma, seed);
    const auto t0 = std::chrono::steady_clock::now();

    // Cache: a finished checkpoint in this hash-keyed directory is final.
    if (fs::exists(p.checkpoint)) {
        const Checkpoint ck = load_checkpoint(p.checkpoint);
        if (ck.tstate.epochs_done >= ck.hyper.epochs && fs::exists(p.loss_csv)) {
            log(point_label("train", gamma, seed) + ": cached");
            return;
        }
    }

    require_file(p.train_cohort, "training cohort (run simulate first)");
    require_file(p.val_cohort, "validation cohort (run simulate first)");
    const SimConfig sim = sim_with_gamma(cfg, gamma);
    const CohortFile train_file = read_cohort(p.train_cohort);
    const CohortFile val_file = read_cohort(p.val_cohort);
    int skipped_train = 0, skipped_val = 0;
    const TrainDataset train = assemble_training_tensor(train_file.cohort, sim, &skipped_train);
    const TrainDataset val = assemble_training_tensor(val_file.cohort, sim, &skipped_val);
    fs::create_directories(p.run_dir);

    // Combination grid; a single combination when no grids are configured.
    std::vector<TrainJob> jobs;
    const std::vector<double> lrs = cfg.lr0_grid.empty()
                                        ? std::vector<double>{cfg.hyper.lr0}
                                        : cfg.lr0_grid;
    const std::vector<int> embeds = cfg.embed_dim_grid.empty()
                                        ? std::vector<int>{cfg.model.embed_dim}
                                        : cfg.embed_dim_grid;
    for (double lr : lrs)
        for (int e : embeds) {
            TrainJob j{effective_model(cfg), cfg.hyper};
            j.model.embed_dim = e;
            j.hyper.lr0 = lr;
            jobs.push_back(j);
        }
    const NoiseSchedule sched = make_schedule(cfg.kind, cfg.steps);

    if (jobs.size() == 1) {
        const TrainJob& job = jobs.front();
        Denoiser model(job.model, seed);
        Trainer trainer(model, sched, job.hyper, seed);
        // Resume an interrupted run from its last per-epoch checkpoint.
        if (fs::exists(p.checkpoint)) {
            const Checkpoint ck = load_checkpoint(p.checkpoint);
            if (checkpoint_matches(ck, job, cfg.kind, cfg.steps, seed) &&
                ck.tstate.epochs_done < ck.hyper.epochs) {
                restore_model(model, ck);
                trainer.load_state(ck.tstate);
            }
        }
        trainer.fit(train, val, [&](const EpochStats& e) {
            save_checkpoint(p.checkpoint, model, trainer.state(), cfg.kind, cfg.steps,
                            job.hyper, seed);
            detail::atomic_write_text(p.loss_csv, loss_history_csv(trainer.state().history));
            log(point_label("train", gamma, seed) +
                detail::strf(": epoch %d/%d train=%.5f val=%.5f lr=%.2g", e.epoch + 1,
                             job.hyper.epochs, e.train_loss, e.val_loss, e.lr));
        });
        save_checkpoint(p.checkpoint, model, trainer.state(), cfg.kind, cfg.steps,
                        job.hyper, seed);
        detail::atomic_write_text(p.loss_csv, loss_history_csv(trainer.state().history));
    } else {
        // Validation-loss-selected grid: train every combination, keep the
        // winner's checkpoint and loss curve.
        std::string grid_csv = "lr0,embed_dim,best_val\n";
        double best = 0.0;
        bool have_best = false;
        for (const TrainJob& job : jobs) {
            Denoiser model(job.model, seed);
            Trainer trainer(model, sched, job.hyper, seed);
            trainer.fit(train, val);
            const double score = trainer.state().best_val;
            grid_csv += detail::strf("%.17g,%d,%.17g\n", job.hyper.lr0,
                                     job.model.embed_dim, score);
            if (!have_best || score < best) {
                best = score;
                have_best = true;
                save_checkpoint(p.checkpoint, model, trainer.state(), cfg.kind,
                                cfg.steps, job.hyper, seed);
                detail::atomic_write_text(p.loss_csv,
                                          loss_history_csv(trainer.state().history));
            }
        }
        detail::atomic_write_text(p.run_dir / "grid.csv", grid_csv);
    }
    const double secs = elapsed(t0);
    record_timing(p.timings_csv, "train", secs);
    log(point_label("train", gamma, seed) + detail::strf(": done in %.1fs", secs));
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

std::vector<ResultRow> evaluate_cells(const ExperimentConfig& cfg, double gamma,
                                      std::uint64_t seed, const CellSampler& sampler) {
    cfg.validate();
    const PointPaths p = point_paths(cfg, gamma, seed);
    require_file(p.test_cohort, "test cohort (run simulate first)");
    require_file(p.cells, "counterfactual cells (run simulate first)");
    const SimConfig sim = sim_with_gamma(cfg, gamma);
    const CohortFile test = read_cohort(p.test_cohort);
    const Container cells = read_container(p.cells);
    if (cells.meta.value("type", std::string()) != "cells")
        throw FormatError("not a cells file: " + p.cells.string());
    if (cells.meta.value("truth_samples", -1) != cfg.eval.truth_samples)
        throw FormatError("cells file has truth_samples " +
                          cells.meta.value("truth_samples", nlohmann::json()).dump() +
                          ", config wants " + std::to_string(cfg.eval.truth_samples));

    const int n_total = test.cohort.size();
    const int n_eval = cfg.eval.max_patients > 0
                           ? std::min(cfg.eval.max_patients, n_total)
                           : n_total;
    const int s_truth = cfg.eval.truth_samples;
    EvalCells scored;
    std::vector<std::string> gaps;
    for (int i = 0; i < n_eval; ++i) {
        const Trajectory& traj = test.cohort.trajectories[static_cast<std::size_t>(i)];
        const PatientParams& pp = test.cohort.params[static_cast<std::size_t>(i)];
        const std::string name = "p" + std::to_string(i);
        if (!cells.has(name)) {
            gaps.push_back(name);
            continue;
        }
        const Tensor& tens = cells.at(name);
        const int n_t = traj.active_len - 2;
        if (tens.dims().size() != 3 ||
            tens.dims()[0] != static_cast<std::uint64_t>(std::max(0, n_t)) ||
            tens.dims()[1] != 4 ||
            tens.dims()[2] != static_cast<std::uint64_t>(s_truth)) {
            gaps.push_back(name + " (wrong shape)");
            continue;
        }
        const std::vector<double> flat = tens.as_f64();
        for (int t = 1; t <= n_t; t += cfg.eval.time_stride) {
            for (int ci = 0; ci < 4; ++ci) {
                const TreatmentChoice choice = kAllChoices[static_cast<std::size_t>(ci)];
                Rng rng(derive_seed(seed, kEvalTag, static_cast<std::uint64_t>(i),
                                    static_cast<std::uint64_t>(t) * 4 +
                                        static_cast<std::uint64_t>(ci)));
                std::vector<double> pred = sampler(traj, pp, i, t, choice, rng);
                if (static_cast<int>(pred.size()) != cfg.eval.model_samples)
                    throw ConfigError("evaluate: sampler returned " +
                                      std::to_string(pred.size()) + " samples, expected " +
                                      std::to_string(cfg.eval.model_samples));
                const std::size_t base =
                    (static_cast<std::size_t>(t - 1) * 4 + static_cast<std::size_t>(ci)) *
                    static_cast<std::size_t>(s_truth);
                scored.pred.push_back(std::move(pred));
                scored.truth.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(base),
                                          flat.begin() +
                                              static_cast<std::ptrdiff_t>(base + s_truth));
                scored.mask.push_back(1);
                if (scored.pred.size() % 500 == 0)
                    log(point_label("evaluate", gamma, seed) + ": " +
                        std::to_string(scored.pred.size()) + " cells scored");
            }
        }
    }
    if (!gaps.empty()) {
        std::string msg = "evaluate: cells file is missing required cells:";
        for (const std::string& g : gaps) msg += " " + g;
        throw FormatError(msg);
    }
    if (scored.pred.empty())
        throw ConfigError("evaluate: the configured subset selects no cells");

    std::vector<ResultRow> rows;
    const double levels[3] = {0.025, 0.5, 0.975};
    const char* names[3] = {"rmse_q025", "rmse_median", "rmse_q975"};
    for (int q = 0; q < 3; ++q) {
        ResultRow r;
        r.gamma = gamma;
        r.seed = seed;
        r.config_hash = p.full_hash;
        r.metric = names[q];
        r.value = rmse_from_quantile(scored, levels[q], sim.v_max);
        rows.push_back(r);
    }
    ResultRow w;
    w.gamma = gamma;
    w.seed = seed;
    w.config_hash = p.full_hash;
    w.metric = "w1";
    w.value = wasserstein1(scored, 100, sim.v_max);
    rows.push_back(w);
    return rows;
}

std::vector<ResultRow> run_evaluate(const ExperimentConfig& cfg, double gamma,
                                    std::uint64_t seed) {
    cfg.validate();
    const PointPaths p = point_paths(cfg, gamma, seed);
    if (fs::exists(p.results_csv)) {
        log(point_label("evaluate", gamma, seed) + ": cached");
        return read_result_csv(p.results_csv);
    }
    require_file(p.checkpoint, "checkpoint (run train first)");
    const auto t0 = std::chrono::steady_clock::now();

    const Checkpoint ck = load_checkpoint(p.checkpoint);
    Denoiser model(ck.model_cfg, 1);
    restore_model(model, ck);
    const NoiseSchedule sched = make_schedule(ck.kind, ck.steps);
    const SimConfig sim = sim_with_gamma(cfg, gamma);
    const int n_samples = cfg.eval.model_samples;
    const double v_max = sim.v_max;

    const CellSampler cdm_sampler = [&](const Trajectory& traj, const PatientParams& pp,
                                        int, int t, TreatmentChoice choice, Rng& rng) {
        const EvalTensor et = assemble_eval_tensor(traj, pp, sim, t, choice);
        const std::vector<double> slabs = sample_reverse(
            model, et.data.data(), et.mask.data(), et.len, sched, n_samples, rng);
        const std::size_t slab = static_cast<std::size_t>(et.len) * kNumChannels;
        const std::size_t target = static_cast<std::size_t>(t + 1) * kNumChannels;
        std::vector<double> out(static_cast<std::size_t>(n_samples));
        for (int s = 0; s < n_samples; ++s) {
            // Denormalize and clamp to the simulator's volume support.
            const double v = slabs[static_cast<std::size_t>(s) * slab + target] * v_max;
            out[static_cast<std::size_t>(s)] = std::clamp(v, 0.0, v_max);
        }
        return out;
    };
    std::vector<ResultRow> rows = evaluate_cells(cfg, gamma, seed, cdm_sampler);
    const double secs = elapsed(t0);
    for (ResultRow& r : rows) r.wall_s = secs;
    fs::create_directories(p.run_dir);
    write_result_csv(p.results_csv, rows);
    record_timing(p.timings_csv, "evaluate", secs);
    std::string summary = point_label("evaluate", gamma, seed) + ":";
    for (const ResultRow& r : rows) summary += " " + r.metric + detail::strf("=%.4f", r.value);
    log(summary + detail::strf(" (%.1fs)", secs));
    return rows;
}

std::vector<ResultRow> run_point(const ExperimentConfig& cfg, double gamma,
                                 std::uint64_t seed) {
    run_simulate(cfg, gamma, seed);
    run_train(cfg, gamma, seed);
    return run_evaluate(cfg, gamma, seed);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

bool CommandResult::all_ok() const {
    for (const PointOutcome& p : points)
        if (!p.ok) return false;
    return true;
}

namespace {

using StageFn = std::function<std::vector<ResultRow>(const ExperimentConfig&, double,
                                                     std::uint64_t)>;

// Shared grid loop. isolate = capture per-point failures instead of
// propagating the first one.
CommandResult run_grid(const ExperimentConfig& cfg, const StageFn& stage, bool isolate,
                       const std::string& variant = std::string()) {
    cfg.validate();
    CommandResult res;
    for (double gamma : cfg.gammas)
        for (std::uint64_t seed : cfg.seeds) {
            PointOutcome out;
            out.variant = variant;
            out.gamma = gamma;
            out.seed = seed;
            if (isolate) {
                try {
                    out.rows = stage(cfg, gamma, seed);
                    out.ok = true;
                } catch (const std::exception& e) {
                    out.ok = false;
                    out.error = e.what();
                }
            } else {
                out.rows = stage(cfg, gamma, seed);
                out.ok = true;
            }
            res.points.push_back(std::move(out));
        }
    return res;
}

std::vector<ResultRow> collect_rows(const CommandResult& res) {
    std::vector<ResultRow> rows;
    for (const PointOutcome& p : res.points)
        rows.insert(rows.end(), p.rows.begin(), p.rows.end());
    return rows;
}

std::vector<PointOutcome> collect_failures(const CommandResult& res) {
    std::vector<PointOutcome> f;
    for (const PointOutcome& p : res.points)
        if (!p.ok) f.push_back(p);
    return f;
}

void write_failures(const fs::path& out_root, const std::vector<PointOutcome>& failures) {
    const fs::path path = out_root / "failures.txt";
    if (failures.empty()) {
        fs::remove(path);
        return;
    }
    std::string text;
    for (const PointOutcome& p : failures) {
        if (!p.variant.empty()) text += "variant=" + p.variant + " ";
        text += "gamma=" + format_gamma(p.gamma) + " seed=" + std::to_string(p.seed) +
                ": " + p.error + "\n";
    }
    detail::atomic_write_text(path, text);
}

// Gathers per-point stage timings into one root CSV (informational only;
// excluded from the byte-determinism guarantee).
void write_root_timings(const fs::path& out_root,
                        const std::vector<std::tuple<std::string, double, std::uint64_t,
                                                     fs::path>>& points) {
    std::string text = "variant,gamma,seed,stage,wall_s\n";
    for (const auto& [variant, gamma, seed, timings] : points) {
        if (!fs::exists(timings)) continue;
        std::istringstream is(detail::read_text_file(timings));
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line))
            if (!line.empty())
                text += variant + "," + format_gamma(gamma) + "," +
                        std::to_string(seed) + "," + line + "\n";
    }
    detail::atomic_write_text(out_root / "timings.csv", text);
}

} // namespace

CommandResult cmd_simulate(const ExperimentConfig& cfg) {
    return run_grid(cfg,
                    [](const ExperimentConfig& c, double g, std::uint64_t s) {
                        run_simulate(c, g, s);
                        return std::vector<ResultRow>{};
                    },
                    false);
}

CommandResult cmd_train(const ExperimentConfig& cfg) {
    return run_grid(cfg,
                    [](const ExperimentConfig& c, double g, std::uint64_t s) {
                        run_train(c, g, s);
                        return std::vector<ResultRow>{};
                    },
                    false);
}

CommandResult cmd_evaluate(const ExperimentConfig& cfg) {
    return run_grid(cfg, run_evaluate, false);
}

CommandResult cmd_sweep(const ExperimentConfig& cfg) {
    CommandResult res = run_grid(cfg, run_point, true);
    const fs::path root(cfg.out_dir);
    fs::create_directories(root);
    write_result_csv(root / "results.csv", collect_rows(res));
    write_failures(root, collect_failures(res));
    std::vector<std::tuple<std::string, double, std::uint64_t, fs::path>> timing_points;
    for (double g : cfg.gammas)
        for (std::uint64_t s : cfg.seeds)
            timing_points.emplace_back("", g, s, point_paths(cfg, g, s).timings_csv);
    write_root_timings(root, timing_points);
    res.outputs = cmd_report(root);
    res.outputs.insert(res.outputs.begin(), root / "results.csv");
    return res;
}

std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base) {
    std::vector<AblationVariant> v;
    v.push_back({"full", base});
    {
        ExperimentConfig c = base;
        c.steps = 20;
        v.push_back({"steps_20", c});
    }
    {
        ExperimentConfig c = base;
        c.kind = ScheduleKind::linear;
        v.push_back({"linear_schedule", c});
    }
    {
        ExperimentConfig c = base;
        c.model.residual_layers = base.model.residual_layers + 1;
        v.push_back({"residual_3", c});
    }
    {
        ExperimentConfig c = base;
        c.model.embed_dim = 8;
        v.push_back({"embed_8", c});
    }
    {
        ExperimentConfig c = base;
        c.model.backbone = Backbone::mlp;
        v.push_back({"mlp_backbone", c});
    }
    return v;
}

CommandResult cmd_ablate(const ExperimentConfig& cfg) {
    cfg.validate();
    // Single-seed study (the first configured seed), matching the published
    // single-seed ablation protocol.
    ExperimentConfig base = cfg;
    base.seeds = {cfg.seeds.front()};
    CommandResult res;
    std::vector<std::pair<std::string, ResultRow>> tagged;
    std::vector<std::tuple<std::string, double, std::uint64_t, fs::path>> timing_points;
    for (const AblationVariant& variant : ablation_variants(base)) {
        CommandResult one = run_grid(variant.cfg, run_point, true, variant.name);
        for (PointOutcome& p : one.points) {
            for (const ResultRow& r : p.rows) tagged.emplace_back(variant.name, r);
            res.points.push_back(std::move(p));
        }
        for (double g : variant.cfg.gammas)
            timing_points.emplace_back(variant.name, g, base.seeds.front(),
                                       point_paths(variant.cfg, g, base.seeds.front())
                                           .timings_csv);
    }
    const fs::path root(cfg.out_dir);
    fs::create_directories(root);
    write_ablation_csv(root / "ablation.csv", tagged);
    write_failures(root, collect_failures(res));
    write_root_timings(root, timing_points);
    res.outputs = cmd_report(root);
    res.outputs.insert(res.outputs.begin(), root / "ablation.csv");
    return res;
}

CommandResult cmd_seedvar(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.seeds.size() < 2)
        throw ConfigError("seedvar: at least 2 seeds are required, got " +
                          std::to_string(cfg.seeds.size()));
    CommandResult res = run_grid(cfg, run_point, true);
    const fs::path root(cfg.out_dir);
    fs::create_directories(root);
    write_result_csv(root / "seedvar.csv", collect_rows(res));
    write_failures(root, collect_failures(res));
    std::vector<std::tuple<std::string, double, std::uint64_t, fs::path>> timing_points;
    for (double g : cfg.gammas)
        for (std::uint64_t s : cfg.seeds)
            timing_points.emplace_back("", g, s, point_paths(cfg, g, s).timings_csv);
    write_root_timings(root, timing_points);
    res.outputs = cmd_report(root);
    res.outputs.insert(res.outputs.begin(), root / "seedvar.csv");
    return res;
}

} // namespace cdm
