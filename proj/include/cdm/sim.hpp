#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cdm/rng.hpp"

namespace cdm {

// Per-patient PK-PD response parameters. beta (quadratic radiotherapy term) is
// tied to alpha through SimConfig::beta_alpha_ratio.
struct PatientParams {
    double rho = 0.0;    // growth rate
    double alpha = 0.0;  // linear radio response
    double beta = 0.0;   // quadratic radio response
    double beta_c = 0.0; // chemo response
    int stage = 1;       // 1..4
    double v0 = 0.0;     // initial volume, cm^3
};

// Stage-conditional lognormal initial-volume distribution (log-space mean/sd).
struct StageInit {
    double mu_log = 0.0;
    double sigma_log = 0.0;
};

struct SimConfig {
    // Biology / dynamics.
    double k_cc = 0.0;      // carrying capacity, cm^3
    double v_max = 0.0;     // death threshold, cm^3
    double noise_sd = 0.01; // growth noise sd
    int horizon = 30;       // T, steps

    // Treatment assignment policy.
    double gamma_chemo = 0.0; // confounding strength, chemo
    double gamma_radio = 0.0; // confounding strength, radio
    double intercept = 6.5;   // logistic midpoint, cm of averaged diameter
    int window = 15;          // sliding diameter window, steps

    // Pharmacokinetics / dosing.
    double chemo_dose = 5.0;
    double chemo_half_life = 1.0; // steps
    double radio_dose = 2.0;      // Gy

    double recover_prob = 0.0; // spontaneous recovery per step

    // Initial-state distribution.
    std::array<double, 4> stage_weights{0.25, 0.25, 0.25, 0.25};
    std::array<StageInit, 4> stage_init{};
    double v0_min = 0.1; // truncation, cm^3
    double v0_max = 0.0; // truncation, cm^3 (defaults to 0.95 * v_max)

    // Patient-parameter distribution: componentwise means/sds with a shared
    // pairwise correlation, redrawn until all components are positive.
    double rho_mean = 0.015, rho_sd = 0.003;
    double alpha_mean = 0.04, alpha_sd = 0.008;
    double beta_c_mean = 0.028, beta_c_sd = 0.005;
    double param_corr = 0.0;
    double beta_alpha_ratio = 0.1; // beta = alpha * ratio

    static SimConfig defaults();
    void validate() const; // throws ConfigError
};

struct Trajectory {
    std::vector<double> volumes;              // V_t, cm^3; length active_len
    std::vector<std::uint8_t> chemo_applied;  // treatment drawn at step t
    std::vector<std::uint8_t> radio_applied;
    std::vector<double> chemo_conc;           // PK concentration at step t
    int active_len = 0;                       // steps before death/recovery/horizon

    enum class Terminal { alive = 0, died = 1, recovered = 2 };
    Terminal terminal = Terminal::alive;
};

struct Cohort {
    std::vector<PatientParams> params;
    std::vector<Trajectory> trajectories;
    int size() const { return static_cast<int>(trajectories.size()); }
};

// Treatment choices for one step, in fixed enumeration order.
enum class TreatmentChoice { none = 0, chemo = 1, radio = 2, both = 3 };
constexpr std::array<TreatmentChoice, 4> kAllChoices{
    TreatmentChoice::none, TreatmentChoice::chemo, TreatmentChoice::radio, TreatmentChoice::both};
bool choice_has_chemo(TreatmentChoice c);
bool choice_has_radio(TreatmentChoice c);
std::string to_string(TreatmentChoice c);

// Sphere-equivalent conversions between volume (cm^3) and diameter (cm).
double diameter_from_volume(double v);
double volume_from_diameter(double d);

// Logistic treatment probability given an averaged diameter in raw cm.
double treatment_prob(double avg_diameter, double gamma, double intercept);

// One growth step:
//   V' = clamp(V * (1 + rho*log(K_cc/V) - beta_c*conc - (alpha*r + beta*r^2) + eps),
//              0, V_max).
// Requires V > 0 (domain error otherwise).
double tumor_step(double v, double chemo_conc, double radio_dose,
                  const PatientParams& p, const SimConfig& cfg, double eps);

// Draws stage, initial volume (truncated lognormal given stage) and response
// parameters (correlated normal, redrawn until positive).
PatientParams sample_patient(const SimConfig& cfg, Rng& rng);

// Rolls one factual trajectory under the confounded policy. Per step, in
// order: chemo draw, radio draw, growth-noise draw, optional recovery draw.
// The step that would cross a boundary (V_max: death, 0: recovery) terminates
// the trajectory without recording the crossing value.
Trajectory simulate_factual(const PatientParams& p, const SimConfig& cfg, Rng& rng);

struct CounterfactualCell {
    int t = 0;                       // intervention time
    TreatmentChoice choice = TreatmentChoice::none;
    std::vector<double> samples;     // draws of V_{t+1}, cm^3
};

// Ground-truth one-step counterfactual outcome distributions at time t:
// holds the recorded history fixed, overrides the treatment at t with each of
// the four choices, and redraws the growth noise n times through tumor_step.
// Requires 1 <= t <= active_len - 1 (std::out_of_range otherwise).
std::array<CounterfactualCell, 4> counterfactual_samples(
    const Trajectory& traj, int t, const PatientParams& p, const SimConfig& cfg,
    int n, Rng& rng);

// Convenience: samples a full cohort with per-patient derived RNG streams, so
// results are independent of patient evaluation order.
Cohort simulate_cohort(const SimConfig& cfg, int n_patients, std::uint64_t seed);

} // namespace cdm
