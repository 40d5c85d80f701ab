#include "cdm/sim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cdm/errors.hpp"

namespace cdm {

namespace {

constexpr std::uint64_t kPatientStreamTag = 0x70617469ull; // "pati"
constexpr int kRejectionCap = 1000000;

// Cholesky factor of the 3x3 equicorrelation matrix with off-diagonal r.
struct Chol3 {
    double l11, l21, l22, l31, l32, l33;
};

Chol3 equicorr_chol(double r) {
    Chol3 c{};
    c.l11 = 1.0;
    c.l21 = r;
    c.l22 = std::sqrt(1.0 - r * r);
    c.l31 = r;
    c.l32 = (r - r * r) / c.l22;
    c.l33 = std::sqrt(1.0 - c.l31 * c.l31 - c.l32 * c.l32);
    return c;
}

} // namespace

bool choice_has_chemo(TreatmentChoice c) {
    return c == TreatmentChoice::chemo || c == TreatmentChoice::both;
}

bool choice_has_radio(TreatmentChoice c) {
    return c == TreatmentChoice::radio || c == TreatmentChoice::both;
}

std::string to_string(TreatmentChoice c) {
    switch (c) {
        case TreatmentChoice::none: return "none";
        case TreatmentChoice::chemo: return "chemo";
        case TreatmentChoice::radio: return "radio";
        case TreatmentChoice::both: return "both";
    }
    return "?";
}

SimConfig SimConfig::defaults() {
    SimConfig cfg;
    cfg.k_cc = volume_from_diameter(30.0);  // ~14137.17 cm^3
    cfg.v_max = volume_from_diameter(13.0); // ~1150.35 cm^3
    cfg.v0_max = 0.95 * cfg.v_max;
    // Stage-conditional initial volumes: log-space means chosen so median
    // diameters step up roughly 2.4 -> 3.4 -> 4.7 -> 6.5 cm across stages.
    cfg.stage_init = {StageInit{1.9, 0.6}, StageInit{2.9, 0.6},
                      StageInit{3.8, 0.6}, StageInit{4.6, 0.6}};
    return cfg;
}

void SimConfig::validate() const {
    if (!(k_cc > 0.0)) throw ConfigError("sim: k_cc must be positive");
    if (!(v_max > 0.0)) throw ConfigError("sim: v_max must be positive");
    if (!(v_max < k_cc)) throw ConfigError("sim: v_max must be below k_cc");
    if (noise_sd < 0.0) throw ConfigError("sim: noise_sd must be >= 0");
    if (horizon < 1) throw ConfigError("sim: horizon must be >= 1");
    if (window < 1) throw ConfigError("sim: window must be >= 1");
    if (gamma_chemo < 0.0 || gamma_radio < 0.0)
        throw ConfigError("sim: gamma must be >= 0");
    if (chemo_half_life <= 0.0) throw ConfigError("sim: chemo_half_life must be positive");
    if (chemo_dose < 0.0 || radio_dose < 0.0) throw ConfigError("sim: doses must be >= 0");
    if (recover_prob < 0.0 || recover_prob > 1.0)
        throw ConfigError("sim: recover_prob must be in [0, 1]");
    double wsum = 0.0;
    for (double w : stage_weights) {
        if (w < 0.0) throw ConfigError("sim: stage weights must be >= 0");
        wsum += w;
    }
    if (!(wsum > 0.0)) throw ConfigError("sim: stage weights must not all be zero");
    for (const StageInit& si : stage_init)
        if (si.sigma_log < 0.0) throw ConfigError("sim: stage sigma_log must be >= 0");
    if (!(v0_min > 0.0) || !(v0_max > v0_min))
        throw ConfigError("sim: initial-volume truncation must satisfy 0 < v0_min < v0_max");
    if (v0_max > v_max) throw ConfigError("sim: v0_max must not exceed v_max");
    if (rho_sd < 0.0 || alpha_sd < 0.0 || beta_c_sd < 0.0)
        throw ConfigError("sim: parameter sds must be >= 0");
    if (param_corr <= -0.5 || param_corr >= 1.0)
        throw ConfigError("sim: param_corr must lie in (-0.5, 1) for a valid covariance");
    if (beta_alpha_ratio < 0.0) throw ConfigError("sim: beta_alpha_ratio must be >= 0");
}

double diameter_from_volume(double v) {
    return std::cbrt(6.0 * v / std::acos(-1.0));
}

double volume_from_diameter(double d) {
    return std::acos(-1.0) * d * d * d / 6.0;
}

double treatment_prob(double avg_diameter, double gamma, double intercept) {
    return 1.0 / (1.0 + std::exp(-gamma * (avg_diameter - intercept)));
}

double tumor_step(double v, double chemo_conc, double radio_dose,
                  const PatientParams& p, const SimConfig& cfg, double eps) {
    if (!(v > 0.0)) throw NumericError("tumor_step: volume must be positive");
    const double growth = p.rho * std::log(cfg.k_cc / v);
    const double chemo_kill = p.beta_c * chemo_conc;
    const double radio_kill = p.alpha * radio_dose + p.beta * radio_dose * radio_dose;
    const double next = v * (1.0 + growth - chemo_kill - radio_kill + eps);
    return std::clamp(next, 0.0, cfg.v_max);
}

PatientParams sample_patient(const SimConfig& cfg, Rng& rng) {
    PatientParams p;

    // Stage: categorical over normalized weights.
    double wsum = 0.0;
    for (double w : cfg.stage_weights) wsum += w;
    const double u = rng.uniform() * wsum;
    double acc = 0.0;
    p.stage = 4;
    for (int s = 0; s < 4; ++s) {
        acc += cfg.stage_weights[static_cast<std::size_t>(s)];
        if (u < acc) {
            p.stage = s + 1;
            break;
        }
    }

    // Initial volume: truncated lognormal for the drawn stage.
    const StageInit& si = cfg.stage_init[static_cast<std::size_t>(p.stage - 1)];
    if (si.sigma_log == 0.0) {
        p.v0 = std::exp(si.mu_log);
        if (p.v0 < cfg.v0_min || p.v0 > cfg.v0_max)
            throw ConfigError("sample_patient: point-mass v0 falls outside truncation bounds");
    } else {
        int tries = 0;
        for (;;) {
            p.v0 = std::exp(rng.normal(si.mu_log, si.sigma_log));
            if (p.v0 >= cfg.v0_min && p.v0 <= cfg.v0_max) break;
            if (++tries >= kRejectionCap)
                throw ConfigError("sample_patient: initial-volume rejection did not terminate");
        }
    }

    // Response parameters: equicorrelated normal, redrawn until positive.
    const Chol3 L = equicorr_chol(cfg.param_corr);
    int tries = 0;
    for (;;) {
        const double n1 = rng.normal();
        const double n2 = rng.normal();
        const double n3 = rng.normal();
        const double z1 = L.l11 * n1;
        const double z2 = L.l21 * n1 + L.l22 * n2;
        const double z3 = L.l31 * n1 + L.l32 * n2 + L.l33 * n3;
        p.rho = cfg.rho_mean + cfg.rho_sd * z1;
        p.alpha = cfg.alpha_mean + cfg.alpha_sd * z2;
        p.beta_c = cfg.beta_c_mean + cfg.beta_c_sd * z3;
        if (p.rho > 0.0 && p.alpha > 0.0 && p.beta_c > 0.0) break;
        if (++tries >= kRejectionCap)
            throw ConfigError("sample_patient: parameter rejection did not terminate");
    }
    p.beta = p.alpha * cfg.beta_alpha_ratio;
    return p;
}

Trajectory simulate_factual(const PatientParams& p, const SimConfig& cfg, Rng& rng) {
    Trajectory traj;
    traj.volumes.reserve(static_cast<std::size_t>(cfg.horizon));
    traj.chemo_applied.reserve(static_cast<std::size_t>(cfg.horizon));
    traj.radio_applied.reserve(static_cast<std::size_t>(cfg.horizon));
    traj.chemo_conc.reserve(static_cast<std::size_t>(cfg.horizon));

    const double decay = std::pow(2.0, -1.0 / cfg.chemo_half_life);
    double v = p.v0;
    double conc_prev = 0.0;
    // Running sum of diameters over the sliding window.
    double diam_sum = 0.0;

    for (int t = 0; t < cfg.horizon; ++t) {
        traj.volumes.push_back(v);
        diam_sum += diameter_from_volume(v);
        if (t >= cfg.window)
            diam_sum -= diameter_from_volume(traj.volumes[static_cast<std::size_t>(t - cfg.window)]);
        const int in_window = std::min(t + 1, cfg.window);
        const double avg_diam = diam_sum / in_window;

        const bool chemo =
            rng.bernoulli(treatment_prob(avg_diam, cfg.gamma_chemo, cfg.intercept));
        const bool radio =
            rng.bernoulli(treatment_prob(avg_diam, cfg.gamma_radio, cfg.intercept));
        const double conc = conc_prev * decay + cfg.chemo_dose * (chemo ? 1.0 : 0.0);
        const double rdose = cfg.radio_dose * (radio ? 1.0 : 0.0);

        traj.chemo_applied.push_back(chemo ? 1 : 0);
        traj.radio_applied.push_back(radio ? 1 : 0);
        traj.chemo_conc.push_back(conc);

        const double eps = rng.normal(0.0, cfg.noise_sd);
        const double v_next = tumor_step(v, conc, rdose, p, cfg, eps);
        if (v_next >= cfg.v_max) {
            traj.terminal = Trajectory::Terminal::died;
            traj.active_len = t + 1;
            return traj;
        }
        if (v_next <= 0.0) {
            traj.terminal = Trajectory::Terminal::recovered;
            traj.active_len = t + 1;
            return traj;
        }
        if (cfg.recover_prob > 0.0 && rng.bernoulli(cfg.recover_prob)) {
            traj.terminal = Trajectory::Terminal::recovered;
            traj.active_len = t + 1;
            return traj;
        }
        v = v_next;
        conc_prev = conc;
    }
    traj.terminal = Trajectory::Terminal::alive;
    traj.active_len = cfg.horizon;
    return traj;
}

std::array<CounterfactualCell, 4> counterfactual_samples(
    const Trajectory& traj, int t, const PatientParams& p, const SimConfig& cfg,
    int n, Rng& rng) {
    if (t < 1 || t > traj.active_len - 1)
        throw std::out_of_range("counterfactual_samples: t outside [1, active_len - 1]");
    if (n < 1) throw ConfigError("counterfactual_samples: n must be >= 1");

    const double decay = std::pow(2.0, -1.0 / cfg.chemo_half_life);
    const double conc_prev = traj.chemo_conc[static_cast<std::size_t>(t) - 1];
    const double v_t = traj.volumes[static_cast<std::size_t>(t)];

    std::array<CounterfactualCell, 4> cells;
    for (std::size_t ci = 0; ci < kAllChoices.size(); ++ci) {
        const TreatmentChoice choice = kAllChoices[ci];
        const double conc = conc_prev * decay + cfg.chemo_dose * (choice_has_chemo(choice) ? 1.0 : 0.0);
        const double rdose = cfg.radio_dose * (choice_has_radio(choice) ? 1.0 : 0.0);
        CounterfactualCell& cell = cells[ci];
        cell.t = t;
        cell.choice = choice;
        cell.samples.resize(static_cast<std::size_t>(n));
        for (int s = 0; s < n; ++s) {
            const double eps = rng.normal(0.0, cfg.noise_sd);
            cell.samples[static_cast<std::size_t>(s)] = tumor_step(v_t, conc, rdose, p, cfg, eps);
        }
    }
    return cells;
}

Cohort simulate_cohort(const SimConfig& cfg, int n_patients, std::uint64_t seed) {
    cfg.validate();
    if (n_patients < 0) throw ConfigError("simulate_cohort: negative cohort size");
    Cohort cohort;
    cohort.params.resize(static_cast<std::size_t>(n_patients));
    cohort.trajectories.resize(static_cast<std::size_t>(n_patients));
    for (int i = 0; i < n_patients; ++i) {
        Rng rng(derive_seed(seed, kPatientStreamTag, static_cast<std::uint64_t>(i)));
        cohort.params[static_cast<std::size_t>(i)] = sample_patient(cfg, rng);
        cohort.trajectories[static_cast<std::size_t>(i)] =
            simulate_factual(cohort.params[static_cast<std::size_t>(i)], cfg, rng);
    }
    return cohort;
}

} // namespace cdm
