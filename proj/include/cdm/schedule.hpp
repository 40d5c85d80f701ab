#pragma once

#include <string>
#include <vector>

namespace cdm {

enum class ScheduleKind { cosine, linear };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind kind);

// Variance schedule for a K-step diffusion process.
//
// betas[k-1] is the per-step variance beta_k for k = 1..K.
// alpha_bars[k] is the cumulative product prod_{j<=k} (1 - beta_j), with the
// k = 0 convention alpha_bars[0] = 1 so that noising at k = 0 is the identity.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::cosine;
    int steps = 0; // K

    std::vector<double> betas;      // size K
    std::vector<double> alpha_bars; // size K + 1

    double beta(int k) const;      // k in [1, K]
    double alpha_bar(int k) const; // k in [0, K]
};

// Builds a schedule of the requested kind.
//
// cosine: the squared-cosine cumulative schedule, alpha_bar_k = f(k)/f(0) with
//   f(k) = cos^2(((k/K + s) / (1 + s)) * pi/2), s = 0.008, converted to
//   per-step betas via beta_k = 1 - alpha_bar_k / alpha_bar_{k-1} and clipped
//   into (1e-5, 0.999). alpha_bars are then recomputed from the clipped betas
//   so the stored arrays stay mutually consistent.
// linear: betas linearly spaced from 1e-4 to 0.5 (K = 1 degenerates to 1e-4).
//
// Throws ConfigError for steps < 1.
NoiseSchedule make_schedule(ScheduleKind kind, int steps);

} // namespace cdm
