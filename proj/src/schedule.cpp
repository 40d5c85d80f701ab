#include "cdm/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "cdm/errors.hpp"

namespace cdm {

namespace {

constexpr double kCosineOffset = 0.008;
constexpr double kBetaClipLo = 1e-5;
constexpr double kBetaClipHi = 0.999;
constexpr double kLinearBetaLo = 1e-4;
constexpr double kLinearBetaHi = 0.5;

double cosine_f(int k, int steps) {
    const double pi = std::acos(-1.0);
    const double arg =
        ((static_cast<double>(k) / steps + kCosineOffset) / (1.0 + kCosineOffset)) * pi / 2.0;
    const double c = std::cos(arg);
    return c * c;
}

} // namespace

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear") return ScheduleKind::linear;
    throw ConfigError("unknown schedule kind: '" + s + "' (expected cosine|linear)");
}

std::string to_string(ScheduleKind kind) {
    return kind == ScheduleKind::cosine ? "cosine" : "linear";
}

double NoiseSchedule::beta(int k) const {
    if (k < 1 || k > steps) throw std::out_of_range("NoiseSchedule::beta: k out of range");
    return betas[static_cast<std::size_t>(k) - 1];
}

double NoiseSchedule::alpha_bar(int k) const {
    if (k < 0 || k > steps) throw std::out_of_range("NoiseSchedule::alpha_bar: k out of range");
    return alpha_bars[static_cast<std::size_t>(k)];
}

NoiseSchedule make_schedule(ScheduleKind kind, int steps) {
    if (steps < 1) throw ConfigError("make_schedule: steps must be >= 1");

    NoiseSchedule sched;
    sched.kind = kind;
    sched.steps = steps;
    sched.betas.resize(static_cast<std::size_t>(steps));

    if (kind == ScheduleKind::cosine) {
        const double f0 = cosine_f(0, steps);
        double ab_prev = 1.0; // f(0)/f(0)
        for (int k = 1; k <= steps; ++k) {
            const double ab_k = cosine_f(k, steps) / f0;
            const double beta = 1.0 - ab_k / ab_prev;
            sched.betas[static_cast<std::size_t>(k) - 1] =
                std::clamp(beta, kBetaClipLo, kBetaClipHi);
            ab_prev = ab_k;
        }
    } else {
        for (int k = 0; k < steps; ++k) {
            const double frac = steps > 1 ? static_cast<double>(k) / (steps - 1) : 0.0;
            sched.betas[static_cast<std::size_t>(k)] =
                kLinearBetaLo + (kLinearBetaHi - kLinearBetaLo) * frac;
        }
    }

    // Cumulative products derived from the (possibly clipped) betas, so the
    // invariant alpha_bars[k] = prod(1 - beta_j) holds exactly.
    sched.alpha_bars.resize(static_cast<std::size_t>(steps) + 1);
    sched.alpha_bars[0] = 1.0;
    for (int k = 1; k <= steps; ++k) {
        sched.alpha_bars[static_cast<std::size_t>(k)] =
            sched.alpha_bars[static_cast<std::size_t>(k) - 1] *
            (1.0 - sched.betas[static_cast<std::size_t>(k) - 1]);
    }
    return sched;
}

} // namespace cdm
