#pragma once

#include <cstdint>
#include <vector>

namespace cdm {

// Quantile of a sorted sample at `level` in [0, 1], midpoint convention:
// position h = level * S + 0.5 on the 1-based order statistics, linearly
// interpolated and clamped to [1, S]. With level = (j - 0.5)/S this returns
// the j-th order statistic exactly.
double quantile_sorted(const std::vector<double>& sorted, double level);

// Quantile vector at the K_q midpoint levels (j - 0.5)/K_q, j = 1..K_q.
// Sorts a copy of the samples. Throws std::invalid_argument on empty input
// or kq < 1.
std::vector<double> quantiles(const std::vector<double>& samples, int kq);

// One distributional prediction cell: model samples vs ground-truth samples
// of the same scalar outcome.
struct EvalCells {
    std::vector<std::vector<double>> pred;  // per cell, model samples
    std::vector<std::vector<double>> truth; // per cell, ground-truth samples
    std::vector<std::uint8_t> mask;         // 1 = include cell
};

// RMSE between the level-quantiles of prediction and truth over masked cells,
// normalized to percent of v_max. Typical levels: 0.025, 0.5, 0.975.
double rmse_from_quantile(const EvalCells& cells, double level, double v_max);

// Per-cell 1-Wasserstein distance approximated on the K_q-point quantile
// grid. With raw_l1 = false (default) the per-cell distance is the mean
// absolute quantile gap (the L1 gap divided by K_q), i.e. a proper W1
// estimate; raw_l1 = true reports the undivided L1 gap. Cell distances are
// averaged over masked cells and normalized to percent of v_max.
double wasserstein1(const EvalCells& cells, int kq, double v_max, bool raw_l1 = false);

} // namespace cdm
