#include "cdm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdm {

namespace {

void check_cells(const EvalCells& cells) {
    const std::size_t n = cells.mask.size();
    if (cells.pred.size() != n || cells.truth.size() != n)
        throw std::invalid_argument("metrics: pred/truth/mask sizes disagree");
    std::size_t masked = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!cells.mask[i]) continue;
        ++masked;
        if (cells.pred[i].empty() || cells.truth[i].empty())
            throw std::invalid_argument("metrics: masked cell with no samples");
    }
    if (masked == 0) throw std::invalid_argument("metrics: no masked cells");
}

} // namespace

double quantile_sorted(const std::vector<double>& sorted, double level) {
    if (sorted.empty()) throw std::invalid_argument("quantile: empty sample");
    if (level < 0.0 || level > 1.0) throw std::invalid_argument("quantile: level outside [0, 1]");
    const double s = static_cast<double>(sorted.size());
    double h = level * s + 0.5;
    h = std::clamp(h, 1.0, s);
    const double fl = std::floor(h);
    const std::size_t lo = static_cast<std::size_t>(fl) - 1;
    const double frac = h - fl;
    if (frac == 0.0 || lo + 1 >= sorted.size()) return sorted[lo];
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

std::vector<double> quantiles(const std::vector<double>& samples, int kq) {
    if (kq < 1) throw std::invalid_argument("quantiles: kq must be >= 1");
    if (samples.empty()) throw std::invalid_argument("quantiles: empty sample");
    std::vector<double> sorted(samples);
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> out(static_cast<std::size_t>(kq));
    for (int j = 1; j <= kq; ++j)
        out[static_cast<std::size_t>(j) - 1] =
            quantile_sorted(sorted, (j - 0.5) / static_cast<double>(kq));
    return out;
}

double rmse_from_quantile(const EvalCells& cells, double level, double v_max) {
    check_cells(cells);
    if (!(v_max > 0.0)) throw std::invalid_argument("metrics: v_max must be positive");
    double sq_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < cells.mask.size(); ++i) {
        if (!cells.mask[i]) continue;
        std::vector<double> p(cells.pred[i]), t(cells.truth[i]);
        std::sort(p.begin(), p.end());
        std::sort(t.begin(), t.end());
        const double d = quantile_sorted(p, level) - quantile_sorted(t, level);
        sq_sum += d * d;
        ++count;
    }
    return std::sqrt(sq_sum / static_cast<double>(count)) * 100.0 / v_max;
}

double wasserstein1(const EvalCells& cells, int kq, double v_max, bool raw_l1) {
    check_cells(cells);
    if (kq < 1) throw std::invalid_argument("metrics: kq must be >= 1");
    if (!(v_max > 0.0)) throw std::invalid_argument("metrics: v_max must be positive");
    double dist_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < cells.mask.size(); ++i) {
        if (!cells.mask[i]) continue;
        const std::vector<double> qp = quantiles(cells.pred[i], kq);
        const std::vector<double> qt = quantiles(cells.truth[i], kq);
        double l1 = 0.0;
        for (int j = 0; j < kq; ++j)
            l1 += std::fabs(qp[static_cast<std::size_t>(j)] - qt[static_cast<std::size_t>(j)]);
        dist_sum += raw_l1 ? l1 : l1 / static_cast<double>(kq);
        ++count;
    }
    return dist_sum / static_cast<double>(count) * 100.0 / v_max;
}

} // namespace cdm
