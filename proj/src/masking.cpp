#include "cdm/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "cdm/errors.hpp"

namespace cdm {

std::vector<std::uint8_t> get_mask(int b, int t, int f,
                                   const std::vector<int>& seq_len,
                                   const std::vector<int>& features_to_impute,
                                   const std::vector<int>& last_n_time) {
    if (b < 0 || t < 0 || f < 0) throw ConfigError("get_mask: negative shape");
    if (static_cast<int>(seq_len.size()) != b)
        throw ConfigError("get_mask: seq_len size must equal batch size");
    if (features_to_impute.size() != last_n_time.size())
        throw ConfigError("get_mask: features_to_impute and last_n_time must align");
    for (int feature : features_to_impute)
        if (feature < 0 || feature >= f)
            throw ConfigError("get_mask: feature index " + std::to_string(feature) +
                              " outside [0, " + std::to_string(f) + ")");
    for (int n : last_n_time)
        if (n < 0) throw ConfigError("get_mask: last_n_time entries must be >= 0");

    std::vector<std::uint8_t> mask(static_cast<std::size_t>(b) * t * f, 0);
    for (int i = 0; i < b; ++i) {
        const int sl = seq_len[static_cast<std::size_t>(i)];
        if (sl < 0 || sl > t)
            throw ConfigError("get_mask: seq_len " + std::to_string(sl) +
                              " outside [0, " + std::to_string(t) + "]");
        for (std::size_t j = 0; j < features_to_impute.size(); ++j) {
            const int feature = features_to_impute[j];
            const int start = std::max(sl - last_n_time[j], 0);
            for (int it = start; it < sl; ++it)
                mask[(static_cast<std::size_t>(i) * t + it) * f + feature] = 1;
        }
    }
    return mask;
}

NoiseResult noise_batch(const MaskedBatch& batch, int k, const NoiseSchedule& sched, Rng& rng) {
    if (k < 0 || k > sched.steps)
        throw std::out_of_range("noise_batch: diffusion step k outside [0, K]");
    if (batch.data.size() != batch.size() || batch.mask.size() != batch.size())
        throw ConfigError("noise_batch: batch data/mask size mismatch");

    const double ab = sched.alpha_bar(k);
    const double w_sig = std::sqrt(ab);
    const double w_eps = std::sqrt(1.0 - ab);

    NoiseResult out;
    out.eps.resize(batch.size());
    for (double& e : out.eps) e = rng.normal();

    out.data = batch.data;
    for (std::size_t i = 0; i < batch.size(); ++i)
        if (batch.mask[i]) out.data[i] = w_sig * batch.data[i] + w_eps * out.eps[i];
    return out;
}

} // namespace cdm
