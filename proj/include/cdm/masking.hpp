#pragma once

#include <cstdint>
#include <vector>

#include "cdm/rng.hpp"
#include "cdm/schedule.hpp"

namespace cdm {

// A batch of fixed-shape sequence tensors (B x T x F, row-major) with a
// parallel binary mask. mask = 1 marks coordinates to generate (noised during
// training, sampled during inference); mask = 0 marks observed conditioning
// values that always pass through untouched.
struct MaskedBatch {
    int b = 0, t = 0, f = 0;
    std::vector<double> data;        // size b*t*f
    std::vector<std::uint8_t> mask;  // size b*t*f
    std::vector<int> seq_len;        // size b; active prefix length per item

    std::size_t size() const { return static_cast<std::size_t>(b) * t * f; }
    std::size_t idx(int ib, int it, int jf) const {
        return (static_cast<std::size_t>(ib) * t + it) * f + jf;
    }
    double& at(int ib, int it, int jf) { return data[idx(ib, it, jf)]; }
    double at(int ib, int it, int jf) const { return data[idx(ib, it, jf)]; }
    std::uint8_t& mask_at(int ib, int it, int jf) { return mask[idx(ib, it, jf)]; }
    std::uint8_t mask_at(int ib, int it, int jf) const { return mask[idx(ib, it, jf)]; }
};

// Selective mask over the trailing steps of each item's active prefix.
//
// For every item i and every requested feature j, marks time steps
// [max(seq_len[i] - last_n_time[j], 0), seq_len[i]) of that feature with 1;
// everything else (including all padding at t >= seq_len[i]) stays 0.
//
// Throws ConfigError when a feature index is out of [0, f), when
// features_to_impute and last_n_time differ in length, when a last_n entry is
// negative, or when a seq_len entry falls outside [0, t].
std::vector<std::uint8_t> get_mask(int b, int t, int f,
                                   const std::vector<int>& seq_len,
                                   const std::vector<int>& features_to_impute,
                                   const std::vector<int>& last_n_time);

struct NoiseResult {
    std::vector<double> data; // noised batch, same shape as input
    std::vector<double> eps;  // the standard-normal draw, same shape
};

// Forward diffusion at step k: draws eps ~ N(0, I) over the full tensor and
// replaces masked coordinates with
//   sqrt(alpha_bar_k) * x + sqrt(1 - alpha_bar_k) * eps.
// Unmasked coordinates are copied through unchanged. k = 0 is the identity
// convention (alpha_bar_0 = 1); k outside [0, K] raises std::out_of_range.
//
// eps is always drawn for every coordinate in row-major order, regardless of
// the mask, so the consumed stream depends only on the batch shape.
NoiseResult noise_batch(const MaskedBatch& batch, int k, const NoiseSchedule& sched, Rng& rng);

} // namespace cdm
