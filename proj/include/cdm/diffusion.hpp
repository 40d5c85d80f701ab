#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cdm/denoiser.hpp"
#include "cdm/rng.hpp"
#include "cdm/schedule.hpp"

namespace cdm {

// Number of worker threads for batch/chain parallel loops: the CDM_THREADS
// environment variable when set (clamped to [1, 256]), otherwise 1. Results
// are bit-reproducible for a fixed thread count.
int effective_threads();

struct TrainHyper {
    int epochs = 25;
    int batch_size = 200;
    double lr0 = 1e-3;
    double lr_decay_factor = 0.9; // multiplied in on plateau
    double lr_min = 1e-6;
    double grad_clip = 4.0;       // global-norm clip; <= 0 disables
    int patience = 1;             // epochs without val improvement before decay
    double plateau_min_delta = 1e-5;
    // Per item per batch, draw a prefix length L ~ Uniform{2..seq_len} and
    // train on the prefix with its last target coordinate masked. When false,
    // the full sequence is used every time (L = seq_len).
    bool random_prefix = true;

    void validate() const; // throws ConfigError
};

// Training/validation data: a row-major [b x t x f] tensor of sequences with
// per-item true lengths and the feature columns the model learns to impute.
struct TrainDataset {
    int b = 0, t = 0, f = 0;
    std::vector<double> data;
    std::vector<int> seq_len;
    std::vector<int> features_to_impute{0};

    std::size_t idx(int ib, int it, int jf) const {
        return (static_cast<std::size_t>(ib) * t + it) * f + jf;
    }
    void validate(const DenoiserConfig& model_cfg) const; // throws ConfigError
};

struct BatchLoss {
    double loss = 0.0;             // mean squared error over masked coordinates
    std::int64_t masked_coords = 0;
};

// Masked denoising loss over the given item indices, optionally accumulating
// parameter gradients (scaled for the mean, before any clipping).
//
// RNG protocol (fixed so tests can replay it): first one rng.bits() draw per
// item, in the order items are listed; item i's draws then come from
// Rng(bits_i): (1) if random_prefix, L = 2 + uniform_int(seq_len - 1), else
// L = seq_len; (2) k = 1 + uniform_int(K); (3) one normal() per coordinate of
// the [L x f] prefix slab in row-major order (the noise eps; only masked
// entries enter the loss); (4) dropout draws, when train_mode is set and the
// model uses dropout.
//
// Each item is noised at step k on its masked coordinates (the imputed
// features at position L-1) and processed at its prefix length.
BatchLoss training_loss(Denoiser& model, const TrainDataset& ds,
                        const std::vector<int>& items, const NoiseSchedule& sched,
                        bool random_prefix, Rng& rng, bool with_grad, bool train_mode);

struct EpochStats {
    int epoch = 0;       // 0-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;     // learning rate used during this epoch
};

// Trainer state that, together with the model's weights and Adam moments, is
// sufficient to resume a run exactly where it stopped.
struct TrainerState {
    int epochs_done = 0;
    double lr = 0.0;
    double best_val = 0.0;
    bool has_best = false;
    int since_improve = 0;
    std::vector<EpochStats> history;
};

// Epoch loop with Adam, global-norm gradient clipping, and
// reduce-on-plateau learning-rate decay driven by the validation loss.
//
// All randomness derives from (seed, epoch): the shuffle and the training
// draws of epoch e come from streams seeded by derive_seed(seed, tag, e), and
// the validation pass re-seeds an identical stream every epoch so that
// validation losses are comparable across epochs. Resuming from a saved
// TrainerState therefore reproduces an uninterrupted run bit-for-bit.
class Trainer {
public:
    Trainer(Denoiser& model, const NoiseSchedule& sched, const TrainHyper& hyper,
            std::uint64_t seed);

    // Runs epochs [state.epochs_done, hyper.epochs). The callback, when given,
    // fires after each epoch. Throws NumericError (naming the epoch) if the
    // loss goes non-finite.
    void fit(const TrainDataset& train, const TrainDataset& val,
             const std::function<void(const EpochStats&)>& cb = {});

    const TrainerState& state() const { return state_; }
    void load_state(const TrainerState& s) { state_ = s; }

private:
    Denoiser& model_;
    NoiseSchedule sched_;
    TrainHyper hyper_;
    std::uint64_t seed_;
    TrainerState state_;

    double run_train_epoch(const TrainDataset& train, int epoch);
    double run_validation(const TrainDataset& val);
};

// Ancestral sampling of the masked coordinates, conditioned on the rest.
//
// cond/mask describe one [len x F] slab. Masked coordinates start from
// standard normals and are refined through the reverse diffusion updates;
// unmasked coordinates are never written, so they stay bit-identical to cond
// in every returned sample. Returns n_samples slabs, concatenated row-major.
//
// RNG protocol: one rng.bits() per sample first; sample s's draws then come
// from Rng(bits_s): one normal() per masked coordinate in row-major order for
// the initial state, then, for each step k = K..2 after the model call, one
// normal() per masked coordinate in row-major order for the transition noise
// (k = 1 adds none).
std::vector<double> sample_reverse(const Denoiser& model, const double* cond,
                                   const std::uint8_t* mask, int len,
                                   const NoiseSchedule& sched, int n_samples, Rng& rng);

} // namespace cdm
