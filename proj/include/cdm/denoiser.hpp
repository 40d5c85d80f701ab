#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cdm/rng.hpp"

namespace cdm {

enum class Backbone { rsa, mlp };
Backbone backbone_from_string(const std::string& s);
std::string to_string(Backbone b);

struct DenoiserConfig {
    int embed_dim = 32;       // channels per grid position
    int residual_layers = 2;  // residual blocks
    int encoder_cells = 2;    // transformer cells per block
    int num_heads = 8;
    int kernel_t = 3;         // relational conv kernel, time axis
    int kernel_f = 7;         // relational conv kernel, feature axis
    int ff_dim = 64;          // feed-forward hidden width
    double dropout = 0.1;
    Backbone backbone = Backbone::rsa; // mlp = ablation backbone (no mixing)

    int num_features = 4;     // F
    int max_time = 64;        // time-embedding table size (>= any seq length)
    int diffusion_steps = 5;  // K (step-embedding table covers 0..K)

    void validate() const; // throws ConfigError
    int head_dim() const { return embed_dim / num_heads; }
};

enum class ParamInit { trunc_normal, zeros, ones };

struct ParamInfo {
    std::string name;
    std::vector<int> shape;
    std::int64_t offset = 0;
    std::int64_t size = 0;
    ParamInit init = ParamInit::trunc_normal;
};

// Named parameter tensors held in contiguous arenas (weights, gradients, Adam
// first/second moments), plus the shared optimizer step counter. The flat
// layout makes global-norm clipping, optimizer steps, and checkpoint
// serialization uniform over all tensors.
class ParamStore {
public:
    std::int64_t add(const std::string& name, std::vector<int> shape, ParamInit init);
    // Fills weights from one seeded stream in registration order
    // (trunc_normal: sigma 0.02 clipped at 2 sigma; biases zero; norms one).
    void initialize(std::uint64_t seed);

    std::int64_t total_size() const { return total_; }
    const std::vector<ParamInfo>& entries() const { return entries_; }
    const ParamInfo& info(const std::string& name) const;
    bool has(const std::string& name) const;

    double* w(const std::string& name);
    const double* w(const std::string& name) const;
    std::vector<double>& weights() { return w_; }
    const std::vector<double>& weights() const { return w_; }
    std::vector<double>& grads() { return g_; }
    const std::vector<double>& grads() const { return g_; }
    std::vector<double>& adam_m() { return m_; }
    const std::vector<double>& adam_m() const { return m_; }
    std::vector<double>& adam_v() { return v_; }
    const std::vector<double>& adam_v() const { return v_; }
    std::int64_t& adam_steps() { return adam_steps_; }
    std::int64_t adam_steps() const { return adam_steps_; }

    void zero_grads();
    double grad_norm() const;
    void scale_grads(double s);
    bool grads_finite() const;

private:
    std::vector<ParamInfo> entries_;
    std::vector<double> w_, g_, m_, v_;
    std::int64_t total_ = 0;
    std::int64_t adam_steps_ = 0;
};

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update over every parameter. Rejects the update and
// throws NumericError if any gradient entry is non-finite.
void adam_step(ParamStore& params, const AdamHyper& hyper);

// Masked denoising network over the (time x feature) grid of one sequence.
//
// Topology: per-coordinate embedding (value projection plus additive time- and
// feature-index, diffusion-step, and mask-indicator embeddings) feeding
// `residual_layers` residual blocks. Each block runs `encoder_cells`
// transformer cells (relational self-attention + feed-forward, post-norm with
// one shared LayerNorm parameter pair per cell) followed by a block-final
// LayerNorm; the block output re-joins its input additively, and the
// block-final branches are accumulated (skip accumulation) into a linear head
// that emits one noise estimate per grid coordinate.
class Denoiser {
public:
    class Workspace;

    Denoiser(const DenoiserConfig& cfg, std::uint64_t init_seed);
    ~Denoiser();
    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::int64_t param_count() const { return params_.total_size(); }

    // Per-thread scratch + activation cache; reused across calls.
    std::shared_ptr<Workspace> make_workspace() const;

    // Forward pass on one item at its true length. data and mask point to a
    // row-major [len x F] slab; eps_hat receives [len x F]. Training mode
    // applies inverted dropout with draws from drop_rng; evaluation mode
    // (training = false) is deterministic. Throws NumericError (with the
    // offending stage named) when activations go non-finite, and
    // std::out_of_range for len/k outside the embedding tables.
    void forward(const double* data, const std::uint8_t* mask, int len, int k,
                 double* eps_hat, Workspace& ws, bool training = false,
                 Rng* drop_rng = nullptr) const;

    // Reverse-mode pass from upstream = d(loss)/d(eps_hat), accumulating
    // parameter gradients into grad (size total_size). Requires ws to hold the
    // activations of the immediately preceding forward call.
    void backward(const double* upstream, std::vector<double>& grad, Workspace& ws) const;

private:
    DenoiserConfig cfg_;
    ParamStore params_;

    void register_params();
};

} // namespace cdm
