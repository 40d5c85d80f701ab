#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cdm/denoiser.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/schedule.hpp"
#include "cdm/sim.hpp"

namespace cdm {

// ---------------------------------------------------------------------------
// Tensor files
// ---------------------------------------------------------------------------
//
// Single-tensor file ("CDT1"): magic, u32 dtype code, u32 rank, u64 dims,
// then the little-endian payload. Container file ("CDC1"): magic, u64 length
// + UTF-8 JSON metadata, u32 tensor count, then per tensor a u32 length +
// name followed by the tensor in the single-tensor layout without the magic.
// All writes go to a temporary sibling first and are renamed into place.

enum class Dtype : std::uint32_t { f32 = 1, f64 = 2, i32 = 3, byte = 4 };
std::size_t dtype_size(Dtype d);
std::string to_string(Dtype d);

class Tensor {
public:
    Tensor() = default;
    Tensor(Dtype dtype, std::vector<std::uint64_t> dims); // zero-filled

    static Tensor f64(std::vector<std::uint64_t> dims, const std::vector<double>& v);
    static Tensor f32(std::vector<std::uint64_t> dims, const std::vector<float>& v);
    static Tensor i32(std::vector<std::uint64_t> dims, const std::vector<std::int32_t>& v);
    static Tensor bytes(std::vector<std::uint64_t> dims, const std::vector<std::uint8_t>& v);

    Dtype dtype() const { return dtype_; }
    const std::vector<std::uint64_t>& dims() const { return dims_; }
    std::uint64_t numel() const;
    const std::vector<unsigned char>& raw() const { return raw_; }
    std::vector<unsigned char>& raw() { return raw_; }

    // Typed copies; throw FormatError when the stored dtype differs.
    std::vector<double> as_f64() const;
    std::vector<float> as_f32() const;
    std::vector<std::int32_t> as_i32() const;
    std::vector<std::uint8_t> as_bytes() const;

private:
    Dtype dtype_ = Dtype::f64;
    std::vector<std::uint64_t> dims_;
    std::vector<unsigned char> raw_;
};

void write_tensor_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor_file(const std::filesystem::path& path);

// Ordered named tensors plus one JSON metadata object.
class Container {
public:
    nlohmann::json meta = nlohmann::json::object();

    void add(const std::string& name, Tensor t); // duplicate name -> ConfigError
    bool has(const std::string& name) const;
    const Tensor& at(const std::string& name) const; // missing -> FormatError
    const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

private:
    std::vector<std::pair<std::string, Tensor>> tensors_;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Config hashing and JSON round-trips
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view s);
// 16 lowercase hex digits of the FNV-1a-64 of the canonical (sorted-key,
// minimal-whitespace) JSON dump.
std::string config_hash(const nlohmann::json& j);

// Strict parsers: unknown keys raise ConfigError; missing keys keep their
// defaults (SimConfig starts from SimConfig::defaults()).
nlohmann::json to_json(const SimConfig& cfg);
SimConfig sim_config_from_json(const nlohmann::json& j);
SimConfig sim_config_from_json(const nlohmann::json& j, const SimConfig& base);
nlohmann::json to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j, const DenoiserConfig& base);
nlohmann::json to_json(const TrainHyper& hyper);
TrainHyper train_hyper_from_json(const nlohmann::json& j);
TrainHyper train_hyper_from_json(const nlohmann::json& j, const TrainHyper& base);
nlohmann::json schedule_to_json(ScheduleKind kind, int steps);
void schedule_from_json(const nlohmann::json& j, ScheduleKind& kind, int& steps);

// ---------------------------------------------------------------------------
// Cohort and checkpoint artifacts
// ---------------------------------------------------------------------------

void write_cohort(const std::filesystem::path& path, const Cohort& cohort,
                  const SimConfig& cfg, std::uint64_t seed);

struct CohortFile {
    Cohort cohort;
    SimConfig cfg;
    std::uint64_t seed = 0;
    nlohmann::json meta;
};
CohortFile read_cohort(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model,
                     const TrainerState& tstate, ScheduleKind kind, int steps,
                     const TrainHyper& hyper, std::uint64_t seed);

struct Checkpoint {
    DenoiserConfig model_cfg;
    ScheduleKind kind = ScheduleKind::cosine;
    int steps = 0;
    TrainHyper hyper;
    TrainerState tstate;
    std::uint64_t seed = 0;
    std::int64_t adam_steps = 0;
    std::vector<double> weights, adam_m, adam_v;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies weights and optimizer state into a model built with a matching
// config (ConfigError on any mismatch).
void restore_model(Denoiser& model, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Tensor assembly
// ---------------------------------------------------------------------------

// Channel layout of one grid position: normalized volume, chemo indicator,
// radio indicator, normalized stage.
constexpr int kNumChannels = 4;
double normalized_volume(double v, const SimConfig& cfg); // v / v_max
double stage_channel(int stage);                          // (stage - 1) / 3

// One row-major [N x horizon x 4] training tensor over the recorded steps of
// every patient with at least two of them; shorter trajectories are skipped
// (counted in skipped_short) and padding beyond each seq_len is zero.
TrainDataset assemble_training_tensor(const Cohort& cohort, const SimConfig& cfg,
                                      int* skipped_short = nullptr);

// Condition tensor for the one-step counterfactual at time t of a recorded
// trajectory: positions 0..t-1 hold the factual history, position t holds the
// factual volume with the treatment overridden to `choice`, and position t+1
// holds the masked volume target (zero placeholder) with the factual
// treatments when step t+1 was recorded and zeros otherwise. Requires
// 1 <= t <= active_len - 1 (std::out_of_range otherwise).
struct EvalTensor {
    std::vector<double> data;      // [len x 4]
    std::vector<std::uint8_t> mask; // 1 at the imputed volume coordinate
    int len = 0;                   // t + 2
};
EvalTensor assemble_eval_tensor(const Trajectory& traj, const PatientParams& p,
                                const SimConfig& cfg, int t, TreatmentChoice choice);

} // namespace cdm
