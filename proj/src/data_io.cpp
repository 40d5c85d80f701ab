#include "cdm/data_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "cdm/errors.hpp"
#include "json_reader.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

namespace cdm {

namespace {

constexpr char kTensorMagic[4] = {'C', 'D', 'T', '1'};
constexpr char kContainerMagic[4] = {'C', 'D', 'C', '1'};
constexpr std::uint64_t kMaxPayloadBytes = 1ull << 40;

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_pod(std::ostream& os, T v) {
    put_bytes(os, &v, sizeof v);
}

void get_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw FormatError("tensor file: truncated");
}

template <typename T>
T get_pod(std::istream& is) {
    T v;
    get_bytes(is, &v, sizeof v);
    return v;
}

void write_tensor_body(std::ostream& os, const Tensor& t) {
    put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.dtype()));
    put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims().size()));
    for (std::uint64_t d : t.dims()) put_pod<std::uint64_t>(os, d);
    put_bytes(os, t.raw().data(), t.raw().size());
}

Tensor read_tensor_body(std::istream& is) {
    const auto code = get_pod<std::uint32_t>(is);
    if (code < 1 || code > 4) throw FormatError("tensor file: unknown dtype code");
    const Dtype dt = static_cast<Dtype>(code);
    const auto rank = get_pod<std::uint32_t>(is);
    if (rank > 16) throw FormatError("tensor file: implausible rank");
    std::vector<std::uint64_t> dims(rank);
    std::uint64_t numel = 1;
    for (auto& d : dims) {
        d = get_pod<std::uint64_t>(is);
        if (d != 0 && numel > kMaxPayloadBytes / d)
            throw FormatError("tensor file: dimension overflow");
        numel *= d;
    }
    const std::uint64_t bytes = numel * dtype_size(dt);
    if (bytes > kMaxPayloadBytes) throw FormatError("tensor file: payload too large");
    Tensor t(dt, dims);
    get_bytes(is, t.raw().data(), static_cast<std::size_t>(bytes));
    return t;
}

// Writes via a temporary sibling and renames into place.
template <typename WriteFn>
void atomic_write(const std::filesystem::path& path, WriteFn&& fn) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open for writing: " + tmp.string());
        fn(os);
        os.flush();
        if (!os) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path.string() + ": " + ec.message());
}

} // namespace

std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::f32: return 4;
        case Dtype::f64: return 8;
        case Dtype::i32: return 4;
        case Dtype::byte: return 1;
    }
    throw FormatError("unknown dtype");
}

std::string to_string(Dtype d) {
    switch (d) {
        case Dtype::f32: return "f32";
        case Dtype::f64: return "f64";
        case Dtype::i32: return "i32";
        case Dtype::byte: return "byte";
    }
    throw FormatError("unknown dtype");
}

Tensor::Tensor(Dtype dtype, std::vector<std::uint64_t> dims)
    : dtype_(dtype), dims_(std::move(dims)) {
    raw_.assign(static_cast<std::size_t>(numel() * dtype_size(dtype_)), 0);
}

std::uint64_t Tensor::numel() const {
    std::uint64_t n = 1;
    for (std::uint64_t d : dims_) n *= d;
    return n;
}

namespace {
template <typename T>
Tensor make_tensor(Dtype dt, std::vector<std::uint64_t> dims, const std::vector<T>& v) {
    Tensor t(dt, std::move(dims));
    if (t.numel() != v.size())
        throw ConfigError("tensor: value count does not match the declared dims");
    std::memcpy(t.raw().data(), v.data(), v.size() * sizeof(T));
    return t;
}
template <typename T>
std::vector<T> unpack_tensor(const Tensor& t, Dtype want, const char* name) {
    if (t.dtype() != want)
        throw FormatError(std::string("tensor: stored dtype is ") + to_string(t.dtype()) +
                          ", requested " + name);
    std::vector<T> v(static_cast<std::size_t>(t.numel()));
    std::memcpy(v.data(), t.raw().data(), v.size() * sizeof(T));
    return v;
}
} // namespace

Tensor Tensor::f64(std::vector<std::uint64_t> dims, const std::vector<double>& v) {
    return make_tensor(Dtype::f64, std::move(dims), v);
}
Tensor Tensor::f32(std::vector<std::uint64_t> dims, const std::vector<float>& v) {
    return make_tensor(Dtype::f32, std::move(dims), v);
}
Tensor Tensor::i32(std::vector<std::uint64_t> dims, const std::vector<std::int32_t>& v) {
    return make_tensor(Dtype::i32, std::move(dims), v);
}
Tensor Tensor::bytes(std::vector<std::uint64_t> dims, const std::vector<std::uint8_t>& v) {
    return make_tensor(Dtype::byte, std::move(dims), v);
}

std::vector<double> Tensor::as_f64() const { return unpack_tensor<double>(*this, Dtype::f64, "f64"); }
std::vector<float> Tensor::as_f32() const { return unpack_tensor<float>(*this, Dtype::f32, "f32"); }
std::vector<std::int32_t> Tensor::as_i32() const {
    return unpack_tensor<std::int32_t>(*this, Dtype::i32, "i32");
}
std::vector<std::uint8_t> Tensor::as_bytes() const {
    return unpack_tensor<std::uint8_t>(*this, Dtype::byte, "byte");
}

void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
    atomic_write(path, [&](std::ostream& os) {
        put_bytes(os, kTensorMagic, 4);
        write_tensor_body(os, t);
    });
}

Tensor read_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    get_bytes(is, magic, 4);
    if (std::memcmp(magic, kTensorMagic, 4) != 0)
        throw FormatError("not a tensor file (bad magic): " + path.string());
    return read_tensor_body(is);
}

void Container::add(const std::string& name, Tensor t) {
    if (has(name)) throw ConfigError("container: duplicate tensor '" + name + "'");
    tensors_.emplace_back(name, std::move(t));
}

bool Container::has(const std::string& name) const {
    for (const auto& [n, t] : tensors_)
        if (n == name) return true;
    return false;
}

const Tensor& Container::at(const std::string& name) const {
    for (const auto& [n, t] : tensors_)
        if (n == name) return t;
    throw FormatError("container: missing tensor '" + name + "'");
}

void write_container(const std::filesystem::path& path, const Container& c) {
    atomic_write(path, [&](std::ostream& os) {
        put_bytes(os, kContainerMagic, 4);
        const std::string meta = c.meta.dump();
        put_pod<std::uint64_t>(os, meta.size());
        put_bytes(os, meta.data(), meta.size());
        put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(c.tensors().size()));
        for (const auto& [name, t] : c.tensors()) {
            put_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
            put_bytes(os, name.data(), name.size());
            write_tensor_body(os, t);
        }
    });
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    get_bytes(is, magic, 4);
    if (std::memcmp(magic, kContainerMagic, 4) != 0)
        throw FormatError("not a container file (bad magic): " + path.string());
    const auto meta_len = get_pod<std::uint64_t>(is);
    if (meta_len > kMaxPayloadBytes) throw FormatError("container: metadata too large");
    std::string meta(static_cast<std::size_t>(meta_len), '\0');
    get_bytes(is, meta.data(), meta.size());
    Container c;
    try {
        c.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("container: bad metadata JSON: ") + e.what());
    }
    const auto count = get_pod<std::uint32_t>(is);
    if (count > 4096) throw FormatError("container: implausible tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get_pod<std::uint32_t>(is);
        if (name_len > 4096) throw FormatError("container: implausible name length");
        std::string name(name_len, '\0');
        get_bytes(is, name.data(), name.size());
        c.add(name, read_tensor_body(is));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Hashing and JSON
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

std::string config_hash(const nlohmann::json& j) {
    const std::uint64_t h = fnv1a64(j.dump());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 16);
}

nlohmann::json to_json(const SimConfig& c) {
    nlohmann::json j;
    j["k_cc"] = c.k_cc;
    j["v_max"] = c.v_max;
    j["noise_sd"] = c.noise_sd;
    j["horizon"] = c.horizon;
    j["gamma_chemo"] = c.gamma_chemo;
    j["gamma_radio"] = c.gamma_radio;
    j["intercept"] = c.intercept;
    j["window"] = c.window;
    j["chemo_dose"] = c.chemo_dose;
    j["chemo_half_life"] = c.chemo_half_life;
    j["radio_dose"] = c.radio_dose;
    j["recover_prob"] = c.recover_prob;
    j["stage_weights"] = c.stage_weights;
    nlohmann::json si = nlohmann::json::array();
    for (const StageInit& s : c.stage_init) si.push_back({s.mu_log, s.sigma_log});
    j["stage_init"] = si;
    j["v0_min"] = c.v0_min;
    j["v0_max"] = c.v0_max;
    j["rho_mean"] = c.rho_mean;
    j["rho_sd"] = c.rho_sd;
    j["alpha_mean"] = c.alpha_mean;
    j["alpha_sd"] = c.alpha_sd;
    j["beta_c_mean"] = c.beta_c_mean;
    j["beta_c_sd"] = c.beta_c_sd;
    j["param_corr"] = c.param_corr;
    j["beta_alpha_ratio"] = c.beta_alpha_ratio;
    return j;
}

SimConfig sim_config_from_json(const nlohmann::json& j) {
    return sim_config_from_json(j, SimConfig::defaults());
}

SimConfig sim_config_from_json(const nlohmann::json& j, const SimConfig& base) {
    SimConfig c = base;
    detail::JsonReader r(j, "sim config");
    r.get("k_cc", c.k_cc);
    r.get("v_max", c.v_max);
    r.get("noise_sd", c.noise_sd);
    r.get("horizon", c.horizon);
    r.get("gamma_chemo", c.gamma_chemo);
    r.get("gamma_radio", c.gamma_radio);
    r.get("intercept", c.intercept);
    r.get("window", c.window);
    r.get("chemo_dose", c.chemo_dose);
    r.get("chemo_half_life", c.chemo_half_life);
    r.get("radio_dose", c.radio_dose);
    r.get("recover_prob", c.recover_prob);
    r.get("stage_weights", c.stage_weights);
    if (r.present("stage_init")) {
        std::vector<std::array<double, 2>> si;
        r.get("stage_init", si);
        if (si.size() != 4) throw ConfigError("sim config: stage_init needs 4 entries");
        for (int s = 0; s < 4; ++s)
            c.stage_init[static_cast<std::size_t>(s)] = {si[static_cast<std::size_t>(s)][0],
                                                         si[static_cast<std::size_t>(s)][1]};
    } else {
        std::vector<std::array<double, 2>> unused;
        r.get("stage_init", unused); // mark as seen
    }
    r.get("v0_min", c.v0_min);
    r.get("v0_max", c.v0_max);
    r.get("rho_mean", c.rho_mean);
    r.get("rho_sd", c.rho_sd);
    r.get("alpha_mean", c.alpha_mean);
    r.get("alpha_sd", c.alpha_sd);
    r.get("beta_c_mean", c.beta_c_mean);
    r.get("beta_c_sd", c.beta_c_sd);
    r.get("param_corr", c.param_corr);
    r.get("beta_alpha_ratio", c.beta_alpha_ratio);
    r.finish();
    return c;
}

nlohmann::json to_json(const DenoiserConfig& c) {
    return nlohmann::json{{"embed_dim", c.embed_dim},
                          {"residual_layers", c.residual_layers},
                          {"encoder_cells", c.encoder_cells},
                          {"num_heads", c.num_heads},
                          {"kernel_t", c.kernel_t},
                          {"kernel_f", c.kernel_f},
                          {"ff_dim", c.ff_dim},
                          {"dropout", c.dropout},
                          {"backbone", to_string(c.backbone)},
                          {"num_features", c.num_features},
                          {"max_time", c.max_time},
                          {"diffusion_steps", c.diffusion_steps}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    return denoiser_config_from_json(j, DenoiserConfig{});
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j, const DenoiserConfig& base) {
    DenoiserConfig c = base;
    detail::JsonReader r(j, "model config");
    r.get("embed_dim", c.embed_dim);
    r.get("residual_layers", c.residual_layers);
    r.get("encoder_cells", c.encoder_cells);
    r.get("num_heads", c.num_heads);
    r.get("kernel_t", c.kernel_t);
    r.get("kernel_f", c.kernel_f);
    r.get("ff_dim", c.ff_dim);
    r.get("dropout", c.dropout);
    std::string bb = to_string(c.backbone);
    r.get("backbone", bb);
    c.backbone = backbone_from_string(bb);
    r.get("num_features", c.num_features);
    r.get("max_time", c.max_time);
    r.get("diffusion_steps", c.diffusion_steps);
    r.finish();
    return c;
}

nlohmann::json to_json(const TrainHyper& h) {
    return nlohmann::json{{"epochs", h.epochs},
                          {"batch_size", h.batch_size},
                          {"lr0", h.lr0},
                          {"lr_decay_factor", h.lr_decay_factor},
                          {"lr_min", h.lr_min},
                          {"grad_clip", h.grad_clip},
                          {"patience", h.patience},
                          {"plateau_min_delta", h.plateau_min_delta},
                          {"random_prefix", h.random_prefix}};
}

TrainHyper train_hyper_from_json(const nlohmann::json& j) {
    return train_hyper_from_json(j, TrainHyper{});
}

TrainHyper train_hyper_from_json(const nlohmann::json& j, const TrainHyper& base) {
    TrainHyper h = base;
    detail::JsonReader r(j, "train config");
    r.get("epochs", h.epochs);
    r.get("batch_size", h.batch_size);
    r.get("lr0", h.lr0);
    r.get("lr_decay_factor", h.lr_decay_factor);
    r.get("lr_min", h.lr_min);
    r.get("grad_clip", h.grad_clip);
    r.get("patience", h.patience);
    r.get("plateau_min_delta", h.plateau_min_delta);
    r.get("random_prefix", h.random_prefix);
    r.finish();
    return h;
}

nlohmann::json schedule_to_json(ScheduleKind kind, int steps) {
    return nlohmann::json{{"kind", to_string(kind)}, {"steps", steps}};
}

void schedule_from_json(const nlohmann::json& j, ScheduleKind& kind, int& steps) {
    detail::JsonReader r(j, "schedule config");
    std::string k = to_string(kind);
    r.get("kind", k);
    kind = schedule_kind_from_string(k);
    r.get("steps", steps);
    r.finish();
}

// ---------------------------------------------------------------------------
// Cohort
// ---------------------------------------------------------------------------

void write_cohort(const std::filesystem::path& path, const Cohort& cohort,
                  const SimConfig& cfg, std::uint64_t seed) {
    const int n = cohort.size();
    if (static_cast<int>(cohort.params.size()) != n)
        throw ConfigError("write_cohort: params/trajectories size mismatch");
    const int t = cfg.horizon;
    std::vector<double> volumes(static_cast<std::size_t>(n) * t, 0.0);
    std::vector<double> conc(static_cast<std::size_t>(n) * t, 0.0);
    std::vector<std::uint8_t> chemo(static_cast<std::size_t>(n) * t, 0);
    std::vector<std::uint8_t> radio(static_cast<std::size_t>(n) * t, 0);
    std::vector<std::int32_t> active(static_cast<std::size_t>(n), 0);
    std::vector<std::int32_t> terminal(static_cast<std::size_t>(n), 0);
    std::vector<double> params(static_cast<std::size_t>(n) * 6, 0.0);
    for (int i = 0; i < n; ++i) {
        const Trajectory& tr = cohort.trajectories[static_cast<std::size_t>(i)];
        if (tr.active_len > t) throw ConfigError("write_cohort: trajectory longer than horizon");
        for (int q = 0; q < tr.active_len; ++q) {
            volumes[static_cast<std::size_t>(i) * t + q] = tr.volumes[static_cast<std::size_t>(q)];
            conc[static_cast<std::size_t>(i) * t + q] = tr.chemo_conc[static_cast<std::size_t>(q)];
            chemo[static_cast<std::size_t>(i) * t + q] =
                tr.chemo_applied[static_cast<std::size_t>(q)];
            radio[static_cast<std::size_t>(i) * t + q] =
                tr.radio_applied[static_cast<std::size_t>(q)];
        }
        active[static_cast<std::size_t>(i)] = tr.active_len;
        terminal[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(tr.terminal);
        const PatientParams& p = cohort.params[static_cast<std::size_t>(i)];
        double* row = params.data() + static_cast<std::size_t>(i) * 6;
        row[0] = p.rho;
        row[1] = p.alpha;
        row[2] = p.beta;
        row[3] = p.beta_c;
        row[4] = static_cast<double>(p.stage);
        row[5] = p.v0;
    }

    Container c;
    c.meta = {{"type", "cohort"},
              {"seed", seed},
              {"n_patients", n},
              {"sim", to_json(cfg)},
              {"config_hash", config_hash(to_json(cfg))}};
    const auto un = static_cast<std::uint64_t>(n);
    const auto ut = static_cast<std::uint64_t>(t);
    c.add("volumes", Tensor::f64({un, ut}, volumes));
    c.add("chemo_conc", Tensor::f64({un, ut}, conc));
    c.add("chemo_applied", Tensor::bytes({un, ut}, chemo));
    c.add("radio_applied", Tensor::bytes({un, ut}, radio));
    c.add("active_len", Tensor::i32({un}, active));
    c.add("terminal", Tensor::i32({un}, terminal));
    c.add("params", Tensor::f64({un, 6}, params));
    write_container(path, c);
}

CohortFile read_cohort(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (!c.meta.contains("type") || c.meta["type"] != "cohort")
        throw FormatError("not a cohort file: " + path.string());
    CohortFile out;
    out.meta = c.meta;
    out.cfg = sim_config_from_json(c.meta.at("sim"));
    out.seed = c.meta.value("seed", 0ull);

    const std::vector<double> volumes = c.at("volumes").as_f64();
    const std::vector<double> conc = c.at("chemo_conc").as_f64();
    const std::vector<std::uint8_t> chemo = c.at("chemo_applied").as_bytes();
    const std::vector<std::uint8_t> radio = c.at("radio_applied").as_bytes();
    const std::vector<std::int32_t> active = c.at("active_len").as_i32();
    const std::vector<std::int32_t> terminal = c.at("terminal").as_i32();
    const std::vector<double> params = c.at("params").as_f64();

    const auto& vd = c.at("volumes").dims();
    if (vd.size() != 2) throw FormatError("cohort: volumes must be rank 2");
    const int n = static_cast<int>(vd[0]);
    const int t = static_cast<int>(vd[1]);
    if (static_cast<int>(active.size()) != n || params.size() != static_cast<std::size_t>(n) * 6)
        throw FormatError("cohort: inconsistent tensor sizes");

    out.cohort.params.resize(static_cast<std::size_t>(n));
    out.cohort.trajectories.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int al = active[static_cast<std::size_t>(i)];
        if (al < 0 || al > t) throw FormatError("cohort: active_len out of range");
        Trajectory& tr = out.cohort.trajectories[static_cast<std::size_t>(i)];
        tr.active_len = al;
        if (terminal[static_cast<std::size_t>(i)] < 0 || terminal[static_cast<std::size_t>(i)] > 2)
            throw FormatError("cohort: terminal flag out of range");
        tr.terminal = static_cast<Trajectory::Terminal>(terminal[static_cast<std::size_t>(i)]);
        tr.volumes.assign(volumes.begin() + static_cast<std::ptrdiff_t>(i) * t,
                          volumes.begin() + static_cast<std::ptrdiff_t>(i) * t + al);
        tr.chemo_conc.assign(conc.begin() + static_cast<std::ptrdiff_t>(i) * t,
                             conc.begin() + static_cast<std::ptrdiff_t>(i) * t + al);
        tr.chemo_applied.assign(chemo.begin() + static_cast<std::ptrdiff_t>(i) * t,
                                chemo.begin() + static_cast<std::ptrdiff_t>(i) * t + al);
        tr.radio_applied.assign(radio.begin() + static_cast<std::ptrdiff_t>(i) * t,
                                radio.begin() + static_cast<std::ptrdiff_t>(i) * t + al);
        const double* row = params.data() + static_cast<std::size_t>(i) * 6;
        PatientParams& p = out.cohort.params[static_cast<std::size_t>(i)];
        p.rho = row[0];
        p.alpha = row[1];
        p.beta = row[2];
        p.beta_c = row[3];
        p.stage = static_cast<int>(row[4]);
        p.v0 = row[5];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model,
                     const TrainerState& tstate, ScheduleKind kind, int steps,
                     const TrainHyper& hyper, std::uint64_t seed) {
    nlohmann::json hist = nlohmann::json::array();
    for (const EpochStats& e : tstate.history)
        hist.push_back({e.epoch, e.train_loss, e.val_loss, e.lr});
    Container c;
    c.meta = {{"type", "checkpoint"},
              {"model", to_json(model.config())},
              {"schedule", schedule_to_json(kind, steps)},
              {"hyper", to_json(hyper)},
              {"trainer",
               {{"epochs_done", tstate.epochs_done},
                {"lr", tstate.lr},
                {"best_val", tstate.best_val},
                {"has_best", tstate.has_best},
                {"since_improve", tstate.since_improve},
                {"history", hist}}},
              {"seed", seed},
              {"adam_steps", model.params().adam_steps()}};
    const auto p = static_cast<std::uint64_t>(model.param_count());
    c.add("weights", Tensor::f64({p}, model.params().weights()));
    c.add("adam_m", Tensor::f64({p}, model.params().adam_m()));
    c.add("adam_v", Tensor::f64({p}, model.params().adam_v()));
    write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const Container c = read_container(path);
    if (!c.meta.contains("type") || c.meta["type"] != "checkpoint")
        throw FormatError("not a checkpoint file: " + path.string());
    Checkpoint ck;
    ck.model_cfg = denoiser_config_from_json(c.meta.at("model"));
    ck.steps = 0;
    schedule_from_json(c.meta.at("schedule"), ck.kind, ck.steps);
    ck.hyper = train_hyper_from_json(c.meta.at("hyper"));
    const nlohmann::json& tj = c.meta.at("trainer");
    ck.tstate.epochs_done = tj.at("epochs_done").get<int>();
    ck.tstate.lr = tj.at("lr").get<double>();
    ck.tstate.best_val = tj.at("best_val").get<double>();
    ck.tstate.has_best = tj.at("has_best").get<bool>();
    ck.tstate.since_improve = tj.at("since_improve").get<int>();
    for (const auto& row : tj.at("history")) {
        EpochStats e;
        e.epoch = row.at(0).get<int>();
        e.train_loss = row.at(1).get<double>();
        e.val_loss = row.at(2).get<double>();
        e.lr = row.at(3).get<double>();
        ck.tstate.history.push_back(e);
    }
    ck.seed = c.meta.value("seed", 0ull);
    ck.adam_steps = c.meta.value("adam_steps", 0ll);
    ck.weights = c.at("weights").as_f64();
    ck.adam_m = c.at("adam_m").as_f64();
    ck.adam_v = c.at("adam_v").as_f64();
    return ck;
}

void restore_model(Denoiser& model, const Checkpoint& ckpt) {
    if (to_json(model.config()) != to_json(ckpt.model_cfg))
        throw ConfigError("checkpoint: model configuration mismatch");
    const auto p = static_cast<std::size_t>(model.param_count());
    if (ckpt.weights.size() != p || ckpt.adam_m.size() != p || ckpt.adam_v.size() != p)
        throw ConfigError("checkpoint: parameter count mismatch");
    model.params().weights() = ckpt.weights;
    model.params().adam_m() = ckpt.adam_m;
    model.params().adam_v() = ckpt.adam_v;
    model.params().adam_steps() = ckpt.adam_steps;
}

// ---------------------------------------------------------------------------
// Tensor assembly
// ---------------------------------------------------------------------------

double normalized_volume(double v, const SimConfig& cfg) { return v / cfg.v_max; }
double stage_channel(int stage) { return (stage - 1) / 3.0; }

TrainDataset assemble_training_tensor(const Cohort& cohort, const SimConfig& cfg,
                                      int* skipped_short) {
    int usable = 0, skipped = 0;
    for (const Trajectory& tr : cohort.trajectories)
        (tr.active_len >= 2 ? usable : skipped)++;
    if (skipped_short) *skipped_short = skipped;
    if (usable == 0) throw ConfigError("training tensor: no trajectory has 2 recorded steps");

    TrainDataset ds;
    ds.b = usable;
    ds.t = cfg.horizon;
    ds.f = kNumChannels;
    ds.data.assign(static_cast<std::size_t>(ds.b) * ds.t * ds.f, 0.0);
    ds.seq_len.reserve(static_cast<std::size_t>(usable));
    ds.features_to_impute = {0};

    int row = 0;
    for (std::size_t i = 0; i < cohort.trajectories.size(); ++i) {
        const Trajectory& tr = cohort.trajectories[i];
        if (tr.active_len < 2) continue;
        const double sc = stage_channel(cohort.params[i].stage);
        for (int q = 0; q < tr.active_len; ++q) {
            double* cell = ds.data.data() + ds.idx(row, q, 0);
            cell[0] = normalized_volume(tr.volumes[static_cast<std::size_t>(q)], cfg);
            cell[1] = tr.chemo_applied[static_cast<std::size_t>(q)] ? 1.0 : 0.0;
            cell[2] = tr.radio_applied[static_cast<std::size_t>(q)] ? 1.0 : 0.0;
            cell[3] = sc;
        }
        ds.seq_len.push_back(tr.active_len);
        ++row;
    }
    return ds;
}

EvalTensor assemble_eval_tensor(const Trajectory& traj, const PatientParams& p,
                                const SimConfig& cfg, int t, TreatmentChoice choice) {
    if (t < 1 || t > traj.active_len - 1)
        throw std::out_of_range("eval tensor: t must lie in [1, active_len - 1]");
    EvalTensor out;
    out.len = t + 2;
    out.data.assign(static_cast<std::size_t>(out.len) * kNumChannels, 0.0);
    out.mask.assign(out.data.size(), 0);
    const double sc = stage_channel(p.stage);
    for (int q = 0; q <= t; ++q) {
        double* cell = out.data.data() + static_cast<std::size_t>(q) * kNumChannels;
        cell[0] = normalized_volume(traj.volumes[static_cast<std::size_t>(q)], cfg);
        if (q < t) {
            cell[1] = traj.chemo_applied[static_cast<std::size_t>(q)] ? 1.0 : 0.0;
            cell[2] = traj.radio_applied[static_cast<std::size_t>(q)] ? 1.0 : 0.0;
        } else {
            cell[1] = choice_has_chemo(choice) ? 1.0 : 0.0;
            cell[2] = choice_has_radio(choice) ? 1.0 : 0.0;
        }
        cell[3] = sc;
    }
    double* last = out.data.data() + static_cast<std::size_t>(t + 1) * kNumChannels;
    last[0] = 0.0; // masked target placeholder
    if (t + 1 < traj.active_len) {
        last[1] = traj.chemo_applied[static_cast<std::size_t>(t + 1)] ? 1.0 : 0.0;
        last[2] = traj.radio_applied[static_cast<std::size_t>(t + 1)] ? 1.0 : 0.0;
    }
    last[3] = sc;
    out.mask[static_cast<std::size_t>(t + 1) * kNumChannels] = 1;
    return out;
}

} // namespace cdm
