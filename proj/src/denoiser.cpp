#include "cdm/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_map>

#include "cdm/errors.hpp"

namespace cdm {

namespace {

constexpr double kInitSigma = 0.02;
constexpr double kLnEps = 1e-5;
constexpr double kNormEps = 1e-24; // L2-normalization guard

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// out[p, j] = bias[j] + sum_i in[p, i] * w[j, i]
void linear_forward(double* out, const double* in, const double* w, const double* bias,
                    int n, int in_dim, int out_dim) {
    for (int p = 0; p < n; ++p) {
        const double* xr = in + static_cast<std::ptrdiff_t>(p) * in_dim;
        double* yr = out + static_cast<std::ptrdiff_t>(p) * out_dim;
        for (int j = 0; j < out_dim; ++j) {
            const double* wr = w + static_cast<std::ptrdiff_t>(j) * in_dim;
            double acc = bias ? bias[j] : 0.0;
            for (int i = 0; i < in_dim; ++i) acc += xr[i] * wr[i];
            yr[j] = acc;
        }
    }
}

// Accumulates d_in (must be pre-zeroed by the caller), dw, db.
void linear_backward(double* d_in, double* dw, double* db, const double* d_out,
                     const double* in, const double* w, int n, int in_dim, int out_dim) {
    for (int p = 0; p < n; ++p) {
        const double* dyr = d_out + static_cast<std::ptrdiff_t>(p) * out_dim;
        const double* xr = in + static_cast<std::ptrdiff_t>(p) * in_dim;
        double* dxr = d_in + static_cast<std::ptrdiff_t>(p) * in_dim;
        for (int j = 0; j < out_dim; ++j) {
            const double dy = dyr[j];
            if (dy == 0.0) continue;
            if (db) db[j] += dy;
            const double* wr = w + static_cast<std::ptrdiff_t>(j) * in_dim;
            double* dwr = dw + static_cast<std::ptrdiff_t>(j) * in_dim;
            for (int i = 0; i < in_dim; ++i) {
                dxr[i] += dy * wr[i];
                dwr[i] += dy * xr[i];
            }
        }
    }
}

// Channel-preserving 2D convolution over the (time x feature) grid,
// channel-major layout in/out: [d x G] with G = len * nf, same padding.
void conv_forward(double* out, const double* in, const double* w,
                  int len, int nf, int d, int kt, int kf) {
    const int g = len * nf;
    const int ct0 = kt / 2, cf0 = kf / 2;
    std::fill(out, out + static_cast<std::ptrdiff_t>(d) * g, 0.0);
    for (int o = 0; o < d; ++o) {
        double* orow = out + static_cast<std::ptrdiff_t>(o) * g;
        for (int ci = 0; ci < d; ++ci) {
            const double* irow = in + static_cast<std::ptrdiff_t>(ci) * g;
            const double* wk = w + (static_cast<std::ptrdiff_t>(o) * d + ci) * kt * kf;
            for (int dt = 0; dt < kt; ++dt) {
                const int ts = dt - ct0;
                const int t_lo = std::max(0, -ts), t_hi = std::min(len, len - ts);
                for (int df = 0; df < kf; ++df) {
                    const int fs = df - cf0;
                    const double wv = wk[dt * kf + df];
                    if (wv == 0.0) continue;
                    const int f_lo = std::max(0, -fs), f_hi = std::min(nf, nf - fs);
                    for (int t = t_lo; t < t_hi; ++t) {
                        double* op = orow + static_cast<std::ptrdiff_t>(t) * nf;
                        const double* ip =
                            irow + static_cast<std::ptrdiff_t>(t + ts) * nf + fs;
                        for (int f = f_lo; f < f_hi; ++f) op[f] += wv * ip[f];
                    }
                }
            }
        }
    }
}

// Accumulates d_in (pre-zeroed) and dw.
void conv_backward(double* d_in, double* dw, const double* d_out, const double* in,
                   const double* w, int len, int nf, int d, int kt, int kf) {
    const int g = len * nf;
    const int ct0 = kt / 2, cf0 = kf / 2;
    for (int o = 0; o < d; ++o) {
        const double* dorow = d_out + static_cast<std::ptrdiff_t>(o) * g;
        for (int ci = 0; ci < d; ++ci) {
            const double* irow = in + static_cast<std::ptrdiff_t>(ci) * g;
            double* dirow = d_in + static_cast<std::ptrdiff_t>(ci) * g;
            const double* wk = w + (static_cast<std::ptrdiff_t>(o) * d + ci) * kt * kf;
            double* dwk = dw + (static_cast<std::ptrdiff_t>(o) * d + ci) * kt * kf;
            for (int dt = 0; dt < kt; ++dt) {
                const int ts = dt - ct0;
                const int t_lo = std::max(0, -ts), t_hi = std::min(len, len - ts);
                for (int df = 0; df < kf; ++df) {
                    const int fs = df - cf0;
                    const double wv = wk[dt * kf + df];
                    double wacc = 0.0;
                    const int f_lo = std::max(0, -fs), f_hi = std::min(nf, nf - fs);
                    for (int t = t_lo; t < t_hi; ++t) {
                        const double* dop = dorow + static_cast<std::ptrdiff_t>(t) * nf;
                        const double* ip =
                            irow + static_cast<std::ptrdiff_t>(t + ts) * nf + fs;
                        double* dip = dirow + static_cast<std::ptrdiff_t>(t + ts) * nf + fs;
                        for (int f = f_lo; f < f_hi; ++f) {
                            wacc += dop[f] * ip[f];
                            dip[f] += wv * dop[f];
                        }
                    }
                    dwk[dt * kf + df] += wacc;
                }
            }
        }
    }
}

// Post-norm LayerNorm over the channel axis, per grid position.
void layer_norm_forward(double* out, double* xhat, double* rstd_buf, const double* in,
                        const double* g, const double* b, int n, int c) {
    for (int p = 0; p < n; ++p) {
        const double* xr = in + static_cast<std::ptrdiff_t>(p) * c;
        double mu = 0.0;
        for (int i = 0; i < c; ++i) mu += xr[i];
        mu /= c;
        double var = 0.0;
        for (int i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= c;
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        rstd_buf[p] = rstd;
        double* xh = xhat + static_cast<std::ptrdiff_t>(p) * c;
        double* yr = out + static_cast<std::ptrdiff_t>(p) * c;
        for (int i = 0; i < c; ++i) {
            xh[i] = (xr[i] - mu) * rstd;
            yr[i] = g[i] * xh[i] + b[i];
        }
    }
}

// Accumulates d_in (pre-zeroed or accumulating), dg, db.
void layer_norm_backward(double* d_in, double* dg, double* db, const double* d_out,
                         const double* xhat, const double* rstd_buf, const double* g,
                         int n, int c) {
    for (int p = 0; p < n; ++p) {
        const double* dyr = d_out + static_cast<std::ptrdiff_t>(p) * c;
        const double* xh = xhat + static_cast<std::ptrdiff_t>(p) * c;
        double* dxr = d_in + static_cast<std::ptrdiff_t>(p) * c;
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < c; ++i) {
            const double dxh = dyr[i] * g[i];
            s1 += dxh;
            s2 += dxh * xh[i];
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
        }
        s1 /= c;
        s2 /= c;
        const double rstd = rstd_buf[p];
        for (int i = 0; i < c; ++i) {
            const double dxh = dyr[i] * g[i];
            dxr[i] += rstd * (dxh - s1 - xh[i] * s2);
        }
    }
}

void check_finite(const double* x, std::ptrdiff_t n, const char* stage) {
    for (std::ptrdiff_t i = 0; i < n; ++i)
        if (!std::isfinite(x[i]))
            throw NumericError(std::string("denoiser: non-finite activation at ") + stage);
}

} // namespace

Backbone backbone_from_string(const std::string& s) {
    if (s == "rsa") return Backbone::rsa;
    if (s == "mlp") return Backbone::mlp;
    throw ConfigError("unknown backbone: '" + s + "' (expected rsa|mlp)");
}

std::string to_string(Backbone b) { return b == Backbone::rsa ? "rsa" : "mlp"; }

void DenoiserConfig::validate() const {
    if (embed_dim < 1) throw ConfigError("denoiser: embed_dim must be >= 1");
    if (residual_layers < 1) throw ConfigError("denoiser: residual_layers must be >= 1");
    if (encoder_cells < 1) throw ConfigError("denoiser: encoder_cells must be >= 1");
    if (num_heads < 1) throw ConfigError("denoiser: num_heads must be >= 1");
    if (embed_dim % num_heads != 0)
        throw ConfigError("denoiser: embed_dim must be divisible by num_heads");
    if (kernel_t < 1 || kernel_t % 2 == 0 || kernel_f < 1 || kernel_f % 2 == 0)
        throw ConfigError("denoiser: conv kernels must be odd and >= 1");
    if (ff_dim < 1) throw ConfigError("denoiser: ff_dim must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("denoiser: dropout must be in [0, 1)");
    if (num_features < 1) throw ConfigError("denoiser: num_features must be >= 1");
    if (max_time < 1) throw ConfigError("denoiser: max_time must be >= 1");
    if (diffusion_steps < 1) throw ConfigError("denoiser: diffusion_steps must be >= 1");
}

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

std::int64_t ParamStore::add(const std::string& name, std::vector<int> shape, ParamInit init) {
    for (const ParamInfo& e : entries_)
        if (e.name == name) throw ConfigError("ParamStore: duplicate tensor '" + name + "'");
    ParamInfo info;
    info.name = name;
    info.shape = std::move(shape);
    info.offset = total_;
    info.size = 1;
    for (int s : info.shape) {
        if (s < 1) throw ConfigError("ParamStore: non-positive dimension in '" + name + "'");
        info.size *= s;
    }
    info.init = init;
    total_ += info.size;
    entries_.push_back(std::move(info));
    return entries_.back().offset;
}

void ParamStore::initialize(std::uint64_t seed) {
    w_.assign(static_cast<std::size_t>(total_), 0.0);
    g_.assign(static_cast<std::size_t>(total_), 0.0);
    m_.assign(static_cast<std::size_t>(total_), 0.0);
    v_.assign(static_cast<std::size_t>(total_), 0.0);
    adam_steps_ = 0;
    Rng rng(derive_seed(seed, 0x696e6974ull)); // "init"
    for (const ParamInfo& e : entries_) {
        double* w = w_.data() + e.offset;
        switch (e.init) {
            case ParamInit::trunc_normal:
                for (std::int64_t i = 0; i < e.size; ++i) w[i] = rng.trunc_normal(kInitSigma);
                break;
            case ParamInit::zeros:
                break;
            case ParamInit::ones:
                std::fill(w, w + e.size, 1.0);
                break;
        }
    }
}

const ParamInfo& ParamStore::info(const std::string& name) const {
    for (const ParamInfo& e : entries_)
        if (e.name == name) return e;
    throw ConfigError("ParamStore: unknown tensor '" + name + "'");
}

bool ParamStore::has(const std::string& name) const {
    for (const ParamInfo& e : entries_)
        if (e.name == name) return true;
    return false;
}

double* ParamStore::w(const std::string& name) { return w_.data() + info(name).offset; }
const double* ParamStore::w(const std::string& name) const { return w_.data() + info(name).offset; }

void ParamStore::zero_grads() { std::fill(g_.begin(), g_.end(), 0.0); }

double ParamStore::grad_norm() const {
    double s = 0.0;
    for (double g : g_) s += g * g;
    return std::sqrt(s);
}

void ParamStore::scale_grads(double s) {
    for (double& g : g_) g *= s;
}

bool ParamStore::grads_finite() const {
    for (double g : g_)
        if (!std::isfinite(g)) return false;
    return true;
}

void adam_step(ParamStore& params, const AdamHyper& hyper) {
    if (!params.grads_finite())
        throw NumericError("adam_step: non-finite gradient, update rejected");
    const std::int64_t t = ++params.adam_steps();
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
    double* w = params.weights().data();
    const double* g = params.grads().data();
    double* m = params.adam_m().data();
    double* v = params.adam_v().data();
    const std::int64_t n = params.total_size();
    for (std::int64_t i = 0; i < n; ++i) {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

namespace {

// Offsets of every tensor of one cell/block, resolved once at construction.
struct CellOffsets {
    // rsa backbone
    std::int64_t proj1_w = -1, proj2_w = -1, h1_w = -1, h2_w = -1;
    // mlp backbone
    std::int64_t fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;
    // shared tail
    std::int64_t ln_g = 0, ln_b = 0;
    std::int64_t ff1_w = 0, ff1_b = 0, ff2_w = 0, ff2_b = 0;
};

struct BlockOffsets {
    std::vector<CellOffsets> cells;
    std::int64_t norm_g = 0, norm_b = 0;
};

} // namespace

class Denoiser::Workspace {
public:
    int len = 0, k = 0;
    bool training = false;
    const double* data = nullptr;
    const std::uint8_t* mask = nullptr;

    struct Cell {
        std::vector<double> x_in, a1, s, a2;
        std::vector<double> qn, kn, vn;   // [C x G] channel-major, normalized
        std::vector<double> nq, nk, nv;   // [G x H]
        std::vector<double> hk, hv;       // [C x G]
        std::vector<double> kern;         // [H x G x G]
        std::vector<double> attn;         // [G x C] pre-dropout branch output
        std::vector<double> m1, m1r;      // mlp backbone
        std::vector<std::uint8_t> drop1, drop2;
        std::vector<double> r1, l1hat, l1, ln1_rstd;
        std::vector<double> f1, f2;
        std::vector<double> r2, l2hat, out, ln2_rstd;
    };
    struct Block {
        std::vector<double> x_in, ehat, e, rstd;
    };

    std::vector<double> x0, skip;
    std::vector<Cell> cells;
    std::vector<Block> blocks;

    // backward scratch
    std::vector<double> d_a, d_b, d_big, d_cm1, d_cm2, d_cm3, d_cm4, d_kern, d_ff;
};

struct DenoiserOffsets {
    std::int64_t value_w = 0, value_b = 0, time = 0, feature = 0, step = 0, maskemb = 0;
    std::vector<BlockOffsets> blocks;
    std::int64_t head_w = 0, head_b = 0;
};

namespace {
// One offsets table per live Denoiser; keyed by the store address to keep the
// header free of layout details.
std::unordered_map<const ParamStore*, DenoiserOffsets>& offsets_registry() {
    static std::unordered_map<const ParamStore*, DenoiserOffsets> reg;
    return reg;
}
} // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    register_params();
    params_.initialize(init_seed);
}

Denoiser::~Denoiser() { offsets_registry().erase(&params_); }

void Denoiser::register_params() {
    const int c = cfg_.embed_dim;
    const int h = cfg_.num_heads;
    const int d = cfg_.head_dim();
    DenoiserOffsets off;
    off.value_w = params_.add("embed.value_w", {c}, ParamInit::trunc_normal);
    off.value_b = params_.add("embed.value_b", {c}, ParamInit::zeros);
    off.time = params_.add("embed.time", {cfg_.max_time, c}, ParamInit::trunc_normal);
    off.feature = params_.add("embed.feature", {cfg_.num_features, c}, ParamInit::trunc_normal);
    off.step = params_.add("embed.step", {cfg_.diffusion_steps + 1, c}, ParamInit::trunc_normal);
    off.maskemb = params_.add("embed.mask", {2, c}, ParamInit::trunc_normal);

    off.blocks.resize(static_cast<std::size_t>(cfg_.residual_layers));
    for (int r = 0; r < cfg_.residual_layers; ++r) {
        BlockOffsets& bo = off.blocks[static_cast<std::size_t>(r)];
        bo.cells.resize(static_cast<std::size_t>(cfg_.encoder_cells));
        for (int ci = 0; ci < cfg_.encoder_cells; ++ci) {
            const std::string pre =
                "block" + std::to_string(r) + ".cell" + std::to_string(ci) + ".";
            CellOffsets& co = bo.cells[static_cast<std::size_t>(ci)];
            if (cfg_.backbone == Backbone::rsa) {
                co.proj1_w = params_.add(pre + "attn.proj1_w", {c, c}, ParamInit::trunc_normal);
                co.proj2_w = params_.add(pre + "attn.proj2_w", {3 * c, c}, ParamInit::trunc_normal);
                co.h1_w = params_.add(pre + "attn.h1_w", {h, d, d, cfg_.kernel_t, cfg_.kernel_f},
                                      ParamInit::trunc_normal);
                co.h2_w = params_.add(pre + "attn.h2_w", {h, d, d, cfg_.kernel_t, cfg_.kernel_f},
                                      ParamInit::trunc_normal);
            } else {
                co.fc1_w = params_.add(pre + "mlp.fc1_w", {c, c}, ParamInit::trunc_normal);
                co.fc1_b = params_.add(pre + "mlp.fc1_b", {c}, ParamInit::zeros);
                co.fc2_w = params_.add(pre + "mlp.fc2_w", {c, c}, ParamInit::trunc_normal);
                co.fc2_b = params_.add(pre + "mlp.fc2_b", {c}, ParamInit::zeros);
            }
            co.ln_g = params_.add(pre + "ln_g", {c}, ParamInit::ones);
            co.ln_b = params_.add(pre + "ln_b", {c}, ParamInit::zeros);
            co.ff1_w = params_.add(pre + "ff1_w", {cfg_.ff_dim, c}, ParamInit::trunc_normal);
            co.ff1_b = params_.add(pre + "ff1_b", {cfg_.ff_dim}, ParamInit::zeros);
            co.ff2_w = params_.add(pre + "ff2_w", {c, cfg_.ff_dim}, ParamInit::trunc_normal);
            co.ff2_b = params_.add(pre + "ff2_b", {c}, ParamInit::zeros);
        }
        bo.norm_g = params_.add("block" + std::to_string(r) + ".norm_g", {c}, ParamInit::ones);
        bo.norm_b = params_.add("block" + std::to_string(r) + ".norm_b", {c}, ParamInit::zeros);
    }
    off.head_w = params_.add("head_w", {c}, ParamInit::trunc_normal);
    off.head_b = params_.add("head_b", {1}, ParamInit::zeros);
    offsets_registry()[&params_] = std::move(off);
}

std::shared_ptr<Denoiser::Workspace> Denoiser::make_workspace() const {
    auto ws = std::make_shared<Workspace>();
    ws->cells.resize(static_cast<std::size_t>(cfg_.residual_layers) * cfg_.encoder_cells);
    ws->blocks.resize(static_cast<std::size_t>(cfg_.residual_layers));
    return ws;
}

void Denoiser::forward(const double* data, const std::uint8_t* mask, int len, int k,
                       double* eps_hat, Workspace& ws, bool training, Rng* drop_rng) const {
    const int c = cfg_.embed_dim;
    const int nf = cfg_.num_features;
    const int nh = cfg_.num_heads;
    const int d = cfg_.head_dim();
    if (len < 1 || len > cfg_.max_time)
        throw std::out_of_range("denoiser: sequence length outside [1, max_time]");
    if (k < 0 || k > cfg_.diffusion_steps)
        throw std::out_of_range("denoiser: diffusion step outside [0, K]");
    if (training && cfg_.dropout > 0.0 && drop_rng == nullptr)
        throw ConfigError("denoiser: training forward with dropout needs an RNG");

    const int g = len * nf;
    const std::ptrdiff_t gc = static_cast<std::ptrdiff_t>(g) * c;
    const DenoiserOffsets& off = offsets_registry().at(&params_);
    const double* w = params_.weights().data();

    ws.len = len;
    ws.k = k;
    ws.training = training;
    ws.data = data;
    ws.mask = mask;

    // Embedding: value projection plus additive index embeddings.
    ws.x0.resize(static_cast<std::size_t>(gc));
    {
        const double* vw = w + off.value_w;
        const double* vb = w + off.value_b;
        const double* tw = w + off.time;
        const double* fw = w + off.feature;
        const double* sw = w + off.step + static_cast<std::ptrdiff_t>(k) * c;
        const double* mw = w + off.maskemb;
        for (int p = 0; p < g; ++p) {
            const double z = data[p];
            const int t = p / nf, f = p % nf;
            const double* trow = tw + static_cast<std::ptrdiff_t>(t) * c;
            const double* frow = fw + static_cast<std::ptrdiff_t>(f) * c;
            const double* mrow = mw + static_cast<std::ptrdiff_t>(mask[p] ? 1 : 0) * c;
            double* row = ws.x0.data() + static_cast<std::ptrdiff_t>(p) * c;
            for (int i = 0; i < c; ++i)
                row[i] = z * vw[i] + vb[i] + trow[i] + frow[i] + sw[i] + mrow[i];
        }
    }
    check_finite(ws.x0.data(), gc, "embedding");

    const double keep = 1.0 - cfg_.dropout;
    const bool use_drop = training && cfg_.dropout > 0.0;

    ws.skip.assign(static_cast<std::size_t>(gc), 0.0);
    const std::vector<double>* cur = &ws.x0;

    for (int r = 0; r < cfg_.residual_layers; ++r) {
        const BlockOffsets& bo = off.blocks[static_cast<std::size_t>(r)];
        Workspace::Block& blk = ws.blocks[static_cast<std::size_t>(r)];
        if (cur != &blk.x_in) blk.x_in = *cur;

        const std::vector<double>* cell_in = &blk.x_in;
        for (int cidx = 0; cidx < cfg_.encoder_cells; ++cidx) {
            const CellOffsets& co = bo.cells[static_cast<std::size_t>(cidx)];
            Workspace::Cell& cw =
                ws.cells[static_cast<std::size_t>(r) * cfg_.encoder_cells + cidx];
            cw.x_in = *cell_in;
            const double* x = cw.x_in.data();

            // --- Mixing branch ---
            cw.attn.resize(static_cast<std::size_t>(gc));
            if (cfg_.backbone == Backbone::rsa) {
                cw.a1.resize(static_cast<std::size_t>(gc));
                cw.s.resize(static_cast<std::size_t>(gc));
                linear_forward(cw.a1.data(), x, w + co.proj1_w, nullptr, g, c, c);
                for (std::ptrdiff_t i = 0; i < gc; ++i)
                    cw.s[static_cast<std::size_t>(i)] =
                        cw.a1[static_cast<std::size_t>(i)] *
                        sigmoid(cw.a1[static_cast<std::size_t>(i)]);
                cw.a2.resize(static_cast<std::size_t>(gc) * 3);
                linear_forward(cw.a2.data(), cw.s.data(), w + co.proj2_w, nullptr, g, c, 3 * c);

                // Per-head L2 normalization (over head channels, per position),
                // written channel-major for the conv/contraction stages.
                cw.qn.resize(static_cast<std::size_t>(gc));
                cw.kn.resize(static_cast<std::size_t>(gc));
                cw.vn.resize(static_cast<std::size_t>(gc));
                cw.nq.resize(static_cast<std::size_t>(g) * nh);
                cw.nk.resize(static_cast<std::size_t>(g) * nh);
                cw.nv.resize(static_cast<std::size_t>(g) * nh);
                for (int p = 0; p < g; ++p) {
                    const double* a2p = cw.a2.data() + static_cast<std::ptrdiff_t>(p) * 3 * c;
                    for (int hh = 0; hh < nh; ++hh) {
                        const int base = hh * d;
                        double sq = 0.0, sk = 0.0, sv = 0.0;
                        for (int i = 0; i < d; ++i) {
                            const double qv = a2p[base + i];
                            const double kv = a2p[c + base + i];
                            const double vv = a2p[2 * c + base + i];
                            sq += qv * qv;
                            sk += kv * kv;
                            sv += vv * vv;
                        }
                        const double nq = std::sqrt(sq + kNormEps);
                        const double nk = std::sqrt(sk + kNormEps);
                        const double nv = std::sqrt(sv + kNormEps);
                        cw.nq[static_cast<std::size_t>(p) * nh + hh] = nq;
                        cw.nk[static_cast<std::size_t>(p) * nh + hh] = nk;
                        cw.nv[static_cast<std::size_t>(p) * nh + hh] = nv;
                        for (int i = 0; i < d; ++i) {
                            cw.qn[static_cast<std::size_t>(base + i) * g + p] =
                                a2p[base + i] / nq;
                            cw.kn[static_cast<std::size_t>(base + i) * g + p] =
                                a2p[c + base + i] / nk;
                            cw.vn[static_cast<std::size_t>(base + i) * g + p] =
                                a2p[2 * c + base + i] / nv;
                        }
                    }
                }

                cw.hk.resize(static_cast<std::size_t>(gc));
                cw.hv.resize(static_cast<std::size_t>(gc));
                cw.kern.resize(static_cast<std::size_t>(nh) * g * g);
                const std::ptrdiff_t conv_w_sz =
                    static_cast<std::ptrdiff_t>(d) * d * cfg_.kernel_t * cfg_.kernel_f;
                for (int hh = 0; hh < nh; ++hh) {
                    const std::ptrdiff_t hbase = static_cast<std::ptrdiff_t>(hh) * d * g;
                    conv_forward(cw.hk.data() + hbase, cw.kn.data() + hbase,
                                 w + co.h1_w + hh * conv_w_sz, len, nf, d, cfg_.kernel_t,
                                 cfg_.kernel_f);
                    conv_forward(cw.hv.data() + hbase, cw.vn.data() + hbase,
                                 w + co.h2_w + hh * conv_w_sz, len, nf, d, cfg_.kernel_t,
                                 cfg_.kernel_f);

                    // kernel[i, j] = sum_c qn[c, i] * hk[c, j]
                    double* kern = cw.kern.data() + static_cast<std::ptrdiff_t>(hh) * g * g;
                    std::fill(kern, kern + static_cast<std::ptrdiff_t>(g) * g, 0.0);
                    for (int ci2 = 0; ci2 < d; ++ci2) {
                        const double* qrow = cw.qn.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        const double* krow = cw.hk.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        for (int i = 0; i < g; ++i) {
                            const double qv = qrow[i];
                            if (qv == 0.0) continue;
                            double* krn = kern + static_cast<std::ptrdiff_t>(i) * g;
                            for (int j = 0; j < g; ++j) krn[j] += qv * krow[j];
                        }
                    }
                    // out[c, i] = sum_j hv[c, j] * kernel[i, j], written back
                    // position-major into the concatenated attention output.
                    for (int ci2 = 0; ci2 < d; ++ci2) {
                        const double* vrow = cw.hv.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        for (int i = 0; i < g; ++i) {
                            const double* krn = kern + static_cast<std::ptrdiff_t>(i) * g;
                            double acc = 0.0;
                            for (int j = 0; j < g; ++j) acc += vrow[j] * krn[j];
                            cw.attn[static_cast<std::size_t>(i) * c + hh * d + ci2] = acc;
                        }
                    }
                }
            } else {
                // Ablation backbone: per-position two-layer feed-forward of
                // equal width; no cross-position mixing.
                cw.m1.resize(static_cast<std::size_t>(gc));
                cw.m1r.resize(static_cast<std::size_t>(gc));
                linear_forward(cw.m1.data(), x, w + co.fc1_w, w + co.fc1_b, g, c, c);
                for (std::ptrdiff_t i = 0; i < gc; ++i)
                    cw.m1r[static_cast<std::size_t>(i)] =
                        std::max(0.0, cw.m1[static_cast<std::size_t>(i)]);
                linear_forward(cw.attn.data(), cw.m1r.data(), w + co.fc2_w, w + co.fc2_b, g, c, c);
            }

            // --- Residual + shared-parameter LayerNorm (post-norm) ---
            cw.r1.resize(static_cast<std::size_t>(gc));
            cw.drop1.assign(static_cast<std::size_t>(gc), 1);
            if (use_drop) {
                for (std::ptrdiff_t i = 0; i < gc; ++i) {
                    const bool keep_it = drop_rng->bernoulli(keep);
                    cw.drop1[static_cast<std::size_t>(i)] = keep_it ? 1 : 0;
                    cw.r1[static_cast<std::size_t>(i)] =
                        x[i] + (keep_it ? cw.attn[static_cast<std::size_t>(i)] / keep : 0.0);
                }
            } else {
                for (std::ptrdiff_t i = 0; i < gc; ++i)
                    cw.r1[static_cast<std::size_t>(i)] = x[i] + cw.attn[static_cast<std::size_t>(i)];
            }
            cw.l1.resize(static_cast<std::size_t>(gc));
            cw.l1hat.resize(static_cast<std::size_t>(gc));
            cw.ln1_rstd.resize(static_cast<std::size_t>(g));
            layer_norm_forward(cw.l1.data(), cw.l1hat.data(), cw.ln1_rstd.data(), cw.r1.data(),
                               w + co.ln_g, w + co.ln_b, g, c);

            // --- Feed-forward sublayer ---
            cw.f1.resize(static_cast<std::size_t>(g) * cfg_.ff_dim);
            linear_forward(cw.f1.data(), cw.l1.data(), w + co.ff1_w, w + co.ff1_b, g, c,
                           cfg_.ff_dim);
            for (double& x1 : cw.f1) x1 = std::max(0.0, x1);
            cw.f2.resize(static_cast<std::size_t>(gc));
            linear_forward(cw.f2.data(), cw.f1.data(), w + co.ff2_w, w + co.ff2_b, g, cfg_.ff_dim,
                           c);
            cw.r2.resize(static_cast<std::size_t>(gc));
            cw.drop2.assign(static_cast<std::size_t>(gc), 1);
            if (use_drop) {
                for (std::ptrdiff_t i = 0; i < gc; ++i) {
                    const bool keep_it = drop_rng->bernoulli(keep);
                    cw.drop2[static_cast<std::size_t>(i)] = keep_it ? 1 : 0;
                    cw.r2[static_cast<std::size_t>(i)] =
                        cw.l1[static_cast<std::size_t>(i)] +
                        (keep_it ? cw.f2[static_cast<std::size_t>(i)] / keep : 0.0);
                }
            } else {
                for (std::ptrdiff_t i = 0; i < gc; ++i)
                    cw.r2[static_cast<std::size_t>(i)] =
                        cw.l1[static_cast<std::size_t>(i)] + cw.f2[static_cast<std::size_t>(i)];
            }
            cw.out.resize(static_cast<std::size_t>(gc));
            cw.l2hat.resize(static_cast<std::size_t>(gc));
            cw.ln2_rstd.resize(static_cast<std::size_t>(g));
            layer_norm_forward(cw.out.data(), cw.l2hat.data(), cw.ln2_rstd.data(), cw.r2.data(),
                               w + co.ln_g, w + co.ln_b, g, c);
            check_finite(cw.out.data(), gc,
                         ("block " + std::to_string(r) + " cell " + std::to_string(cidx)).c_str());
            cell_in = &cw.out;
        }

        // Block-final LayerNorm; branch output joins residually and is also
        // accumulated into the skip path feeding the head.
        blk.e.resize(static_cast<std::size_t>(gc));
        blk.ehat.resize(static_cast<std::size_t>(gc));
        blk.rstd.resize(static_cast<std::size_t>(g));
        layer_norm_forward(blk.e.data(), blk.ehat.data(), blk.rstd.data(), cell_in->data(),
                           w + bo.norm_g, w + bo.norm_b, g, c);
        for (std::ptrdiff_t i = 0; i < gc; ++i)
            ws.skip[static_cast<std::size_t>(i)] += blk.e[static_cast<std::size_t>(i)];
        // Block output cur = x_in + e becomes the next block's input.
        if (r + 1 < cfg_.residual_layers) {
            Workspace::Block& next = ws.blocks[static_cast<std::size_t>(r) + 1];
            next.x_in.resize(static_cast<std::size_t>(gc));
            for (std::ptrdiff_t i = 0; i < gc; ++i)
                next.x_in[static_cast<std::size_t>(i)] =
                    blk.x_in[static_cast<std::size_t>(i)] + blk.e[static_cast<std::size_t>(i)];
            cur = &next.x_in;
        }
    }

    // Linear head on the accumulated skip connections.
    {
        const double* hw = w + off.head_w;
        const double hb = w[off.head_b];
        for (int p = 0; p < g; ++p) {
            const double* sr = ws.skip.data() + static_cast<std::ptrdiff_t>(p) * c;
            double acc = hb;
            for (int i = 0; i < c; ++i) acc += hw[i] * sr[i];
            eps_hat[p] = acc;
        }
    }
    check_finite(eps_hat, g, "head");
}

void Denoiser::backward(const double* upstream, std::vector<double>& grad, Workspace& ws) const {
    const int c = cfg_.embed_dim;
    const int nf = cfg_.num_features;
    const int nh = cfg_.num_heads;
    const int d = cfg_.head_dim();
    const int g = ws.len * nf;
    const std::ptrdiff_t gc = static_cast<std::ptrdiff_t>(g) * c;
    const DenoiserOffsets& off = offsets_registry().at(&params_);
    const double* w = params_.weights().data();
    if (grad.size() != static_cast<std::size_t>(params_.total_size()))
        throw ConfigError("denoiser backward: gradient buffer size mismatch");
    const double keep = 1.0 - cfg_.dropout;
    const bool use_drop = ws.training && cfg_.dropout > 0.0;

    // Head backward -> d_skip; d_skip feeds every block's branch output.
    std::vector<double>& d_skip = ws.d_a;
    d_skip.assign(static_cast<std::size_t>(gc), 0.0);
    {
        const double* hw = w + off.head_w;
        double* dhw = grad.data() + off.head_w;
        double* dhb = grad.data() + off.head_b;
        for (int p = 0; p < g; ++p) {
            const double up = upstream[p];
            if (up == 0.0) continue;
            const double* sr = ws.skip.data() + static_cast<std::ptrdiff_t>(p) * c;
            double* dsr = d_skip.data() + static_cast<std::ptrdiff_t>(p) * c;
            for (int i = 0; i < c; ++i) {
                dsr[i] = up * hw[i];
                dhw[i] += up * sr[i];
            }
            *dhb += up;
        }
    }

    // d_cur: gradient flowing into the current block's output (initially zero,
    // because the final block output feeds nothing but the next block).
    std::vector<double>& d_cur = ws.d_b;
    d_cur.assign(static_cast<std::size_t>(gc), 0.0);
    std::vector<double>& d_y = ws.d_big;
    std::vector<double>& d_ff = ws.d_ff;

    for (int r = cfg_.residual_layers - 1; r >= 0; --r) {
        const BlockOffsets& bo = off.blocks[static_cast<std::size_t>(r)];
        Workspace::Block& blk = ws.blocks[static_cast<std::size_t>(r)];

        // e receives d_cur (residual join) + d_skip (head path).
        static thread_local std::vector<double> d_e;
        d_e.resize(static_cast<std::size_t>(gc));
        for (std::ptrdiff_t i = 0; i < gc; ++i)
            d_e[static_cast<std::size_t>(i)] =
                d_cur[static_cast<std::size_t>(i)] + d_skip[static_cast<std::size_t>(i)];

        // Block-final LayerNorm backward.
        d_y.assign(static_cast<std::size_t>(gc), 0.0);
        layer_norm_backward(d_y.data(), grad.data() + bo.norm_g, grad.data() + bo.norm_b,
                            d_e.data(), blk.ehat.data(), blk.rstd.data(), w + bo.norm_g, g, c);

        // Cells in reverse.
        for (int cidx = cfg_.encoder_cells - 1; cidx >= 0; --cidx) {
            const CellOffsets& co = bo.cells[static_cast<std::size_t>(cidx)];
            Workspace::Cell& cw =
                ws.cells[static_cast<std::size_t>(r) * cfg_.encoder_cells + cidx];

            // LN2 backward: r2 = l1 + drop(f2); out = LN(r2).
            static thread_local std::vector<double> d_r2, d_l1, d_f2, d_r1, d_branch;
            d_r2.assign(static_cast<std::size_t>(gc), 0.0);
            layer_norm_backward(d_r2.data(), grad.data() + co.ln_g, grad.data() + co.ln_b,
                                d_y.data(), cw.l2hat.data(), cw.ln2_rstd.data(), w + co.ln_g, g,
                                c);
            d_l1.assign(d_r2.begin(), d_r2.end()); // residual path into l1
            d_f2.assign(static_cast<std::size_t>(gc), 0.0);
            if (use_drop) {
                for (std::ptrdiff_t i = 0; i < gc; ++i)
                    d_f2[static_cast<std::size_t>(i)] =
                        cw.drop2[static_cast<std::size_t>(i)]
                            ? d_r2[static_cast<std::size_t>(i)] / keep
                            : 0.0;
            } else {
                d_f2 = d_r2;
            }

            // FF backward: f2 = ff2(relu(ff1(l1))).
            d_ff.assign(static_cast<std::size_t>(g) * cfg_.ff_dim, 0.0);
            linear_backward(d_ff.data(), grad.data() + co.ff2_w, grad.data() + co.ff2_b,
                            d_f2.data(), cw.f1.data(), w + co.ff2_w, g, cfg_.ff_dim, c);
            for (std::size_t i = 0; i < cw.f1.size(); ++i)
                if (cw.f1[i] <= 0.0) d_ff[i] = 0.0;
            linear_backward(d_l1.data(), grad.data() + co.ff1_w, grad.data() + co.ff1_b,
                            d_ff.data(), cw.l1.data(), w + co.ff1_w, g, c, cfg_.ff_dim);

            // LN1 backward: r1 = x_in + drop(branch); l1 = LN(r1).
            d_r1.assign(static_cast<std::size_t>(gc), 0.0);
            layer_norm_backward(d_r1.data(), grad.data() + co.ln_g, grad.data() + co.ln_b,
                                d_l1.data(), cw.l1hat.data(), cw.ln1_rstd.data(), w + co.ln_g, g,
                                c);
            d_branch.assign(static_cast<std::size_t>(gc), 0.0);
            if (use_drop) {
                for (std::ptrdiff_t i = 0; i < gc; ++i)
                    d_branch[static_cast<std::size_t>(i)] =
                        cw.drop1[static_cast<std::size_t>(i)]
                            ? d_r1[static_cast<std::size_t>(i)] / keep
                            : 0.0;
            } else {
                d_branch = d_r1;
            }

            // d_x accumulates the residual path; branch backward adds more.
            d_y.assign(d_r1.begin(), d_r1.end()); // reuse d_y as d_x_in

            if (cfg_.backbone == Backbone::rsa) {
                // Transpose branch gradient to channel-major per head: d_O.
                std::vector<double>& d_o = ws.d_cm1;
                d_o.resize(static_cast<std::size_t>(gc));
                for (int p = 0; p < g; ++p)
                    for (int i = 0; i < c; ++i)
                        d_o[static_cast<std::size_t>(i) * g + p] =
                            d_branch[static_cast<std::size_t>(p) * c + i];

                std::vector<double>& d_hv = ws.d_cm2;
                std::vector<double>& d_hk = ws.d_cm3;
                std::vector<double>& d_qn = ws.d_cm4;
                d_hv.assign(static_cast<std::size_t>(gc), 0.0);
                d_hk.assign(static_cast<std::size_t>(gc), 0.0);
                d_qn.assign(static_cast<std::size_t>(gc), 0.0);
                std::vector<double>& d_kern = ws.d_kern;
                d_kern.resize(static_cast<std::size_t>(g) * g);

                static thread_local std::vector<double> d_kn, d_vn;
                d_kn.assign(static_cast<std::size_t>(gc), 0.0);
                d_vn.assign(static_cast<std::size_t>(gc), 0.0);

                const std::ptrdiff_t conv_w_sz =
                    static_cast<std::ptrdiff_t>(d) * d * cfg_.kernel_t * cfg_.kernel_f;
                for (int hh = 0; hh < nh; ++hh) {
                    const std::ptrdiff_t hbase = static_cast<std::ptrdiff_t>(hh) * d * g;
                    const double* kern = cw.kern.data() + static_cast<std::ptrdiff_t>(hh) * g * g;
                    std::fill(d_kern.begin(), d_kern.end(), 0.0);
                    // O[c,i] = sum_j HV[c,j] kern[i,j]
                    for (int ci2 = 0; ci2 < d; ++ci2) {
                        const double* dor = d_o.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        const double* vrow = cw.hv.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        double* dvrow = d_hv.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        for (int i = 0; i < g; ++i) {
                            const double dov = dor[i];
                            if (dov == 0.0) continue;
                            const double* krn = kern + static_cast<std::ptrdiff_t>(i) * g;
                            double* dkrn = d_kern.data() + static_cast<std::ptrdiff_t>(i) * g;
                            for (int j = 0; j < g; ++j) {
                                dvrow[j] += dov * krn[j];
                                dkrn[j] += dov * vrow[j];
                            }
                        }
                    }
                    // kern[i,j] = sum_c qn[c,i] hk[c,j]
                    for (int ci2 = 0; ci2 < d; ++ci2) {
                        const double* qrow = cw.qn.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        const double* krow = cw.hk.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        double* dqrow = d_qn.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        double* dkrow = d_hk.data() + hbase + static_cast<std::ptrdiff_t>(ci2) * g;
                        for (int i = 0; i < g; ++i) {
                            const double* dkrn = d_kern.data() + static_cast<std::ptrdiff_t>(i) * g;
                            double acc = 0.0;
                            const double qv = qrow[i];
                            for (int j = 0; j < g; ++j) {
                                acc += dkrn[j] * krow[j];
                                dkrow[j] += dkrn[j] * qv;
                            }
                            dqrow[i] += acc;
                        }
                    }
                    // Conv backward for both relational kernels.
                    conv_backward(d_kn.data() + hbase, grad.data() + co.h1_w + hh * conv_w_sz,
                                  d_hk.data() + hbase, cw.kn.data() + hbase,
                                  w + co.h1_w + hh * conv_w_sz, ws.len, nf, d, cfg_.kernel_t,
                                  cfg_.kernel_f);
                    conv_backward(d_vn.data() + hbase, grad.data() + co.h2_w + hh * conv_w_sz,
                                  d_hv.data() + hbase, cw.vn.data() + hbase,
                                  w + co.h2_w + hh * conv_w_sz, ws.len, nf, d, cfg_.kernel_t,
                                  cfg_.kernel_f);
                }

                // Normalization backward (channel-major -> position-major d_a2).
                static thread_local std::vector<double> d_a2;
                d_a2.assign(static_cast<std::size_t>(gc) * 3, 0.0);
                for (int p = 0; p < g; ++p) {
                    double* da2p = d_a2.data() + static_cast<std::ptrdiff_t>(p) * 3 * c;
                    for (int hh = 0; hh < nh; ++hh) {
                        const int base = hh * d;
                        double dotq = 0.0, dotk = 0.0, dotv = 0.0;
                        for (int i = 0; i < d; ++i) {
                            const std::size_t cm = static_cast<std::size_t>(base + i) * g + p;
                            dotq += d_qn[cm] * cw.qn[cm];
                            dotk += d_kn[cm] * cw.kn[cm];
                            dotv += d_vn[cm] * cw.vn[cm];
                        }
                        const double nq = cw.nq[static_cast<std::size_t>(p) * nh + hh];
                        const double nk = cw.nk[static_cast<std::size_t>(p) * nh + hh];
                        const double nv = cw.nv[static_cast<std::size_t>(p) * nh + hh];
                        for (int i = 0; i < d; ++i) {
                            const std::size_t cm = static_cast<std::size_t>(base + i) * g + p;
                            da2p[base + i] = (d_qn[cm] - cw.qn[cm] * dotq) / nq;
                            da2p[c + base + i] = (d_kn[cm] - cw.kn[cm] * dotk) / nk;
                            da2p[2 * c + base + i] = (d_vn[cm] - cw.vn[cm] * dotv) / nv;
                        }
                    }
                }

                // proj2 backward -> d_s; SiLU backward -> d_a1; proj1 -> d_x.
                static thread_local std::vector<double> d_s;
                d_s.assign(static_cast<std::size_t>(gc), 0.0);
                linear_backward(d_s.data(), grad.data() + co.proj2_w, nullptr, d_a2.data(),
                                cw.s.data(), w + co.proj2_w, g, c, 3 * c);
                for (std::ptrdiff_t i = 0; i < gc; ++i) {
                    const double a = cw.a1[static_cast<std::size_t>(i)];
                    const double sg = sigmoid(a);
                    d_s[static_cast<std::size_t>(i)] *= sg * (1.0 + a * (1.0 - sg));
                }
                linear_backward(d_y.data(), grad.data() + co.proj1_w, nullptr, d_s.data(),
                                cw.x_in.data(), w + co.proj1_w, g, c, c);
            } else {
                static thread_local std::vector<double> d_m1;
                d_m1.assign(static_cast<std::size_t>(gc), 0.0);
                linear_backward(d_m1.data(), grad.data() + co.fc2_w, grad.data() + co.fc2_b,
                                d_branch.data(), cw.m1r.data(), w + co.fc2_w, g, c, c);
                for (std::ptrdiff_t i = 0; i < gc; ++i)
                    if (cw.m1[static_cast<std::size_t>(i)] <= 0.0)
                        d_m1[static_cast<std::size_t>(i)] = 0.0;
                linear_backward(d_y.data(), grad.data() + co.fc1_w, grad.data() + co.fc1_b,
                                d_m1.data(), cw.x_in.data(), w + co.fc1_w, g, c, c);
            }
            // d_y now holds the gradient w.r.t. this cell's input.
        }

        // Gradient w.r.t. the block input: residual join (d_cur) + cell chain.
        for (std::ptrdiff_t i = 0; i < gc; ++i)
            d_cur[static_cast<std::size_t>(i)] += d_y[static_cast<std::size_t>(i)];
    }

    // Embedding backward from d_cur (gradient w.r.t. x0).
    {
        double* dvw = grad.data() + off.value_w;
        double* dvb = grad.data() + off.value_b;
        double* dtw = grad.data() + off.time;
        double* dfw = grad.data() + off.feature;
        double* dsw = grad.data() + off.step + static_cast<std::ptrdiff_t>(ws.k) * c;
        double* dmw = grad.data() + off.maskemb;
        for (int p = 0; p < g; ++p) {
            const double z = ws.data[p];
            const int t = p / nf, f = p % nf;
            double* dtr = dtw + static_cast<std::ptrdiff_t>(t) * c;
            double* dfr = dfw + static_cast<std::ptrdiff_t>(f) * c;
            double* dmr = dmw + static_cast<std::ptrdiff_t>(ws.mask[p] ? 1 : 0) * c;
            const double* dx = d_cur.data() + static_cast<std::ptrdiff_t>(p) * c;
            for (int i = 0; i < c; ++i) {
                dvw[i] += dx[i] * z;
                dvb[i] += dx[i];
                dtr[i] += dx[i];
                dfr[i] += dx[i];
                dsw[i] += dx[i];
                dmr[i] += dx[i];
            }
        }
    }
}

} // namespace cdm
