#include "cdm/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <set>
#include <string>

#include "cdm/errors.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cdm {

namespace {
constexpr std::uint64_t kEpochStreamTag = 0x65706f63ull; // epoch shuffle/noise
constexpr std::uint64_t kValStreamTag = 0x76616c69ull;   // validation noise
} // namespace

int effective_threads() {
    const char* env = std::getenv("CDM_THREADS");
    if (!env || *env == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || v < 1) return 1;
    return static_cast<int>(std::min(v, 256l));
}

void TrainHyper::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (lr0 < 0.0) throw ConfigError("train: lr0 must be >= 0");
    if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0)
        throw ConfigError("train: lr_decay_factor must be in (0, 1]");
    if (lr_min < 0.0) throw ConfigError("train: lr_min must be >= 0");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (plateau_min_delta < 0.0) throw ConfigError("train: plateau_min_delta must be >= 0");
}

void TrainDataset::validate(const DenoiserConfig& model_cfg) const {
    if (b < 1 || t < 1 || f < 1) throw ConfigError("dataset: empty tensor");
    if (f != model_cfg.num_features)
        throw ConfigError("dataset: feature count " + std::to_string(f) +
                          " does not match the model (" +
                          std::to_string(model_cfg.num_features) + ")");
    if (t > model_cfg.max_time)
        throw ConfigError("dataset: sequence capacity " + std::to_string(t) +
                          " exceeds the model time-embedding table (" +
                          std::to_string(model_cfg.max_time) + ")");
    if (data.size() != static_cast<std::size_t>(b) * t * f)
        throw ConfigError("dataset: data size does not match [b x t x f]");
    if (seq_len.size() != static_cast<std::size_t>(b))
        throw ConfigError("dataset: seq_len size does not match item count");
    for (int sl : seq_len)
        if (sl < 2 || sl > t)
            throw ConfigError("dataset: every seq_len must lie in [2, t]");
    if (features_to_impute.empty())
        throw ConfigError("dataset: features_to_impute must not be empty");
    std::set<int> seen;
    for (int ft : features_to_impute) {
        if (ft < 0 || ft >= f)
            throw ConfigError("dataset: features_to_impute entry out of range");
        if (!seen.insert(ft).second)
            throw ConfigError("dataset: duplicate entry in features_to_impute");
    }
}

BatchLoss training_loss(Denoiser& model, const TrainDataset& ds,
                        const std::vector<int>& items, const NoiseSchedule& sched,
                        bool random_prefix, Rng& rng, bool with_grad, bool train_mode) {
    ds.validate(model.config());
    if (items.empty()) throw ConfigError("training_loss: empty item list");
    for (int it : items)
        if (it < 0 || it >= ds.b) throw ConfigError("training_loss: item index out of range");
    if (sched.steps > model.config().diffusion_steps)
        throw ConfigError("training_loss: schedule has more steps than the model step table");

    const int nitems = static_cast<int>(items.size());
    const int f = ds.f;
    std::vector<std::uint64_t> item_seed(static_cast<std::size_t>(nitems));
    for (auto& s : item_seed) s = rng.bits();

    const std::int64_t nmask =
        static_cast<std::int64_t>(nitems) * static_cast<std::int64_t>(ds.features_to_impute.size());
    const double inv = 1.0 / static_cast<double>(nmask);

    const int nt = std::max(1, std::min(effective_threads(), nitems));
    std::vector<std::vector<double>> gbuf;
    if (with_grad)
        gbuf.assign(static_cast<std::size_t>(nt),
                    std::vector<double>(static_cast<std::size_t>(model.param_count()), 0.0));
    std::vector<std::shared_ptr<Denoiser::Workspace>> wss(static_cast<std::size_t>(nt));
    for (auto& w : wss) w = model.make_workspace();

    std::vector<double> losses(static_cast<std::size_t>(nitems), 0.0);
    std::exception_ptr err;

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
#endif
    for (int ii = 0; ii < nitems; ++ii) {
        try {
#ifdef _OPENMP
            const int tid = omp_get_thread_num();
#else
            const int tid = 0;
#endif
            Rng r(item_seed[static_cast<std::size_t>(ii)]);
            const int item = items[static_cast<std::size_t>(ii)];
            const int sl = ds.seq_len[static_cast<std::size_t>(item)];
            const int len =
                random_prefix ? 2 + static_cast<int>(r.uniform_int(
                                        static_cast<std::uint64_t>(sl - 1)))
                              : sl;
            const int k = 1 + static_cast<int>(
                                  r.uniform_int(static_cast<std::uint64_t>(sched.steps)));
            const int slab = len * f;

            std::vector<double> z(ds.data.begin() + static_cast<std::ptrdiff_t>(ds.idx(item, 0, 0)),
                                  ds.data.begin() +
                                      static_cast<std::ptrdiff_t>(ds.idx(item, 0, 0)) + slab);
            std::vector<std::uint8_t> m(static_cast<std::size_t>(slab), 0);
            for (int ft : ds.features_to_impute)
                m[static_cast<std::size_t>(len - 1) * f + ft] = 1;
            std::vector<double> eps(static_cast<std::size_t>(slab));
            for (double& e : eps) e = r.normal();

            const double ab = sched.alpha_bar(k);
            const double sq_ab = std::sqrt(ab);
            const double sq_1mab = std::sqrt(1.0 - ab);
            for (int i = 0; i < slab; ++i)
                if (m[static_cast<std::size_t>(i)])
                    z[static_cast<std::size_t>(i)] =
                        sq_ab * z[static_cast<std::size_t>(i)] +
                        sq_1mab * eps[static_cast<std::size_t>(i)];

            std::vector<double> ehat(static_cast<std::size_t>(slab));
            model.forward(z.data(), m.data(), len, k, ehat.data(),
                          *wss[static_cast<std::size_t>(tid)], train_mode,
                          train_mode ? &r : nullptr);

            double lsum = 0.0;
            std::vector<double> up(static_cast<std::size_t>(slab), 0.0);
            for (int i = 0; i < slab; ++i)
                if (m[static_cast<std::size_t>(i)]) {
                    const double d = ehat[static_cast<std::size_t>(i)] -
                                     eps[static_cast<std::size_t>(i)];
                    lsum += d * d;
                    up[static_cast<std::size_t>(i)] = 2.0 * d * inv;
                }
            losses[static_cast<std::size_t>(ii)] = lsum;
            if (with_grad)
                model.backward(up.data(), gbuf[static_cast<std::size_t>(tid)],
                               *wss[static_cast<std::size_t>(tid)]);
        } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
            if (!err) err = std::current_exception();
        }
    }
    if (err) std::rethrow_exception(err);

    if (with_grad) {
        std::vector<double>& g = model.params().grads();
        for (int tid = 0; tid < nt; ++tid) {
            const std::vector<double>& src = gbuf[static_cast<std::size_t>(tid)];
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
        }
    }
    BatchLoss out;
    out.masked_coords = nmask;
    double total = 0.0;
    for (double l : losses) total += l;
    out.loss = total * inv;
    return out;
}

Trainer::Trainer(Denoiser& model, const NoiseSchedule& sched, const TrainHyper& hyper,
                 std::uint64_t seed)
    : model_(model), sched_(sched), hyper_(hyper), seed_(seed) {
    hyper_.validate();
    if (sched_.steps > model_.config().diffusion_steps)
        throw ConfigError("trainer: schedule has more steps than the model step table");
    state_.lr = hyper_.lr0;
}

double Trainer::run_train_epoch(const TrainDataset& train, int epoch) {
    Rng erng(derive_seed(seed_, kEpochStreamTag, static_cast<std::uint64_t>(epoch)));
    std::vector<int> perm(static_cast<std::size_t>(train.b));
    std::iota(perm.begin(), perm.end(), 0);
    erng.shuffle(perm.begin(), perm.end());

    double sq_total = 0.0;
    std::int64_t n_total = 0;
    for (int start = 0; start < train.b; start += hyper_.batch_size) {
        const int stop = std::min(train.b, start + hyper_.batch_size);
        const std::vector<int> chunk(perm.begin() + start, perm.begin() + stop);
        model_.params().zero_grads();
        try {
            const BatchLoss bl =
                training_loss(model_, train, chunk, sched_, hyper_.random_prefix, erng,
                              /*with_grad=*/true, /*train_mode=*/true);
            if (!std::isfinite(bl.loss))
                throw NumericError("training loss became non-finite");
            if (hyper_.grad_clip > 0.0) {
                const double gn = model_.params().grad_norm();
                if (gn > hyper_.grad_clip) model_.params().scale_grads(hyper_.grad_clip / gn);
            }
            AdamHyper ah;
            ah.lr = state_.lr;
            adam_step(model_.params(), ah);
            sq_total += bl.loss * static_cast<double>(bl.masked_coords);
            n_total += bl.masked_coords;
        } catch (const NumericError& e) {
            throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
        }
    }
    return sq_total / static_cast<double>(n_total);
}

double Trainer::run_validation(const TrainDataset& val) {
    // Identical stream every epoch: the same prefixes, steps, and noise are
    // replayed, so changes in the validation loss reflect only the model.
    Rng vrng(derive_seed(seed_, kValStreamTag));
    std::vector<int> all(static_cast<std::size_t>(val.b));
    std::iota(all.begin(), all.end(), 0);
    return training_loss(model_, val, all, sched_, hyper_.random_prefix, vrng,
                         /*with_grad=*/false, /*train_mode=*/false)
        .loss;
}

void Trainer::fit(const TrainDataset& train, const TrainDataset& val,
                  const std::function<void(const EpochStats&)>& cb) {
    train.validate(model_.config());
    val.validate(model_.config());
    for (int epoch = state_.epochs_done; epoch < hyper_.epochs; ++epoch) {
        const double lr_used = state_.lr;
        const double tl = run_train_epoch(train, epoch);
        const double vl = run_validation(val);
        if (!std::isfinite(vl))
            throw NumericError("epoch " + std::to_string(epoch) +
                               ": validation loss became non-finite");
        EpochStats es;
        es.epoch = epoch;
        es.train_loss = tl;
        es.val_loss = vl;
        es.lr = lr_used;
        state_.history.push_back(es);
        state_.epochs_done = epoch + 1;
        if (!state_.has_best || vl < state_.best_val - hyper_.plateau_min_delta) {
            state_.best_val = vl;
            state_.has_best = true;
            state_.since_improve = 0;
        } else if (++state_.since_improve >= hyper_.patience) {
            state_.lr = std::max(state_.lr * hyper_.lr_decay_factor, hyper_.lr_min);
            state_.since_improve = 0;
        }
        if (cb) cb(es);
    }
}

std::vector<double> sample_reverse(const Denoiser& model, const double* cond,
                                   const std::uint8_t* mask, int len,
                                   const NoiseSchedule& sched, int n_samples, Rng& rng) {
    if (n_samples < 1) throw ConfigError("sample_reverse: n_samples must be >= 1");
    if (cond == nullptr || mask == nullptr)
        throw ConfigError("sample_reverse: null condition");
    if (sched.steps > model.config().diffusion_steps)
        throw ConfigError("sample_reverse: schedule has more steps than the model step table");
    const int f = model.config().num_features;
    const int slab = len * f;

    std::vector<int> masked;
    for (int i = 0; i < slab; ++i)
        if (mask[i]) masked.push_back(i);

    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_samples));
    for (auto& s : seeds) s = rng.bits();

    std::vector<double> out(static_cast<std::size_t>(n_samples) * slab);
    const int nt = std::max(1, std::min(effective_threads(), n_samples));
    std::vector<std::shared_ptr<Denoiser::Workspace>> wss(static_cast<std::size_t>(nt));
    for (auto& w : wss) w = model.make_workspace();
    std::exception_ptr err;

#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nt) if (nt > 1)
#endif
    for (int s = 0; s < n_samples; ++s) {
        try {
#ifdef _OPENMP
            const int tid = omp_get_thread_num();
#else
            const int tid = 0;
#endif
            Rng r(seeds[static_cast<std::size_t>(s)]);
            double* z = out.data() + static_cast<std::ptrdiff_t>(s) * slab;
            std::copy(cond, cond + slab, z);
            for (int idx : masked) z[idx] = r.normal();
            if (!masked.empty()) {
                std::vector<double> ehat(static_cast<std::size_t>(slab));
                for (int k = sched.steps; k >= 1; --k) {
                    model.forward(z, mask, len, k, ehat.data(),
                                  *wss[static_cast<std::size_t>(tid)]);
                    const double beta = sched.beta(k);
                    const double ab = sched.alpha_bar(k);
                    const double ab_prev = sched.alpha_bar(k - 1);
                    const double coef = beta / std::sqrt(1.0 - ab);
                    const double denom = std::sqrt(1.0 - beta);
                    const double sigma =
                        k > 1 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) : 0.0;
                    for (int idx : masked) {
                        double zv = (z[idx] - coef * ehat[idx]) / denom;
                        if (k > 1) zv += sigma * r.normal();
                        z[idx] = zv;
                    }
                }
            }
        } catch (...) {
#ifdef _OPENMP
#pragma omp critical
#endif
            if (!err) err = std::current_exception();
        }
    }
    if (err) std::rethrow_exception(err);
    return out;
}

} // namespace cdm
