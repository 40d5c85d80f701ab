// Data-io tests: byte-level format oracles, exact round-trips, strict JSON
// parsing, and the tensor-assembly rules checked cell by cell against
// hand-built trajectories.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cdm/data_io.hpp"
#include "cdm/errors.hpp"

namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::current_path() / "test_artifacts_data_io";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::vector<unsigned char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(is)),
                                      std::istreambuf_iterator<char>());
}

template <typename T>
void append_pod(std::vector<unsigned char>& out, T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    out.insert(out.end(), p, p + sizeof v);
}

} // namespace

TEST_CASE("tensor file bytes match the documented layout exactly") {
    const fs::path p = test_dir() / "layout.cdt";
    const std::vector<double> vals{1.5, -2.25};
    cdm::write_tensor_file(p, cdm::Tensor::f64({2, 1}, vals));

    std::vector<unsigned char> want;
    want.insert(want.end(), {'C', 'D', 'T', '1'});
    append_pod<std::uint32_t>(want, 2); // dtype code f64
    append_pod<std::uint32_t>(want, 2); // rank
    append_pod<std::uint64_t>(want, 2);
    append_pod<std::uint64_t>(want, 1);
    for (double v : vals) append_pod(want, v);
    CHECK(slurp(p) == want);
    CHECK_FALSE(fs::exists(p.string() + ".tmp")); // atomic write cleaned up
}

TEST_CASE("tensor round-trips are exact for every dtype") {
    const fs::path p = test_dir() / "roundtrip.cdt";
    {
        const std::vector<double> v{0.1, -1e300, 5e-324, 0.0, 3.141592653589793};
        cdm::write_tensor_file(p, cdm::Tensor::f64({5}, v));
        const cdm::Tensor t = cdm::read_tensor_file(p);
        CHECK(t.dtype() == cdm::Dtype::f64);
        CHECK(t.dims() == std::vector<std::uint64_t>{5});
        CHECK(t.as_f64() == v);
        CHECK_THROWS_AS(t.as_i32(), cdm::FormatError);
    }
    {
        const std::vector<float> v{1.5f, -0.25f, 1e-30f};
        cdm::write_tensor_file(p, cdm::Tensor::f32({3}, v));
        CHECK(cdm::read_tensor_file(p).as_f32() == v);
    }
    {
        const std::vector<std::int32_t> v{-2, 0, 7, 2147483647};
        cdm::write_tensor_file(p, cdm::Tensor::i32({2, 2}, v));
        CHECK(cdm::read_tensor_file(p).as_i32() == v);
    }
    {
        const std::vector<std::uint8_t> v{0, 1, 255, 128};
        cdm::write_tensor_file(p, cdm::Tensor::bytes({4}, v));
        CHECK(cdm::read_tensor_file(p).as_bytes() == v);
    }
    CHECK_THROWS_AS(cdm::Tensor::f64({3}, {1.0, 2.0}), cdm::ConfigError);
}

TEST_CASE("malformed tensor files are rejected") {
    const fs::path p = test_dir() / "bad.cdt";
    {
        std::ofstream os(p, std::ios::binary);
        os << "NOPE";
    }
    CHECK_THROWS_AS(cdm::read_tensor_file(p), cdm::FormatError);
    {
        std::ofstream os(p, std::ios::binary);
        os << "CDT1"; // header only, truncated
    }
    CHECK_THROWS_AS(cdm::read_tensor_file(p), cdm::FormatError);
    {
        // Valid header that promises more payload than the file holds.
        std::vector<unsigned char> b{'C', 'D', 'T', '1'};
        append_pod<std::uint32_t>(b, 2);
        append_pod<std::uint32_t>(b, 1);
        append_pod<std::uint64_t>(b, 1000);
        std::ofstream os(p, std::ios::binary);
        os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    }
    CHECK_THROWS_AS(cdm::read_tensor_file(p), cdm::FormatError);
    CHECK_THROWS_AS(cdm::read_tensor_file(test_dir() / "missing.cdt"), cdm::IoError);
}

TEST_CASE("containers round-trip and serialize deterministically") {
    cdm::Container c;
    c.meta = {{"type", "demo"}, {"alpha", 0.125}, {"n", 3}};
    c.add("first", cdm::Tensor::f64({2}, {1.0, 2.0}));
    c.add("second", cdm::Tensor::bytes({3}, {9, 8, 7}));
    CHECK_THROWS_AS(c.add("first", cdm::Tensor::f64({1}, {0.0})), cdm::ConfigError);

    const fs::path p1 = test_dir() / "c1.cdc";
    const fs::path p2 = test_dir() / "c2.cdc";
    cdm::write_container(p1, c);
    cdm::write_container(p2, c);
    CHECK(slurp(p1) == slurp(p2)); // byte-deterministic

    const cdm::Container r = cdm::read_container(p1);
    CHECK(r.meta == c.meta);
    REQUIRE(r.tensors().size() == 2);
    CHECK(r.tensors()[0].first == "first"); // order preserved
    CHECK(r.tensors()[1].first == "second");
    CHECK(r.at("first").as_f64() == std::vector<double>{1.0, 2.0});
    CHECK(r.at("second").as_bytes() == std::vector<std::uint8_t>{9, 8, 7});
    CHECK(r.has("second"));
    CHECK_FALSE(r.has("third"));
    CHECK_THROWS_AS(r.at("third"), cdm::FormatError);

    {
        std::ofstream os(p2, std::ios::binary);
        os << "CDT1"; // tensor magic where a container is expected
    }
    CHECK_THROWS_AS(cdm::read_container(p2), cdm::FormatError);
}

TEST_CASE("fnv1a64 matches the published reference vectors") {
    CHECK(cdm::fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(cdm::fnv1a64("a") == 0xaf63dc4c8601ec8cull);
    CHECK(cdm::fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("config hashes are order-insensitive and value-sensitive") {
    nlohmann::json a;
    a["x"] = 1;
    a["y"] = 2.5;
    nlohmann::json b;
    b["y"] = 2.5;
    b["x"] = 1;
    CHECK(cdm::config_hash(a) == cdm::config_hash(b));
    CHECK(cdm::config_hash(a).size() == 16);
    b["x"] = 2;
    CHECK(cdm::config_hash(a) != cdm::config_hash(b));
}

TEST_CASE("sim config JSON round-trip is lossless and strict") {
    cdm::SimConfig cfg = cdm::SimConfig::defaults();
    cfg.gamma_chemo = 7.5;
    cfg.gamma_radio = 2.25;
    cfg.stage_weights = {0.1, 0.2, 0.3, 0.4};
    cfg.stage_init[2].mu_log = 3.7;
    cfg.param_corr = 0.45;
    const nlohmann::json j = cdm::to_json(cfg);
    const cdm::SimConfig back = cdm::sim_config_from_json(j);
    CHECK(cdm::to_json(back) == j);
    CHECK(back.gamma_chemo == 7.5);
    CHECK(back.stage_init[2].mu_log == 3.7);

    // Partial configs keep defaults; unknown keys are rejected.
    const cdm::SimConfig partial = cdm::sim_config_from_json({{"gamma_chemo", 5.0}});
    CHECK(partial.gamma_chemo == 5.0);
    CHECK(partial.horizon == cdm::SimConfig::defaults().horizon);
    CHECK(partial.k_cc == cdm::SimConfig::defaults().k_cc);
    CHECK_THROWS_AS(cdm::sim_config_from_json({{"gammma_chemo", 5.0}}), cdm::ConfigError);
    CHECK_THROWS_AS(cdm::sim_config_from_json({{"horizon", "thirty"}}), cdm::ConfigError);
    CHECK_THROWS_AS(cdm::sim_config_from_json(nlohmann::json::array()), cdm::ConfigError);
    CHECK_THROWS_AS(cdm::sim_config_from_json({{"stage_init", {{1.0, 2.0}}}}), cdm::ConfigError);
}

TEST_CASE("model and train configs round-trip through JSON") {
    cdm::DenoiserConfig m;
    m.embed_dim = 16;
    m.backbone = cdm::Backbone::mlp;
    m.dropout = 0.25;
    const cdm::DenoiserConfig m2 = cdm::denoiser_config_from_json(cdm::to_json(m));
    CHECK(cdm::to_json(m2) == cdm::to_json(m));
    CHECK(m2.backbone == cdm::Backbone::mlp);
    CHECK_THROWS_AS(cdm::denoiser_config_from_json({{"backbone", "rnn"}}), cdm::ConfigError);
    CHECK_THROWS_AS(cdm::denoiser_config_from_json({{"embed", 1}}), cdm::ConfigError);

    cdm::TrainHyper h;
    h.epochs = 7;
    h.lr0 = 0.02;
    h.random_prefix = false;
    const cdm::TrainHyper h2 = cdm::train_hyper_from_json(cdm::to_json(h));
    CHECK(cdm::to_json(h2) == cdm::to_json(h));
    CHECK_FALSE(h2.random_prefix);

    cdm::ScheduleKind kind = cdm::ScheduleKind::cosine;
    int steps = 5;
    cdm::schedule_from_json({{"kind", "linear"}, {"steps", 9}}, kind, steps);
    CHECK(kind == cdm::ScheduleKind::linear);
    CHECK(steps == 9);
    CHECK(cdm::schedule_to_json(cdm::ScheduleKind::linear, 9) ==
          nlohmann::json({{"kind", "linear"}, {"steps", 9}}));
}

TEST_CASE("cohort files round-trip a simulated cohort exactly") {
    cdm::SimConfig cfg = cdm::SimConfig::defaults();
    cfg.gamma_chemo = 5.0;
    cfg.gamma_radio = 5.0;
    const cdm::Cohort cohort = cdm::simulate_cohort(cfg, 30, 4242);
    const fs::path p = test_dir() / "cohort.cdc";
    cdm::write_cohort(p, cohort, cfg, 4242);

    const cdm::CohortFile back = cdm::read_cohort(p);
    CHECK(back.seed == 4242);
    CHECK(cdm::to_json(back.cfg) == cdm::to_json(cfg));
    CHECK(back.meta.at("config_hash") == cdm::config_hash(cdm::to_json(cfg)));
    REQUIRE(back.cohort.size() == cohort.size());
    for (int i = 0; i < cohort.size(); ++i) {
        const auto& a = cohort.trajectories[static_cast<std::size_t>(i)];
        const auto& b = back.cohort.trajectories[static_cast<std::size_t>(i)];
        CHECK(a.volumes == b.volumes);
        CHECK(a.chemo_conc == b.chemo_conc);
        CHECK(a.chemo_applied == b.chemo_applied);
        CHECK(a.radio_applied == b.radio_applied);
        CHECK(a.active_len == b.active_len);
        CHECK(a.terminal == b.terminal);
        const auto& pa = cohort.params[static_cast<std::size_t>(i)];
        const auto& pb = back.cohort.params[static_cast<std::size_t>(i)];
        CHECK(pa.rho == pb.rho);
        CHECK(pa.alpha == pb.alpha);
        CHECK(pa.beta == pb.beta);
        CHECK(pa.beta_c == pb.beta_c);
        CHECK(pa.stage == pb.stage);
        CHECK(pa.v0 == pb.v0);
    }

    // Two writes of the same cohort are byte-identical.
    const fs::path p2 = test_dir() / "cohort2.cdc";
    cdm::write_cohort(p2, cohort, cfg, 4242);
    CHECK(slurp(p) == slurp(p2));
    // A tensor file is not a cohort.
    cdm::write_tensor_file(p2, cdm::Tensor::f64({1}, {1.0}));
    CHECK_THROWS_AS(cdm::read_cohort(p2), cdm::FormatError);
}

namespace {

cdm::TrainDataset tiny_dataset(int b, int t, int f, std::uint64_t seed) {
    cdm::TrainDataset ds;
    ds.b = b;
    ds.t = t;
    ds.f = f;
    ds.data.resize(static_cast<std::size_t>(b) * t * f);
    cdm::Rng rng(seed);
    for (double& v : ds.data) v = rng.normal();
    ds.seq_len.assign(static_cast<std::size_t>(b), t);
    return ds;
}

} // namespace

TEST_CASE("checkpoints restore weights, optimizer state, and trainer state") {
    cdm::DenoiserConfig mc;
    mc.embed_dim = 4;
    mc.residual_layers = 1;
    mc.encoder_cells = 1;
    mc.num_heads = 2;
    mc.kernel_t = 3;
    mc.kernel_f = 3;
    mc.ff_dim = 6;
    mc.dropout = 0.0;
    mc.num_features = 2;
    mc.max_time = 8;
    const cdm::NoiseSchedule sched = cdm::make_schedule(cdm::ScheduleKind::cosine, 5);
    cdm::TrainHyper hyper;
    hyper.epochs = 4;
    hyper.batch_size = 3;
    const cdm::TrainDataset train = tiny_dataset(6, 6, 2, 51);
    const cdm::TrainDataset val = tiny_dataset(3, 6, 2, 52);

    // Straight-through run for reference.
    cdm::Denoiser ref(mc, 99);
    cdm::Trainer tref(ref, sched, hyper, 7);
    tref.fit(train, val);

    // Interrupted run: stop after 2 epochs, checkpoint, restore, continue.
    cdm::Denoiser a(mc, 99);
    cdm::TrainHyper h2 = hyper;
    h2.epochs = 2;
    cdm::Trainer ta(a, sched, h2, 7);
    ta.fit(train, val);
    const fs::path p = test_dir() / "ckpt.cdc";
    cdm::save_checkpoint(p, a, ta.state(), cdm::ScheduleKind::cosine, 5, hyper, 7);

    const cdm::Checkpoint ck = cdm::load_checkpoint(p);
    CHECK(cdm::to_json(ck.model_cfg) == cdm::to_json(mc));
    CHECK(ck.kind == cdm::ScheduleKind::cosine);
    CHECK(ck.steps == 5);
    CHECK(cdm::to_json(ck.hyper) == cdm::to_json(hyper));
    CHECK(ck.seed == 7);
    CHECK(ck.tstate.epochs_done == 2);
    REQUIRE(ck.tstate.history.size() == 2);
    CHECK(ck.tstate.history[1].val_loss == ta.state().history[1].val_loss);

    cdm::Denoiser b(mc, 1); // different init; fully overwritten by restore
    cdm::restore_model(b, ck);
    CHECK(b.params().weights() == a.params().weights());
    CHECK(b.params().adam_m() == a.params().adam_m());
    CHECK(b.params().adam_v() == a.params().adam_v());
    CHECK(b.params().adam_steps() == a.params().adam_steps());

    cdm::Trainer tb(b, sched, hyper, 7);
    tb.load_state(ck.tstate);
    tb.fit(train, val);
    CHECK(b.params().weights() == ref.params().weights());
    REQUIRE(tb.state().history.size() == 4);
    CHECK(tb.state().history[3].val_loss == tref.state().history[3].val_loss);

    // Mismatched architecture is rejected.
    cdm::DenoiserConfig other = mc;
    other.embed_dim = 8;
    other.num_heads = 4;
    cdm::Denoiser c(other, 1);
    CHECK_THROWS_AS(cdm::restore_model(c, ck), cdm::ConfigError);
}

TEST_CASE("training tensor assembly: cell-exact against a hand-built cohort") {
    cdm::SimConfig cfg = cdm::SimConfig::defaults();
    cfg.horizon = 5;
    cdm::Cohort cohort;
    {
        // Patient 0: one recorded step -> skipped.
        cdm::Trajectory tr;
        tr.volumes = {3.0};
        tr.chemo_applied = {1};
        tr.radio_applied = {0};
        tr.chemo_conc = {5.0};
        tr.active_len = 1;
        tr.terminal = cdm::Trajectory::Terminal::died;
        cohort.trajectories.push_back(tr);
        cdm::PatientParams p;
        p.stage = 1;
        cohort.params.push_back(p);
    }
    {
        // Patient 1: three recorded steps.
        cdm::Trajectory tr;
        tr.volumes = {2.0, 4.0, 8.0};
        tr.chemo_applied = {1, 0, 1};
        tr.radio_applied = {0, 1, 0};
        tr.chemo_conc = {5.0, 2.5, 6.25};
        tr.active_len = 3;
        tr.terminal = cdm::Trajectory::Terminal::alive;
        cohort.trajectories.push_back(tr);
        cdm::PatientParams p;
        p.stage = 4;
        cohort.params.push_back(p);
    }

    int skipped = -1;
    const cdm::TrainDataset ds = cdm::assemble_training_tensor(cohort, cfg, &skipped);
    CHECK(skipped == 1);
    CHECK(ds.b == 1);
    CHECK(ds.t == 5);
    CHECK(ds.f == 4);
    CHECK(ds.seq_len == std::vector<int>{3});
    CHECK(ds.features_to_impute == std::vector<int>{0});
    const double vm = cfg.v_max;
    const double expect[3][4] = {{2.0 / vm, 1, 0, 1.0},
                                 {4.0 / vm, 0, 1, 1.0},
                                 {8.0 / vm, 1, 0, 1.0}};
    for (int q = 0; q < 3; ++q)
        for (int ch = 0; ch < 4; ++ch) CHECK(ds.data[ds.idx(0, q, ch)] == expect[q][ch]);
    // Padding beyond seq_len stays zero.
    for (int q = 3; q < 5; ++q)
        for (int ch = 0; ch < 4; ++ch) CHECK(ds.data[ds.idx(0, q, ch)] == 0.0);

    cdm::Cohort empty;
    empty.trajectories.push_back(cohort.trajectories[0]);
    empty.params.push_back(cohort.params[0]);
    CHECK_THROWS_AS(cdm::assemble_training_tensor(empty, cfg, nullptr), cdm::ConfigError);
}

TEST_CASE("eval tensor assembly: history, override, target, and future treatments") {
    cdm::SimConfig cfg = cdm::SimConfig::defaults();
    cfg.horizon = 6;
    cdm::Trajectory tr;
    tr.volumes = {1.0, 2.0, 3.0, 4.0};
    tr.chemo_applied = {1, 0, 0, 1};
    tr.radio_applied = {0, 0, 1, 1};
    tr.chemo_conc = {5.0, 2.5, 1.25, 5.625};
    tr.active_len = 4;
    cdm::PatientParams p;
    p.stage = 2;
    const double sc = 1.0 / 3.0;
    const double vm = cfg.v_max;

    // Interior t: the next step's factual treatments are recorded.
    {
        const cdm::EvalTensor et =
            cdm::assemble_eval_tensor(tr, p, cfg, 2, cdm::TreatmentChoice::chemo);
        CHECK(et.len == 4);
        REQUIRE(et.data.size() == 16);
        // Positions 0..1: factual history.
        CHECK(et.data[0] == 1.0 / vm);
        CHECK(et.data[1] == 1.0);
        CHECK(et.data[2] == 0.0);
        CHECK(et.data[3] == sc);
        CHECK(et.data[4] == 2.0 / vm);
        CHECK(et.data[5] == 0.0);
        CHECK(et.data[6] == 0.0);
        CHECK(et.data[7] == sc);
        // Position 2: factual volume, treatment overridden to chemo-only
        // (factual was radio-only).
        CHECK(et.data[8] == 3.0 / vm);
        CHECK(et.data[9] == 1.0);
        CHECK(et.data[10] == 0.0);
        CHECK(et.data[11] == sc);
        // Position 3: masked target with the factual treatments drawn at 3.
        CHECK(et.data[12] == 0.0);
        CHECK(et.data[13] == 1.0);
        CHECK(et.data[14] == 1.0);
        CHECK(et.data[15] == sc);
        std::vector<std::uint8_t> want_mask(16, 0);
        want_mask[12] = 1;
        CHECK(et.mask == want_mask);
    }
    // Last valid t: step t+1 was never recorded, so its treatments are zero.
    {
        const cdm::EvalTensor et =
            cdm::assemble_eval_tensor(tr, p, cfg, 3, cdm::TreatmentChoice::both);
        CHECK(et.len == 5);
        CHECK(et.data[static_cast<std::size_t>(3) * 4 + 1] == 1.0); // override
        CHECK(et.data[static_cast<std::size_t>(3) * 4 + 2] == 1.0);
        CHECK(et.data[static_cast<std::size_t>(4) * 4 + 1] == 0.0);
        CHECK(et.data[static_cast<std::size_t>(4) * 4 + 2] == 0.0);
        CHECK(et.mask[static_cast<std::size_t>(4) * 4] == 1);
    }
    // The no-treatment override zeroes both indicator channels at t.
    {
        const cdm::EvalTensor et =
            cdm::assemble_eval_tensor(tr, p, cfg, 1, cdm::TreatmentChoice::none);
        CHECK(et.data[static_cast<std::size_t>(1) * 4 + 1] == 0.0);
        CHECK(et.data[static_cast<std::size_t>(1) * 4 + 2] == 0.0);
    }
    CHECK_THROWS_AS(cdm::assemble_eval_tensor(tr, p, cfg, 0, cdm::TreatmentChoice::none),
                    std::out_of_range);
    CHECK_THROWS_AS(cdm::assemble_eval_tensor(tr, p, cfg, 4, cdm::TreatmentChoice::none),
                    std::out_of_range);
}

TEST_CASE("eval tensors agree with the training tensor over the shared history") {
    cdm::SimConfig cfg = cdm::SimConfig::defaults();
    cfg.gamma_chemo = 5.0;
    cfg.gamma_radio = 5.0;
    const cdm::Cohort cohort = cdm::simulate_cohort(cfg, 12, 77);
    const cdm::TrainDataset ds = cdm::assemble_training_tensor(cohort, cfg, nullptr);
    int row = -1;
    for (int i = 0; i < cohort.size(); ++i) {
        const cdm::Trajectory& tr = cohort.trajectories[static_cast<std::size_t>(i)];
        if (tr.active_len < 2) continue;
        ++row;
        if (tr.active_len < 3) continue;
        const int t = tr.active_len / 2;
        if (t < 1) continue;
        const cdm::TreatmentChoice factual = static_cast<cdm::TreatmentChoice>(
            (tr.chemo_applied[static_cast<std::size_t>(t)] ? 1 : 0) +
            (tr.radio_applied[static_cast<std::size_t>(t)] ? 2 : 0));
        const cdm::EvalTensor et = cdm::assemble_eval_tensor(
            tr, cohort.params[static_cast<std::size_t>(i)], cfg, t, factual);
        // With the factual choice, positions 0..t match the training tensor.
        for (int q = 0; q <= t; ++q)
            for (int ch = 0; ch < 4; ++ch)
                CHECK(et.data[static_cast<std::size_t>(q) * 4 + ch] == ds.data[ds.idx(row, q, ch)]);
    }
    REQUIRE(row >= 0);
}
