#include <doctest.h>

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "mtwn/training.hpp"
#include "test_util.hpp"

using namespace mtwn;
using testutil::random_tensor;

namespace {

CorpusSpec tiny_corpus_spec() {
    CorpusSpec spec;
    spec.n_utterances = 4;
    spec.min_frames = 24;
    spec.max_frames = 40;
    spec.seed = 99;
    return spec;
}

std::vector<Utterance> tiny_corpus() {
    const CorpusSpec spec = tiny_corpus_spec();
    std::vector<Utterance> utts;
    for (int i = 0; i < spec.n_utterances; ++i) utts.push_back(generate_utterance(spec, i));
    return utts;
}

TrainConfig tiny_train_config() {
    TrainConfig config;
    config.model.num_stacks = 1;
    config.model.layers_per_stack = 3;  // receptive field 8
    config.model.residual_channels = 6;
    config.model.gate_channels = 6;
    config.model.skip_channels = 8;
    config.conditioner.num_layers = 1;
    config.conditioner.channels_per_direction = 4;
    config.batch.window_samples = 160;  // 2 frames
    config.batch.batch_size = 1;
    config.steps = 12;
    config.seed = 3;
    config.checkpoint_every = 6;
    return config;
}

std::vector<nlohmann::json> read_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    REQUIRE(in);
    std::vector<nlohmann::json> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (j.contains("step")) records.push_back(j);
    }
    return records;
}

}  // namespace

TEST_CASE("condition mode names round trip") {
    for (auto mode : {ConditionMode::kLinguisticOnly, ConditionMode::kLinguisticPlusF0,
                      ConditionMode::kMtl})
        CHECK(condition_mode_from_name(condition_mode_name(mode)) == mode);
    CHECK_THROWS_AS(condition_mode_from_name("bogus"), ArgumentError);
}

TEST_CASE("composite_loss reductions") {
    Rng rng(61);
    Tensor logits = random_tensor({256, 8}, rng);
    std::vector<int> bins = {1, 2, 3, 4, 5, 6, 7, 8};

    SecondaryTargets targets;
    targets.cepstra = random_tensor({3, 2}, rng);
    targets.logf0 = random_tensor({1, 2}, rng);
    targets.vuv = Tensor::from_data({1, 0}, {1, 2});
    Tensor mask = targets.vuv;

    SUBCASE("all weights zero reduces to the CE objective") {
        SecondaryPrediction pred;
        pred.cepstra = random_tensor({3, 2}, rng);
        pred.logf0 = random_tensor({1, 2}, rng);
        pred.vuv = Tensor::full({1, 2}, 0.5);
        CompositeLoss loss =
            composite_loss(logits, bins, pred, targets, mask, {0.0, 0.0, 0.0});
        CHECK(loss.total.item() == loss.ce.item());
    }
    SUBCASE("perfect secondary predictions add nothing") {
        SecondaryPrediction pred;
        pred.cepstra = targets.cepstra;
        pred.logf0 = targets.logf0;
        pred.vuv = targets.vuv;
        CompositeLoss loss =
            composite_loss(logits, bins, pred, targets, mask, {1.0, 1.0, 1.0});
        CHECK(loss.total.item() == doctest::Approx(loss.ce.item()).epsilon(1e-15));
    }
    SUBCASE("two-frame fixture sums by hand") {
        SecondaryTargets t2;
        t2.cepstra = Tensor::from_data({1.0, -1.0}, {1, 2});
        t2.logf0 = Tensor::from_data({2.0, 0.0}, {1, 2});
        t2.vuv = Tensor::from_data({1.0, 0.0}, {1, 2});
        SecondaryPrediction pred;
        pred.cepstra = Tensor::from_data({0.0, 1.0}, {1, 2});  // mse (1 + 4)/2 = 2.5
        pred.logf0 = Tensor::from_data({1.0, 9.0}, {1, 2});    // voiced-only mse = 1
        pred.vuv = Tensor::from_data({0.5, 0.5}, {1, 2});      // mse (0.25 + 0.25)/2 = 0.25
        CompositeLoss loss = composite_loss(logits, bins, pred, t2, t2.vuv, {1.0, 1.0, 1.0});
        CHECK(loss.cepstra.item() == doctest::Approx(2.5));
        CHECK(loss.logf0.item() == doctest::Approx(1.0));
        CHECK(loss.vuv.item() == doctest::Approx(0.25));
        CHECK(loss.total.item() ==
              doctest::Approx(loss.ce.item() + 2.5 + 1.0 + 0.25).epsilon(1e-12));
    }
    SUBCASE("no secondary prediction leaves total == ce (linguistic modes)") {
        SecondaryPrediction none;
        CompositeLoss loss = composite_loss(logits, bins, none, targets, mask, {1.0, 1.0, 1.0});
        CHECK(loss.total.item() == loss.ce.item());
        CHECK_FALSE(loss.cepstra.valid());
    }
}

TEST_CASE("feature normalization brings targets to zero mean, unit variance") {
    auto corpus = tiny_corpus();
    FeatureNormalization norm = FeatureNormalization::compute(corpus);
    double acc = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (const auto& utt : corpus) {
        const std::size_t f_total = utt.frames();
        for (std::size_t f = 0; f < f_total; ++f) {
            const double v =
                (utt.cepstra.data()[3 * f_total + f] - norm.cep_mean.data()[3]) /
                norm.cep_std.data()[3];
            acc += v;
            sq += v * v;
            ++n;
        }
    }
    CHECK(std::abs(acc / n) < 1e-9);
    CHECK(sq / n == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(norm.logf0_std > 0.0);
}

TEST_CASE("make_batch windows") {
    auto set = TrainingSet::build(tiny_corpus(), ConditionMode::kLinguisticOnly, 25);
    BatchConfig batch;
    batch.batch_size = 3;

    SUBCASE("window of exactly one frame_shift spans one frame") {
        batch.window_samples = 80;
        TrainingBatch b = set.make_batch(batch, 5, 0);
        REQUIRE(b.size() == 3);
        CHECK(b[0].condition.dim(1) == 1);
        CHECK(b[0].target_bins.size() == 80);
    }
    SUBCASE("fixed seed gives identical batch sequences") {
        batch.window_samples = 240;
        for (long step : {0L, 3L, 17L}) {
            TrainingBatch a = set.make_batch(batch, 5, step);
            TrainingBatch c = set.make_batch(batch, 5, step);
            REQUIRE(a.size() == c.size());
            for (std::size_t i = 0; i < a.size(); ++i) {
                CHECK(a[i].target_bins == c[i].target_bins);
                CHECK(a[i].input_bins == c[i].input_bins);
                CHECK(testutil::max_abs_diff(a[i].condition.data(), c[i].condition.data()) ==
                      0.0);
            }
        }
        TrainingBatch d = set.make_batch(batch, 6, 0);
        bool differs = false;
        TrainingBatch a = set.make_batch(batch, 5, 0);
        for (std::size_t i = 0; i < a.size() && !differs; ++i)
            differs = a[i].target_bins != d[i].target_bins;
        CHECK(differs);
    }
    SUBCASE("window content re-slices from the source utterance") {
        batch.window_samples = 240;
        auto corpus = tiny_corpus();
        TrainingBatch b = set.make_batch(batch, 5, 1);
        for (const auto& win : b) {
            // Identify the source by matching the condition columns against
            // every utterance at every frame offset.
            const std::size_t w_frames = win.condition.dim(1);
            int matches = 0;
            for (const auto& utt : corpus) {
                const std::size_t f_utt = utt.frames();
                if (f_utt < w_frames) continue;
                const std::size_t d_lin = utt.linguistic.dim(0);
                for (std::size_t off = 0; off + w_frames <= f_utt; ++off) {
                    bool equal = true;
                    for (std::size_t d = 0; d < d_lin && equal; ++d)
                        for (std::size_t f = 0; f < w_frames && equal; ++f)
                            equal = win.condition.data()[d * w_frames + f] ==
                                    utt.linguistic.data()[d * f_utt + off + f];
                    if (!equal) continue;
                    ++matches;
                    // Bins must re-slice from the same span.
                    QuantizedWaveform q = mulaw_encode(utt.waveform);
                    const std::size_t s0 = off * 80;
                    for (std::size_t j = 0; j < win.target_bins.size(); ++j)
                        CHECK(win.target_bins[j] == q.bins[s0 + j]);
                    const std::uint8_t expect_prev = s0 > 0 ? q.bins[s0 - 1] : 128;
                    CHECK(win.input_bins[0] == expect_prev);
                }
            }
            CHECK(matches >= 1);
        }
    }
    SUBCASE("utterances shorter than the window left-pad with silence") {
        batch.window_samples = 80 * 64;  // longer than any tiny utterance
        TrainingBatch b = set.make_batch(batch, 5, 0);
        const auto& win = b[0];
        CHECK(win.target_bins[0] == 128);
        CHECK(win.input_bins[0] == 128);
        const std::size_t w_frames = win.condition.dim(1);
        double cond0 = 0.0;
        for (std::size_t d = 0; d < win.condition.dim(0); ++d)
            cond0 += std::abs(win.condition.data()[d * w_frames + 0]);
        CHECK(cond0 == 0.0);  // silence condition
        CHECK(win.targets.vuv.data()[0] == 0.0);
    }
}

TEST_CASE("gradient flow separation between the two tasks") {
    Rng rng(62);
    WaveNetConfig config;
    config.num_stacks = 1;
    config.layers_per_stack = 2;
    config.residual_channels = 4;
    config.gate_channels = 4;
    config.skip_channels = 4;
    config.condition_dim = 4;
    config.mtl.n_cepstra = 3;
    ConditionerConfig cc;
    cc.input_dim = 5;
    cc.num_layers = 1;
    cc.channels_per_direction = 2;
    Conditioner cond = Conditioner::init(cc, rng);
    WaveNet net = WaveNet::init(config, rng);
    for (double& v : net.post2_w.data()) v = 0.1 * rng.normal();
    MTLHead head = MTLHead::init(config, rng);

    Tensor features = random_tensor({5, 6}, rng);
    std::vector<int> bins;
    for (int t = 0; t < 24; ++t) bins.push_back(static_cast<int>(rng.uniform_index(256)));
    Tensor x = Tensor::zeros({256, 24});
    for (int t = 0; t < 24; ++t) x.data()[static_cast<std::size_t>(bins[t]) * 24 + t] = 1.0;

    SecondaryTargets targets;
    targets.cepstra = random_tensor({3, 6}, rng);
    targets.logf0 = random_tensor({1, 6}, rng);
    targets.vuv = Tensor::from_data({1, 1, 0, 1, 0, 1}, {1, 6});

    auto run = [&](bool include_ce, bool include_secondary) {
        for (auto collection : {&cond}) {
            ParamMap params;
            collection->collect_params(params, "c");
            for (auto& [name, p] : params) {
                p.node()->ensure_grad();
                p.zero_grad();
            }
        }
        ParamMap net_params;
        net.collect_params(net_params, "n");
        for (auto& [name, p] : net_params) {
            p.node()->ensure_grad();
            p.zero_grad();
        }
        ParamMap head_params;
        head.collect_params(head_params, "h");
        for (auto& [name, p] : head_params) {
            p.node()->ensure_grad();
            p.zero_grad();
        }
        auto [frame_enc, sample_enc] = cond.forward({features, 4});
        Tensor total;
        if (include_ce) {
            Tensor logits = net.forward_inputs(shift_right_one_hot(x), sample_enc);
            total = softmax_cross_entropy(logits, bins);
        }
        if (include_secondary) {
            SecondaryPrediction pred = mtl_head_forward(head, frame_enc);
            Tensor sec = add(add(mse(pred.cepstra, targets.cepstra),
                                 mse(pred.logf0, targets.logf0, targets.vuv)),
                             mse(pred.vuv, targets.vuv));
            total = total.valid() ? add(total, sec) : sec;
        }
        backward(total);
    };

    auto grad_norm = [](const auto& module, const char* prefix) {
        ParamMap params;
        module.collect_params(params, prefix);
        double norm = 0.0;
        for (auto& [name, p] : params)
            for (double g : p.grad()) norm += g * g;
        return norm;
    };

    SUBCASE("ce-only: conditioner sees gradients, head does not") {
        run(true, false);
        CHECK(grad_norm(cond, "c") > 0.0);
        CHECK(grad_norm(head, "h") == 0.0);
    }
    SUBCASE("secondary-only: conditioner yes, residual blocks no") {
        run(false, true);
        CHECK(grad_norm(cond, "c") > 0.0);
        CHECK(grad_norm(net, "n") == 0.0);
        CHECK(grad_norm(head, "h") > 0.0);
    }
}

TEST_CASE("train: step-0 CE, determinism, log columns") {
    testutil::TempDir dir("train");
    TrainOptions options;
    options.config = tiny_train_config();
    options.mode = ConditionMode::kMtl;
    options.out_dir = dir.path() / "a";
    options.run_id = "t1";
    TrainResult r1 = train(tiny_corpus(), options);
    REQUIRE(r1.records.size() == 12);
    // Zero-initialized output conv: uniform prediction at step 0.
    CHECK(r1.records[0].ce == doctest::Approx(std::log(256.0)).epsilon(0.1 / 5.5));

    options.out_dir = dir.path() / "b";
    TrainResult r2 = train(tiny_corpus(), options);
    for (std::size_t i = 0; i < r1.records.size(); ++i) {
        CHECK(r1.records[i].ce == r2.records[i].ce);  // bit-identical trajectories
        CHECK(r1.records[i].total == r2.records[i].total);
    }

    auto log = read_log(r1.loss_log);
    REQUIRE(log.size() == 12);
    CHECK(log[0].contains("cep"));
    CHECK(log[0].contains("f0"));
    CHECK(log[0].contains("vuv"));
    CHECK(log[0].contains("wall_ms"));

    SUBCASE("linguistic mode omits the secondary columns") {
        options.mode = ConditionMode::kLinguisticOnly;
        options.out_dir = dir.path() / "c";
        TrainResult r3 = train(tiny_corpus(), options);
        auto log3 = read_log(r3.loss_log);
        CHECK_FALSE(log3[0].contains("cep"));
        CHECK_FALSE(log3[0].contains("f0"));
        CHECK_FALSE(log3[0].contains("vuv"));
        CHECK(log3[0].contains("ce"));
        CHECK(log3[0]["total"].get<double>() == log3[0]["ce"].get<double>());
    }
}

TEST_CASE("train: resume reproduces the uninterrupted trajectory") {
    testutil::TempDir dir("resume");
    TrainOptions options;
    options.config = tiny_train_config();
    options.config.steps = 12;
    options.config.checkpoint_every = 6;
    options.mode = ConditionMode::kMtl;
    options.out_dir = dir.path() / "full";
    options.run_id = "full";
    TrainResult full = train(tiny_corpus(), options);

    TrainOptions head_opts = options;
    head_opts.config.steps = 6;
    head_opts.out_dir = dir.path() / "head";
    TrainResult head_run = train(tiny_corpus(), head_opts);

    TrainOptions resume_opts = options;
    resume_opts.out_dir = dir.path() / "tail";
    resume_opts.resume = head_run.final_checkpoint;
    TrainResult tail = train(tiny_corpus(), resume_opts);

    REQUIRE(tail.records.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(tail.records[i].step == full.records[6 + i].step);
        CHECK(tail.records[i].ce == full.records[6 + i].ce);
        CHECK(tail.records[i].total == full.records[6 + i].total);
    }
}

TEST_CASE("train: cross-entropy trends down on a tiny run") {
    testutil::TempDir dir("trend");
    TrainOptions options;
    options.config = tiny_train_config();
    options.config.steps = 300;
    options.config.checkpoint_every = 300;
    options.mode = ConditionMode::kLinguisticOnly;
    options.out_dir = dir.path();
    TrainResult r = train(tiny_corpus(), options);
    double early = 0.0, late = 0.0;
    for (std::size_t i = 0; i < 50; ++i) early += r.records[i].ce;
    for (std::size_t i = r.records.size() - 50; i < r.records.size(); ++i)
        late += r.records[i].ce;
    CHECK(late < early);
}

TEST_CASE("checkpoint round trip preserves parameters and optimizer state") {
    testutil::TempDir dir("ckpt");
    TrainOptions options;
    options.config = tiny_train_config();
    options.config.steps = 5;
    options.mode = ConditionMode::kMtl;
    options.out_dir = dir.path();
    options.run_id = "ck";
    TrainResult r = train(tiny_corpus(), options);

    LoadedCheckpoint loaded = checkpoint_load(r.final_checkpoint);
    CHECK(loaded.step == 5);
    CHECK(loaded.run_id == "ck");
    CHECK(loaded.model.mode == ConditionMode::kMtl);
    CHECK(loaded.adam_t == 5);
    CHECK_FALSE(loaded.adam_m.empty());

    // Re-saving the loaded model must reproduce identical parameter bytes.
    const auto path2 = dir.path() / "resave.mtwc";
    checkpoint_save(path2, loaded.model, loaded.config, loaded.step, nullptr, "ck");
    LoadedCheckpoint again = checkpoint_load(path2);
    ParamMap a = loaded.model.collect_params();
    ParamMap b = again.model.collect_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(testutil::max_abs_diff(a[i].second.data(), b[i].second.data()) == 0.0);
    }
}

TEST_CASE("train config JSON") {
    TrainConfig c = tiny_train_config();
    c.optimizer.learning_rate = 5e-4;
    TrainConfig back = train_config_from_json(train_config_to_json(c));
    CHECK(back.optimizer.learning_rate == 5e-4);
    CHECK(back.batch.window_samples == 160);
    CHECK(back.model.layers_per_stack == 3);
    CHECK_THROWS_WITH_AS(train_config_from_json(R"({"stepz": 10})"), doctest::Contains("stepz"),
                         FormatError);
    CHECK_THROWS_WITH_AS(train_config_from_json(R"({"optimizer": {"lr": 1}})"),
                         doctest::Contains("lr"), FormatError);
    CHECK_THROWS_AS(train_config_from_json(R"({"steps": 0})"), ArgumentError);
}

TEST_CASE("train rejects windows that do not clear the receptive field") {
    TrainOptions options;
    options.config = tiny_train_config();
    options.config.model.layers_per_stack = 10;  // receptive field 1024 > window 160
    options.mode = ConditionMode::kLinguisticOnly;
    testutil::TempDir dir("window");
    options.out_dir = dir.path();
    CHECK_THROWS_AS(train(tiny_corpus(), options), ArgumentError);
}

TEST_CASE("adam applies bias-corrected updates") {
    Tensor w = Tensor::from_data({1.0, 2.0}, {2}, true);
    ParamMap params = {{"w", w}};
    AdamConfig config;
    config.learning_rate = 0.1;
    Adam adam(params, config);
    adam.zero_grad();
    w.node()->ensure_grad();
    w.node()->grad[0] = 1.0;
    w.node()->grad[1] = -1.0;
    adam.step();
    // First step of Adam moves each coordinate by ~lr against the gradient.
    CHECK(w.data()[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
    CHECK(w.data()[1] == doctest::Approx(2.0 + 0.1).epsilon(1e-6));
    CHECK(adam.steps_taken() == 1);
}
