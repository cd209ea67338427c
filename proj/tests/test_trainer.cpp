#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "test_util.hpp"
#include "vesselkit/trainer.hpp"

using namespace vk;
using vk::test::code_of;

namespace {

struct Fixture {
    std::vector<LabeledVolume> train;
    std::vector<LabeledVolume> val;
    std::vector<PatchPair> patches;
    Model<float> model;
};

ModelConfig tiny_config() {
    ModelConfig c;
    c.levels = 2;
    c.base_channels = 4;
    c.gn_groups = 2;
    c.kernel_plan = {{3, 3}, {3, 3}};
    c.deep_supervision = false;
    return c;
}

std::vector<LabeledVolume> tubes(std::size_t n, std::uint64_t seed, double min_r, double max_r) {
    PhantomRanges r;
    r.dims = {24, 24, 24};
    r.min_radius = min_r;
    r.max_radius = max_r;
    r.max_curves = 2;
    r.max_foreground_fraction = 0.12;
    std::vector<LabeledVolume> out;
    for (std::size_t i = 0; i < n; ++i) {
        Phantom p = generate_phantom(random_phantom_spec(r, derive_seed(seed, i)));
        out.push_back({preprocess(p.image, InputMode::raw), p.truth});
    }
    return out;
}

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture x;
        x.train = tubes(4, 1, 1.5, 3.0);
        x.val = tubes(1, 2, 1.5, 3.0);
        x.patches = sample_training_set(x.train, 6, {8, 8, 8}, 3, 0.5);
        x.model = build_model<float>(tiny_config(), 4);
        return x;
    }();
    return f;
}

TrainConfig quick_config(std::size_t epochs) {
    TrainConfig c;
    c.lr0 = 3e-3;
    c.batch_size = 4;
    c.epochs_stage1 = epochs;
    c.epochs_finetune = epochs;
    c.plateau_patience = 3;
    c.seed = 5;
    return c;
}

bool same_params(const Model<float>& a, const Model<float>& b) {
    if (a.params.size() != b.params.size()) return false;
    for (const auto& [name, t] : a.params) {
        const auto& u = b.at(name);
        if (t.shape() != u.shape() || std::memcmp(t.data().data(), u.data().data(), t.numel() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config defaults, invariants and key=value form") {
    const TrainConfig d;
    CHECK(d.lr0 == 1e-4);
    CHECK(d.plateau_patience == 10);
    CHECK(d.lr_factor == 0.1);
    CHECK(d.batch_size == 8);
    CHECK(d.epochs_stage1 == 70);
    CHECK(d.epochs_finetune == 30);
    CHECK_NOTHROW(d.validate());

    TrainConfig c;
    c.lr_factor = 1.0;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::config);
    c = {};
    c.plateau_patience = 0;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::config);
    c = {};
    c.batch_size = 0;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::config);
    c = {};
    c.lr0 = -1e-3;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::config);

    c = {};
    c.lr0 = 3.3e-4;
    c.tversky.alpha = 0.25;
    c.seed = 1234567890123ULL;
    const TrainConfig back = TrainConfig::from_kv(c.to_kv());
    CHECK(back.lr0 == c.lr0);
    CHECK(back.tversky.alpha == 0.25);
    CHECK(back.seed == c.seed);
    CHECK(code_of([] { TrainConfig::from_kv({{"lr0", "fast"}}); }) == ErrorCode::config);
}

TEST_CASE("plateau scheduler") {
    PlateauScheduler s(1e-4, 3, 0.1, 1e-4);
    CHECK(!s.step(0.5));  // first value sets the baseline
    CHECK(!s.step(0.5));
    CHECK(!s.step(0.50005));  // below min_delta
    CHECK(s.step(0.4));
    CHECK(s.lr() == 1e-4 * 0.1);
    CHECK(!s.step(0.6));
    CHECK(!s.step(0.6));
    CHECK(!s.step(0.6));
    CHECK(s.step(0.6));
    CHECK(s.lr() == 1e-4 * 0.1 * 0.1);
}

TEST_CASE("train log text round trip") {
    TrainLog log;
    log.records = {{"train", 1, 0.81234567890123, 0.1, 1e-4, 1.25}, {"train", 2, 0.7, 0.3333333333333333, 1e-5, 2.5},
                   {"finetune", 1, 0.6, 0.2, 1e-4, 0.5}};
    const TrainLog back = TrainLog::parse(log.to_text());
    REQUIRE(back.records.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.records[i].stage == log.records[i].stage);
        CHECK(back.records[i].epoch == log.records[i].epoch);
        CHECK(back.records[i].train_loss == log.records[i].train_loss);
        CHECK(back.records[i].val_dsc == log.records[i].val_dsc);
        CHECK(back.records[i].lr == log.records[i].lr);
    }
    CHECK(*log.max_val_dsc() == 0.3333333333333333);
    CHECK(!TrainLog{}.max_val_dsc());
    CHECK(code_of([] { TrainLog::parse("train 1 x\n"); }) == ErrorCode::format);

    vk::test::TempDir d("log");
    log.append_to(d / "log.tsv");
    log.append_to(d / "log.tsv");
    const auto bytes = file_bytes(d / "log.tsv");
    const std::string text(bytes.begin(), bytes.end());
    CHECK(text.rfind(TrainLog::header(), 0) == 0);
    CHECK(text.find(TrainLog::header(), 1) == std::string::npos);
    CHECK(TrainLog::parse(text).records.size() == 6);
}

TEST_CASE("plateau rule checker") {
    TrainConfig cfg;
    cfg.plateau_patience = 2;
    TrainLog log;
    double lr = cfg.lr0;
    PlateauScheduler s(cfg.lr0, 2, 0.1, cfg.min_delta);
    for (std::size_t e = 1; e <= 8; ++e) {
        const double dsc = e < 3 ? 0.1 * static_cast<double>(e) : 0.2;
        log.records.push_back({"train", e, 0.5, dsc, s.lr(), 0.0});
        s.step(dsc);
    }
    CHECK(!check_plateau_rule(log, cfg));
    lr = log.records[5].lr;
    log.records[5].lr = lr * 2.0;
    CHECK(check_plateau_rule(log, cfg).has_value());
    log.records[5].lr = lr;
    // a new stage restarts from lr0
    log.records.push_back({"finetune", 1, 0.5, 0.3, cfg.lr0, 0.0});
    CHECK(!check_plateau_rule(log, cfg));
}

TEST_CASE("injected plateau drops the rate after exactly patience epochs") {
    const Fixture& f = fixture();
    TrainConfig cfg = quick_config(6);
    cfg.lr0 = 1e-4;
    cfg.plateau_patience = 2;
    TrainOptions opt;
    opt.validate = [](const Model<float>&, std::size_t) { return 0.5; };
    const auto res = train(f.model, f.patches, f.val, cfg, opt);
    REQUIRE(res.log.records.size() == 6);
    const double expect[6] = {1e-4, 1e-4, 1e-4, 1e-5, 1e-5, 1e-6};
    for (std::size_t i = 0; i < 6; ++i) CHECK(res.log.records[i].lr == doctest::Approx(expect[i]).epsilon(1e-12));
    CHECK(!check_plateau_rule(res.log, cfg));
    CHECK(res.best_epoch == 1);
}

TEST_CASE("null update control") {
    const Fixture& f = fixture();
    TrainConfig cfg = quick_config(3);
    cfg.lr0 = 0.0;
    const auto res = train(f.model, f.patches, f.val, cfg);
    REQUIRE(res.log.records.size() == 3);
    CHECK(res.log.records[1].val_dsc == res.log.records[0].val_dsc);
    CHECK(res.log.records[2].val_dsc == res.log.records[0].val_dsc);
    CHECK(same_params(res.last, f.model));
}

TEST_CASE("training is deterministic and checkpoints the best epoch") {
    const Fixture& f = fixture();
    const TrainConfig cfg = quick_config(4);
    vk::test::TempDir a("train-a");
    vk::test::TempDir b("train-b");
    TrainOptions oa;
    oa.checkpoint_dir = a.path();
    TrainOptions ob;
    ob.checkpoint_dir = b.path();
    const auto ra = train(f.model, f.patches, f.val, cfg, oa);
    const auto rb = train(f.model, f.patches, f.val, cfg, ob);
    REQUIRE(ra.log.records.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(ra.log.records[i].train_loss == rb.log.records[i].train_loss);
        CHECK(ra.log.records[i].val_dsc == rb.log.records[i].val_dsc);
        CHECK(ra.log.records[i].lr == rb.log.records[i].lr);
    }
    CHECK(same_params(ra.last, rb.last));
    REQUIRE(!ra.best_path.empty());
    CHECK(file_bytes(ra.best_path) == file_bytes(rb.best_path));
    CHECK(ra.best_path.filename().string().rfind("train_epoch", 0) == 0);

    CHECK(ra.best_dsc == *ra.log.max_val_dsc());
    const Checkpoint ck = load_checkpoint(ra.best_path);
    CHECK(std::stod(ck.meta.at("val_dsc")) == ra.best_dsc);
    CHECK(ck.meta.at("stage") == "train");
    CHECK(same_params(ck.model, ra.best));
    CHECK(!check_plateau_rule(ra.log, cfg));
    // loss goes down on this easy set
    CHECK(ra.log.records.back().train_loss < ra.log.records.front().train_loss);
}

TEST_CASE("training error paths") {
    const Fixture& f = fixture();
    const TrainConfig cfg = quick_config(1);
    CHECK(code_of([&] { train(f.model, f.patches, {}, cfg); }) == ErrorCode::config);
    CHECK(code_of([&] { train(f.model, {}, f.val, cfg); }) == ErrorCode::config);

    auto bad = f.patches;
    std::vector<float> nan(bad[0].image.size(), std::numeric_limits<float>::quiet_NaN());
    bad[0].image = bad[0].image.with_data(nan, VolumeKind::intensity);
    try {
        TrainConfig one = cfg;
        one.batch_size = 1;
        one.seed = 0;
        train(f.model, bad, f.val, one);
        FAIL("NaN input accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::non_finite);
        const std::string msg = e.what();
        CHECK(msg.find("epoch 1") != std::string::npos);
        CHECK(msg.find("batch") != std::string::npos);
    }

    auto odd = sample_training_set(f.train, 2, {7, 7, 7}, 1, 0.5);
    CHECK(code_of([&] { train(f.model, odd, f.val, cfg); }) == ErrorCode::dimension);
}

TEST_CASE("fine-tuning") {
    const Fixture& f = fixture();
    TrainConfig cfg = quick_config(0);
    const auto zero = fine_tune(f.model, f.patches, f.val, cfg);
    CHECK(same_params(zero.best, f.model));
    CHECK(same_params(zero.last, f.model));
    CHECK(zero.log.records.empty());

    ModelConfig three = tiny_config();
    three.num_classes = 3;
    try {
        fine_tune(build_model<float>(three, 1), f.patches, f.val, cfg);
        FAIL("incompatible checkpoint accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::incompatible);
        CHECK(std::string(e.what()).find("num_classes") != std::string::npos);
    }
    ModelConfig deep = tiny_config();
    deep.levels = 5;
    deep.kernel_plan.clear();
    try {
        fine_tune(build_model<float>(deep, 1), f.patches, f.val, cfg);
        FAIL("incompatible checkpoint accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::incompatible);
        CHECK(std::string(e.what()).find("levels") != std::string::npos);
    }

    // same distribution: no catastrophic forgetting
    cfg = quick_config(5);
    const auto stage1 = train(f.model, f.patches, f.val, cfg);
    cfg.epochs_finetune = 3;
    const auto stage2 = fine_tune(stage1.best, sample_training_set(f.train, 6, {8, 8, 8}, 99, 0.5), f.val, cfg);
    REQUIRE(stage2.log.records.size() == 3);
    CHECK(stage2.log.records[0].stage == "finetune");
    CHECK(stage2.log.records[0].lr == cfg.lr0);
    CHECK(stage2.best_dsc >= stage1.best_dsc - 0.05);
}

TEST_CASE("sliding-window prediction") {
    const Fixture& f = fixture();
    const Model<float>& m = f.model;
    const Volume3D& v = f.val[0].image;

    // one patch covering the volume equals one forward pass
    const Prediction whole = predict_volume(m, v, v.dims(), v.dims());
    const Volume3D direct = predict_patch(m, v);
    CHECK(std::memcmp(whole.probability.data().data(), direct.data().data(), v.size() * sizeof(float)) == 0);
    CHECK(whole.probability.kind() == VolumeKind::probability);
    CHECK(whole.mask.kind() == VolumeKind::binary_mask);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK((whole.mask[i] > 0.5F) == (whole.probability[i] > 0.5F));

    const Prediction a = predict_volume(m, v, {8, 8, 8}, {4, 4, 4});
    const Prediction b = predict_volume(m, v, {8, 8, 8}, {4, 4, 4});
    CHECK(checksum(a.probability) == checksum(b.probability));
    for (float p : a.probability.data()) {
        CHECK(p >= 0.0F);
        CHECK(p <= 1.0F);
    }

    try {
        predict_volume(m, extract_patch(v, {0, 0, 0}, {8, 8, 4}), {8, 8, 8}, {4, 4, 4});
        FAIL("small volume accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::dimension);
        CHECK(std::string(e.what()).find("pad") != std::string::npos);
    }
    CHECK(code_of([&] { predict_volume(m, v, {7, 7, 7}, {7, 7, 7}); }) == ErrorCode::dimension);
}

TEST_CASE("overlapping windows do not hurt a trained model") {
    const Fixture& f = fixture();
    const auto res = train(f.model, f.patches, f.val, quick_config(6));
    for (const auto& lv : f.val) {
        const double tiled = dice(predict_volume(res.best, lv.image, {8, 8, 8}, {8, 8, 8}).mask, lv.truth);
        const double overlap = dice(predict_volume(res.best, lv.image, {8, 8, 8}, {4, 4, 4}).mask, lv.truth);
        MESSAGE("tiled " << tiled << " overlapped " << overlap);
        CHECK(overlap >= tiled);
    }
}

TEST_CASE("helpers") {
    const TrainConfig cfg;
    const auto s = fan_out(7);
    CHECK(s.model != s.patches);
    CHECK(s.patches != s.shuffle);
    CHECK(fan_out(7).model == s.model);

    const Volume3D t = vk::test::random_mask({6, 6, 6}, 1, 0.3);
    CHECK(dice(t, t) == 1.0);
    const Volume3D empty = Volume3D::filled(t.dims(), t.spacing(), 0.0F, VolumeKind::binary_mask);
    CHECK(dice(empty, empty) == 1.0);
    CHECK(dice(empty, t) == 0.0);

    CHECK(input_mode_from_string("raw") == InputMode::raw);
    CHECK(to_string(InputMode::frangi) == "frangi");
    CHECK(code_of([] { input_mode_from_string("hessian"); }) == ErrorCode::config);

    const Volume3D img = vk::test::random_volume({16, 16, 16}, 3, 10.0F, 500.0F);
    const Volume3D raw = preprocess(img, InputMode::raw);
    const Volume3D fr = preprocess(img, InputMode::frangi);
    CHECK(raw.kind() == VolumeKind::intensity);
    CHECK(fr.kind() == VolumeKind::probability);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        CHECK(raw[i] >= 0.0F);
        CHECK(raw[i] <= 1.0F);
        CHECK(fr[i] >= 0.0F);
        CHECK(fr[i] <= 1.0F);
    }

    const auto& train_set = fixture().train;
    const auto p1 = sample_training_set(train_set, 3, {8, 8, 8}, 11, 0.5);
    const auto p2 = sample_training_set(train_set, 3, {8, 8, 8}, 11, 0.5);
    REQUIRE(p1.size() == 12);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].origin == p2[i].origin);
}

}  // TEST_SUITE
