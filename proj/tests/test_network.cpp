#include <doctest.h>

#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "test_util.hpp"
#include "vesselkit/adam.hpp"
#include "vesselkit/losses.hpp"
#include "vesselkit/network.hpp"
#include "vesselkit/phantom.hpp"

using namespace vk;
using ad::Shape;
using ad::Tensor;
using vk::test::check_gradients;
using vk::test::code_of;
using vk::test::random_tensor;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.levels = 3;
    c.base_channels = 4;
    c.gn_groups = 4;
    return c;
}

template <class T>
bool same_params(const Model<T>& a, const Model<T>& b) {
    if (a.params.size() != b.params.size()) return false;
    for (const auto& [name, t] : a.params) {
        auto it = b.params.find(name);
        if (it == b.params.end() || it->second.shape() != t.shape()) return false;
        if (std::memcmp(t.data().data(), it->second.data().data(), t.numel() * sizeof(T)) != 0) return false;
    }
    return true;
}

void set_all(Tensor<float>& t, float v) {
    for (auto& x : t.data()) x = v;
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("config invariants") {
    ModelConfig c = small_config();
    CHECK_NOTHROW(c.validate());
    c.levels = 1;
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::config);
    c = small_config();
    c.gn_groups = 3;
    CHECK(code_of([&] { build_model<float>(c, 0); }) == ErrorCode::config);
    c = small_config();
    c.kernel_plan = {{7, 3}, {3, 3}};
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::config);
    c.kernel_plan = {{7, 3}, {3, 4}, {3, 3}};
    CHECK(code_of([&] { c.validate(); }) == ErrorCode::config);

    ModelConfig d;
    CHECK(d.kernels(0) == std::array<std::size_t, 2>{7, 3});
    CHECK(d.kernels(4) == std::array<std::size_t, 2>{3, 3});
    CHECK(d.channels(4) == 256);
    CHECK(d.size_multiple() == 16);
}

TEST_CASE("config key=value round trip") {
    ModelConfig c = small_config();
    c.kernel_plan = {{7, 7}, {3, 3}, {5, 3}};
    c.deep_supervision = false;
    CHECK(ModelConfig::from_kv(c.to_kv()) == c);
    CHECK(ModelConfig::from_kv(ModelConfig{}.to_kv()) == ModelConfig{});
}

TEST_CASE("forward shape contract and size errors") {
    auto m = build_model<float>(small_config(), 1);
    auto x = random_tensor<float>({2, 1, 16, 16, 16}, 3, 0, 1, false);
    auto r = forward(m, x);
    CHECK(r.logits.shape() == Shape{2, 2, 16, 16, 16});
    REQUIRE(r.alphas.size() == 2);
    CHECK(r.alphas[0].shape() == Shape{2, 1, 16, 16, 16});
    CHECK(r.alphas[1].shape() == Shape{2, 1, 8, 8, 8});

    for (const Shape& s : {Shape{1, 1, 8, 12, 4}, Shape{1, 1, 4, 4, 4}, Shape{1, 1, 20, 8, 12}}) {
        CHECK(forward(m, random_tensor<float>(s, 4, 0, 1, false)).logits.shape() == Shape{1, 2, s[2], s[3], s[4]});
    }
    CHECK(code_of([&] { forward(m, Tensor<float>::zeros({1, 1, 16, 16, 18})); }) == ErrorCode::shape);
    CHECK(code_of([&] { forward(m, Tensor<float>::zeros({1, 2, 16, 16, 16})); }) == ErrorCode::shape);
}

TEST_CASE("build is deterministic in the seed") {
    auto a = build_model<float>(small_config(), 9);
    auto b = build_model<float>(small_config(), 9);
    auto c = build_model<float>(small_config(), 10);
    CHECK(same_params(a, b));
    CHECK(!same_params(a, c));
    CHECK(a.params.contains("enc0.conv1.weight"));
    CHECK(a.at("enc0.conv1.weight").shape() == Shape{4, 1, 7, 7, 7});
    CHECK(a.at("enc1.conv1.weight").shape() == Shape{8, 4, 3, 3, 3});
    CHECK(a.at("head.weight").shape() == Shape{2, 4, 1, 1, 1});
}

TEST_CASE("attention gate closed, open and in range") {
    auto m = build_model<float>(small_config(), 2);
    auto f = random_tensor<float>({1, 4, 8, 8, 8}, 1, -1, 1, false);
    auto g = random_tensor<float>({1, 8, 4, 4, 4}, 2, -1, 1, false);

    auto open = attention_gate(m, "att0", f, g);
    for (float a : open.alpha.data()) {
        CHECK(a > 0.0F);
        CHECK(a < 1.0F);
    }

    auto beta = m.params.at("att0.gnt.beta");
    auto gamma = m.params.at("att0.gnt.gamma");
    set_all(gamma, 0.0F);
    set_all(beta, -60.0F);
    auto closed = attention_gate(m, "att0", f, g);
    for (float v : closed.gated.data()) CHECK(std::abs(v) < 1e-6F);

    set_all(beta, 60.0F);
    auto through = attention_gate(m, "att0", f, g);
    for (std::size_t i = 0; i < f.numel(); ++i) CHECK(through.gated.data()[i] == doctest::Approx(f.data()[i]).epsilon(1e-6));

    CHECK(code_of([&] { attention_gate(m, "att0", f, random_tensor<float>({1, 8, 4, 4, 3}, 3)); }) == ErrorCode::shape);
    CHECK(code_of([&] { attention_gate(m, "att0", f, random_tensor<float>({1, 8, 8, 8, 8}, 3)); }) == ErrorCode::shape);
}

TEST_CASE("alpha maps stay inside (0,1) on random inputs") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto m = build_model<float>(small_config(), seed);
        auto r = forward(m, random_tensor<float>({1, 1, 8, 8, 8}, seed + 20, -3, 3, false));
        for (const auto& a : r.alphas) {
            for (float v : a.data()) {
                CHECK(v > 0.0F);
                CHECK(v < 1.0F);
            }
        }
    }
}

TEST_CASE("batch decomposition invariance") {
    auto m = build_model<float>(small_config(), 5);
    auto x = random_tensor<float>({3, 1, 8, 8, 8}, 6, 0, 1, false);
    auto full = forward(m, x).logits;
    const std::size_t per_in = 512;
    const std::size_t per_out = 2 * 512;
    // splits {1,2} and {3 x 1}
    for (std::size_t n = 0; n < 3; ++n) {
        std::vector<float> xs(x.data().begin() + n * per_in, x.data().begin() + (n + 1) * per_in);
        auto one = forward(m, Tensor<float>::from({1, 1, 8, 8, 8}, xs)).logits;
        for (std::size_t i = 0; i < per_out; ++i) CHECK(std::abs(one.data()[i] - full.data()[n * per_out + i]) <= 1e-5F);
    }
    std::vector<float> tail(x.data().begin() + per_in, x.data().end());
    auto two = forward(m, Tensor<float>::from({2, 1, 8, 8, 8}, tail)).logits;
    for (std::size_t i = 0; i < two.numel(); ++i) CHECK(std::abs(two.data()[i] - full.data()[per_out + i]) <= 1e-5F);
}

TEST_CASE("deep supervision toggles logits but not shapes") {
    ModelConfig on = small_config();
    ModelConfig off = on;
    off.deep_supervision = false;
    auto mon = build_model<float>(on, 3);
    auto moff = build_model<float>(off, 3);
    CHECK(mon.params.contains("ds1.weight"));
    CHECK(!moff.params.contains("ds1.weight"));
    auto x = random_tensor<float>({1, 1, 8, 8, 8}, 7, 0, 1, false);
    auto a = forward(mon, x).logits;
    auto b = forward(moff, x).logits;
    CHECK(a.shape() == b.shape());
    bool differs = false;
    for (std::size_t i = 0; i < a.numel(); ++i) differs = differs || a.data()[i] != b.data()[i];
    CHECK(differs);
}

TEST_CASE("parameter counting") {
    Model<float> conv;
    conv.params.emplace("c.weight", Tensor<float>::zeros({1, 1, 3, 3, 3}));
    conv.params.emplace("c.bias", Tensor<float>::zeros({1}));
    CHECK(count_parameters(conv) == 28);
    Model<float> gn;
    gn.params.emplace("g.gamma", Tensor<float>::zeros({8}));
    gn.params.emplace("g.beta", Tensor<float>::zeros({8}));
    CHECK(count_parameters(gn) == 16);

    const std::size_t n = default_parameter_count();
    MESSAGE("default configuration parameters: " << n << " (reference table: 24.83M)");
    // regression pin for the default widths; any architecture change shows up here
    CHECK(n == 5925996);
}

TEST_CASE("checkpoint round trip is bit exact") {
    vk::test::TempDir dir("ckpt");
    ModelConfig c = small_config();
    c.kernel_plan = {{7, 3}, {3, 3}, {3, 3}};
    auto m = build_model<float>(c, 11);
    Metadata meta{{"epoch", "4"}, {"val_dsc", "0.8125"}};
    save_checkpoint(m, dir / "m.cvau", meta);
    auto ck = load_checkpoint(dir / "m.cvau");
    CHECK(ck.model.config == c);
    CHECK(ck.meta == meta);
    CHECK(same_params(m, ck.model));
    auto x = random_tensor<float>({1, 1, 8, 8, 8}, 12, 0, 1, false);
    auto a = forward(m, x).logits;
    auto b = forward(ck.model, x).logits;
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0);
}

TEST_CASE("checkpoint error paths") {
    auto m = build_model<float>(small_config(), 1);
    auto bytes = encode_checkpoint(m);
    REQUIRE(bytes.size() > 16);
    CHECK(std::memcmp(bytes.data(), "CVAU", 4) == 0);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK(code_of([&] { decode_checkpoint(bad_magic); }) == ErrorCode::format);

    auto bad_version = bytes;
    bad_version[4] = 7;
    CHECK(code_of([&] { decode_checkpoint(bad_version); }) == ErrorCode::format);

    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    CHECK(code_of([&] { decode_checkpoint(truncated); }) == ErrorCode::integrity);

    auto partial = m.clone();
    partial.params.erase("head.bias");
    try {
        decode_checkpoint(encode_checkpoint(partial));
        FAIL("missing parameter accepted");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::integrity);
        CHECK(std::string(e.what()).find("head.bias") != std::string::npos);
    }
    vk::test::TempDir dir("ckpt-err");
    CHECK(code_of([&] { load_checkpoint(dir / "absent.cvau"); }) == ErrorCode::io);
}

TEST_CASE("end-to-end gradients on a micro configuration") {
    ModelConfig c;
    c.levels = 3;
    c.base_channels = 2;
    c.gn_groups = 2;
    auto m = build_model<double>(c, 21);
    // non-trivial affine parameters so every path carries gradient
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (auto& [name, t] : m.params) {
        if (name.ends_with(".bias") || name.ends_with(".beta")) {
            for (auto& v : t.data()) v = u(rng);
        }
    }
    auto x = random_tensor<double>({1, 1, 8, 8, 8}, 22, 0, 1, false);
    auto list = m.parameter_list();
    // biases feeding a per-channel GN have exactly zero gradient; the floor keeps
    // finite-difference roundoff on those entries from dominating the ratio
    auto rep = check_gradients<double>([&] { return vk::test::probe(forward(m, x).logits, 5); }, list, 1e-5, 6, 3, 1e-4);
    MESSAGE("checked " << rep.checked << " entries, max rel " << rep.max_rel);
    CHECK_MESSAGE(rep.max_rel < 1e-4, rep.worst);
}

TEST_CASE("one optimizer step lowers the Tversky loss") {
    PhantomSpec ps;
    ps.dims = {16, 16, 16};
    ps.curves = {Curve{{{1.0, 8.0, 8.0}, {14.0, 7.0, 9.0}}, 2.5, 2.0}};
    ps.seed = 3;
    const Phantom ph = generate_phantom(ps);
    std::vector<double> img(ph.image.data().begin(), ph.image.data().end());
    std::vector<double> tgt(ph.truth.data().begin(), ph.truth.data().end());
    auto x = Tensor<double>::from({1, 1, 16, 16, 16}, img);
    auto y = Tensor<double>::from({1, 1, 16, 16, 16}, tgt);

    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto m = build_model<double>(small_config(), seed);
        auto params = m.parameter_list();
        auto loss = [&] { return tversky_loss(ad::softmax_channels(forward(m, x).logits), y); };
        auto before = loss();
        before.backward();
        ad::AdamState<double> st;
        ad::adam_step<double>(params, st, 1e-4);
        bool finite = true;
        for (const auto& p : params) {
            for (double v : p.data()) finite = finite && std::isfinite(v);
        }
        CHECK(finite);
        ad::NoGradGuard guard;
        if (loss().item() < before.item()) ++decreased;
    }
    CHECK(decreased >= 9);
}

}  // TEST_SUITE
