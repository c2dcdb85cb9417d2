#include <chrono>
#include <cmath>
#include <set>

#include "doctest.h"
#include "xmod/gradcheck.hpp"
#include "xmod/nets.hpp"
#include "xmod/rng.hpp"

using namespace xmod;
using namespace xmod::ad;
using namespace xmod::nets;

namespace {

template <typename T>
Tensor<T> random_tensor(const Shape& s, std::uint64_t key, double scale = 1.0, double offset = 0.0) {
    Tensor<T> t(s);
    CounterRng rng({key, 77});
    for (auto& v : t.data()) v = static_cast<T>(offset + scale * rng.normal());
    return t;
}

ArchConfig tiny(Arch arch) {
    ArchConfig c = ArchConfig::make(arch, Preset::Lite);
    switch (arch) {
    case Arch::UNetDirect:
        c.base_channels = 4;
        c.norm_groups = 2;
        break;
    case Arch::ADM:
        c.base_channels = 4;
        c.res_blocks_per_stage = 1;
        c.attention_heads = 2;
        break;
    case Arch::UViT:
        c.base_channels = 4;
        c.res_blocks_per_stage = 1;
        c.attention_heads = 2;
        c.transformer_depth = 1;
        c.hidden_size = 16;
        break;
    case Arch::DiT:
        c.hidden_size = 8;
        c.attention_heads = 2;
        c.transformer_depth = 1;
        c.patch_size = 2;
        break;
    }
    c.validate();
    return c;
}

}  // namespace

TEST_SUITE("nets") {

TEST_CASE("full-size presets have the expected parameter counts") {
    CHECK(param_count(ArchConfig::make(Arch::UNetDirect, Preset::Paper)) == 13712769);
    CHECK(param_count(ArchConfig::make(Arch::ADM, Preset::Paper)) == 36615553);
    CHECK(param_count(ArchConfig::make(Arch::UViT, Preset::Paper)) == 122746884);
    CHECK(param_count(ArchConfig::make(Arch::DiT, Preset::Paper)) == 559101184);
}

TEST_CASE("parameter names are unique and init tree matches declaration") {
    for (Arch a : {Arch::UNetDirect, Arch::ADM, Arch::UViT, Arch::DiT}) {
        const auto cfg = ArchConfig::make(a, Preset::Lite);
        const auto specs = declare_params(cfg);
        std::set<std::string> names;
        for (const auto& s : specs) names.insert(s.name);
        CHECK(names.size() == specs.size());
        const auto model = build_model(cfg, 3);
        CHECK(model.params.param_count() == param_count(cfg));
        const auto again = build_model(cfg, 3);
        CHECK(again.params.entries().front().second.value() == model.params.entries().front().second.value());
    }
}

TEST_CASE("every architecture maps (N,1,H,W) to (N,1,H,W) for awkward sizes") {
    for (Arch a : {Arch::UNetDirect, Arch::ADM, Arch::UViT, Arch::DiT}) {
        const auto cfg = ArchConfig::make(a, Preset::Lite);
        auto model = build_model(cfg, 1);
        // Perturb the zero-initialized heads so the output is non-trivial.
        for (auto& [name, v] : model.params.entries()) {
            auto& t = v.node()->value;
            if (name.find("out") != std::string::npos || name.find("ada") != std::string::npos || name.find(".emb") != std::string::npos) {
                t = random_tensor<float>(t.shape(), 5, 0.05);
            }
        }
        const auto cond = random_tensor<float>({2, 1, 20, 27}, 11);
        const auto z = random_tensor<float>({2, 1, 20, 27}, 12);
        const auto out = model.predict(z, {0.3, 0.7}, cond);
        CHECK(out.shape() == Shape{2, 1, 20, 27});
        CHECK(out.all_finite());
    }
}

TEST_CASE("zero-initialized heads give a zero output at initialization") {
    for (Arch a : {Arch::UNetDirect, Arch::ADM, Arch::UViT, Arch::DiT}) {
        const auto cfg = ArchConfig::make(a, Preset::Lite);
        const auto model = build_model(cfg, 9);
        const auto cond = random_tensor<float>({1, 1, 16, 16}, 1);
        const auto out = model.predict(cond, {0.5}, cond);
        double m = 0;
        for (float v : out.data()) m = std::max(m, std::abs(static_cast<double>(v)));
        CHECK(m == 0.0);
    }
}

TEST_CASE("adaLN with zero shift and scale is the identity") {
    const auto x = Var<double>::constant(random_tensor<double>({2, 5, 8}, 3));
    const auto zero = Var<double>::constant(Tensor<double>(Shape{2, 1, 8}));
    const auto y = adaln_modulate(x, zero, zero);
    CHECK(y.value() == x.value());
}

TEST_CASE("patchify and unpatchify are inverse") {
    const auto x = Var<double>::constant(random_tensor<double>({2, 3, 8, 12}, 4));
    const auto seq = patchify(x, 4);
    CHECK(seq.shape() == Shape{2, 6, 48});
    CHECK(unpatchify(seq, 4, 3, 8, 12).value() == x.value());
    CHECK_THROWS_AS(patchify(x, 5), ShapeError);
}

TEST_CASE("sinusoidal embedding is injective on a fine time grid") {
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 1000; ++i) rows.push_back(sinusoidal_embedding(i / 999.0, 64));
    double min_dist = 1e9;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        double d = 0;
        for (std::size_t k = 0; k < rows[i].size(); ++k) d += (rows[i][k] - rows[i - 1][k]) * (rows[i][k] - rows[i - 1][k]);
        min_dist = std::min(min_dist, std::sqrt(d));
    }
    CHECK(min_dist > 1e-3);
    CHECK_THROWS(sinusoidal_embedding(0.1, 7));
}

TEST_CASE("config text round trip and validation") {
    for (Arch a : {Arch::UNetDirect, Arch::ADM, Arch::UViT, Arch::DiT}) {
        for (Preset p : {Preset::Paper, Preset::Lite}) {
            const auto c = ArchConfig::make(a, p);
            CHECK(ArchConfig::from_text(c.to_text()) == c);
        }
    }
    auto bad = ArchConfig::make(Arch::DiT, Preset::Lite);
    bad.channel_multipliers = {1, 2, 4};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    auto bad_heads = ArchConfig::make(Arch::DiT, Preset::Lite);
    bad_heads.attention_heads = 3;
    CHECK_THROWS_AS(bad_heads.validate(), std::invalid_argument);
    CHECK_THROWS_AS(parse_arch("resnet"), std::invalid_argument);
}

TEST_CASE("layer gradients match finite differences") {
    const auto x = Var<double>::parameter(random_tensor<double>({2, 3, 8}, 21));
    auto p = [](const Shape& s, std::uint64_t k) { return Var<double>::parameter(random_tensor<double>(s, k, 0.4)); };
    auto wg = p({8, 12}, 1), bg = p({12}, 2), wv = p({8, 12}, 3), bv = p({12}, 4), wo = p({12, 8}, 5), bo = p({8}, 6);
    const auto weights = random_tensor<double>({2, 3, 8}, 22);
    auto dot = [&](const Var<double>& y) { return sum(mul(y, Var<double>::constant(weights))); };
    auto r = check_gradients([&] { return dot(swiglu(x, wg, bg, wv, bv, wo, bo)); },
                             {{"x", x}, {"wg", wg}, {"bg", bg}, {"wv", wv}, {"bv", bv}, {"wo", wo}, {"bo", bo}});
    CHECK(r.max_rel_error < 1e-6);
    auto qw = p({8, 24}, 7), qb = p({24}, 8), pw = p({8, 8}, 9), pb = p({8}, 10);
    r = check_gradients([&] { return dot(attention(x, qw, qb, pw, pb, 2)); },
                        {{"x", x}, {"qkv_w", qw}, {"qkv_b", qb}, {"proj_w", pw}, {"proj_b", pb}});
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("end-to-end gradients of every architecture match finite differences") {
    for (Arch a : {Arch::UNetDirect, Arch::ADM, Arch::UViT, Arch::DiT}) {
        CAPTURE(arch_name(a));
        const auto cfg = tiny(a);
        auto tree = build_model(cfg, 2).params.cast<double>();
        std::uint64_t k = 100;
        for (auto& [name, v] : tree.entries()) {
            auto& t = v.node()->value;
            const bool is_norm = name.find("norm") != std::string::npos && name.find(".b") == std::string::npos;
            t = random_tensor<double>(t.shape(), k++, 0.3, is_norm ? 1.0 : 0.0);
        }
        const auto cond = Var<double>::constant(random_tensor<double>({2, 1, 8, 8}, 31));
        const auto z = Var<double>::constant(random_tensor<double>({2, 1, 8, 8}, 32));
        const auto w = Var<double>::constant(random_tensor<double>({2, 1, 8, 8}, 33));
        const std::vector<double> t{0.25, 0.8};
        const auto r = check_gradients([&] { return sum(mul(apply(cfg, tree, z, t, cond), w)); }, tree.entries(), 1e-4,
                                       6, 17);
        CAPTURE(r.worst);
        CHECK(r.max_rel_error < 1e-4);
    }
}

TEST_CASE("Adam from a fresh state ignores zero gradients and moves by lr on the first step") {
    ParamTree<float> tree;
    tree.add("w", Tensor<float>(Shape{3}, std::vector<float>{1.f, 2.f, 3.f}));
    AdamState state;
    adam_step(tree, {Tensor<float>(Shape{3})}, state, {});
    CHECK(tree.get("w").value() == Tensor<float>(Shape{3}, std::vector<float>{1.f, 2.f, 3.f}));
    CHECK(state.step == 1);

    AdamConfig cfg;
    cfg.lr = 0.01;
    AdamState fresh;
    adam_step(tree, {Tensor<float>(Shape{3}, std::vector<float>{0.5f, -2.f, 0.f})}, fresh, cfg);
    CHECK(tree.get("w").value()[0] == doctest::Approx(0.99).epsilon(1e-5));
    CHECK(tree.get("w").value()[1] == doctest::Approx(2.01).epsilon(1e-5));
    CHECK(tree.get("w").value()[2] == 3.f);

    const float m0 = fresh.m[0][0], v0 = fresh.v[0][0];
    adam_step(tree, {Tensor<float>(Shape{3})}, fresh, cfg);
    CHECK(fresh.m[0][0] == doctest::Approx(0.9 * m0));
    CHECK(fresh.v[0][0] == doctest::Approx(0.999 * v0));
    CHECK_THROWS(adam_step(tree, {}, fresh, cfg));
}

TEST_CASE("NetDenoiser rejects the direct model") {
    const auto model = build_model(ArchConfig::make(Arch::UNetDirect, Preset::Lite), 0);
    CHECK_THROWS_AS(NetDenoiser{model}, std::invalid_argument);
}

}  // TEST_SUITE

TEST_SUITE("nets") {

TEST_CASE("layer scalar examples") {
    auto c = [](std::vector<double> v, Shape s) { return Var<double>::constant(Tensor<double>(std::move(s), std::move(v))); };
    const auto r = rms_norm(c({3, 4}, {1, 2}), -1, c({1, 1}, {2}));
    CHECK(r.value()[0] == doctest::Approx(0.8485281).epsilon(1e-7));
    CHECK(r.value()[1] == doctest::Approx(1.1313708).epsilon(1e-7));
    CHECK(rms_norm(c({0, 0}, {1, 2}), -1, Var<double>()).value()[0] == 0.0);

    const auto one = c({1}, {1, 1});
    const auto zero = c({0}, {1});
    CHECK(swiglu(one, one, zero, one, zero, one, zero).value()[0] == doctest::Approx(0.7310586).epsilon(1e-7));
    CHECK(swiglu(one, c({0}, {1, 1}), zero, one, zero, one, zero).value()[0] == 0.0);

    const auto e = sinusoidal_embedding(0.5, 2);
    CHECK(e[0] == doctest::Approx(0.4794255).epsilon(1e-7));
    CHECK(e[1] == doctest::Approx(0.8775826).epsilon(1e-7));
    for (std::size_t k = 0; k < 16; ++k) CHECK(sinusoidal_embedding(0.0, 32)[k] == (k % 2 ? 1.0 : 0.0));

    const auto img = Var<double>::constant(random_tensor<double>({1, 3, 8, 8}, 8));
    CHECK(pixel_unshuffle(img, 1).value() == img.value());
    CHECK(pixel_unshuffle(img, 2).shape() == Shape{1, 12, 4, 4});
    CHECK(pixel_shuffle(pixel_unshuffle(img, 2), 2).value() == img.value());
}

TEST_CASE("attention over a single position returns the value projection") {
    const auto x = Var<double>::constant(random_tensor<double>({2, 1, 8}, 41));
    const auto qw = Var<double>::constant(random_tensor<double>({8, 24}, 42));
    const auto qb = Var<double>::constant(random_tensor<double>({24}, 43));
    const auto pw = Var<double>::constant(random_tensor<double>({8, 8}, 44));
    const auto pb = Var<double>::constant(random_tensor<double>({8}, 45));
    const auto out = attention(x, qw, qb, pw, pb, 2);
    const auto value = linear(slice(linear(x, qw, qb), 2, 16, 8), pw, pb);
    for (std::int64_t i = 0; i < 16; ++i) CHECK(out.value()[i] == doctest::Approx(value.value()[i]).epsilon(1e-12));
}

TEST_CASE("parameter counting and the gradient tree") {
    CHECK(ParamTree<float>().param_count() == 0);
    ParamTree<double> tree;
    tree.add("conv.w", Tensor<double>(Shape{8, 1, 3, 3}, 0.1));
    tree.add("conv.b", Tensor<double>(Shape{8}));
    CHECK(param_count(tree) == 80);
    CHECK_THROWS(tree.add("conv.b", Tensor<double>(Shape{1})));

    ParamTree<double> w;
    w.add("w", Tensor<double>(Shape{1}, 3.0));
    const auto g = grad<double>([&] { return square(w.get("w")); }, w);
    CHECK(g.get("w").value()[0] == 6.0);
    ParamTree<double> lin;
    lin.add("W", random_tensor<double>({4}, 1));
    const auto x = random_tensor<double>({4}, 2);
    const auto gl = grad<double>([&] { return sum(mul(lin.get("W"), Var<double>::constant(x))); }, lin);
    CHECK(gl.get("W").value() == x);
}

TEST_CASE("Adam scalar oracles") {
    ParamTree<float> tree;
    tree.add("w", Tensor<float>(Shape{1}, 0.0f));
    AdamState state;
    adam_step(tree, {Tensor<float>(Shape{1}, 1.0f)}, state);
    CHECK(tree.get("w").value()[0] == doctest::Approx(-1e-4).epsilon(1e-6));
    float prev = tree.get("w").value()[0];
    for (int i = 0; i < 500; ++i) {
        prev = tree.get("w").value()[0];
        adam_step(tree, {Tensor<float>(Shape{1}, 0.3f)}, state);
    }
    CHECK(prev - tree.get("w").value()[0] == doctest::Approx(1e-4).epsilon(1e-3));
}

TEST_CASE("lite shape contract across even sizes") {
    for (Arch a : {Arch::UNetDirect, Arch::ADM, Arch::UViT, Arch::DiT}) {
        const auto model = build_model(ArchConfig::make(a, Preset::Lite), 4);
        for (std::int64_t s : {16, 22, 32, 38, 50, 64}) {
            const auto cond = random_tensor<float>({1, 1, s, 64 + 16 - s}, 2);
            const auto out = model.predict(cond, {0.4}, cond);
            CHECK(out.shape() == cond.shape());
            CHECK(out.all_finite());
        }
    }
}

}  // TEST_SUITE
