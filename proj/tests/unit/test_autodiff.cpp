#include "doctest.h"

#include <cmath>

#include "xmod/autodiff.hpp"
#include "xmod/gradcheck.hpp"
#include "xmod/rng.hpp"

using namespace xmod;
using namespace xmod::ad;
using V = Var<double>;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0) {
    Tensor<double> t(std::move(s));
    CounterRng rng({seed, 99});
    for (auto& v : t.data()) v = scale * rng.normal();
    return t;
}

// sum(y * R) for a fixed random R so every output entry contributes a distinct weight.
V probe(const V& y, std::uint64_t seed = 1234) { return sum(mul(y, V::constant(randn(y.shape(), seed)))); }

using Params = std::vector<std::pair<std::string, V>>;

void expect_grad(const std::function<V()>& f, const Params& ps, double tol = 1e-6) {
    const auto r = check_gradients(f, ps);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error <= tol);
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("trivial gradients") {
    auto w = V::parameter(Tensor<double>(Shape{}, std::vector<double>{3.0}));
    backward(square(w));
    CHECK(w.grad()[0] == doctest::Approx(6.0));

    auto W = V::parameter(randn({3, 4}, 1));
    auto x = V::constant(randn({3, 4}, 2));
    backward(sum(mul(W, x)));
    for (std::int64_t i = 0; i < 12; ++i) CHECK(W.grad()[i] == doctest::Approx(x.value()[i]));
}

TEST_CASE("no recording under NoGradGuard") {
    auto w = V::parameter(randn({2}, 3));
    NoGradGuard g;
    auto y = square(w);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->inputs.empty());
}

TEST_CASE("broadcast arithmetic") {
    auto a = V::parameter(randn({2, 3, 4}, 1));
    auto b = V::parameter(randn({3, 1}, 2));
    auto c = V::parameter(add_scalar(square(V::constant(randn({4}, 3))), 1.5).value());
    Params ps{{"a", a}, {"b", b}, {"c", c}};
    expect_grad([&] { return probe(add(a, b)); }, ps);
    expect_grad([&] { return probe(sub(b, a)); }, ps);
    expect_grad([&] { return probe(mul(a, b)); }, ps);
    expect_grad([&] { return probe(div(a, c)); }, ps);
    expect_grad([&] { return probe(mul(add(a, c), b)); }, ps);
    CHECK_THROWS_AS(add(V::constant(randn({2, 3}, 1)), V::constant(randn({4}, 1))), ShapeError);
}

TEST_CASE("elementwise nonlinearities") {
    auto x = V::parameter(randn({5, 6}, 4));
    auto pos = V::parameter(add_scalar(square(V::constant(randn({5, 6}, 5))), 1.5).value());
    Params px{{"x", x}}, pp{{"pos", pos}};
    expect_grad([&] { return probe(silu(x)); }, px);
    expect_grad([&] { return probe(sigmoid(x)); }, px);
    expect_grad([&] { return probe(tanh(x)); }, px);
    expect_grad([&] { return probe(exp(x)); }, px);
    expect_grad([&] { return probe(neg(scale(x, 2.5))); }, px);
    expect_grad([&] { return probe(square(x)); }, px);
    expect_grad([&] { return probe(log(pos)); }, pp);
    expect_grad([&] { return probe(sqrt(pos)); }, pp);
    expect_grad([&] { return mean(square(x)); }, px);
}

TEST_CASE("reductions and shape ops") {
    auto x = V::parameter(randn({2, 3, 4, 5}, 6));
    Params ps{{"x", x}};
    expect_grad([&] { return probe(sum_axis(x, 2)); }, ps);
    expect_grad([&] { return probe(reshape(x, {6, -1})); }, ps);
    expect_grad([&] { return probe(permute(x, {2, 0, 3, 1})); }, ps);
    expect_grad([&] { return probe(slice(x, 3, 1, 3)); }, ps);
    expect_grad([&] { return probe(concat<double>({x, square(x)}, 1)); }, ps);
    expect_grad([&] { return probe(pad_reflect(x, 3, 2)); }, ps);
    expect_grad([&] { return probe(softmax_last(x)); }, ps);
    auto y = V::parameter(randn({2, 3, 8, 6}, 7));
    Params py{{"y", y}};
    expect_grad([&] { return probe(pixel_unshuffle(y, 2)); }, py);
    expect_grad([&] { return probe(pixel_shuffle(y, 1)); }, py);
    auto z = V::parameter(randn({2, 12, 3, 2}, 8));
    expect_grad([&] { return probe(pixel_shuffle(z, 2)); }, {{"z", z}});
}

TEST_CASE("pixel shuffle laws") {
    auto x = V::constant(randn({1, 3, 8, 8}, 9));
    auto u = pixel_unshuffle(x, 2);
    CHECK(u.shape() == Shape{1, 12, 4, 4});
    CHECK(pixel_shuffle(u, 2).value() == x.value());
    CHECK(pixel_unshuffle(x, 1).value() == x.value());
    // channel c*r^2 + dy*r + dx holds pixel (2i+dy, 2j+dx)
    CHECK(u.value().at(0, 1 * 4 + 1 * 2 + 0, 2, 3) == x.value().at(0, 1, 5, 6));
    CHECK_THROWS_AS(pixel_unshuffle(V::constant(randn({1, 1, 5, 4}, 1)), 2), ShapeError);
}

TEST_CASE("matmul and linear") {
    auto a = V::parameter(randn({2, 3, 4}, 10));
    auto b = V::parameter(randn({4, 5}, 11));
    auto bt = V::parameter(randn({5, 4}, 12));
    auto c = V::parameter(randn({2, 4, 6}, 13));
    auto ct = V::parameter(randn({2, 6, 4}, 14));
    auto a2 = V::parameter(randn({4, 3}, 15));
    auto bias = V::parameter(randn({5}, 16));
    Params ps{{"a", a}, {"b", b}, {"bt", bt}, {"c", c}, {"ct", ct}, {"a2", a2}, {"bias", bias}};
    expect_grad([&] { return probe(matmul(a, b)); }, ps);
    expect_grad([&] { return probe(matmul(a, bt, false, true)); }, ps);
    expect_grad([&] { return probe(matmul(a, c)); }, ps);
    expect_grad([&] { return probe(matmul(a, ct, false, true)); }, ps);
    expect_grad([&] { return probe(matmul(a2, b, true, false)); }, ps);
    expect_grad([&] { return probe(matmul(a2, bt, true, true)); }, ps);
    expect_grad([&] { return probe(linear(a, b, bias)); }, ps);
    expect_grad([&] { return probe(linear(a, b, V())); }, ps);
    // value check against a direct loop
    auto m = matmul(V::constant(a.value()), V::constant(b.value()));
    double ref = 0;
    for (int k = 0; k < 4; ++k) ref += a.value().at(1, 2, k) * b.value().at(k, 3);
    CHECK(m.value().at(1, 2, 3) == doctest::Approx(ref));
}

TEST_CASE("conv2d") {
    auto x = V::parameter(randn({2, 3, 5, 6}, 20));
    auto w3 = V::parameter(randn({4, 3, 3, 3}, 21, 0.3));
    auto w1 = V::parameter(randn({4, 3, 1, 1}, 22));
    auto b = V::parameter(randn({4}, 23));
    Params ps{{"x", x}, {"w3", w3}, {"w1", w1}, {"b", b}};
    expect_grad([&] { return probe(conv2d(x, w3, b)); }, ps);
    expect_grad([&] { return probe(conv2d(x, w1, b)); }, ps);
    expect_grad([&] { return probe(conv2d(x, w3, V())); }, ps);
    // direct evaluation of one output pixel at a border
    auto y = conv2d(V::constant(x.value()), V::constant(w3.value()), V::constant(b.value()));
    double ref = b.value()[2];
    for (int c = 0; c < 3; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const int yy = 0 + ky - 1, xx = 5 + kx - 1;
                if (yy < 0 || yy >= 5 || xx < 0 || xx >= 6) continue;
                ref += w3.value().at(2, c, ky, kx) * x.value().at(1, c, yy, xx);
            }
    CHECK(y.value().at(1, 2, 0, 5) == doctest::Approx(ref));
    // 3x3 conv, 1 -> 8 channels with bias has 80 parameters
    CHECK(w3.value().size() + b.value().size() == 4 * 27 + 4);
}

TEST_CASE("normalizations") {
    auto x = V::parameter(randn({2, 6, 3, 4}, 30));
    auto s = V::parameter(randn({6}, 31));
    auto g = V::parameter(randn({6}, 32));
    auto b = V::parameter(randn({6}, 33));
    auto tokens = V::parameter(randn({3, 5, 8}, 34));
    auto s8 = V::parameter(randn({8}, 35));
    Params ps{{"x", x}, {"s", s}, {"g", g}, {"b", b}, {"tokens", tokens}, {"s8", s8}};
    expect_grad([&] { return probe(rms_norm(x, 1, s)); }, ps);
    expect_grad([&] { return probe(rms_norm(tokens, -1, s8)); }, ps);
    expect_grad([&] { return probe(rms_norm(tokens, -1, V())); }, ps);
    expect_grad([&] { return probe(group_norm(x, 3, g, b)); }, ps);
    expect_grad([&] { return probe(group_norm(x, 1, V(), V())); }, ps);

    auto r = rms_norm(V::constant(Tensor<double>(Shape{2}, std::vector<double>{3, 4})), 0, V());
    CHECK(r.value()[0] == doctest::Approx(0.8485281374).epsilon(1e-7));
    CHECK(r.value()[1] == doctest::Approx(1.1313708499).epsilon(1e-7));
    auto zero = rms_norm(V::constant(Tensor<double>(Shape{3})), 0, V());
    for (double v : zero.value().data()) CHECK(v == 0.0);
    // scale invariance of the normalized output
    auto big = rms_norm(V::constant(Tensor<double>(Shape{2}, std::vector<double>{30, 40})), 0, V());
    CHECK(big.value()[1] == doctest::Approx(r.value()[1]).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one") {
    auto y = softmax_last(V::constant(randn({4, 7}, 40, 5.0)));
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += y.value().at(r, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("wavelet ops") {
    auto x = V::parameter(randn({2, 2, 8, 6}, 50));
    auto bands = V::parameter(randn({1, 8, 3, 4}, 51));
    Params ps{{"x", x}, {"bands", bands}};
    expect_grad([&] { return probe(wavelet_analysis(x)); }, ps);
    expect_grad([&] { return probe(wavelet_synthesis(bands)); }, ps);
    auto rt = wavelet_synthesis(wavelet_analysis(V::constant(x.value())));
    for (std::int64_t i = 0; i < x.value().size(); ++i) CHECK(rt.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-10));
}

TEST_CASE("opaque op blocks gradients") {
    auto x = V::parameter(randn({3}, 60));
    auto y = opaque<double>(x, "median", [](const Tensor<double>& t) { return t; });
    CHECK(y.value() == x.value());
    CHECK_THROWS_AS(backward(sum(y)), UnsupportedOpError);
    // Without a gradient path through it nothing is raised.
    auto c = opaque<double>(V::constant(x.value()), "median", [](const Tensor<double>& t) { return t; });
    CHECK_NOTHROW(backward(sum(mul(c, x))));
}

TEST_CASE("gradients accumulate across shared uses") {
    auto x = V::parameter(randn({4}, 70));
    expect_grad([&] { return probe(mul(x, x)) ; }, {{"x", x}});
    expect_grad([&] { auto y = silu(x); return probe(add(mul(y, x), y)); }, {{"x", x}});
}

}
