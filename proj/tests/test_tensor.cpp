#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "drvessel/tensor.hpp"

#include "oracles.hpp"

using namespace drvessel;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1, double hi = 1)
{
    Tensor t(std::move(s));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

double dot(const Tensor& a, const Tensor& b)
{
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

// Central differences of f with respect to every entry of t.
std::vector<double> numeric_grad(Tensor& t, const std::function<double()>& f, double h = 1e-5)
{
    std::vector<double> g(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double saved = t.data[i];
        t.data[i] = saved + h;
        const double up = f();
        t.data[i] = saved - h;
        const double down = f();
        t.data[i] = saved;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

double max_rel(const std::vector<double>& num, const Tensor& ana)
{
    double worst = 0;
    for (std::size_t i = 0; i < num.size(); ++i) {
        const double d = std::max({std::abs(num[i]), std::abs(ana.data[i]), 1e-6});
        worst = std::max(worst, std::abs(num[i] - ana.data[i]) / d);
    }
    return worst;
}

} // namespace

TEST(Conv2d, IdentityAndBox)
{
    Rng rng(1);
    const auto x = random_tensor(rng, {1, 4, 5});
    const Tensor w({1, 1, 1, 1}, 1.0), b({1}, 0.0);
    EXPECT_EQ(conv2d(x, w, b, 0), x);

    const Tensor c({1, 5, 5}, 0.7);
    const Tensor box({1, 1, 3, 3}, 1.0 / 9.0);
    const auto out = conv2d(c, box, b, 1);
    for (int y = 1; y < 4; ++y)
        for (int xx = 1; xx < 4; ++xx) EXPECT_NEAR(out.at(0, y, xx), 0.7, 1e-15);
}

TEST(Conv2d, MatchesNaiveLoops)
{
    Rng rng(2);
    const auto x = random_tensor(rng, {2, 5, 5});
    const auto w = random_tensor(rng, {3, 2, 3, 3});
    const auto b = random_tensor(rng, {3});
    const auto a = conv2d(x, w, b, 1), o = oracle::naive_conv(x, w, b, 1);
    ASSERT_EQ(a.shape, o.shape);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i], o.data[i], 1e-12);
}

TEST(Conv2d, MatchesNaiveLoopsRandomShapes)
{
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t c = 1 + rng.below(8), o = 1 + rng.below(8), h = 1 + rng.below(8), w = 1 + rng.below(8);
        const std::size_t k = rng.below(2) ? 3 : 1;
        const int pad = static_cast<int>(k / 2);
        const auto x = random_tensor(rng, {c, h, w});
        const auto wt = random_tensor(rng, {o, c, k, k});
        const auto b = random_tensor(rng, {o});
        const auto a = conv2d(x, wt, b, pad), n = oracle::naive_conv(x, wt, b, pad);
        ASSERT_EQ(a.shape, n.shape);
        for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a.data[i], n.data[i], 1e-12);
    }
}

TEST(Conv2d, ShapeErrors)
{
    const Tensor x({2, 4, 4}), w({3, 1, 3, 3}), b({3});
    EXPECT_THROW(conv2d(x, w, b, 1), ShapeError);
    EXPECT_THROW(conv2d(Tensor({1, 4, 4}), Tensor({1, 1, 2, 2}), Tensor({1}), 0), ShapeError);
}

TEST(Conv2dBackward, ZeroAndBias)
{
    Rng rng(4);
    const auto x = random_tensor(rng, {2, 4, 4});
    const auto w = random_tensor(rng, {3, 2, 3, 3});
    const auto g = conv2d_backward(Tensor({3, 4, 4}), x, w, 1);
    for (const auto* t : {&g.input, &g.weights, &g.bias})
        for (double v : t->data) EXPECT_EQ(v, 0.0);

    const auto w1 = random_tensor(rng, {2, 2, 1, 1});
    const auto gout = random_tensor(rng, {2, 4, 4});
    const auto g1 = conv2d_backward(gout, x, w1, 0);
    for (std::size_t o = 0; o < 2; ++o) {
        double s = 0;
        for (std::size_t i = 0; i < 16; ++i) s += gout.data[o * 16 + i];
        EXPECT_NEAR(g1.bias.data[o], s, 1e-12);
    }
}

TEST(Conv2dBackward, MatchesFiniteDifferences)
{
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(3), h = 2 + rng.below(5), w = 2 + rng.below(5);
        const std::size_t k = trial % 3 ? 3 : 1;
        const int pad = static_cast<int>(k / 2);
        auto x = random_tensor(rng, {c, h, w});
        auto wt = random_tensor(rng, {o, c, k, k});
        auto b = random_tensor(rng, {o});
        const auto gout = random_tensor(rng, {o, h, w});
        const auto f = [&] { return dot(gout, conv2d(x, wt, b, pad)); };
        const auto g = conv2d_backward(gout, x, wt, pad);
        EXPECT_LT(max_rel(numeric_grad(x, f), g.input), 1e-6);
        EXPECT_LT(max_rel(numeric_grad(wt, f), g.weights), 1e-6);
        EXPECT_LT(max_rel(numeric_grad(b, f), g.bias), 1e-6);
    }
}

TEST(MaxPool, ExamplesAndTies)
{
    const Tensor a({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    const auto r = maxpool2x(a);
    EXPECT_EQ(r.output.data, std::vector<double>{4});
    EXPECT_EQ(r.argmax, std::vector<std::uint8_t>{3});

    const auto t = maxpool2x(Tensor({1, 2, 2}, 5.0));
    EXPECT_EQ(t.output.data, std::vector<double>{5});
    EXPECT_EQ(t.argmax, std::vector<std::uint8_t>{0});

    const auto g = maxpool2x_backward(Tensor({1, 1, 1}, 2.0), t.argmax, {1, 2, 2});
    EXPECT_EQ(g.data, (std::vector<double>{2, 0, 0, 0}));
    EXPECT_THROW(maxpool2x(Tensor({1, 3, 2})), ShapeError);
}

TEST(MaxPool, MatchesWindowScan)
{
    Rng rng(6);
    const auto x = random_tensor(rng, {1, 4, 4});
    const auto r = maxpool2x(x);
    for (int y = 0; y < 2; ++y)
        for (int xx = 0; xx < 2; ++xx) {
            double best = -1e300;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) best = std::max(best, x.at(0, 2 * y + dy, 2 * xx + dx));
            EXPECT_EQ(r.output.at(0, y, xx), best);
        }
}

TEST(MaxPool, BackwardMatchesFiniteDifferences)
{
    Rng rng(7);
    auto x = random_tensor(rng, {3, 6, 4});
    const auto gout = random_tensor(rng, {3, 3, 2});
    const auto r = maxpool2x(x);
    const auto g = maxpool2x_backward(gout, r.argmax, x.shape);
    EXPECT_LT(max_rel(numeric_grad(x, [&] { return dot(gout, maxpool2x(x).output); }), g), 1e-6);
}

TEST(Upsample, DuplicatesAndSums)
{
    EXPECT_EQ(upsample2x(Tensor({1, 1, 1}, 1.0)).data, (std::vector<double>{1, 1, 1, 1}));
    EXPECT_EQ(upsample2x_backward(Tensor({1, 2, 2}, 1.0)).data, std::vector<double>{4});

    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_tensor(rng, {1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(6)});
        EXPECT_EQ(maxpool2x(upsample2x(x)).output, x);
    }

    auto x = random_tensor(rng, {2, 3, 2});
    const auto gout = random_tensor(rng, {2, 6, 4});
    EXPECT_LT(max_rel(numeric_grad(x, [&] { return dot(gout, upsample2x(x)); }), upsample2x_backward(gout)), 1e-6);
}

TEST(Elementwise, ReluSigmoid)
{
    const Tensor t({2}, std::vector<double>{-1, 2});
    EXPECT_EQ(relu(t).data, (std::vector<double>{0, 2}));
    EXPECT_EQ(sigmoid(0.0), 0.5);
    EXPECT_EQ(relu_backward(Tensor({1}, 1.0), Tensor({1}, 0.0)).data[0], 0.0);
    EXPECT_GT(sigmoid(-800.0), -1.0);
    EXPECT_TRUE(std::isfinite(sigmoid(-800.0)));

    Rng rng(9);
    auto x = random_tensor(rng, {2, 3, 3}, -3, 3);
    for (double& v : x.data)
        if (std::abs(v) < 1e-3) v = 0.5; // keep away from the kink
    const auto gout = random_tensor(rng, {2, 3, 3});
    EXPECT_LT(max_rel(numeric_grad(x, [&] { return dot(gout, relu(x)); }), relu_backward(gout, x)), 1e-6);
    EXPECT_LT(max_rel(numeric_grad(x, [&] { return dot(gout, sigmoid(x)); }), sigmoid_backward(gout, sigmoid(x))),
              1e-6);
}

TEST(CrossEntropy, AnalyticCases)
{
    MaskImage y(3, 2);
    y.pixels = {1, 0, 1, 0, 0, 1};
    Tensor p({1, 2, 3});
    for (std::size_t i = 0; i < 6; ++i) p.data[i] = y.pixels[i];
    EXPECT_LE(pixel_cross_entropy(p, y).loss, -std::log(1 - kProbEps) + 1e-15);

    const auto half = pixel_cross_entropy(Tensor({1, 2, 3}, 0.5), y);
    EXPECT_NEAR(half.loss, std::log(2.0), 1e-15);
    EXPECT_NEAR(half.grad_logits.data[0], (0.5 - 1.0) / 6.0, 1e-15);
    EXPECT_THROW(pixel_cross_entropy(Tensor({1, 3, 2}), y), ShapeError);
}

TEST(CrossEntropy, MatchesScalarLoopAndLogitGradient)
{
    Rng rng(10);
    MaskImage y(4, 5);
    for (auto& v : y.pixels) v = rng.below(2);
    auto logits = random_tensor(rng, {1, 5, 4}, -4, 4);
    const auto r = pixel_cross_entropy(sigmoid(logits), y);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-logits.data[i]));
        s += y.pixels[i] ? std::log(p) : std::log(1 - p);
    }
    EXPECT_NEAR(r.loss, -s / 20.0, 1e-12);
    const auto num = numeric_grad(logits, [&] { return pixel_cross_entropy(sigmoid(logits), y).loss; });
    EXPECT_LT(max_rel(num, r.grad_logits), 1e-6);
}

TEST(Adam, ZeroGradientIsIdentity)
{
    Rng rng(11);
    std::vector<Parameter> ps{Parameter("a", random_tensor(rng, {3, 2}))};
    const auto before = ps[0].value;
    AdamConfig cfg;
    adam_step(ps, cfg);
    EXPECT_EQ(ps[0].value, before);
    EXPECT_EQ(cfg.t, 1u);
}

TEST(Adam, OneStepByHand)
{
    std::vector<Parameter> ps{Parameter("theta", Tensor({1}, 0.0))};
    ps[0].grad.data[0] = 1.0;
    AdamConfig cfg;
    cfg.lr = 0.1;
    adam_step(ps, cfg);
    // m = 0.1, v = 0.001; both bias corrections give exactly 1.
    EXPECT_DOUBLE_EQ(ps[0].value.data[0], -0.1 / (1.0 + 1e-8));
}

TEST(Adam, IdenticalParametersEvolveIdentically)
{
    std::vector<Parameter> ps{Parameter("a", Tensor({2}, 0.3)), Parameter("b", Tensor({2}, 0.3))};
    AdamConfig cfg;
    Rng rng(12);
    for (int step = 0; step < 20; ++step) {
        const double g = rng.uniform(-1, 1);
        ps[0].grad.fill(g);
        ps[1].grad.fill(g);
        adam_step(ps, cfg);
    }
    EXPECT_EQ(ps[0].value, ps[1].value);
}

TEST(Adam, NonFiniteGradientAborts)
{
    std::vector<Parameter> ps{Parameter("ok", Tensor({1}, 1.0)), Parameter("bad", Tensor({1}, 1.0))};
    ps[1].grad.data[0] = std::nan("");
    AdamConfig cfg;
    try {
        adam_step(ps, cfg);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
    }
    EXPECT_EQ(ps[0].value.data[0], 1.0);
    EXPECT_EQ(cfg.t, 0u);
}

TEST(GradCheck, LinearIsExactAndMutationIsFlagged)
{
    Rng rng(13);
    std::vector<Parameter> ps{Parameter("w", random_tensor(rng, {50})), Parameter("v", random_tensor(rng, {30}))};
    const auto coef_w = random_tensor(rng, {50}), coef_v = random_tensor(rng, {30});
    const auto f = [&] { return dot(coef_w, ps[0].value) + dot(coef_v, ps[1].value); };
    ps[0].grad = coef_w;
    ps[1].grad = coef_v;
    EXPECT_LT(grad_check(f, ps).max_rel_error, 1e-9);

    for (double& g : ps[0].grad.data) g *= 2.0;
    const auto rep = grad_check(f, ps);
    EXPECT_GT(rep.max_rel_error, 0.3);
    EXPECT_EQ(rep.worst_param, "w");
}
