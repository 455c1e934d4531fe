#include "dconn/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace dconn;

namespace {

Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng &rng, double scale = 1.0) {
    Matrix<double> m(r, c);
    for (auto &v : m.values()) v = rng.uniform(-scale, scale);
    return m;
}

std::vector<Matrix<double>> values_of(FeedForward<double> &net) {
    std::vector<Matrix<double>> out;
    for (auto &p : net.params("n")) out.push_back(*p.value);
    return out;
}

double weighted_sum(const Matrix<double> &y, const Matrix<double> &w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
}

// loss = sum(ff(x) * probe) with a frozen dropout mask; checks dparams and dx.
void check_ff_gradients(const std::vector<std::size_t> &dims, bool layer_norm, double dropout, std::uint64_t seed) {
    Rng rng(seed);
    FeedForward<double> net(dims, dropout, layer_norm);
    net.init_glorot(rng);
    for (auto &g : net.ln_gain) for (auto &v : g.values()) v = rng.uniform(0.5, 1.5);
    for (auto &s : net.ln_shift) for (auto &v : s.values()) v = rng.uniform(-0.5, 0.5);
    for (auto &b : net.biases) for (auto &v : b.values()) v = rng.uniform(-0.5, 0.5);
    const std::size_t rows = 1 + rng.below(4);
    auto x = random_matrix(rows, dims.front(), rng);
    const auto probe = random_matrix(rows, dims.back(), rng);
    const std::uint64_t mask_seed = rng.next();
    auto forward = [&](const Matrix<double> &in) {
        Rng mask_rng(mask_seed);
        return ff_forward(net, in, dropout > 0.0, &mask_rng);
    };
    auto [y, cache] = forward(x);
    auto [dx, grads] = ff_backward(net, cache, probe);

    auto named = net.params("n");
    const auto analytic = values_of(grads);
    const auto report = grad_check([&] { return weighted_sum(forward(x).first, probe); }, named, analytic);
    EXPECT_TRUE(report.passed()) << "max rel err " << report.max_rel_error() << " "
                                 << (report.failures().empty() ? "" : report.failures().front());

    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + 1e-5;
        const double plus = weighted_sum(forward(x).first, probe);
        x[i] = saved - 1e-5;
        const double minus = weighted_sum(forward(x).first, probe);
        x[i] = saved;
        EXPECT_LT(relative_error(dx[i], (plus - minus) / 2e-5), 1e-4) << "dx entry " << i;
    }
}

} // namespace

TEST(FeedForward, IdentityWeightsZeroBiasIsIdentity) {
    FeedForward<double> net({3, 3}, 0.0, false);
    for (std::size_t i = 0; i < 3; ++i) net.weights[0](i, i) = 1.0;
    Rng rng(1);
    const auto x = random_matrix(4, 3, rng);
    EXPECT_EQ(ff_forward(net, x, false, nullptr).first, x);
}

TEST(FeedForward, ZeroInputGivesTopTransformOfActivatedBias) {
    Rng rng(2);
    FeedForward<double> net({2, 3, 2}, 0.0, false);
    net.init_glorot(rng);
    net.biases[0] = Matrix<double>(1, 3);
    net.biases[0][0] = 0.5;
    net.biases[0][1] = -0.7; // removed by the rectifier
    net.biases[0][2] = 0.2;
    net.biases[1][0] = 0.1;
    const auto y = ff_forward(net, Matrix<double>(3, 2), false, nullptr).first;
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 2; ++c) {
            const double expected = 0.5 * net.weights[1](0, c) + 0.2 * net.weights[1](2, c) + net.biases[1][c];
            EXPECT_NEAR(y(r, c), expected, 1e-15);
        }
    }
}

TEST(FeedForward, InputDimensionMismatchThrows) {
    FeedForward<double> net({3, 2}, 0.0, false);
    EXPECT_THROW(ff_forward(net, Matrix<double>(1, 4), false, nullptr), DimensionError);
}

TEST(FeedForward, InvalidDropoutRateRejected) {
    EXPECT_THROW(FeedForward<double>({2, 2}, 1.0, false), Error);
    EXPECT_THROW(FeedForward<double>({2, 2}, -0.1, false), Error);
}

TEST(FeedForwardBackward, RandomConfigurationsMatchFiniteDifferences) {
    Rng pick(3);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> dims{2 + pick.below(4)};
        const auto hidden_layers = pick.below(3);
        for (std::size_t l = 0; l < hidden_layers; ++l) dims.push_back(2 + pick.below(5));
        dims.push_back(1 + pick.below(4));
        const bool ln = pick.below(2) == 1;
        const double dropout = pick.below(2) == 1 ? 0.3 : 0.0;
        SCOPED_TRACE("trial " + std::to_string(trial));
        check_ff_gradients(dims, ln, dropout, 1000 + static_cast<std::uint64_t>(trial));
    }
}

TEST(FeedForwardBackward, ZeroUpstreamGradientGivesZeroParamGradients) {
    Rng rng(4);
    FeedForward<double> net({3, 4, 2}, 0.0, true);
    net.init_glorot(rng);
    auto [y, cache] = ff_forward(net, random_matrix(2, 3, rng), false, nullptr);
    auto [dx, grads] = ff_backward(net, cache, Matrix<double>(2, 2));
    for (const auto &m : values_of(grads)) {
        for (double v : m.values()) EXPECT_EQ(v, 0.0);
    }
    for (double v : dx.values()) EXPECT_EQ(v, 0.0);
}

TEST(FeedForwardBackward, LinearNetMatchesClosedForm) {
    Rng rng(5);
    FeedForward<double> net({3, 2}, 0.0, false);
    net.init_glorot(rng);
    const auto x = random_matrix(4, 3, rng);
    const auto dy = random_matrix(4, 2, rng);
    auto [y, cache] = ff_forward(net, x, false, nullptr);
    auto [dx, grads] = ff_backward(net, cache, dy);
    const auto dw = matmul_tn(x, dy);
    const auto dxx = matmul_nt(dy, net.weights[0]);
    for (std::size_t i = 0; i < dw.size(); ++i) EXPECT_NEAR(grads.weights[0][i], dw[i], 1e-14);
    for (std::size_t i = 0; i < dx.size(); ++i) EXPECT_NEAR(dx[i], dxx[i], 1e-14);
    for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < 4; ++r) s += dy(r, c);
        EXPECT_NEAR(grads.biases[0][c], s, 1e-14);
    }
}

TEST(FeedForwardBackward, StaleOrForeignCacheIsRejected) {
    Rng rng(6);
    FeedForward<double> net({2, 2}, 0.0, false), other({2, 2}, 0.0, false);
    auto [y, cache] = ff_forward(net, random_matrix(1, 2, rng), false, nullptr);
    EXPECT_THROW(ff_backward(other, cache, Matrix<double>(1, 2)), Error);
    ff_backward(net, cache, Matrix<double>(1, 2));
    EXPECT_THROW(ff_backward(net, cache, Matrix<double>(1, 2)), Error);
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
    Matrix<double> x(1, 5, 3.0);
    const auto [y, cache] = layer_norm_forward(x, Matrix<double>(1, 5, 1.0), Matrix<double>(1, 5));
    for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, AlreadyNormalizedVectorIsUnchangedUpToEpsilon) {
    Matrix<double> x(1, 2);
    x[0] = 1.0;
    x[1] = -1.0;
    const auto [y, cache] = layer_norm_forward(x, Matrix<double>(1, 2, 1.0), Matrix<double>(1, 2));
    EXPECT_NEAR(y[0], 1.0, 1e-6);
    EXPECT_NEAR(y[1], -1.0, 1e-6);
}

TEST(LayerNorm, OutputHasZeroMeanUnitVariance) {
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + rng.below(30);
        const auto x = random_matrix(1, n, rng, 10.0);
        const auto [y, cache] = layer_norm_forward(x, Matrix<double>(1, n, 1.0), Matrix<double>(1, n));
        const double mean = std::accumulate(y.values().begin(), y.values().end(), 0.0) / static_cast<double>(n);
        double var = 0.0;
        for (double v : y.values()) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        EXPECT_LT(std::abs(mean), 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(LayerNorm, RejectsSingleFeature) {
    EXPECT_THROW(layer_norm_forward(Matrix<double>(1, 1), Matrix<double>(1, 1, 1.0), Matrix<double>(1, 1)),
                 DimensionError);
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
    Rng rng(8);
    for (int t = 0; t < 20; ++t) {
        const std::size_t n = 2 + rng.below(6);
        auto x = random_matrix(3, n, rng, 3.0);
        auto gain = random_matrix(1, n, rng);
        auto shift = random_matrix(1, n, rng);
        const auto probe = random_matrix(3, n, rng);
        auto loss = [&] { return weighted_sum(layer_norm_forward(x, gain, shift).first, probe); };
        auto [y, cache] = layer_norm_forward(x, gain, shift);
        Matrix<double> dgain(1, n), dshift(1, n);
        const auto dx = layer_norm_backward(cache, gain, probe, dgain, dshift);
        std::vector<NamedParam<double>> params{{"x", &x}, {"gain", &gain}, {"shift", &shift}};
        const std::vector<Matrix<double>> analytic{dx, dgain, dshift};
        const auto report = grad_check(loss, params, analytic);
        EXPECT_TRUE(report.passed()) << report.max_rel_error();
    }
}

TEST(SoftmaxXent, UniformLogitsGiveLogK) {
    const auto r = softmax_xent(Matrix<double>(4, 20), std::vector<int>{0, 5, 19, 7});
    EXPECT_NEAR(r.loss, std::log(20.0), 1e-12);
    EXPECT_NEAR(std::log(20.0), 2.9957, 1e-4);
}

TEST(SoftmaxXent, ConcentratedLogitsGiveNearZeroLoss) {
    Matrix<double> logits(1, 5);
    logits[3] = 50.0;
    EXPECT_LT(softmax_xent(logits, std::vector<int>{3}).loss, 1e-12);
}

TEST(SoftmaxXent, GradientIsSoftmaxMinusOneHotOverBatch) {
    Rng rng(9);
    auto logits = random_matrix(3, 4, rng, 3.0);
    const std::vector<int> labels{1, 0, 3};
    const auto r = softmax_xent(logits, labels);
    std::vector<NamedParam<double>> params{{"logits", &logits}};
    const std::vector<Matrix<double>> analytic{r.dlogits};
    EXPECT_TRUE(grad_check([&] { return softmax_xent(logits, labels).loss; }, params, analytic).passed());
}

TEST(SoftmaxXent, LabelOutOfRangeThrows) {
    EXPECT_THROW(softmax_xent(Matrix<double>(1, 3), std::vector<int>{3}), Error);
    EXPECT_THROW(softmax_xent(Matrix<double>(2, 3), std::vector<int>{0}), DimensionError);
}

TEST(Dropout, InvertedMaskPreservesExpectation) {
    Rng rng(10);
    for (double rate : {0.14, 0.44, 0.68}) {
        const auto mask = dropout_mask<double>(1, 100000, rate, rng);
        const double mean = std::accumulate(mask.values().begin(), mask.values().end(), 0.0) / 100000.0;
        EXPECT_NEAR(mean, 1.0, 0.01) << rate;
        const auto zeros = std::count(mask.values().begin(), mask.values().end(), 0.0);
        EXPECT_NEAR(static_cast<double>(zeros) / 100000.0, rate, 0.01) << rate;
    }
}

TEST(Dropout, InferenceModeIsDeterministicIdentityOnInput) {
    Rng rng(11);
    FeedForward<double> net({3, 3}, 0.5, false);
    for (std::size_t i = 0; i < 3; ++i) net.weights[0](i, i) = 1.0;
    const auto x = random_matrix(2, 3, rng);
    EXPECT_EQ(ff_forward(net, x, false, nullptr).first, x);
    EXPECT_THROW(ff_forward(net, x, true, nullptr), Error);
}

namespace {

void adam_steps(Matrix<double> &w, const std::function<Matrix<double>(const Matrix<double> &)> &grad, double lr,
                int steps) {
    Optimizer<double> opt(OptimizerConfig{OptimizerKind::adam, lr});
    std::vector<NamedParam<double>> params{{"w", &w}};
    for (int i = 0; i < steps; ++i) {
        const auto g = grad(w);
        const Matrix<double> *gp = &g;
        opt.step(params, std::span<const Matrix<double> *const>(&gp, 1));
    }
}

} // namespace

TEST(Adam, SingleStepDescendsOnSquare) {
    Matrix<double> w(1, 1, 1.0);
    adam_steps(w, [](const Matrix<double> &x) { return Matrix<double>(1, 1, 2.0 * x[0]); }, 0.1, 1);
    EXPECT_LT(w[0], 1.0);
    EXPECT_NEAR(w[0], 0.9, 1e-6); // bias-corrected first step moves by lr
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Matrix<double> w(2, 2, 0.25);
    adam_steps(w, [](const Matrix<double> &) { return Matrix<double>(2, 2); }, 0.1, 10);
    for (double v : w.values()) EXPECT_EQ(v, 0.25);
}

TEST(Adam, ReachesMinimumOfTwoDimensionalQuadratic) {
    // f(x, y) = (x - 1)^2 + 3 (y + 2)^2, minimum at (1, -2).
    auto grad = [](const Matrix<double> &w) {
        Matrix<double> g(1, 2);
        g[0] = 2.0 * (w[0] - 1.0);
        g[1] = 6.0 * (w[1] + 2.0);
        return g;
    };
    Matrix<double> w(1, 2);
    adam_steps(w, grad, 0.1, 200);
    const auto g = grad(w);
    EXPECT_LT(std::hypot(g[0], g[1]), 1e-3) << w[0] << ", " << w[1];
}

TEST(Adam, NonFiniteGradientNamesParameter) {
    Matrix<double> w(1, 1);
    Optimizer<double> opt;
    std::vector<NamedParam<double>> params{{"attend.0.weight", &w}};
    const Matrix<double> g(1, 1, std::nan(""));
    const Matrix<double> *gp = &g;
    try {
        opt.step(params, std::span<const Matrix<double> *const>(&gp, 1));
        FAIL();
    } catch (const NumericError &e) {
        EXPECT_NE(std::string(e.what()).find("attend.0.weight"), std::string::npos);
    }
}

TEST(Sgd, StepIsLearningRateTimesGradient) {
    Matrix<double> w(1, 2, 1.0);
    Optimizer<double> opt(OptimizerConfig{OptimizerKind::sgd, 0.5});
    std::vector<NamedParam<double>> params{{"w", &w}};
    Matrix<double> g(1, 2);
    g[0] = 1.0;
    g[1] = -2.0;
    const Matrix<double> *gp = &g;
    opt.step(params, std::span<const Matrix<double> *const>(&gp, 1));
    EXPECT_EQ(w[0], 0.5);
    EXPECT_EQ(w[1], 2.0);
}

TEST(GradCheck, ReportsAWrongGradient) {
    Matrix<double> w(1, 2, 1.0);
    std::vector<NamedParam<double>> params{{"w", &w}};
    const std::vector<Matrix<double>> wrong{Matrix<double>(1, 2, 5.0)};
    const auto report = grad_check([&] { return w[0] * w[0] + w[1] * w[1]; }, params, wrong);
    EXPECT_FALSE(report.passed());
    EXPECT_EQ(report.failures().size(), 1u);
}
