#include <gtest/gtest.h>

#include <cmath>

#include "cloak/errors.hpp"
#include "cloak/schedule.hpp"
#include "test_support.hpp"

namespace cloak {
namespace {

TEST(Schedule, InvariantsHold) {
    const NoiseSchedule s = build_linear_schedule();
    ASSERT_EQ(s.T, 1000);
    double prod = 1.0;
    for (int t = 0; t < s.T; ++t) {
        EXPECT_GT(s.betas[t], 0.0);
        EXPECT_LT(s.betas[t], 1.0);
        EXPECT_DOUBLE_EQ(s.alphas[t], 1.0 - s.betas[t]);
        prod *= s.alphas[t];
        EXPECT_NEAR(s.alpha_bars[t], prod, 1e-6);
        if (t > 0) {
            EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
        }
    }
    EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
    EXPECT_DOUBLE_EQ(s.betas.back(), 0.02);
}

TEST(Schedule, FinalAlphaBarMatchesIndependentProduct) {
    // Reference values from a separate float64 cumulative product.
    const NoiseSchedule s = build_linear_schedule(1000, 1e-4, 0.02);
    EXPECT_LT(s.alpha_bars[999], 1e-3);
    EXPECT_NEAR(s.alpha_bars[999], 4.035829765375676e-05, 1e-12);
    EXPECT_NEAR(s.alpha_bars[499], 0.07858724288177824, 1e-12);
    EXPECT_NEAR(s.alpha_bars[0], 0.9999, 1e-15);
}

TEST(Schedule, TwoStepHandProduct) {
    const NoiseSchedule s = build_linear_schedule(2, 0.1, 0.1);
    EXPECT_NEAR(s.alpha_bars[0], 0.9, 1e-15);
    EXPECT_NEAR(s.alpha_bars[1], 0.81, 1e-15);
}

TEST(Schedule, MonotoneForRandomValidSchedules) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const int T = uniform_int(rng, 2, 400);
        const double lo = std::uniform_real_distribution<double>(1e-5, 0.3)(rng);
        const double hi = std::uniform_real_distribution<double>(lo, 0.9)(rng);
        const NoiseSchedule s = build_linear_schedule(T, lo, hi);
        for (int t = 1; t < T; ++t) ASSERT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
    }
}

TEST(Schedule, InvalidBoundsAreArgumentErrors) {
    EXPECT_THROW(build_linear_schedule(1, 1e-4, 0.02), ArgumentError);
    EXPECT_THROW(build_linear_schedule(10, 0.0, 0.02), ArgumentError);
    EXPECT_THROW(build_linear_schedule(10, 0.03, 0.02), ArgumentError);
    EXPECT_THROW(build_linear_schedule(10, 0.01, 1.0), ArgumentError);
}

TEST(QSample, ZeroNoiseScalesSignal) {
    const NoiseSchedule s = build_linear_schedule();
    const Tensor x0 = testing::random_tensor({2, 3, 4, 4}, 1);
    const Tensor out = q_sample(x0, 300, Tensor(x0.shape()), s);
    for (std::size_t i = 0; i < x0.numel(); ++i) EXPECT_EQ(out[i], std::sqrt(s.alpha_bars[300]) * x0[i]);
}

TEST(QSample, HandEvaluatedTwoStepValue) {
    const NoiseSchedule s = build_linear_schedule(2, 0.1, 0.1);
    const Tensor ones({1, 3, 2, 2}, 1.0);
    const Tensor out = q_sample(ones, 1, ones, s);
    for (double v : out.values()) EXPECT_NEAR(v, 1.3358898943540674, 1e-12);
}

TEST(QSample, StepwiseNoiselessChainMatchesClosedForm) {
    const NoiseSchedule s = build_linear_schedule();
    const Tensor x0 = testing::random_tensor({1, 3, 4, 4}, 2);
    Tensor x = x0;
    for (int t = 0; t < 600; ++t)
        for (double& v : x.values()) v *= std::sqrt(s.alphas[t]);
    const Tensor closed = q_sample(x0, 599, Tensor(x0.shape()), s);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x[i], closed[i], 1e-5);
}

TEST(QSample, OutOfRangeTimestepIsAnArgumentError) {
    const NoiseSchedule s = build_linear_schedule();
    const Tensor x({1, 3, 2, 2});
    EXPECT_THROW(q_sample(x, 1000, x, s), ArgumentError);
    EXPECT_THROW(q_sample(x, -1, x, s), ArgumentError);
    EXPECT_THROW(q_sample(x, 5, Tensor({1, 3, 2, 3}), s), ArgumentError);
}

TEST(QSample, OutputVarianceMatchesSignalToNoise) {
    const NoiseSchedule s = build_linear_schedule();
    const int t = 400, n = 20000;
    const Tensor x0 = testing::random_tensor({n, 1, 1, 1}, 3, 0.5);
    const Tensor eps = testing::random_tensor({n, 1, 1, 1}, 4);
    const Tensor y = q_sample(x0, t, eps, s);
    auto var = [](const Tensor& a) {
        const double m = a.mean();
        double v = 0.0;
        for (double x : a.values()) v += (x - m) * (x - m);
        return v / static_cast<double>(a.numel());
    };
    const double expected = s.alpha_bars[t] * var(x0) + (1.0 - s.alpha_bars[t]);
    EXPECT_NEAR(var(y), expected, 0.03 * expected);
}

// eps_theta = eps (exact) or eps + c, or a two-parameter model a*x + b*x^2.
class MockDenoiser final : public Denoiser {
public:
    enum class Mode { exact, offset, poly };
    MockDenoiser(Mode mode, const NoiseSchedule& s, Tensor x0, double c = 0.0) : mode_(mode), s_(s), x0_(std::move(x0)), c_(c) {}
    ag::Var a{Tensor({1}, {0.7}), false};
    ag::Var b{Tensor({1}, {-0.3}), false};

    Prediction predict(const ag::Var& x_t, std::span<const int> timesteps, const ag::Var&, bool) const override {
        if (mode_ == Mode::poly) {
            const Tensor av(x_t.shape(), a.value()[0]), bv(x_t.shape(), b.value()[0]);
            return {ag::add(ag::mul(x_t, ag::constant(av)), ag::mul(ag::mul(x_t, x_t), ag::constant(bv))), {}};
        }
        const double ab = s_.alpha_bars[timesteps[0]];
        Tensor eps(x_t.shape());
        for (std::size_t i = 0; i < eps.numel(); ++i)
            eps[i] = (x_t.value()[i] - std::sqrt(ab) * x0_[i]) / std::sqrt(1.0 - ab) + c_;
        return {ag::constant(eps), {}};
    }

private:
    Mode mode_;
    const NoiseSchedule& s_;
    Tensor x0_;
    double c_;
};

TEST(CondLoss, PerfectAndOffsetPredictors) {
    const NoiseSchedule s = build_linear_schedule();
    const Tensor x0 = testing::random_tensor({2, 3, 4, 4}, 5);
    const Tensor eps = testing::random_tensor(x0.shape(), 6);
    const ag::Var prompt = ag::constant(Tensor({8, 4}));
    const MockDenoiser exact(MockDenoiser::Mode::exact, s, x0);
    EXPECT_NEAR(cond_loss(exact, ag::constant(x0), prompt, 250, eps, s).item(), 0.0, 1e-20);
    const MockDenoiser offset(MockDenoiser::Mode::offset, s, x0, 0.3);
    EXPECT_NEAR(cond_loss(offset, ag::constant(x0), prompt, 250, eps, s).item(), 0.09, 1e-12);
}

TEST(CondLoss, GradientMatchesFiniteDifferences) {
    const NoiseSchedule s = build_linear_schedule();
    const Tensor x0 = testing::random_tensor({2, 3, 3, 3}, 7, 0.5);
    const Tensor eps = testing::random_tensor(x0.shape(), 8);
    const MockDenoiser model(MockDenoiser::Mode::poly, s, x0);
    const ag::Var prompt = ag::constant(Tensor({8, 4}));
    const int ts[] = {100, 700};
    const double err = testing::gradient_check(
        [&](const std::vector<ag::Var>& v) { return cond_loss(model, v[0], prompt, ts, eps, s); }, {x0});
    EXPECT_LT(err, 1e-3);
}

TEST(CondLoss, ShapeMismatchIsAnError) {
    const NoiseSchedule s = build_linear_schedule();
    const Tensor x0({1, 3, 2, 2});
    const MockDenoiser model(MockDenoiser::Mode::poly, s, x0);
    EXPECT_ANY_THROW(cond_loss(model, ag::constant(x0), ag::constant(Tensor({8, 4})), 3, Tensor({1, 3, 2, 3}), s));
}

}  // namespace
}  // namespace cloak
