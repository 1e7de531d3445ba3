#include <gtest/gtest.h>

#include "cloak/autograd.hpp"
#include "cloak/errors.hpp"
#include "test_support.hpp"

namespace cloak {
namespace {

using ag::Var;
using testing::gradient_check;
using testing::random_tensor;

// Random linear functional of a tensor-valued output.
Var probe(const Var& y, std::uint64_t seed = 99) {
    return ag::sum(ag::mul(y, ag::constant(random_tensor(y.shape(), seed))));
}

constexpr double kTol = 1e-6;

TEST(Autograd, ElementwiseOps) {
    const Tensor a = random_tensor({2, 3}, 1), b = random_tensor({2, 3}, 2);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::add(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::sub(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::mul(v[0], v[1])); }, {a, b}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::scale(v[0], -2.5)); }, {a}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::add_scalar(v[0], 0.7)); }, {a}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::silu(v[0])); }, {a}), kTol);
}

TEST(Autograd, Reductions) {
    const Tensor a = random_tensor({3, 4}, 3), b = random_tensor({3, 4}, 4);
    EXPECT_LT(gradient_check([](auto& v) { return ag::sum(v[0]); }, {a}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return ag::mean(ag::mul(v[0], v[0])); }, {a}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return ag::mse(v[0], v[1]); }, {a, b}), kTol);
    const double scales[] = {0.5, -1.5, 2.0};
    EXPECT_LT(gradient_check([&](auto& v) { return probe(ag::scale_samples(v[0], scales)); }, {a}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::reshape(v[0], {4, 3})); }, {a}), kTol);
}

TEST(Autograd, LinearAndMatmul) {
    const Tensor x = random_tensor({2, 3, 4}, 5), w = random_tensor({5, 4}, 6), b = random_tensor({5}, 7);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::linear(v[0], v[1], v[2])); }, {x, w, b}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::linear(v[0], v[1], Var())); }, {x, w}), kTol);
    const Tensor p = random_tensor({3, 4}, 8), q = random_tensor({4, 2}, 9);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::matmul(v[0], v[1])); }, {p, q}), kTol);
}

TEST(Autograd, Convolution) {
    const Tensor x = random_tensor({2, 3, 5, 5}, 10), w = random_tensor({4, 3, 3, 3}, 11), b = random_tensor({4}, 12);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], 1, 1)); }, {x, w, b}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::conv2d(v[0], v[1], v[2], 2, 1)); }, {x, w, b}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::conv2d(v[0], v[1], Var(), 1, 0)); }, {x, w}), kTol);
    const Tensor w1 = random_tensor({2, 3, 1, 1}, 13);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::conv2d(v[0], v[1], Var(), 1, 0)); }, {x, w1}), kTol);
}

TEST(Autograd, ConvolutionMatchesDirectSum) {
    const Tensor x = random_tensor({1, 2, 4, 4}, 14), w = random_tensor({3, 2, 3, 3}, 15), b = random_tensor({3}, 16);
    const Tensor y = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), 1, 1).value();
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) {
                double s = b[o];
                for (int c = 0; c < 2; ++c)
                    for (int di = 0; di < 3; ++di)
                        for (int dj = 0; dj < 3; ++dj) {
                            const int yi = i + di - 1, xj = j + dj - 1;
                            if (yi < 0 || yi >= 4 || xj < 0 || xj >= 4) continue;
                            s += w[((o * 2 + c) * 3 + di) * 3 + dj] * x[(c * 4 + yi) * 4 + xj];
                        }
                EXPECT_NEAR(y[(o * 4 + i) * 4 + j], s, 1e-12);
            }
}

TEST(Autograd, SpatialOps) {
    const Tensor x = random_tensor({2, 3, 4, 4}, 17), y = random_tensor({2, 2, 4, 4}, 18), e = random_tensor({2, 3}, 19);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::avg_pool2(v[0])); }, {x}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::upsample_nearest2(v[0])); }, {x}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::concat_channels(v[0], v[1])); }, {x, y}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::add_channel_embedding(v[0], v[1])); }, {x, e}), kTol);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::to_tokens(v[0])); }, {x}), kTol);
    const Tensor t = random_tensor({2, 16, 3}, 20);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::from_tokens(v[0], 4, 4)); }, {t}), kTol);
}

TEST(Autograd, Normalization) {
    const Tensor x = random_tensor({2, 4, 3, 3}, 21), g = random_tensor({4}, 22), b = random_tensor({4}, 23);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::group_norm(v[0], v[1], v[2], 2)); }, {x, g, b}), 1e-5);
    const Tensor t = random_tensor({2, 5, 6}, 24), lg = random_tensor({6}, 25), lb = random_tensor({6}, 26);
    EXPECT_LT(gradient_check([](auto& v) { return probe(ag::layer_norm(v[0], v[1], v[2])); }, {t, lg, lb}), 1e-5);
}

TEST(Autograd, AttentionAndTokens) {
    const Tensor q = random_tensor({2, 5, 4}, 27), k = random_tensor({2, 3, 4}, 28), v = random_tensor({2, 3, 6}, 29);
    EXPECT_LT(gradient_check([](auto& x) { return probe(ag::attention(x[0], x[1], x[2])); }, {q, k, v}), kTol);
    Tensor probs;
    ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), &probs);
    ASSERT_EQ(probs.shape(), (Shape{2, 5, 3}));
    for (int r = 0; r < 10; ++r) EXPECT_NEAR(probs[r * 3] + probs[r * 3 + 1] + probs[r * 3 + 2], 1.0, 1e-12);

    const Tensor p = random_tensor({3, 4}, 30);
    EXPECT_LT(gradient_check([](auto& x) { return probe(ag::repeat_batch(x[0], 2)); }, {p}), kTol);
    const Tensor a = random_tensor({3, 4}, 31), b = random_tensor({3, 4}, 32);
    EXPECT_LT(gradient_check(
                  [](auto& x) {
                      const Var parts[] = {x[0], x[1]};
                      return probe(ag::stack(parts));
                  },
                  {a, b}),
              kTol);
}

TEST(Autograd, CosineAndCrossEntropy) {
    const Tensor a = random_tensor({3, 2, 4}, 33), b = random_tensor({3, 2, 4}, 34);
    EXPECT_LT(gradient_check([](auto& v) { return ag::cosine_similarity(v[0], v[1]); }, {a, b}), kTol);
    const Tensor logits = random_tensor({4, 5}, 35);
    const int labels[] = {0, 4, 2, 2};
    EXPECT_LT(gradient_check([&](auto& v) { return ag::cross_entropy(v[0], labels); }, {logits}), kTol);
}

TEST(Autograd, CosineOfZeroSampleIsDegenerate) {
    Tensor a = random_tensor({2, 3}, 36);
    for (int i = 0; i < 3; ++i) a[i] = 0.0;
    int degenerate = 0;
    const Var s = ag::cosine_similarity(ag::constant(a), ag::constant(random_tensor({2, 3}, 37)), &degenerate);
    EXPECT_EQ(degenerate, 1);
    EXPECT_TRUE(std::isfinite(s.item()));
}

TEST(Autograd, RowOps) {
    const Tensor table = random_tensor({6, 3}, 38), row = random_tensor({3}, 39);
    const int ids[] = {1, 4, 1, 0};
    EXPECT_LT(gradient_check([&](auto& v) { return probe(ag::gather_rows(v[0], ids)); }, {table}), kTol);
    const Tensor base = random_tensor({4, 3}, 40);
    const int pos[] = {1, 3};
    EXPECT_LT(gradient_check([&](auto& v) { return probe(ag::replace_rows(v[0], v[1], pos)); }, {base, row}), kTol);
}

TEST(Autograd, LeafGradientsAccumulate) {
    Var x(Tensor({2}, {1.0, 2.0}), true);
    ag::backward(ag::sum(ag::mul(x, x)));
    ag::backward(ag::sum(x));
    EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 5.0);
    x.zero_grad();
    EXPECT_DOUBLE_EQ(x.grad().abs_sum(), 0.0);
}

TEST(Autograd, NoGradAndDetachBlockGradients) {
    Var x(Tensor({2}, {1.0, 2.0}), true);
    Var y;
    {
        ag::NoGradGuard guard;
        EXPECT_FALSE(ag::grad_enabled());
        y = ag::scale(x, 3.0);
    }
    EXPECT_TRUE(ag::grad_enabled());
    EXPECT_FALSE(y.requires_grad());
    const Var z = ag::add(ag::detach(ag::scale(x, 2.0)), x);
    ag::backward(ag::sum(z));
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Autograd, ShapeMismatchIsAnError) {
    EXPECT_THROW(ag::add(ag::constant(Tensor({2})), ag::constant(Tensor({3}))), ArgumentError);
    EXPECT_THROW(ag::matmul(ag::constant(Tensor({2, 3})), ag::constant(Tensor({2, 3}))), ArgumentError);
}

}  // namespace
}  // namespace cloak
