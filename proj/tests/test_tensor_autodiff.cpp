#include <gtest/gtest.h>

#include <cmath>

#include "layerprobe/autodiff.hpp"
#include "layerprobe/rng.hpp"

using namespace layerprobe;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    Tensor t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

/// Keeps elements at least `margin` away from zero (relu kink avoidance).
Tensor random_tensor_away_from_zero(std::vector<int> shape, Rng& rng, float margin = 0.05f) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (float& v : t.data) {
        if (std::fabs(v) < margin) v = v < 0.0f ? v - margin : v + margin;
    }
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

TEST(Tensor, ShapeAndDataMustAgree) {
    EXPECT_THROW(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}), DimensionError);
    EXPECT_THROW(Tensor({0, 3}), DimensionError);
    Tensor t({2, 3});
    EXPECT_EQ(t.numel(), 6u);
}

TEST(Tensor, EnsureFiniteRejectsNanAndInf) {
    Tensor t({2}, {1.0f, std::numeric_limits<float>::infinity()});
    EXPECT_THROW(ensure_finite(t, "test"), NumericError);
    t.data[1] = std::nanf("");
    EXPECT_THROW(ensure_finite(t, "test"), NumericError);
    t.data[1] = 0.0f;
    EXPECT_NO_THROW(ensure_finite(t, "test"));
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

TEST(Conv2d, IdentityKernelReproducesInput) {
    Rng rng(7);
    const Tensor input = random_tensor({1, 5, 5}, rng);
    const Tensor kernel({1, 1, 1, 1}, {1.0f});
    const Tensor bias({1}, {0.0f});
    const Tensor out = conv2d_forward(input, kernel, bias, 1, 0);
    EXPECT_EQ(out.shape, input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i) EXPECT_EQ(out.data[i], input.data[i]);
}

TEST(Conv2d, HandSlidingWindowSum) {
    // 3x3 ones convolved with 2x2 ones -> 2x2 of 4
    const Tensor input({1, 3, 3}, std::vector<float>(9, 1.0f));
    const Tensor kernel({1, 1, 2, 2}, std::vector<float>(4, 1.0f));
    const Tensor bias({1}, {0.0f});
    const Tensor out = conv2d_forward(input, kernel, bias, 1, 0);
    EXPECT_EQ(out.shape, (std::vector<int>{1, 2, 2}));
    for (float v : out.data) EXPECT_FLOAT_EQ(v, 4.0f);
}

TEST(Conv2d, ZeroKernelGivesZeroOutputOfFormulaShape) {
    Rng rng(8);
    const Tensor input = random_tensor({3, 8, 6}, rng);
    const Tensor kernel({4, 3, 3, 3});
    const Tensor bias({4});
    const Tensor out = conv2d_forward(input, kernel, bias, 1, 1);
    EXPECT_EQ(out.shape, (std::vector<int>{4, 8, 6}));
    for (float v : out.data) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, ShapeMismatchesAreDimensionErrors) {
    const Tensor input({2, 4, 4});
    const Tensor kernel({1, 3, 3, 3});  // expects 3 input channels
    const Tensor bias({1});
    EXPECT_THROW(conv2d_forward(input, kernel, bias, 1, 0), DimensionError);
    const Tensor big_kernel({1, 2, 7, 7});
    EXPECT_THROW(conv2d_forward(input, big_kernel, bias, 1, 0), DimensionError);
}

TEST(Conv2d, NonIntegerOutputSizeIsConfigError) {
    const Tensor input({1, 5, 5});
    const Tensor kernel({1, 1, 2, 2});
    const Tensor bias({1});
    EXPECT_THROW(conv2d_forward(input, kernel, bias, 2, 0), ConfigError);
}

TEST(Conv2dBackward, ZeroUpstreamGivesZeroGradients) {
    Rng rng(9);
    const Tensor input = random_tensor({2, 4, 4}, rng);
    const Tensor kernel = random_tensor({3, 2, 3, 3}, rng);
    const Tensor bias = random_tensor({3}, rng);
    const Tensor out = conv2d_forward(input, kernel, bias, 1, 1);
    const ConvGrads g = conv2d_backward(Tensor(out.shape), input, kernel, bias, 1, 1);
    for (float v : g.input.data) EXPECT_EQ(v, 0.0f);
    for (float v : g.kernel.data) EXPECT_EQ(v, 0.0f);
    for (float v : g.bias.data) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2dBackward, IdentityKernelPassesUpstreamThrough) {
    Rng rng(10);
    const Tensor input = random_tensor({1, 4, 4}, rng);
    const Tensor kernel({1, 1, 1, 1}, {1.0f});
    const Tensor bias({1});
    const Tensor upstream = random_tensor({1, 4, 4}, rng);
    const ConvGrads g = conv2d_backward(upstream, input, kernel, bias, 1, 0);
    for (std::size_t i = 0; i < upstream.numel(); ++i) {
        EXPECT_FLOAT_EQ(g.input.data[i], upstream.data[i]);
    }
}

TEST(Conv2dBackward, UpstreamShapeMismatchIsDimensionError) {
    const Tensor input({1, 4, 4});
    const Tensor kernel({1, 1, 3, 3});
    const Tensor bias({1});
    EXPECT_THROW(conv2d_backward(Tensor({1, 4, 4}), input, kernel, bias, 1, 0), DimensionError);
}

TEST(Conv2dBackward, FiniteDifferenceOracle) {
    // random 1-channel 4x4 input, 3x3 kernel, objective = sum of outputs.
    // Positive kernel entries keep the input gradients away from
    // cancellation so the f32 forward noise stays far below tolerance.
    Rng rng(11);
    const Tensor input = random_tensor({1, 4, 4}, rng, -0.2f, 0.2f);
    const Tensor kernel = random_tensor({1, 1, 3, 3}, rng, 0.2f, 1.0f);
    const Tensor bias = random_tensor({1}, rng, -0.1f, 0.1f);
    auto comp = [&](GradTape& tape, GradTape::Id x) {
        GradTape::Id k = tape.input(kernel);
        GradTape::Id b = tape.input(bias);
        GradTape::Id out = tape.conv2d(x, k, b, 1, 0);
        std::vector<GradTape::GatherTerm> terms;
        for (int i = 0; i < 4; ++i) terms.push_back({out, i, 1.0f});
        return tape.weighted_sum(terms);
    };
    EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-3);
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

TEST(Relu, SignCases) {
    const Tensor input({3}, {-2.0f, 0.0f, 3.0f});
    const Tensor out = relu_forward(input);
    EXPECT_EQ(out.data, (std::vector<float>{0.0f, 0.0f, 3.0f}));
}

TEST(Relu, BackwardMask) {
    const Tensor input({2}, {-1.0f, 2.0f});
    const Tensor upstream({2}, {5.0f, 7.0f});
    const Tensor g = relu_backward(upstream, input);
    EXPECT_EQ(g.data, (std::vector<float>{0.0f, 7.0f}));
}

TEST(Relu, FiniteDifferenceAwayFromKink) {
    Rng rng(12);
    const Tensor input = random_tensor_away_from_zero({2, 3, 3}, rng);
    auto comp = [&](GradTape& tape, GradTape::Id x) {
        GradTape::Id out = tape.relu(x);
        std::vector<GradTape::GatherTerm> terms;
        for (int i = 0; i < 18; ++i) terms.push_back({out, i, 0.5f + 0.1f * i});
        return tape.weighted_sum(terms);
    };
    EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-3);
}

// ---------------------------------------------------------------------------
// maxpool2x2
// ---------------------------------------------------------------------------

TEST(MaxPool, WindowMaxAndArgmaxRouting) {
    const Tensor input({1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    const MaxPoolResult r = maxpool2x2_forward(input);
    EXPECT_EQ(r.output.shape, (std::vector<int>{1, 1, 1}));
    EXPECT_FLOAT_EQ(r.output.data[0], 4.0f);
    const Tensor g = maxpool2x2_backward(Tensor({1, 1, 1}, {1.0f}), r.argmax, input.shape);
    EXPECT_EQ(g.data, (std::vector<float>{0.0f, 0.0f, 0.0f, 1.0f}));
}

TEST(MaxPool, ConstantInputStaysConstantAndTiesGoFirst) {
    const Tensor input({1, 4, 4}, std::vector<float>(16, 2.5f));
    const MaxPoolResult r = maxpool2x2_forward(input);
    for (float v : r.output.data) EXPECT_FLOAT_EQ(v, 2.5f);
    // first-encountered tie-break: argmax is the top-left of every window
    EXPECT_EQ(r.argmax[0], 0);
    EXPECT_EQ(r.argmax[1], 2);
}

TEST(MaxPool, RoutingConservesMass) {
    Rng rng(13);
    Tensor input({2, 4, 4});
    for (std::size_t i = 0; i < input.numel(); ++i) input.data[i] = static_cast<float>(i) * 0.125f;
    const MaxPoolResult r = maxpool2x2_forward(input);
    const Tensor upstream = random_tensor({2, 2, 2}, rng);
    const Tensor g = maxpool2x2_backward(upstream, r.argmax, input.shape);
    double up_sum = 0.0, g_sum = 0.0;
    for (float v : upstream.data) up_sum += v;
    for (float v : g.data) g_sum += v;
    EXPECT_NEAR(up_sum, g_sum, 1e-5);
}

TEST(MaxPool, OddSpatialDimsAreDimensionErrors) {
    EXPECT_THROW(maxpool2x2_forward(Tensor({1, 3, 4})), DimensionError);
    EXPECT_THROW(maxpool2x2_forward(Tensor({1, 4, 5})), DimensionError);
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

TEST(Dense, IdentityWeights) {
    const Tensor input({3}, {1.5f, -2.0f, 0.25f});
    Tensor weights({3, 3});
    for (int i = 0; i < 3; ++i) weights.data[i * 3 + i] = 1.0f;
    const Tensor out = dense_forward(input, weights, Tensor({3}));
    EXPECT_EQ(out.data, input.data);
}

TEST(Dense, HandMatrixVectorProduct) {
    const Tensor weights({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    const Tensor input({2}, {1.0f, 1.0f});
    const Tensor out = dense_forward(input, weights, Tensor({2}));
    EXPECT_EQ(out.data, (std::vector<float>{3.0f, 7.0f}));
}

TEST(Dense, ShapeMismatchIsDimensionError) {
    EXPECT_THROW(dense_forward(Tensor({3}), Tensor({2, 4}), Tensor({2})), DimensionError);
    EXPECT_THROW(dense_forward(Tensor({4}), Tensor({2, 4}), Tensor({3})), DimensionError);
}

TEST(Dense, FiniteDifferenceOracle8x8) {
    Rng rng(14);
    const Tensor input = random_tensor({8}, rng, -0.2f, 0.2f);
    const Tensor weights = random_tensor({8, 8}, rng, 0.1f, 1.0f);
    const Tensor bias = random_tensor({8}, rng, -0.1f, 0.1f);
    auto comp = [&](GradTape& tape, GradTape::Id x) {
        GradTape::Id w = tape.input(weights);
        GradTape::Id b = tape.input(bias);
        GradTape::Id out = tape.dense(x, w, b);
        std::vector<GradTape::GatherTerm> terms;
        for (int i = 0; i < 8; ++i) terms.push_back({out, i, 1.0f + 0.25f * i});
        return tape.weighted_sum(terms);
    };
    EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-3);
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

TEST(SoftmaxCe, TwoEqualLogits) {
    const SoftmaxCeResult r = softmax_cross_entropy(Tensor({2}), 0);
    EXPECT_NEAR(r.loss, std::log(2.0), 1e-6);
}

TEST(SoftmaxCe, UniformLogitsGiveLogK) {
    for (int k : {3, 7, 10}) {
        const SoftmaxCeResult r = softmax_cross_entropy(Tensor({k}, std::vector<float>(k, 1.25f)), k - 1);
        EXPECT_NEAR(r.loss, std::log(static_cast<double>(k)), 1e-5);
    }
}

TEST(SoftmaxCe, ConfidentLogitGivesTinyLoss) {
    const SoftmaxCeResult r = softmax_cross_entropy(Tensor({3}, {30.0f, 0.0f, 0.0f}), 0);
    EXPECT_LT(r.loss, 1e-9);
    EXPECT_GE(r.loss, 0.0f);
}

TEST(SoftmaxCe, TargetOutOfRangeIsIndexError) {
    EXPECT_THROW(softmax_cross_entropy(Tensor({3}), 3), IndexError);
    EXPECT_THROW(softmax_cross_entropy(Tensor({3}), -1), IndexError);
}

TEST(SoftmaxCe, BackwardIsProbsMinusOnehot) {
    Rng rng(15);
    const Tensor logits = random_tensor({5}, rng, -2.0f, 2.0f);
    const SoftmaxCeResult r = softmax_cross_entropy(logits, 2);
    const Tensor g = softmax_cross_entropy_backward(r.probs, 2, 1.0f);
    for (int i = 0; i < 5; ++i) {
        const float expected = r.probs.data[i] - (i == 2 ? 1.0f : 0.0f);
        EXPECT_NEAR(g.data[i], expected, 1e-6);
    }
}

TEST(SoftmaxCe, FiniteDifferenceOracle) {
    Rng rng(16);
    const Tensor logits = random_tensor({6}, rng, -2.0f, 2.0f);
    auto comp = [&](GradTape& tape, GradTape::Id x) { return tape.softmax_cross_entropy(x, 3); };
    EXPECT_LT(finite_diff_check(comp, logits, 1e-3f), 1e-3);
}

// ---------------------------------------------------------------------------
// finite_diff_check itself
// ---------------------------------------------------------------------------

TEST(FiniteDiffCheck, LinearComputationIsExactUpToRounding) {
    Rng rng(17);
    const Tensor input = random_tensor({10}, rng);
    auto comp = [&](GradTape& tape, GradTape::Id x) {
        std::vector<GradTape::GatherTerm> terms;
        for (int i = 0; i < 10; ++i) terms.push_back({x, i, 0.5f + 0.3f * i});
        return tape.weighted_sum(terms);
    };
    EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-5);
}

TEST(FiniteDiffCheck, ConvReluCompositeWithinTolerance) {
    Rng rng(18);
    const Tensor input = random_tensor({1, 6, 6}, rng, 0.01f, 0.05f);
    Tensor kernel = random_tensor({2, 1, 3, 3}, rng, 0.4f, 0.8f);
    Tensor bias({2}, {0.02f, 0.05f});  // positive terms keep pre-relu off the kink
    auto comp = [&](GradTape& tape, GradTape::Id x) {
        GradTape::Id k = tape.input(kernel);
        GradTape::Id b = tape.input(bias);
        GradTape::Id act = tape.relu(tape.conv2d(x, k, b, 1, 0));
        GradTape::Id cm = tape.channel_mean(act);
        return tape.weighted_sum({{cm, 0, 1.0f}, {cm, 1, 2.0f}});
    };
    EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-3);
}

TEST(FiniteDiffCheck, MaxPoolExactAwayFromTies) {
    // values spaced more than twice the step apart keep every window's
    // argmax stable under the probe
    Tensor input({1, 4, 4});
    Rng rng(21);
    std::vector<int> perm(16);
    for (int i = 0; i < 16; ++i) perm[i] = i;
    for (int i = 16; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    for (int i = 0; i < 16; ++i) input.data[i] = 0.05f * perm[i];
    auto comp = [&](GradTape& tape, GradTape::Id x) {
        GradTape::Id p = tape.maxpool2x2(x);
        std::vector<GradTape::GatherTerm> terms;
        for (int i = 0; i < 4; ++i) terms.push_back({p, i, 1.0f + 0.5f * i});
        return tape.weighted_sum(terms);
    };
    EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-5);
}

TEST(FiniteDiffCheck, ZeroStepIsPreconditionViolation) {
    const Tensor input({2});
    auto comp = [](GradTape& tape, GradTape::Id x) { return tape.weighted_sum({{x, 0, 1.0f}}); };
    EXPECT_THROW(finite_diff_check(comp, input, 0.0f), PreconditionError);
    EXPECT_THROW(finite_diff_check(comp, input, -1e-3f), PreconditionError);
}

// ---------------------------------------------------------------------------
// GradTape behavior
// ---------------------------------------------------------------------------

TEST(GradTape, GradBeforeBackwardIsPreconditionError) {
    GradTape tape;
    GradTape::Id x = tape.input(Tensor({2}, {1.0f, 2.0f}));
    EXPECT_THROW(tape.grad(x), PreconditionError);
}

TEST(GradTape, NonRetainedIntermediateGradIsDiscarded) {
    GradTape tape;
    GradTape::Id x = tape.input(Tensor({2}, {1.0f, 2.0f}));
    GradTape::Id r = tape.relu(x);
    GradTape::Id kept = tape.relu(r);
    tape.retain(kept);
    GradTape::Id out = tape.weighted_sum({{kept, 0, 1.0f}, {kept, 1, 1.0f}});
    tape.backward(out);
    EXPECT_NO_THROW(tape.grad(x));     // leaves always keep gradients
    EXPECT_NO_THROW(tape.grad(kept));  // retained
    EXPECT_THROW(tape.grad(r), PreconditionError);
}

TEST(GradTape, FlattenRoundTripsGradientShape) {
    Rng rng(19);
    const Tensor input = random_tensor({2, 2, 3}, rng);
    GradTape tape;
    GradTape::Id x = tape.input(input);
    GradTape::Id f = tape.flatten(x);
    GradTape::Id out = tape.weighted_sum({{f, 5, 2.0f}});
    tape.backward(out);
    const Tensor& g = tape.grad(x);
    EXPECT_EQ(g.shape, input.shape);
    EXPECT_FLOAT_EQ(g.data[5], 2.0f);
}

// ---------------------------------------------------------------------------
// Properties: randomized finite differences, determinism, shape algebra
// ---------------------------------------------------------------------------

TEST(Properties, RandomizedFiniteDifferencesAcrossOps) {
    Rng rng(100);
    for (int trial = 0; trial < 20; ++trial) {
        const int c = 1 + static_cast<int>(rng.below(2));
        const int o = 1 + static_cast<int>(rng.below(3));
        const int hw = 4 + 2 * static_cast<int>(rng.below(2));
        const Tensor input = random_tensor({c, hw, hw}, rng, 0.01f, 0.05f);
        const Tensor kernel = random_tensor({o, c, 3, 3}, rng, 0.4f, 0.8f);
        const Tensor bias = random_tensor({o}, rng, 0.02f, 0.1f);
        auto comp = [&](GradTape& tape, GradTape::Id x) {
            GradTape::Id k = tape.input(kernel);
            GradTape::Id b = tape.input(bias);
            GradTape::Id act = tape.relu(tape.conv2d(x, k, b, 1, 1));
            GradTape::Id cm = tape.channel_mean(act);
            std::vector<GradTape::GatherTerm> terms;
            for (int i = 0; i < o; ++i) terms.push_back({cm, i, 1.0f + 0.5f * i});
            return tape.weighted_sum(terms);
        };
        EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-3) << "trial " << trial;
    }
}

TEST(Properties, ForwardDeterminism) {
    Rng rng(101);
    const Tensor input = random_tensor({2, 6, 6}, rng);
    const Tensor kernel = random_tensor({3, 2, 3, 3}, rng);
    const Tensor bias = random_tensor({3}, rng);
    const Tensor a = conv2d_forward(input, kernel, bias, 1, 1);
    const Tensor b = conv2d_forward(input, kernel, bias, 1, 1);
    EXPECT_EQ(a.data, b.data);
}

TEST(Properties, ConvShapeAlgebraClosure) {
    Rng rng(102);
    for (int trial = 0; trial < 50; ++trial) {
        const int cin = 1 + static_cast<int>(rng.below(3));
        const int cout = 1 + static_cast<int>(rng.below(4));
        const int k = 1 + static_cast<int>(rng.below(3));
        const int pad = static_cast<int>(rng.below(2));
        int h = k + static_cast<int>(rng.below(6));
        int w = k + static_cast<int>(rng.below(6));
        int stride = 1 + static_cast<int>(rng.below(2));
        if ((h + 2 * pad - k) % stride != 0) h += stride - (h + 2 * pad - k) % stride;
        if ((w + 2 * pad - k) % stride != 0) w += stride - (w + 2 * pad - k) % stride;
        const Tensor input = random_tensor({cin, h, w}, rng);
        const Tensor kernel = random_tensor({cout, cin, k, k}, rng);
        const Tensor bias = random_tensor({cout}, rng);
        const Tensor out = conv2d_forward(input, kernel, bias, stride, pad);
        EXPECT_EQ(out.shape[0], cout);
        EXPECT_EQ(out.shape[1], (h + 2 * pad - k) / stride + 1);
        EXPECT_EQ(out.shape[2], (w + 2 * pad - k) / stride + 1);
    }
}

TEST(Properties, OverflowRaisesNumericErrorInsteadOfInf) {
    const Tensor input({1}, {2e38f});
    const Tensor weights({1, 1}, {10.0f});
    EXPECT_THROW(dense_forward(input, weights, Tensor({1})), NumericError);
}

TEST(Conv2dBackward, FiniteDifferenceOracleWithStrideTwo) {
    Rng rng(22);
    const Tensor input = random_tensor({2, 5, 5}, rng, -0.2f, 0.2f);
    const Tensor kernel = random_tensor({2, 2, 3, 3}, rng, 0.2f, 1.0f);
    const Tensor bias = random_tensor({2}, rng, -0.1f, 0.1f);
    auto comp = [&](GradTape& tape, GradTape::Id x) {
        GradTape::Id k = tape.input(kernel);
        GradTape::Id b = tape.input(bias);
        GradTape::Id out = tape.conv2d(x, k, b, 2, 1);  // (5+2-3)/2+1 = 3
        std::vector<GradTape::GatherTerm> terms;
        for (int i = 0; i < 2 * 3 * 3; ++i) terms.push_back({out, i, 1.0f});
        return tape.weighted_sum(terms);
    };
    EXPECT_LT(finite_diff_check(comp, input, 1e-3f), 1e-3);
}
