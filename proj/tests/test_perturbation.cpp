#include <gtest/gtest.h>

#include <cmath>

#include "layerprobe/perturbation.hpp"
#include "support/synth.hpp"

using namespace layerprobe;

namespace {

/// Effectively linear 2-class model: identity 1x1 conv, flatten, dense head.
Model linear_two_class_model() {
    ModelSpec spec;
    spec.input_shape = {1, 2, 2};
    spec.num_classes = 2;
    spec.layers = {LayerSpec::conv("block1_conv1", 1, 1, 1, 0), LayerSpec::flatten(),
                   LayerSpec::dense("fc", 2)};
    Model m = build_model(spec, 1);
    m.params[0].weight = Tensor({1, 1, 1, 1}, {1.0f});
    m.params[0].bias = Tensor({1}, {0.0f});
    m.params[2].weight = Tensor({2, 4}, {0.5f, 0.5f, 0.5f, 0.5f, 0.2f, 0.8f, -0.3f, 0.6f});
    m.params[2].bias = Tensor({2}, {0.0f, 0.0f});
    return m;
}

ActivationCapture single_layer_capture(std::vector<float> channel_means) {
    ActivationCapture cap;
    cap.captured = true;
    const int n = static_cast<int>(channel_means.size());
    cap.layers.push_back({"block1_conv1", Tensor{}, Tensor{}, Tensor({n}, std::move(channel_means))});
    return cap;
}

}  // namespace

// ---------------------------------------------------------------------------
// AttackConfig
// ---------------------------------------------------------------------------

TEST(AttackConfig, DefaultsMatchTheDocumentedValues) {
    const AttackConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    EXPECT_EQ(cfg.amplification_ratios, (std::vector<float>{0.25f, 0.5f, 1.0f, 2.0f, 4.0f}));
    EXPECT_FLOAT_EQ(cfg.delta, 0.1f);
    EXPECT_EQ(cfg.max_iterations, 50);
}

TEST(AttackConfig, InvalidValuesAreConfigErrors) {
    AttackConfig cfg;
    cfg.delta = 0.0f;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = AttackConfig{};
    cfg.top_k = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = AttackConfig{};
    cfg.monitored_neurons = -1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = AttackConfig{};
    cfg.max_iterations = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = AttackConfig{};
    cfg.amplification_ratios = {0.5f, -1.0f};
    EXPECT_THROW(cfg.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Matched Gaussian noise
// ---------------------------------------------------------------------------

TEST(MatchedNoise, AllZerosStayAllZeros) {
    const Tensor n_a({2, 3, 3});
    const Tensor n_g = match_gaussian_noise(n_a, 123);
    EXPECT_EQ(n_g.shape, n_a.shape);
    for (float v : n_g.data) EXPECT_EQ(v, 0.0f);
}

TEST(MatchedNoise, ConstantFieldReproducesTheConstant) {
    const Tensor n_a({4, 4}, std::vector<float>(16, 0.37f));
    const Tensor n_g = match_gaussian_noise(n_a, 99);
    for (float v : n_g.data) EXPECT_FLOAT_EQ(v, 0.37f);
}

TEST(MatchedNoise, LargeSampleMatchesSourceStatistics) {
    // law-of-large-numbers check on >= 10^4 elements
    Rng rng(42);
    Tensor n_a({1, 100, 120});
    for (float& v : n_a.data) v = static_cast<float>(rng.normal(0.02, 0.05));
    const NoiseStats stats = noise_stats(n_a);
    const Tensor n_g = match_gaussian_noise(n_a, 777);
    const double mean_err = std::fabs(mean_of(n_g) - stats.mean);
    EXPECT_LT(mean_err, std::max(0.05 * std::fabs(stats.mean), 1e-3));
    EXPECT_LT(std::fabs(stddev_of(n_g) - stats.stddev) / stats.stddev, 0.05);
}

TEST(MatchedNoise, DeterministicPerSeed) {
    Rng rng(43);
    Tensor n_a({1, 8, 8});
    for (float& v : n_a.data) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    EXPECT_EQ(match_gaussian_noise(n_a, 5).data, match_gaussian_noise(n_a, 5).data);
    EXPECT_NE(match_gaussian_noise(n_a, 5).data, match_gaussian_noise(n_a, 6).data);
}

// ---------------------------------------------------------------------------
// amplify / compose_inputs
// ---------------------------------------------------------------------------

TEST(Amplify, RatioOneIsIdentity) {
    Rng rng(44);
    Tensor noise({2, 5, 5});
    for (float& v : noise.data) v = static_cast<float>(rng.uniform(-0.2, 0.2));
    EXPECT_EQ(amplify(noise, 1.0f).data, noise.data);
}

TEST(Amplify, ScalesTheSampleStdExactly) {
    Rng rng(45);
    Tensor noise({1, 40, 40});
    for (float& v : noise.data) v = static_cast<float>(rng.normal(0.0, 0.08));
    const double base = stddev_of(noise);
    EXPECT_NEAR(stddev_of(amplify(noise, 0.25f)), 0.25 * base, 1e-9);
}

TEST(Amplify, PlainArithmeticAndPreconditions) {
    const Tensor noise({1}, {0.01f});
    EXPECT_FLOAT_EQ(amplify(noise, 4.0f).data[0], 0.04f);
    EXPECT_THROW(amplify(noise, 0.0f), PreconditionError);
    EXPECT_THROW(amplify(noise, -2.0f), PreconditionError);
}

TEST(ComposeInputs, ZeroNoiseGivesThreeIdenticalImages) {
    Rng rng(46);
    Tensor seed({1, 4, 4});
    for (float& v : seed.data) v = static_cast<float>(rng.uniform());
    const Tensor zero(seed.shape);
    const InputTriple t = compose_inputs(seed, zero, zero, 1.0f);
    EXPECT_EQ(t.seed.data, seed.data);
    EXPECT_EQ(t.adversarial.data, seed.data);
    EXPECT_EQ(t.noisy.data, seed.data);
}

TEST(ComposeInputs, SaturatedPixelsClipToOne) {
    const Tensor seed({1, 2, 2}, std::vector<float>(4, 1.0f));
    const Tensor pos({1, 2, 2}, std::vector<float>(4, 0.3f));
    const InputTriple t = compose_inputs(seed, pos, pos, 1.0f);
    for (float v : t.adversarial.data) EXPECT_EQ(v, 1.0f);
    for (float v : t.noisy.data) EXPECT_EQ(v, 1.0f);
}

TEST(ComposeInputs, ArithmeticThenClip) {
    const Tensor seed({1, 1, 1}, {0.5f});
    const Tensor n_a({1, 1, 1}, {0.2f});
    const Tensor n_g({1, 1, 1}, {0.0f});
    const InputTriple t = compose_inputs(seed, n_a, n_g, 2.0f);
    EXPECT_NEAR(t.adversarial.data[0], 0.9f, 1e-6);
    EXPECT_EQ(t.noisy.data[0], 0.5f);
    EXPECT_EQ(t.seed.data[0], 0.5f);
}

TEST(ComposeInputs, ShapeMismatchIsDimensionError) {
    EXPECT_THROW(compose_inputs(Tensor({1, 2, 2}), Tensor({1, 2, 3}), Tensor({1, 2, 2}), 1.0f),
                 DimensionError);
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

TEST(Coverage, ConstantActivationsNeverFire) {
    CoverageState state;
    state.total = 3;
    state.fired.assign(3, 0);
    state.fire_counts.assign(3, 0);
    state.threshold = 0.25f;
    const ActivationCapture cap = single_layer_capture({0.7f, 0.7f, 0.7f});
    update_coverage(state, cap);  // min == max, scales to zero
    EXPECT_EQ(state.ratio(), 0.0);
}

TEST(Coverage, OneNewNeuronRaisesRatioByOneOverN) {
    CoverageState state;
    state.total = 3;
    state.fired.assign(3, 0);
    state.fire_counts.assign(3, 0);
    state.threshold = 0.5f;
    const ActivationCapture cap = single_layer_capture({0.0f, 0.1f, 1.0f});
    update_coverage(state, cap);  // scaled: {0, 0.1, 1.0} -> only id 2 fires
    EXPECT_NEAR(state.ratio(), 1.0 / 3.0, 1e-12);

    // applying the same capture again is a no-op on the ratio
    update_coverage(state, cap);
    EXPECT_NEAR(state.ratio(), 1.0 / 3.0, 1e-12);
    EXPECT_EQ(state.fire_counts[2], 2);  // but history still counts events
}

TEST(Coverage, MismatchedUniverseIsIndexError) {
    CoverageState state;
    state.total = 5;
    state.fired.assign(5, 0);
    state.fire_counts.assign(5, 0);
    const ActivationCapture cap = single_layer_capture({0.0f, 1.0f});
    EXPECT_THROW(update_coverage(state, cap), IndexError);
}

TEST(Coverage, MergeIsElementwiseOrAndCountSum) {
    CoverageState a, b;
    for (CoverageState* s : {&a, &b}) {
        s->total = 4;
        s->fired.assign(4, 0);
        s->fire_counts.assign(4, 0);
    }
    a.fired = {1, 0, 0, 1};
    a.fire_counts = {3, 0, 0, 1};
    b.fired = {0, 0, 1, 1};
    b.fire_counts = {0, 0, 2, 5};
    a.merge(b);
    EXPECT_EQ(a.fired, (std::vector<char>{1, 0, 1, 1}));
    EXPECT_EQ(a.fire_counts, (std::vector<long>{3, 0, 2, 6}));
    EXPECT_NEAR(a.ratio(), 0.75, 1e-12);
}

// ---------------------------------------------------------------------------
// Neuron selection
// ---------------------------------------------------------------------------

TEST(SelectNeurons, EmptySelectionAndOversizedRequest) {
    const ActivationCapture cap = single_layer_capture({0.1f, 0.2f, 0.24f});
    CoverageState hist;
    hist.total = 3;
    hist.fired.assign(3, 0);
    hist.fire_counts.assign(3, 0);
    Rng rng(1);
    EXPECT_TRUE(select_neurons(cap, NeuronStrategy::Random, 0, 0.25f, hist, rng).empty());
    EXPECT_THROW(select_neurons(cap, NeuronStrategy::Random, 4, 0.25f, hist, rng), ConfigError);
}

TEST(SelectNeurons, RandomIsDeterministicPerSeed) {
    const ActivationCapture cap = single_layer_capture({0.1f, 0.2f, 0.3f, 0.4f, 0.5f});
    CoverageState hist;
    hist.total = 5;
    hist.fired.assign(5, 0);
    hist.fire_counts.assign(5, 0);
    Rng rng_a(7), rng_b(7);
    const auto a = select_neurons(cap, NeuronStrategy::Random, 3, 0.25f, hist, rng_a);
    const auto b = select_neurons(cap, NeuronStrategy::Random, 3, 0.25f, hist, rng_b);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.size(), 3u);
}

TEST(SelectNeurons, NearThresholdPicksClosestBelow) {
    const ActivationCapture cap = single_layer_capture({0.1f, 0.2f, 0.24f});
    CoverageState hist;
    hist.total = 3;
    hist.fired.assign(3, 0);
    hist.fire_counts.assign(3, 0);
    Rng rng(2);
    const auto picked = select_neurons(cap, NeuronStrategy::NearThreshold, 1, 0.25f, hist, rng);
    EXPECT_EQ(picked, (std::vector<int>{2}));  // 0.24 sits closest below t = 0.25
}

TEST(SelectNeurons, RarePrefersLowHistoricalFireCounts) {
    const ActivationCapture cap = single_layer_capture({0.5f, 0.5f, 0.5f, 0.5f});
    CoverageState hist;
    hist.total = 4;
    hist.fired.assign(4, 0);
    hist.fire_counts = {9, 2, 7, 2};
    Rng rng(3);
    const auto picked = select_neurons(cap, NeuronStrategy::Rare, 2, 0.25f, hist, rng);
    EXPECT_EQ(picked, (std::vector<int>{1, 3}));  // the two lowest counts, id ascending
}

// ---------------------------------------------------------------------------
// generate_adversarial
// ---------------------------------------------------------------------------

TEST(GenerateAdversarial, MisclassifiedSeedIsPreconditionError) {
    const Model model = linear_two_class_model();
    const Tensor seed({1, 2, 2}, {0.6f, 0.4f, 0.6f, 0.4f});  // classified as 0
    AttackConfig cfg;
    cfg.monitored_neurons = 1;
    const CoverageState hist = make_coverage_state(model.spec, cfg.activation_threshold);
    EXPECT_THROW(generate_adversarial(model, seed, 1, cfg, hist, 1), PreconditionError);
}

TEST(GenerateAdversarial, VanishingBudgetFails) {
    const Model model = linear_two_class_model();
    const Tensor seed({1, 2, 2}, {0.6f, 0.4f, 0.6f, 0.4f});
    AttackConfig cfg;
    cfg.delta = 1e-9f;
    cfg.step_size = 1e-10f;
    cfg.max_iterations = 1;
    cfg.monitored_neurons = 1;
    const CoverageState hist = make_coverage_state(model.spec, cfg.activation_threshold);
    const AttackRun run = generate_adversarial(model, seed, 0, cfg, hist, 1);
    EXPECT_FALSE(run.example.success);
    EXPECT_EQ(run.example.iterations, 1);
    EXPECT_EQ(run.example.adversarial_label, 0);
}

TEST(GenerateAdversarial, LinearModelPerturbationAlignsWithRivalGradient) {
    const Model model = linear_two_class_model();
    const Tensor seed({1, 2, 2}, {0.6f, 0.4f, 0.6f, 0.4f});
    AttackConfig cfg;
    cfg.delta = 0.5f;
    cfg.step_size = 0.05f;
    cfg.lambda = 0.0f;
    cfg.top_k = 1;
    cfg.monitored_neurons = 0;
    const CoverageState hist = make_coverage_state(model.spec, cfg.activation_threshold);
    const AttackRun run = generate_adversarial(model, seed, 0, cfg, hist, 9);
    ASSERT_TRUE(run.example.success);
    EXPECT_EQ(run.example.adversarial_label, 1);

    // gradient of (logit1 - logit0) is w1 - w0, constant for a linear model
    const float w_diff[4] = {0.2f - 0.5f, 0.8f - 0.5f, -0.3f - 0.5f, 0.6f - 0.5f};
    double inner = 0.0;
    for (int i = 0; i < 4; ++i) inner += run.example.perturbation.data[i] * w_diff[i];
    EXPECT_GT(inner, 0.0);
}

TEST(GenerateAdversarial, TrainedModelAttackReVerifies) {
    const Model model = testsupport::tiny_trained_model();
    const LabeledImages probes = testsupport::synth_dataset(4, testsupport::tiny_synth_options(), 5, 2);
    AttackConfig cfg;
    cfg.delta = 0.15f;
    cfg.step_size = 0.015f;
    cfg.lambda = 0.0f;  // pure misclassification drive
    cfg.monitored_neurons = 0;
    const CoverageState hist = make_coverage_state(model.spec, cfg.activation_threshold);

    int successes = 0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const Prediction p = make_prediction(model_forward(model, probes.images[i]));
        if (p.predicted_class != probes.labels[i]) continue;
        const AttackRun run =
            generate_adversarial(model, probes.images[i], probes.labels[i], cfg, hist, 100 + i, i);
        EXPECT_LE(max_abs(run.example.perturbation), cfg.delta + 1e-7f);
        if (!run.example.success) continue;
        ++successes;
        // post-hoc re-verification: recompose and re-classify
        const Tensor zero(probes.images[i].shape);
        const InputTriple t = compose_inputs(probes.images[i], run.example.perturbation, zero, 1.0f);
        const Prediction adv = make_prediction(model_forward(model, t.adversarial));
        EXPECT_EQ(adv.predicted_class, run.example.adversarial_label);
        EXPECT_NE(adv.predicted_class, probes.labels[i]);
    }
    EXPECT_GT(successes, 0);
}

TEST(GenerateAdversarial, DeterministicGivenSeedsAndMonotoneCoverage) {
    const Model model = testsupport::tiny_trained_model();
    const LabeledImages probes = testsupport::synth_dataset(1, testsupport::tiny_synth_options(), 5, 3);
    const Prediction p = make_prediction(model_forward(model, probes.images[0]));
    if (p.predicted_class != probes.labels[0]) GTEST_SKIP() << "probe not correctly classified";

    AttackConfig cfg;
    cfg.max_iterations = 12;
    const CoverageState hist = make_coverage_state(model.spec, cfg.activation_threshold);
    const AttackRun a = generate_adversarial(model, probes.images[0], probes.labels[0], cfg, hist, 55, 0);
    const AttackRun b = generate_adversarial(model, probes.images[0], probes.labels[0], cfg, hist, 55, 0);
    EXPECT_EQ(a.example.perturbation.data, b.example.perturbation.data);
    EXPECT_EQ(a.example.success, b.example.success);
    EXPECT_EQ(a.example.iterations, b.example.iterations);
    EXPECT_EQ(a.coverage_curve, b.coverage_curve);
    for (std::size_t i = 1; i < a.coverage_curve.size(); ++i) {
        EXPECT_GE(a.coverage_curve[i], a.coverage_curve[i - 1]);
    }
}

TEST(RandomCoverageRun, MatchesForwardCountAndStaysMonotone) {
    const Model model = testsupport::tiny_trained_model();
    const LabeledImages probes = testsupport::synth_dataset(1, testsupport::tiny_synth_options(), 5, 4);
    const CoverageState hist = make_coverage_state(model.spec, 0.25f);
    Tensor n_a({1, 8, 8});
    Rng rng(9);
    for (float& v : n_a.data) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    const AttackRun run =
        random_coverage_run(model, probes.images[0], noise_stats(n_a), 7, hist, 77);
    EXPECT_EQ(run.coverage_curve.size(), 7u);
    for (std::size_t i = 1; i < run.coverage_curve.size(); ++i) {
        EXPECT_GE(run.coverage_curve[i], run.coverage_curve[i - 1]);
    }
}

TEST(GenerateAdversarial, L2NormProjectionRespectsTheBudget) {
    const Model model = linear_two_class_model();
    const Tensor seed({1, 2, 2}, {0.6f, 0.4f, 0.6f, 0.4f});
    AttackConfig cfg;
    cfg.norm = PerturbationNorm::L2;
    cfg.delta = 0.6f;
    cfg.step_size = 0.06f;
    cfg.lambda = 0.0f;
    cfg.monitored_neurons = 0;
    const CoverageState hist = make_coverage_state(model.spec, cfg.activation_threshold);
    const AttackRun run = generate_adversarial(model, seed, 0, cfg, hist, 13);
    double norm = 0.0;
    for (float v : run.example.perturbation.data) norm += static_cast<double>(v) * v;
    EXPECT_LE(std::sqrt(norm), cfg.delta + 1e-6);
    EXPECT_TRUE(run.example.success);
}
