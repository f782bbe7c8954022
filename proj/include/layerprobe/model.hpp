#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <regex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "layerprobe/autodiff.hpp"
#include "layerprobe/rng.hpp"
#include "layerprobe/tensor.hpp"

namespace layerprobe {

// ---------------------------------------------------------------------------
// Layer and model specifications
// ---------------------------------------------------------------------------

enum class LayerKind { Conv, Relu, MaxPool, Flatten, Dense };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Dense: return "dense";
    }
    return "?";
}

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::string name;       // conv layers: "blockB_convN"; dense layers: unique name
    int out_channels = 0;   // conv
    int kernel = 0;         // conv, square
    int stride = 1;         // conv
    int padding = 0;        // conv
    int units = 0;          // dense

    static LayerSpec conv(std::string name, int out_channels, int kernel, int stride = 1,
                          int padding = 0) {
        LayerSpec s;
        s.kind = LayerKind::Conv;
        s.name = std::move(name);
        s.out_channels = out_channels;
        s.kernel = kernel;
        s.stride = stride;
        s.padding = padding;
        return s;
    }
    static LayerSpec relu() {
        LayerSpec s;
        s.kind = LayerKind::Relu;
        return s;
    }
    static LayerSpec maxpool() {
        LayerSpec s;
        s.kind = LayerKind::MaxPool;
        return s;
    }
    static LayerSpec flatten() {
        LayerSpec s;
        s.kind = LayerKind::Flatten;
        return s;
    }
    static LayerSpec dense(std::string name, int units) {
        LayerSpec s;
        s.kind = LayerKind::Dense;
        s.name = std::move(name);
        s.units = units;
        return s;
    }
};

struct ModelSpec {
    std::vector<LayerSpec> layers;
    std::array<int, 3> input_shape{0, 0, 0};  // {channels, height, width}
    int num_classes = 0;

    /// Desk-scale VGG analog: four blocks of (conv3x3, relu, conv3x3, relu,
    /// maxpool2x2) with widths 16/32/64/64, then flatten, dense(128), relu,
    /// dense(classes). Input is 1x32x32; smaller images are zero-padded by
    /// the dataset pipeline.
    static ModelSpec vgg_mini(int num_classes = 10) {
        ModelSpec m;
        m.input_shape = {1, 32, 32};
        m.num_classes = num_classes;
        const int widths[4] = {16, 32, 64, 64};
        for (int b = 0; b < 4; ++b) {
            const std::string block = "block" + std::to_string(b + 1);
            m.layers.push_back(LayerSpec::conv(block + "_conv1", widths[b], 3, 1, 1));
            m.layers.push_back(LayerSpec::relu());
            m.layers.push_back(LayerSpec::conv(block + "_conv2", widths[b], 3, 1, 1));
            m.layers.push_back(LayerSpec::relu());
            m.layers.push_back(LayerSpec::maxpool());
        }
        m.layers.push_back(LayerSpec::flatten());
        m.layers.push_back(LayerSpec::dense("fc1", 128));
        m.layers.push_back(LayerSpec::relu());
        m.layers.push_back(LayerSpec::dense("fc2", num_classes));
        return m;
    }

    /// Walks the layer list symbolically and returns the output shape,
    /// throwing ConfigError on any non-conforming transition.
    std::vector<int> validate() const {
        if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
        std::vector<int> shape{input_shape[0], input_shape[1], input_shape[2]};
        for (int d : shape) {
            if (d <= 0) throw ConfigError("model input shape must be positive");
        }
        int conv_count = 0;
        std::vector<std::string> names;
        const std::regex conv_name("block[0-9]+_conv[0-9]+");
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const LayerSpec& l = layers[i];
            switch (l.kind) {
                case LayerKind::Conv: {
                    if (shape.size() != 3) throw ConfigError("conv layer needs a [C,H,W] input");
                    if (l.out_channels <= 0 || l.kernel <= 0 || l.stride <= 0 || l.padding < 0) {
                        throw ConfigError("conv layer '" + l.name + "' has invalid hyperparameters");
                    }
                    if (!std::regex_match(l.name, conv_name)) {
                        throw ConfigError("conv layer name '" + l.name +
                                          "' does not follow the blockB_convN scheme");
                    }
                    const int h = shape[1] + 2 * l.padding - l.kernel;
                    const int w = shape[2] + 2 * l.padding - l.kernel;
                    if (h < 0 || w < 0 || h % l.stride != 0 || w % l.stride != 0) {
                        throw ConfigError("conv layer '" + l.name + "' output size is invalid");
                    }
                    shape = {l.out_channels, h / l.stride + 1, w / l.stride + 1};
                    ++conv_count;
                    names.push_back(l.name);
                    break;
                }
                case LayerKind::Relu:
                    break;
                case LayerKind::MaxPool:
                    if (shape.size() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0) {
                        throw ConfigError("maxpool layer " + std::to_string(i) +
                                          " needs even [C,H,W] input, got " +
                                          Tensor::shape_string(shape));
                    }
                    shape = {shape[0], shape[1] / 2, shape[2] / 2};
                    break;
                case LayerKind::Flatten: {
                    int n = 1;
                    for (int d : shape) n *= d;
                    shape = {n};
                    break;
                }
                case LayerKind::Dense:
                    if (shape.size() != 1) throw ConfigError("dense layer needs a flat input");
                    if (l.units <= 0) throw ConfigError("dense layer '" + l.name + "' has no units");
                    if (l.name.empty()) throw ConfigError("dense layer " + std::to_string(i) + " is unnamed");
                    names.push_back(l.name);
                    shape = {l.units};
                    break;
            }
        }
        if (conv_count == 0) throw ConfigError("model has no convolutional layer");
        if (layers.empty() || layers.back().kind != LayerKind::Dense ||
            layers.back().units != num_classes) {
            throw ConfigError("model must end in a dense classification head with one unit per class");
        }
        std::sort(names.begin(), names.end());
        if (std::adjacent_find(names.begin(), names.end()) != names.end()) {
            throw ConfigError("layer names are not unique");
        }
        return shape;
    }

    std::vector<std::string> conv_layer_names() const {
        std::vector<std::string> out;
        for (const LayerSpec& l : layers) {
            if (l.kind == LayerKind::Conv) out.push_back(l.name);
        }
        return out;
    }

    /// Closed-form parameter count from the layer hyperparameters alone.
    long long parameter_count() const {
        long long total = 0;
        std::vector<int> shape{input_shape[0], input_shape[1], input_shape[2]};
        for (const LayerSpec& l : layers) {
            switch (l.kind) {
                case LayerKind::Conv:
                    total += static_cast<long long>(l.out_channels) * shape[0] * l.kernel * l.kernel +
                             l.out_channels;
                    shape = {l.out_channels, (shape[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                             (shape[2] + 2 * l.padding - l.kernel) / l.stride + 1};
                    break;
                case LayerKind::Relu:
                    break;
                case LayerKind::MaxPool:
                    shape = {shape[0], shape[1] / 2, shape[2] / 2};
                    break;
                case LayerKind::Flatten: {
                    int n = 1;
                    for (int d : shape) n *= d;
                    shape = {n};
                    break;
                }
                case LayerKind::Dense:
                    total += static_cast<long long>(l.units) * shape[0] + l.units;
                    shape = {l.units};
                    break;
            }
        }
        return total;
    }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct TrainingMeta {
    int epochs = 0;
    double final_train_accuracy = 0.0;
    double final_heldout_accuracy = 0.0;
    std::uint64_t seed = 0;
};

struct Model {
    ModelSpec spec;

    struct LayerParams {
        Tensor weight;  // conv kernel [O,C,k,k] or dense weights [M,N]
        Tensor bias;    // [O] / [M]
        bool present() const { return weight.numel() > 0; }
    };
    std::vector<LayerParams> params;  // aligned with spec.layers
    TrainingMeta training;

    template <typename Fn>
    void for_each_param(Fn&& fn) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].present()) continue;
            fn(spec.layers[i].name + ".weight", params[i].weight);
            fn(spec.layers[i].name + ".bias", params[i].bias);
        }
    }
    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].present()) continue;
            fn(spec.layers[i].name + ".weight", params[i].weight);
            fn(spec.layers[i].name + ".bias", params[i].bias);
        }
    }
};

/// He-style fan-in scaled uniform initialization, deterministic per seed.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    m.params.resize(spec.layers.size());
    Rng rng(derive_seed(seed, "model-init"));
    std::vector<int> shape{spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv: {
                const int fan_in = shape[0] * l.kernel * l.kernel;
                const double limit = std::sqrt(6.0 / fan_in);
                Tensor k({l.out_channels, shape[0], l.kernel, l.kernel});
                for (float& v : k.data) v = static_cast<float>(rng.uniform(-limit, limit));
                m.params[i] = {std::move(k), Tensor({l.out_channels})};
                shape = {l.out_channels, (shape[1] + 2 * l.padding - l.kernel) / l.stride + 1,
                         (shape[2] + 2 * l.padding - l.kernel) / l.stride + 1};
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::MaxPool:
                shape = {shape[0], shape[1] / 2, shape[2] / 2};
                break;
            case LayerKind::Flatten: {
                int n = 1;
                for (int d : shape) n *= d;
                shape = {n};
                break;
            }
            case LayerKind::Dense: {
                const int fan_in = shape[0];
                const double limit = std::sqrt(6.0 / fan_in);
                Tensor w({l.units, fan_in});
                for (float& v : w.data) v = static_cast<float>(rng.uniform(-limit, limit));
                m.params[i] = {std::move(w), Tensor({l.units})};
                shape = {l.units};
                break;
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

inline void check_model_input(const Model& m, const Tensor& image) {
    const std::vector<int> want{m.spec.input_shape[0], m.spec.input_shape[1], m.spec.input_shape[2]};
    if (image.shape != want) {
        throw DimensionError("model expects input " + Tensor::shape_string(want) + ", got " +
                             Tensor::shape_string(image.shape));
    }
}

/// Inference-only forward pass; returns the logits.
inline Tensor model_forward(const Model& m, const Tensor& image) {
    check_model_input(m, image);
    Tensor x = image;
    for (std::size_t i = 0; i < m.spec.layers.size(); ++i) {
        const LayerSpec& l = m.spec.layers[i];
        switch (l.kind) {
            case LayerKind::Conv:
                x = conv2d_forward(x, m.params[i].weight, m.params[i].bias, l.stride, l.padding);
                break;
            case LayerKind::Relu:
                x = relu_forward(x);
                break;
            case LayerKind::MaxPool:
                x = maxpool2x2_forward(x).output;
                break;
            case LayerKind::Flatten: {
                const int n = static_cast<int>(x.numel());
                x = Tensor({n}, std::move(x.data));
                break;
            }
            case LayerKind::Dense:
                x = dense_forward(x, m.params[i].weight, m.params[i].bias);
                break;
        }
    }
    return x;
}

/// Tape forward pass. Conv activations are recorded post-relu (the activation
/// of the conv layer, as in the usual VGG layer naming) together with their
/// per-channel spatial means.
struct TapeForward {
    GradTape::Id input_id = 0;
    GradTape::Id logits_id = 0;
    struct ConvNode {
        std::string name;
        GradTape::Id activation_id;
        GradTape::Id channel_mean_id;
        int channels;
    };
    std::vector<ConvNode> convs;
    std::vector<GradTape::Id> param_ids;  // weight,bias pairs in layer order (param layers only)
};

inline TapeForward model_forward_tape(const Model& m, GradTape& tape, const Tensor& image) {
    check_model_input(m, image);
    TapeForward f;
    GradTape::Id x = tape.input(image);
    f.input_id = x;
    int pending_conv = -1;  // spec index of a conv whose activation is not yet recorded
    std::string pending_name;
    auto record_activation = [&](GradTape::Id act) {
        tape.retain(act);
        GradTape::Id cm = tape.channel_mean(act);
        f.convs.push_back({pending_name, act, cm, tape.value(act).dim(0)});
        pending_conv = -1;
    };
    for (std::size_t i = 0; i < m.spec.layers.size(); ++i) {
        const LayerSpec& l = m.spec.layers[i];
        if (pending_conv >= 0 && l.kind != LayerKind::Relu) {
            record_activation(x);  // conv with no following relu
        }
        switch (l.kind) {
            case LayerKind::Conv: {
                GradTape::Id w = tape.input(m.params[i].weight);
                GradTape::Id b = tape.input(m.params[i].bias);
                f.param_ids.push_back(w);
                f.param_ids.push_back(b);
                x = tape.conv2d(x, w, b, l.stride, l.padding);
                pending_conv = static_cast<int>(i);
                pending_name = l.name;
                break;
            }
            case LayerKind::Relu:
                x = tape.relu(x);
                if (pending_conv >= 0) record_activation(x);
                break;
            case LayerKind::MaxPool:
                x = tape.maxpool2x2(x);
                break;
            case LayerKind::Flatten:
                x = tape.flatten(x);
                break;
            case LayerKind::Dense: {
                GradTape::Id w = tape.input(m.params[i].weight);
                GradTape::Id b = tape.input(m.params[i].bias);
                f.param_ids.push_back(w);
                f.param_ids.push_back(b);
                x = tape.dense(x, w, b);
                break;
            }
        }
    }
    if (pending_conv >= 0) record_activation(x);
    f.logits_id = x;
    return f;
}

// ---------------------------------------------------------------------------
// Prediction and activation capture
// ---------------------------------------------------------------------------

struct Prediction {
    Tensor probabilities;                        // [num_classes]
    int predicted_class = -1;
    std::vector<std::pair<int, float>> ranked;   // all classes by descending probability

    /// Top-k candidate classes excluding `exclude` (-1 keeps all).
    std::vector<int> top_candidates(int k, int exclude = -1) const {
        std::vector<int> out;
        for (const auto& [cls, p] : ranked) {
            if (cls == exclude) continue;
            out.push_back(cls);
            if (static_cast<int>(out.size()) == k) break;
        }
        return out;
    }
};

inline Prediction make_prediction(const Tensor& logits) {
    Prediction p;
    p.probabilities = softmax(logits);
    p.ranked.reserve(p.probabilities.numel());
    for (std::size_t i = 0; i < p.probabilities.numel(); ++i) {
        p.ranked.emplace_back(static_cast<int>(i), p.probabilities.data[i]);
    }
    std::stable_sort(p.ranked.begin(), p.ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    p.predicted_class = p.ranked.front().first;
    return p;
}

struct LayerActivation {
    std::string layer;
    Tensor feature_map;    // post-activation conv output
    Tensor gradient;       // d(class score)/d(feature_map)
    Tensor channel_means;  // [C] neuron activations
};

struct ActivationCapture {
    std::vector<LayerActivation> layers;  // model order
    bool captured = false;

    const LayerActivation* find(const std::string& name) const {
        for (const LayerActivation& l : layers) {
            if (l.layer == name) return &l;
        }
        return nullptr;
    }

    int total_neurons() const {
        int n = 0;
        for (const LayerActivation& l : layers) n += l.channel_means.dim(0);
        return n;
    }

    /// Neuron ids are global: layer offsets in model order plus channel index.
    float neuron_activation(int id) const {
        int off = id;
        for (const LayerActivation& l : layers) {
            const int c = l.channel_means.dim(0);
            if (off < c) return l.channel_means.data[off];
            off -= c;
        }
        throw IndexError("neuron id " + std::to_string(id) + " out of range");
    }
};

/// Inference-only forward pass that also collects each conv layer's
/// post-activation channel means (the monitored neuron activations). Feature
/// maps and gradients in the returned capture stay empty.
inline std::pair<Tensor, ActivationCapture> model_forward_with_activations(const Model& m,
                                                                           const Tensor& image) {
    check_model_input(m, image);
    ActivationCapture cap;
    cap.captured = true;
    Tensor x = image;
    int pending_conv = -1;
    auto record = [&](const Tensor& act) {
        cap.layers.push_back({m.spec.layers[pending_conv].name, Tensor{}, Tensor{},
                              channel_mean_forward(act)});
        pending_conv = -1;
    };
    for (std::size_t i = 0; i < m.spec.layers.size(); ++i) {
        const LayerSpec& l = m.spec.layers[i];
        if (pending_conv >= 0 && l.kind != LayerKind::Relu) record(x);
        switch (l.kind) {
            case LayerKind::Conv:
                x = conv2d_forward(x, m.params[i].weight, m.params[i].bias, l.stride, l.padding);
                pending_conv = static_cast<int>(i);
                break;
            case LayerKind::Relu:
                x = relu_forward(x);
                if (pending_conv >= 0) record(x);
                break;
            case LayerKind::MaxPool:
                x = maxpool2x2_forward(x).output;
                break;
            case LayerKind::Flatten: {
                const int n = static_cast<int>(x.numel());
                x = Tensor({n}, std::move(x.data));
                break;
            }
            case LayerKind::Dense:
                x = dense_forward(x, m.params[i].weight, m.params[i].bias);
                break;
        }
    }
    if (pending_conv >= 0) record(x);
    return {std::move(x), std::move(cap)};
}

/// Runs the model on one image. With capture on, fills an ActivationCapture
/// whose gradients are of the pre-softmax logit of `gradient_class` (the
/// predicted class when negative) with respect to each conv feature map.
inline std::pair<Prediction, ActivationCapture> predict_with_capture(const Model& m,
                                                                     const Tensor& image,
                                                                     bool capture,
                                                                     int gradient_class = -1) {
    if (!capture) {
        return {make_prediction(model_forward(m, image)), ActivationCapture{}};
    }
    GradTape tape;
    TapeForward f = model_forward_tape(m, tape, image);
    Prediction pred = make_prediction(tape.value(f.logits_id));
    int target = gradient_class >= 0 ? gradient_class : pred.predicted_class;
    if (target >= m.spec.num_classes) {
        throw IndexError("gradient class " + std::to_string(target) + " out of range");
    }
    GradTape::Id score = tape.weighted_sum({{f.logits_id, target, 1.0f}});
    tape.backward(score);
    ActivationCapture cap;
    cap.captured = true;
    for (const TapeForward::ConvNode& c : f.convs) {
        cap.layers.push_back(
            {c.name, tape.value(c.activation_id), tape.grad(c.activation_id), tape.value(c.channel_mean_id)});
    }
    return {std::move(pred), std::move(cap)};
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LabeledImages {
    std::vector<Tensor> images;
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }
};

struct TrainReport {
    int epochs = 0;
    std::vector<double> epoch_losses;
    double final_train_accuracy = 0.0;
    double final_heldout_accuracy = 0.0;
    std::uint64_t seed = 0;
};

/// Simple bounded worker pool helper: runs fn(i) for i in [0, n) on up to
/// `jobs` threads. Results must be written to disjoint slots by index. The
/// first worker exception is rethrown on the calling thread after the join.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<std::size_t>(jobs, n));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = static_cast<std::size_t>(w); i < n; i += workers) fn(i);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

inline double evaluate_accuracy(const Model& m, const LabeledImages& data, int jobs = 1) {
    if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
    std::vector<char> correct(data.size(), 0);
    parallel_for(data.size(), jobs, [&](std::size_t i) {
        const Prediction p = make_prediction(model_forward(m, data.images[i]));
        correct[i] = p.predicted_class == data.labels[i] ? 1 : 0;
    });
    std::size_t hits = 0;
    for (char c : correct) hits += c;
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

/// Minibatch SGD on softmax cross-entropy. Deterministic given seed and
/// dataset order for any worker count: per-sample gradients are computed in
/// parallel but reduced in sample order.
inline TrainReport train(Model& model, const LabeledImages& train_data,
                         const LabeledImages& heldout, int epochs, int batch_size,
                         float learning_rate, std::uint64_t seed, int jobs = 1) {
    if (train_data.size() == 0) throw DataError("training dataset is empty");
    if (train_data.images.size() != train_data.labels.size()) {
        throw DataError("image and label counts differ");
    }
    if (epochs < 0 || batch_size <= 0) throw ConfigError("invalid epochs or batch size");
    for (int label : train_data.labels) {
        if (label < 0 || label >= model.spec.num_classes) {
            throw DataError("training label " + std::to_string(label) + " out of range for " +
                            std::to_string(model.spec.num_classes) + " classes");
        }
    }

    struct SampleGrads {
        std::vector<Model::LayerParams> grads;
        double loss = 0.0;
    };

    TrainReport report;
    report.epochs = epochs;
    report.seed = seed;

    Rng shuffle_rng(derive_seed(seed, "train-shuffle"));
    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const std::size_t n_layers = model.spec.layers.size();
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        }
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t count = std::min<std::size_t>(batch_size, order.size() - start);
            std::vector<SampleGrads> sample(count);
            parallel_for(count, jobs, [&](std::size_t si) {
                const std::size_t idx = order[start + si];
                GradTape tape;
                TapeForward f = model_forward_tape(model, tape, train_data.images[idx]);
                GradTape::Id loss = tape.softmax_cross_entropy(f.logits_id, train_data.labels[idx]);
                tape.backward(loss);
                sample[si].loss = tape.scalar_value(loss);
                sample[si].grads.resize(n_layers);
                std::size_t pi = 0;
                for (std::size_t li = 0; li < n_layers; ++li) {
                    if (!model.params[li].present()) continue;
                    sample[si].grads[li].weight = tape.grad(f.param_ids[pi]);
                    sample[si].grads[li].bias = tape.grad(f.param_ids[pi + 1]);
                    pi += 2;
                }
            });
            const float scale = learning_rate / static_cast<float>(count);
            for (std::size_t si = 0; si < count; ++si) {
                epoch_loss += sample[si].loss;
                for (std::size_t li = 0; li < n_layers; ++li) {
                    if (!model.params[li].present()) continue;
                    Tensor& w = model.params[li].weight;
                    Tensor& b = model.params[li].bias;
                    const Tensor& gw = sample[si].grads[li].weight;
                    const Tensor& gb = sample[si].grads[li].bias;
                    for (std::size_t k = 0; k < w.numel(); ++k) w.data[k] -= scale * gw.data[k];
                    for (std::size_t k = 0; k < b.numel(); ++k) b.data[k] -= scale * gb.data[k];
                }
            }
            ++batches;
        }
        report.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
    }

    report.final_train_accuracy = evaluate_accuracy(model, train_data, jobs);
    report.final_heldout_accuracy =
        heldout.size() ? evaluate_accuracy(model, heldout, jobs) : 0.0;
    model.training = {epochs, report.final_train_accuracy, report.final_heldout_accuracy, seed};
    return report;
}

}  // namespace layerprobe
