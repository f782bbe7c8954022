#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "layerprobe/tensor.hpp"

namespace layerprobe {

// ---------------------------------------------------------------------------
// Forward/backward kernels
//
// Plain functions over Tensor values. The GradTape below wraps them; callers
// that only need inference use them directly.
// ---------------------------------------------------------------------------

struct ConvDims {
    int cin, h, w;
    int cout, kh, kw;
    int stride, pad;
    int ho, wo;
};

inline ConvDims conv2d_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                            int stride, int padding) {
    require_rank(input, 3, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    require_rank(bias, 1, "conv2d bias");
    ConvDims d;
    d.cin = input.dim(0);
    d.h = input.dim(1);
    d.w = input.dim(2);
    d.cout = kernel.dim(0);
    d.kh = kernel.dim(2);
    d.kw = kernel.dim(3);
    d.stride = stride;
    d.pad = padding;
    if (kernel.dim(1) != d.cin) {
        throw DimensionError("conv2d kernel expects " + std::to_string(kernel.dim(1)) +
                             " input channels, input has " + std::to_string(d.cin));
    }
    if (bias.dim(0) != d.cout) {
        throw DimensionError("conv2d bias length " + std::to_string(bias.dim(0)) +
                             " does not match " + std::to_string(d.cout) + " output channels");
    }
    if (stride <= 0) throw ConfigError("conv2d stride must be positive");
    if (padding < 0) throw ConfigError("conv2d padding must be non-negative");
    if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding) {
        throw DimensionError("conv2d kernel larger than padded input");
    }
    if ((d.h + 2 * padding - d.kh) % stride != 0 || (d.w + 2 * padding - d.kw) % stride != 0) {
        throw ConfigError("conv2d output size is not an integer for the given stride/padding");
    }
    d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
    d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
    if (d.ho <= 0 || d.wo <= 0) throw ConfigError("conv2d output size is not positive");
    return d;
}

/// output[o,y,x] = bias[o] + sum_{c,i,j} input[c, y*stride+i-pad, x*stride+j-pad] * kernel[o,c,i,j]
/// with out-of-bounds input treated as zero.
inline Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                             int stride, int padding) {
    const ConvDims d = conv2d_dims(input, kernel, bias, stride, padding);
    Tensor out({d.cout, d.ho, d.wo});
    for (int o = 0; o < d.cout; ++o) {
        float* op = &out.data[static_cast<std::size_t>(o) * d.ho * d.wo];
        std::fill(op, op + static_cast<std::size_t>(d.ho) * d.wo, bias.data[o]);
        for (int c = 0; c < d.cin; ++c) {
            const float* ip = &input.data[static_cast<std::size_t>(c) * d.h * d.w];
            const float* kp = &kernel.data[(static_cast<std::size_t>(o) * d.cin + c) * d.kh * d.kw];
            for (int i = 0; i < d.kh; ++i) {
                for (int j = 0; j < d.kw; ++j) {
                    const float wgt = kp[i * d.kw + j];
                    // valid output range: 0 <= y*stride + i - pad < h
                    for (int y = 0; y < d.ho; ++y) {
                        const int iy = y * d.stride + i - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        const float* irow = ip + static_cast<std::size_t>(iy) * d.w;
                        float* orow = op + static_cast<std::size_t>(y) * d.wo;
                        for (int x = 0; x < d.wo; ++x) {
                            const int ix = x * d.stride + j - d.pad;
                            if (ix < 0 || ix >= d.w) continue;
                            orow[x] += wgt * irow[ix];
                        }
                    }
                }
            }
        }
    }
    ensure_finite(out, "conv2d_forward");
    return out;
}

struct ConvGrads {
    Tensor input;
    Tensor kernel;
    Tensor bias;
};

/// Analytic gradients of conv2d. `upstream` must match the forward output shape.
inline ConvGrads conv2d_backward(const Tensor& upstream, const Tensor& input, const Tensor& kernel,
                                 const Tensor& bias, int stride, int padding) {
    const ConvDims d = conv2d_dims(input, kernel, bias, stride, padding);
    if (upstream.shape != std::vector<int>{d.cout, d.ho, d.wo}) {
        throw DimensionError("conv2d_backward upstream shape " + Tensor::shape_string(upstream.shape) +
                             " does not match forward output [" + std::to_string(d.cout) + "," +
                             std::to_string(d.ho) + "," + std::to_string(d.wo) + "]");
    }
    ConvGrads g{Tensor(input.shape), Tensor(kernel.shape), Tensor(bias.shape)};
    for (int o = 0; o < d.cout; ++o) {
        const float* up = &upstream.data[static_cast<std::size_t>(o) * d.ho * d.wo];
        double bsum = 0.0;
        for (int i = 0; i < d.ho * d.wo; ++i) bsum += up[i];
        g.bias.data[o] = static_cast<float>(bsum);
        for (int c = 0; c < d.cin; ++c) {
            const float* ip = &input.data[static_cast<std::size_t>(c) * d.h * d.w];
            float* gip = &g.input.data[static_cast<std::size_t>(c) * d.h * d.w];
            const float* kp = &kernel.data[(static_cast<std::size_t>(o) * d.cin + c) * d.kh * d.kw];
            float* gkp = &g.kernel.data[(static_cast<std::size_t>(o) * d.cin + c) * d.kh * d.kw];
            for (int i = 0; i < d.kh; ++i) {
                for (int j = 0; j < d.kw; ++j) {
                    const float wgt = kp[i * d.kw + j];
                    float ksum = 0.0f;
                    for (int y = 0; y < d.ho; ++y) {
                        const int iy = y * d.stride + i - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        const float* irow = ip + static_cast<std::size_t>(iy) * d.w;
                        float* girow = gip + static_cast<std::size_t>(iy) * d.w;
                        const float* urow = up + static_cast<std::size_t>(y) * d.wo;
                        for (int x = 0; x < d.wo; ++x) {
                            const int ix = x * d.stride + j - d.pad;
                            if (ix < 0 || ix >= d.w) continue;
                            ksum += urow[x] * irow[ix];
                            girow[ix] += wgt * urow[x];
                        }
                    }
                    gkp[i * d.kw + j] += ksum;
                }
            }
        }
    }
    ensure_finite(g.input, "conv2d_backward");
    ensure_finite(g.kernel, "conv2d_backward");
    ensure_finite(g.bias, "conv2d_backward");
    return g;
}

/// Elementwise max(0, x).
inline Tensor relu_forward(const Tensor& input) {
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i) out.data[i] = input.data[i] > 0.0f ? input.data[i] : 0.0f;
    ensure_finite(out, "relu");
    return out;
}

/// Passes upstream where input > 0; subgradient at 0 is 0.
inline Tensor relu_backward(const Tensor& upstream, const Tensor& input) {
    require_same_shape(upstream, input, "relu_backward");
    Tensor out(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i) {
        out.data[i] = input.data[i] > 0.0f ? upstream.data[i] : 0.0f;
    }
    ensure_finite(out, "relu_backward");
    return out;
}

struct MaxPoolResult {
    Tensor output;
    std::vector<int> argmax;  // flat input index of each window max, first-encountered on ties
};

/// 2x2 max pooling with stride 2. Spatial dims must be even.
inline MaxPoolResult maxpool2x2_forward(const Tensor& input) {
    require_rank(input, 3, "maxpool2x2 input");
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw DimensionError("maxpool2x2 requires even spatial dims, got " +
                             Tensor::shape_string(input.shape));
    }
    MaxPoolResult r{Tensor({c, h / 2, w / 2}), {}};
    r.argmax.resize(r.output.numel());
    std::size_t oi = 0;
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; y += 2) {
            for (int x = 0; x < w; x += 2) {
                int best = (ch * h + y) * w + x;
                float bv = input.data[best];
                const int cand[3] = {(ch * h + y) * w + x + 1, (ch * h + y + 1) * w + x,
                                     (ch * h + y + 1) * w + x + 1};
                for (int idx : cand) {
                    if (input.data[idx] > bv) {
                        bv = input.data[idx];
                        best = idx;
                    }
                }
                r.output.data[oi] = bv;
                r.argmax[oi] = best;
                ++oi;
            }
        }
    }
    ensure_finite(r.output, "maxpool2x2");
    return r;
}

/// Routes each upstream value to the argmax position of its window.
inline Tensor maxpool2x2_backward(const Tensor& upstream, const std::vector<int>& argmax,
                                  const std::vector<int>& input_shape) {
    if (upstream.numel() != argmax.size()) {
        throw DimensionError("maxpool2x2_backward upstream does not match recorded argmax");
    }
    Tensor out(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        out.data[static_cast<std::size_t>(argmax[i])] += upstream.data[i];
    }
    ensure_finite(out, "maxpool2x2_backward");
    return out;
}

/// output = weights * input + bias, weights shape [M,N], input [N], bias [M].
inline Tensor dense_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
    require_rank(input, 1, "dense input");
    require_rank(weights, 2, "dense weights");
    require_rank(bias, 1, "dense bias");
    const int m = weights.dim(0), n = weights.dim(1);
    if (input.dim(0) != n) {
        throw DimensionError("dense input length " + std::to_string(input.dim(0)) +
                             " does not match weight columns " + std::to_string(n));
    }
    if (bias.dim(0) != m) {
        throw DimensionError("dense bias length does not match weight rows");
    }
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        const float* wrow = &weights.data[static_cast<std::size_t>(i) * n];
        float acc = bias.data[i];
        for (int j = 0; j < n; ++j) acc += wrow[j] * input.data[j];
        out.data[i] = acc;
    }
    ensure_finite(out, "dense");
    return out;
}

struct DenseGrads {
    Tensor input;
    Tensor weights;
    Tensor bias;
};

inline DenseGrads dense_backward(const Tensor& upstream, const Tensor& input, const Tensor& weights) {
    const int m = weights.dim(0), n = weights.dim(1);
    if (upstream.shape != std::vector<int>{m}) {
        throw DimensionError("dense_backward upstream shape mismatch");
    }
    DenseGrads g{Tensor(input.shape), Tensor(weights.shape), Tensor({m})};
    for (int i = 0; i < m; ++i) {
        const float u = upstream.data[i];
        const float* wrow = &weights.data[static_cast<std::size_t>(i) * n];
        float* gwrow = &g.weights.data[static_cast<std::size_t>(i) * n];
        g.bias.data[i] = u;
        for (int j = 0; j < n; ++j) {
            g.input.data[j] += u * wrow[j];
            gwrow[j] += u * input.data[j];
        }
    }
    ensure_finite(g.input, "dense_backward");
    ensure_finite(g.weights, "dense_backward");
    return g;
}

/// Numerically stabilized softmax (max subtraction, double accumulation).
inline Tensor softmax(const Tensor& logits) {
    require_rank(logits, 1, "softmax logits");
    const float mx = *std::max_element(logits.data.begin(), logits.data.end());
    Tensor probs(logits.shape);
    double denom = 0.0;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const double e = std::exp(static_cast<double>(logits.data[i]) - mx);
        probs.data[i] = static_cast<float>(e);
        denom += e;
    }
    for (float& p : probs.data) p = static_cast<float>(p / denom);
    ensure_finite(probs, "softmax");
    return probs;
}

struct SoftmaxCeResult {
    double loss;
    Tensor probs;
};

/// loss = -log(softmax(logits)[target]).
inline SoftmaxCeResult softmax_cross_entropy(const Tensor& logits, int target) {
    require_rank(logits, 1, "softmax_cross_entropy logits");
    if (target < 0 || target >= logits.dim(0)) {
        throw IndexError("softmax_cross_entropy target " + std::to_string(target) +
                         " out of range for " + std::to_string(logits.dim(0)) + " classes");
    }
    const float mx = *std::max_element(logits.data.begin(), logits.data.end());
    double denom = 0.0;
    for (float v : logits.data) denom += std::exp(static_cast<double>(v) - mx);
    SoftmaxCeResult r{-(static_cast<double>(logits.data[target]) - mx - std::log(denom)),
                      softmax(logits)};
    if (!std::isfinite(r.loss)) throw NumericError("softmax_cross_entropy produced a non-finite loss");
    return r;
}

/// d loss / d logits = softmax(logits) - onehot(target), scaled by upstream.
inline Tensor softmax_cross_entropy_backward(const Tensor& probs, int target, float upstream) {
    Tensor g(probs.shape);
    for (std::size_t i = 0; i < probs.numel(); ++i) g.data[i] = upstream * probs.data[i];
    g.data[static_cast<std::size_t>(target)] -= upstream;
    ensure_finite(g, "softmax_cross_entropy_backward");
    return g;
}

/// [C,H,W] -> [C]: spatial mean per channel.
inline Tensor channel_mean_forward(const Tensor& input) {
    require_rank(input, 3, "channel_mean input");
    const int c = input.dim(0);
    const std::size_t area = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
    Tensor out({c});
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        const float* p = &input.data[ch * area];
        for (std::size_t i = 0; i < area; ++i) s += p[i];
        out.data[ch] = static_cast<float>(s / static_cast<double>(area));
    }
    ensure_finite(out, "channel_mean");
    return out;
}

inline Tensor channel_mean_backward(const Tensor& upstream, const std::vector<int>& input_shape) {
    Tensor g(input_shape);
    const std::size_t area = static_cast<std::size_t>(input_shape[1]) * input_shape[2];
    for (int ch = 0; ch < input_shape[0]; ++ch) {
        const float v = upstream.data[ch] / static_cast<float>(area);
        float* p = &g.data[ch * area];
        for (std::size_t i = 0; i < area; ++i) p[i] = v;
    }
    return g;
}

// ---------------------------------------------------------------------------
// GradTape: reverse-mode differentiation
// ---------------------------------------------------------------------------

/// Records executed operations in order and replays them in exact reverse
/// order on backward(). Gradients of leaves are always kept; intermediate
/// gradients survive backward() only for ids added to the capture set via
/// retain() -- Grad-CAM needs only the per-conv-layer feature maps.
class GradTape {
public:
    using Id = std::size_t;

    /// Records a leaf value (input image, parameter tensor).
    Id input(Tensor v) {
        ensure_finite(v, "tape input");
        return push(std::move(v), /*leaf=*/true);
    }

    const Tensor& value(Id id) const { return values_.at(id); }

    /// Exact double value of a scalar node. Scalar-producing ops accumulate
    /// in double; this bypasses the single-precision tensor storage so the
    /// finite-difference oracle is not dominated by f32 rounding.
    double scalar_value(Id id) const {
        if (values_.at(id).numel() != 1) {
            throw PreconditionError("scalar_value on a non-scalar tensor");
        }
        auto it = scalar_cache_.find(id);
        return it != scalar_cache_.end() ? it->second : static_cast<double>(values_[id].data[0]);
    }

    /// Gradient of the backward root with respect to tensor `id`. Only valid
    /// after backward(); available for leaves and retained ids.
    const Tensor& grad(Id id) const {
        if (!ran_backward_) throw PreconditionError("GradTape::grad before backward()");
        const Tensor& g = grads_.at(id);
        if (g.numel() == 0) {
            throw PreconditionError("gradient for tensor " + std::to_string(id) +
                                    " was not retained (call retain() before backward)");
        }
        return g;
    }

    /// Adds `id` to the capture set so its gradient survives backward().
    void retain(Id id) { retained_.at(id) = true; }

    Id conv2d(Id x, Id k, Id b, int stride, int padding) {
        Tensor out = conv2d_forward(values_[x], values_[k], values_[b], stride, padding);
        Id o = push(std::move(out), false);
        nodes_.push_back({o, [x, k, b, o, stride, padding](GradTape& t) {
            ConvGrads g = conv2d_backward(t.grads_[o], t.values_[x], t.values_[k], t.values_[b],
                                          stride, padding);
            t.accumulate(x, g.input);
            t.accumulate(k, g.kernel);
            t.accumulate(b, g.bias);
        }});
        return o;
    }

    Id relu(Id x) {
        Id o = push(relu_forward(values_[x]), false);
        nodes_.push_back(
            {o, [x, o](GradTape& t) { t.accumulate(x, relu_backward(t.grads_[o], t.values_[x])); }});
        return o;
    }

    Id maxpool2x2(Id x) {
        MaxPoolResult r = maxpool2x2_forward(values_[x]);
        Id o = push(std::move(r.output), false);
        nodes_.push_back({o, [x, o, argmax = std::move(r.argmax)](GradTape& t) {
            t.accumulate(x, maxpool2x2_backward(t.grads_[o], argmax, t.values_[x].shape));
        }});
        return o;
    }

    Id flatten(Id x) {
        Tensor out({static_cast<int>(values_[x].numel())}, values_[x].data);
        Id o = push(std::move(out), false);
        nodes_.push_back({o, [x, o](GradTape& t) {
            Tensor g(t.values_[x].shape, t.grads_[o].data);
            t.accumulate(x, g);
        }});
        return o;
    }

    Id dense(Id x, Id w, Id b) {
        Id o = push(dense_forward(values_[x], values_[w], values_[b]), false);
        nodes_.push_back({o, [x, w, b, o](GradTape& t) {
            DenseGrads g = dense_backward(t.grads_[o], t.values_[x], t.values_[w]);
            t.accumulate(x, g.input);
            t.accumulate(w, g.weights);
            t.accumulate(b, g.bias);
        }});
        return o;
    }

    Id channel_mean(Id x) {
        Id o = push(channel_mean_forward(values_[x]), false);
        nodes_.push_back({o, [x, o](GradTape& t) {
            t.accumulate(x, channel_mean_backward(t.grads_[o], t.values_[x].shape));
        }});
        return o;
    }

    struct GatherTerm {
        Id id;
        int index;
        float weight;
    };

    /// scalar = sum_j weight_j * tensor_j[index_j]. Backbone of the attack
    /// objective and of class-score roots for Grad-CAM.
    Id weighted_sum(std::vector<GatherTerm> terms) {
        double acc = 0.0;
        for (const GatherTerm& g : terms) {
            const Tensor& v = values_.at(g.id);
            if (g.index < 0 || static_cast<std::size_t>(g.index) >= v.numel()) {
                throw IndexError("weighted_sum index out of range");
            }
            acc += static_cast<double>(g.weight) * v.data[g.index];
        }
        Id o = push(Tensor::scalar(static_cast<float>(acc)), false);
        scalar_cache_[o] = acc;
        nodes_.push_back({o, [o, terms = std::move(terms)](GradTape& t) {
            const float u = t.grads_[o].data[0];
            for (const GatherTerm& g : terms) {
                t.ensure_grad(g.id);
                t.grads_[g.id].data[g.index] += u * g.weight;
            }
        }});
        return o;
    }

    /// Scalar loss node; keeps the softmax probabilities for backward.
    Id softmax_cross_entropy(Id logits, int target) {
        SoftmaxCeResult r = layerprobe::softmax_cross_entropy(values_[logits], target);
        Id o = push(Tensor::scalar(static_cast<float>(r.loss)), false);
        scalar_cache_[o] = r.loss;
        nodes_.push_back({o, [logits, o, target, probs = std::move(r.probs)](GradTape& t) {
            t.accumulate(logits, softmax_cross_entropy_backward(probs, target, t.grads_[o].data[0]));
        }});
        return o;
    }

    /// Seeds d(root)/d(root) = 1 and visits operations in exact reverse
    /// execution order. Gradients of non-retained intermediates are released
    /// afterwards.
    void backward(Id root) {
        grads_.assign(values_.size(), Tensor{});
        ensure_grad(root);
        std::fill(grads_[root].data.begin(), grads_[root].data.end(), 1.0f);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            // nodes whose output received no gradient are off the path to
            // the root and contribute nothing
            if (grads_[it->out].numel() == 0) continue;
            it->back(*this);
        }
        ran_backward_ = true;
        for (Id i = 0; i < values_.size(); ++i) {
            if (!leaf_[i] && !retained_[i]) grads_[i] = Tensor{};
        }
    }

    std::size_t size() const { return values_.size(); }

private:
    struct Node {
        Id out;
        std::function<void(GradTape&)> back;
    };

    Id push(Tensor v, bool leaf) {
        values_.push_back(std::move(v));
        leaf_.push_back(leaf);
        retained_.push_back(false);
        return values_.size() - 1;
    }

    void ensure_grad(Id id) {
        if (grads_[id].numel() == 0) grads_[id] = Tensor(values_[id].shape);
    }

    void accumulate(Id id, const Tensor& g) {
        ensure_grad(id);
        Tensor& dst = grads_[id];
        for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += g.data[i];
    }

    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    std::vector<Node> nodes_;
    std::vector<bool> leaf_;
    std::vector<bool> retained_;
    std::map<Id, double> scalar_cache_;
    bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Compares the tape gradient of a scalar-valued computation against central
/// finite differences. `computation(tape, input_id)` must return a scalar id.
/// Returns max over elements of |analytic - central| / max(|analytic|,
/// |central|, 1e-8). The caller keeps inputs away from kinks.
template <typename F>
double finite_diff_check(F&& computation, const Tensor& input, float step) {
    if (!(step > 0.0f)) throw PreconditionError("finite_diff_check requires a positive step");

    GradTape tape;
    GradTape::Id x = tape.input(input);
    GradTape::Id out = computation(tape, x);
    if (tape.value(out).numel() != 1) {
        throw PreconditionError("finite_diff_check computation must be scalar-valued");
    }
    tape.backward(out);
    const Tensor analytic = tape.grad(x);

    auto eval = [&](const Tensor& v) -> double {
        GradTape t;
        GradTape::Id xi = t.input(v);
        GradTape::Id o = computation(t, xi);
        return t.scalar_value(o);
    };

    double worst = 0.0;
    Tensor probe = input;
    for (std::size_t i = 0; i < input.numel(); ++i) {
        const float saved = probe.data[i];
        probe.data[i] = saved + step;
        const float hi = probe.data[i];
        const double fp = eval(probe);
        probe.data[i] = saved - step;
        const float lo = probe.data[i];
        const double fm = eval(probe);
        probe.data[i] = saved;
        // divide by the realized (rounded-to-f32) step, not the nominal one
        const double central = (fp - fm) / (static_cast<double>(hi) - static_cast<double>(lo));
        const double a = static_cast<double>(analytic.data[i]);
        const double denom = std::max({std::fabs(a), std::fabs(central), 1e-8});
        worst = std::max(worst, std::fabs(a - central) / denom);
    }
    return worst;
}

}  // namespace layerprobe
