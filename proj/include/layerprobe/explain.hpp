#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "layerprobe/model.hpp"
#include "layerprobe/perturbation.hpp"

namespace layerprobe {

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

using Grid = std::vector<std::vector<float>>;

/// Per-layer Grad-CAM attention map, min-max normalized to [0,1] and resized
/// to the model input's spatial dims.
struct Heatmap {
    std::string layer;
    Grid grid;  // resized_h x resized_w
    int native_h = 0;
    int native_w = 0;
    int resized_h = 0;
    int resized_w = 0;
};

/// Corner-aligned bilinear interpolation. Output values are convex
/// combinations of the source, so they stay within the source min/max.
inline Grid resize_bilinear(const Grid& src, int target_h, int target_w) {
    if (src.empty() || src[0].empty()) throw DimensionError("cannot resize an empty grid");
    if (target_h <= 0 || target_w <= 0) throw DimensionError("resize target dims must be positive");
    const int sh = static_cast<int>(src.size());
    const int sw = static_cast<int>(src[0].size());
    for (const auto& row : src) {
        if (static_cast<int>(row.size()) != sw) throw DimensionError("ragged grid");
    }
    Grid out(target_h, std::vector<float>(target_w));
    const double sy = target_h > 1 ? static_cast<double>(sh - 1) / (target_h - 1) : 0.0;
    const double sx = target_w > 1 ? static_cast<double>(sw - 1) / (target_w - 1) : 0.0;
    for (int y = 0; y < target_h; ++y) {
        const double fy = y * sy;
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < target_w; ++x) {
            const double fx = x * sx;
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            const double v = (1.0 - wy) * ((1.0 - wx) * src[y0][x0] + wx * src[y0][x1]) +
                             wy * ((1.0 - wx) * src[y1][x0] + wx * src[y1][x1]);
            out[y][x] = static_cast<float>(v);
        }
    }
    return out;
}

/// Builds the Grad-CAM heatmap for one captured conv layer: channel weights
/// are the spatial mean of the class-score gradient per channel, the raw map
/// is relu of the weighted channel sum, then min-max normalization and a
/// bilinear resize to the input dims. An identically-zero raw map stays zero;
/// a constant positive map normalizes to all ones.
inline Heatmap heatmap_from_activation(const LayerActivation& act, int input_h, int input_w) {
    require_same_shape(act.feature_map, act.gradient, "heatmap feature map vs gradient");
    require_rank(act.feature_map, 3, "heatmap feature map");
    const int c = act.feature_map.dim(0), h = act.feature_map.dim(1), w = act.feature_map.dim(2);
    const std::size_t area = static_cast<std::size_t>(h) * w;

    std::vector<double> weights(c);
    for (int k = 0; k < c; ++k) {
        double s = 0.0;
        const float* g = &act.gradient.data[k * area];
        for (std::size_t i = 0; i < area; ++i) s += g[i];
        weights[k] = s / static_cast<double>(area);
    }

    Grid raw(h, std::vector<float>(w, 0.0f));
    for (int k = 0; k < c; ++k) {
        const float* fm = &act.feature_map.data[k * area];
        const float wk = static_cast<float>(weights[k]);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) raw[y][x] += wk * fm[y * w + x];
        }
    }
    float mn = raw[0][0], mx = raw[0][0];
    for (auto& row : raw) {
        for (float& v : row) {
            v = v > 0.0f ? v : 0.0f;  // relu
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
    }
    mn = std::max(mn, 0.0f);
    if (mx > mn) {
        for (auto& row : raw) {
            for (float& v : row) v = (v - mn) / (mx - mn);
        }
    } else if (mx > 0.0f) {
        for (auto& row : raw) {
            for (float& v : row) v = 1.0f;
        }
    }

    Heatmap hm;
    hm.layer = act.layer;
    hm.native_h = h;
    hm.native_w = w;
    hm.resized_h = input_h;
    hm.resized_w = input_w;
    hm.grid = resize_bilinear(raw, input_h, input_w);
    // interpolation keeps [0,1] but can pull the peak off the lattice;
    // normalize once more so the stored grid peaks at exactly 1
    float rmn = hm.grid[0][0], rmx = hm.grid[0][0];
    for (const auto& row : hm.grid) {
        for (float v : row) {
            rmn = std::min(rmn, v);
            rmx = std::max(rmx, v);
        }
    }
    if (rmx > rmn) {
        for (auto& row : hm.grid) {
            for (float& v : row) v = (v - rmn) / (rmx - rmn);
        }
    } else if (rmx > 0.0f) {
        for (auto& row : hm.grid) {
            for (float& v : row) v = 1.0f;
        }
    }
    return hm;
}

/// Grad-CAM heatmap of `layer` for the given image and target class.
inline Heatmap grad_cam(const Model& model, const Tensor& image, int target_class,
                        const std::string& layer) {
    const auto names = model.spec.conv_layer_names();
    if (std::find(names.begin(), names.end(), layer) == names.end()) {
        throw ConfigError("'" + layer + "' is not a conv layer of this model");
    }
    auto [pred, capture] = predict_with_capture(model, image, true, target_class);
    const LayerActivation* act = capture.find(layer);
    return heatmap_from_activation(*act, model.spec.input_shape[1], model.spec.input_shape[2]);
}

// ---------------------------------------------------------------------------
// Cosine deviations
// ---------------------------------------------------------------------------

/// Cosine similarity of the vectorized (resized) heatmaps. Two zero maps are
/// defined as identical (1); exactly one zero map gives 0.
inline double cosine_similarity(const Heatmap& a, const Heatmap& b) {
    if (a.resized_h != b.resized_h || a.resized_w != b.resized_w) {
        throw DimensionError("cosine_similarity on heatmaps of different resized dims");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int y = 0; y < a.resized_h; ++y) {
        for (int x = 0; x < a.resized_w; ++x) {
            const double va = a.grid[y][x], vb = b.grid[y][x];
            dot += va * vb;
            na += va * va;
            nb += vb * vb;
        }
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

struct LayerDeviation {
    std::string layer;
    double d_a = 0.0;  // G[S, S + r*N_a]
    double d_g = 0.0;  // G[S, S + r*N_g]
};

/// Per seed x strength: cosine similarity of every conv layer's heatmap under
/// the adversarial and the Gaussian-noise member of the triple against the
/// seed's heatmap.
struct DeviationRecord {
    int seed_id = -1;
    float strength = 1.0f;
    std::vector<LayerDeviation> layers;  // model conv order

    const LayerDeviation* find(const std::string& layer) const {
        for (const LayerDeviation& l : layers) {
            if (l.layer == layer) return &l;
        }
        return nullptr;
    }
};

/// All three heatmaps use the seed's predicted class, so the deviations
/// measure attention drift rather than class change.
inline DeviationRecord layer_deviations(const Model& model, const InputTriple& triple,
                                        float strength, int seed_id = -1) {
    require_same_shape(triple.seed, triple.adversarial, "input triple");
    require_same_shape(triple.seed, triple.noisy, "input triple");
    const int ih = model.spec.input_shape[1], iw = model.spec.input_shape[2];

    auto [pred_s, cap_s] = predict_with_capture(model, triple.seed, true);
    const int cls = pred_s.predicted_class;
    auto [pred_a, cap_a] = predict_with_capture(model, triple.adversarial, true, cls);
    auto [pred_g, cap_g] = predict_with_capture(model, triple.noisy, true, cls);

    DeviationRecord rec;
    rec.seed_id = seed_id;
    rec.strength = strength;
    for (std::size_t i = 0; i < cap_s.layers.size(); ++i) {
        const Heatmap hs = heatmap_from_activation(cap_s.layers[i], ih, iw);
        const Heatmap ha = heatmap_from_activation(cap_a.layers[i], ih, iw);
        const Heatmap hg = heatmap_from_activation(cap_g.layers[i], ih, iw);
        rec.layers.push_back(
            {cap_s.layers[i].layer, cosine_similarity(hs, ha), cosine_similarity(hs, hg)});
    }
    return rec;
}

}  // namespace layerprobe
