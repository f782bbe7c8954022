#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "layerprobe/errors.hpp"

namespace layerprobe {

/// Dense n-dimensional array of single-precision values, flat row-major
/// storage with explicit shape metadata. Tensors are plain values: copyable,
/// movable, no views, no aliasing.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> shape_, float fill = 0.0f) : shape(std::move(shape_)) {
        data.assign(checked_numel(shape), fill);
    }

    Tensor(std::vector<int> shape_, std::vector<float> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (checked_numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_string(shape));
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0f); }
    static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }

    /// 3-D accessors for [C,H,W] tensors.
    float& at3(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    float at3(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    static std::size_t checked_numel(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_string(shape));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static std::string shape_string(const std::vector<int>& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << ',';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }
};

/// Raises NumericError if any element of `t` is NaN or infinite. Every
/// kernel calls this on its result so non-finite values never propagate.
inline void ensure_finite(const Tensor& t, const char* op) {
    for (float v : t.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

inline void require_rank(const Tensor& t, int rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) +
                             ", got shape " + Tensor::shape_string(t.shape));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape " + Tensor::shape_string(a.shape) +
                             " vs " + Tensor::shape_string(b.shape));
    }
}

inline float max_abs(const Tensor& t) {
    float m = 0.0f;
    for (float v : t.data) m = std::max(m, std::fabs(v));
    return m;
}

inline double mean_of(const Tensor& t) {
    double s = 0.0;
    for (float v : t.data) s += v;
    return t.numel() ? s / static_cast<double>(t.numel()) : 0.0;
}

/// Population (divide-by-N) standard deviation.
inline double stddev_of(const Tensor& t) {
    if (t.numel() == 0) return 0.0;
    double mu = mean_of(t);
    double s = 0.0;
    for (float v : t.data) s += (v - mu) * (v - mu);
    return std::sqrt(s / static_cast<double>(t.numel()));
}

}  // namespace layerprobe
