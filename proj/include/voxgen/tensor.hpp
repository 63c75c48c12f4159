#pragma once

#include <cmath>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "voxgen/common.hpp"
#include "voxgen/rng.hpp"

namespace voxgen {

// Dense row-major float tensor, rank 1..5. The NN stack works on single
// samples, so the usual layouts are (C,D,H,W) for feature maps and (p,p,p)
// for raw patches.
struct Tensor {
    std::vector<i64> shape;
    FloatVec data;

    Tensor() = default;
    explicit Tensor(std::vector<i64> s) : shape(std::move(s)) {
        data.assign(std::size_t(numel_of(shape)), 0.0f);
    }

    static Tensor zeros(std::vector<i64> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<i64> s, float v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static i64 numel_of(const std::vector<i64>& s) {
        i64 n = 1;
        for (i64 d : s) n *= d;
        return n;
    }

    i64 numel() const { return i64(data.size()); }
    int rank() const { return int(shape.size()); }
    i64 dim(int i) const { return shape[std::size_t(i)]; }

    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }

    float& operator[](i64 i) { return data[std::size_t(i)]; }
    float operator[](i64 i) const { return data[std::size_t(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape[i]);
        return s + ")";
    }

    void fill_normal(Rng& rng, float scale = 1.0f) {
        for (auto& v : data) v = rng.normalf() * scale;
    }

    Tensor& add_scaled(const Tensor& o, float a) {
        for (i64 i = 0; i < numel(); ++i) data[std::size_t(i)] += a * o[i];
        return *this;
    }

    Tensor& scale(float a) {
        for (auto& v : data) v *= a;
        return *this;
    }
};

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    Tensor r = a;
    for (i64 i = 0; i < r.numel(); ++i) r[i] += b[i];
    return r;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    Tensor r = a;
    for (i64 i = 0; i < r.numel(); ++i) r[i] -= b[i];
    return r;
}

inline double mse(const Tensor& a, const Tensor& b) {
    double acc = 0.0;
    for (i64 i = 0; i < a.numel(); ++i) {
        double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return acc / double(a.numel());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (i64 i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace voxgen
