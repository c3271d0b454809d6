#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "demist/common.hpp"

namespace demist {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

// Dense double tensor. Network layouts:
//   feature maps (C, X, Y, Z) with x fastest inside a channel,
//   matrices (rows, cols) row-major.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
    Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
    static Tensor randn(Rng& rng, Shape s, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (double& v : t.data_) v = stddev * rng.normal();
        return t;
    }
    static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const { return shape_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int64_t dim(size_t i) const { return shape_[i]; }
    size_t ndim() const { return shape_.size(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // 4D (C,X,Y,Z) accessors
    double& at4(int64_t c, int64_t x, int64_t y, int64_t z) {
        return data_[static_cast<size_t>(c * shape_[1] * shape_[2] * shape_[3] + x +
                                         shape_[1] * (y + shape_[2] * z))];
    }
    double at4(int64_t c, int64_t x, int64_t y, int64_t z) const {
        return data_[static_cast<size_t>(c * shape_[1] * shape_[2] * shape_[3] + x +
                                         shape_[1] * (y + shape_[2] * z))];
    }
    // 2D (rows, cols)
    double& at2(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    double at2(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    double sum() const {
        double s = 0.0;
        for (double v : data_) s += v;
        return s;
    }
    double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }
    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    uint64_t content_hash() const {
        uint64_t h = fnv1a(shape_.data(), shape_.size() * sizeof(int64_t));
        return fnv1a(data_.data(), data_.size() * sizeof(double), h);
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

// elementwise helpers on plain tensors (no autodiff)
inline Tensor operator+(const Tensor& a, const Tensor& b) {
    require(same_shape(a.shape(), b.shape()), "tensor add: shape mismatch");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}
inline Tensor operator-(const Tensor& a, const Tensor& b) {
    require(same_shape(a.shape(), b.shape()), "tensor sub: shape mismatch");
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}
inline Tensor operator*(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

}  // namespace demist
