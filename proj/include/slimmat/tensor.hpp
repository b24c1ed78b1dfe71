#pragma once

#include <algorithm>
#include <cstring>
#include <numeric>
#include <vector>

#include "slimmat/common.hpp"

namespace slimmat {

/// Dense rank-4 tensor in NCHW layout. Rank-2/3 data (images, per-channel
/// vectors) uses degenerate leading dimensions (n=1 and/or c=1).
class Tensor {
public:
    Tensor() = default;

    Tensor(int n, int c, int h, int w, real fill = 0.0)
        : n_(n), c_(c), h_(h), w_(w),
          data_(static_cast<std::size_t>(n) * c * h * w, fill) {
        if (n < 0 || c < 0 || h < 0 || w < 0)
            throw std::invalid_argument("Tensor: negative dimension");
    }

    static Tensor image(int c, int h, int w, real fill = 0.0) { return Tensor(1, c, h, w, fill); }

    int n() const { return n_; }
    int c() const { return c_; }
    int h() const { return h_; }
    int w() const { return w_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    bool same_shape(const Tensor& o) const {
        return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
    }
    bool same_spatial(const Tensor& o) const {
        return n_ == o.n_ && h_ == o.h_ && w_ == o.w_;
    }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::vector<real>& raw() { return data_; }
    const std::vector<real>& raw() const { return data_; }

    real& at(int n, int c, int h, int w) {
        return data_[idx(n, c, h, w)];
    }
    real at(int n, int c, int h, int w) const {
        return data_[idx(n, c, h, w)];
    }
    real& operator[](std::size_t i) { return data_[i]; }
    real operator[](std::size_t i) const { return data_[i]; }

    /// Pointer to the start of one (n, c) plane of h*w values.
    real* plane(int n, int c) { return data_.data() + idx(n, c, 0, 0); }
    const real* plane(int n, int c) const { return data_.data() + idx(n, c, 0, 0); }

    void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

    void fill_normal(Rng& rng, real mean, real stddev) {
        for (real& v : data_) v = rng.normal(mean, stddev);
    }
    void fill_uniform(Rng& rng, real lo, real hi) {
        for (real& v : data_) v = rng.uniform(lo, hi);
    }

    Tensor& operator+=(const Tensor& o) {
        require_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same(o);
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(real s) {
        for (real& v : data_) v *= s;
        return *this;
    }

    real max_abs() const {
        real m = 0.0;
        for (real v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    real sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    bool all_finite() const {
        for (real v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    std::size_t idx(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * c_ + c) * h_ + h) * w_ + w;
    }
    void require_same(const Tensor& o) const {
        if (!same_shape(o)) throw ShapeError("Tensor: shape mismatch in elementwise op");
    }

    int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
    std::vector<real> data_;
};

}  // namespace slimmat
