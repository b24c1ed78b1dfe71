#pragma once

#include <deque>

#include "slimmat/tensor.hpp"

namespace slimmat {

/// Unknown-region selector: trimap label 0.5 (foreground 1, background 0).
inline bool trimap_unknown(real v) { return v > 0.25 && v < 0.75; }

inline Tensor unknown_mask_from_trimap(const Tensor& trimap) {
    Tensor m(trimap.n(), trimap.c(), trimap.h(), trimap.w());
    for (std::size_t i = 0; i < trimap.size(); ++i) m[i] = trimap_unknown(trimap[i]) ? 1.0 : 0.0;
    return m;
}

namespace detail {

inline void metric_check(const Tensor& pred, const Tensor& gt, const Tensor& trimap) {
    if (!pred.same_shape(gt) || !pred.same_shape(trimap))
        throw ShapeError("metric: shape mismatch");
    bool any = false;
    for (real v : trimap.raw())
        if (trimap_unknown(v)) { any = true; break; }
    if (!any) throw EmptyRegionError("metric: empty unknown region");
}

}  // namespace detail

/// Mean squared error over the unknown region.
inline real mse_unknown(const Tensor& pred, const Tensor& gt, const Tensor& trimap) {
    detail::metric_check(pred, gt, trimap);
    real sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!trimap_unknown(trimap[i])) continue;
        const real d = pred[i] - gt[i];
        sum += d * d;
        ++n;
    }
    return sum / static_cast<real>(n);
}

/// Sum of absolute differences over the unknown region, reported / 1000.
inline real sad_unknown(const Tensor& pred, const Tensor& gt, const Tensor& trimap) {
    detail::metric_check(pred, gt, trimap);
    real sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (trimap_unknown(trimap[i])) sum += std::abs(pred[i] - gt[i]);
    return sum / 1000.0;
}

namespace detail {

// symmetric boundary reflection: ... c b a | a b c ... | c b a ...
inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

struct GaussKernels {
    std::vector<real> smooth;  // L1-normalized Gaussian
    std::vector<real> deriv;   // L2-normalized first derivative
    int radius = 0;
};

inline GaussKernels gauss_derivative_kernels(real sigma) {
    GaussKernels k;
    k.radius = static_cast<int>(std::ceil(3.0 * sigma));
    const int n = 2 * k.radius + 1;
    k.smooth.resize(n);
    k.deriv.resize(n);
    real s_sum = 0.0, d_sq = 0.0;
    for (int i = -k.radius; i <= k.radius; ++i) {
        const real g = std::exp(-0.5 * i * i / (sigma * sigma));
        k.smooth[i + k.radius] = g;
        const real d = -i / (sigma * sigma) * g;
        k.deriv[i + k.radius] = d;
        s_sum += g;
        d_sq += d * d;
    }
    for (real& v : k.smooth) v /= s_sum;
    const real d_norm = std::sqrt(d_sq);
    for (real& v : k.deriv) v /= d_norm;
    return k;
}

// separable filter: `kx` along rows (x), `ky` along columns (y)
inline std::vector<real> filter_2d(const real* src, int h, int w, const std::vector<real>& kx,
                                   const std::vector<real>& ky, int radius) {
    std::vector<real> tmp(static_cast<std::size_t>(h) * w, 0.0);
    std::vector<real> out(static_cast<std::size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            real acc = 0.0;
            for (int t = -radius; t <= radius; ++t)
                acc += kx[t + radius] * src[y * w + reflect_index(x + t, w)];
            tmp[y * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            real acc = 0.0;
            for (int t = -radius; t <= radius; ++t)
                acc += ky[t + radius] * tmp[reflect_index(y + t, h) * w + x];
            out[y * w + x] = acc;
        }
    return out;
}

inline std::vector<real> gradient_magnitude(const real* src, int h, int w, real sigma) {
    const GaussKernels k = gauss_derivative_kernels(sigma);
    const std::vector<real> gx = filter_2d(src, h, w, k.deriv, k.smooth, k.radius);
    const std::vector<real> gy = filter_2d(src, h, w, k.smooth, k.deriv, k.radius);
    std::vector<real> mag(gx.size());
    for (std::size_t i = 0; i < mag.size(); ++i)
        mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
    return mag;
}

}  // namespace detail

/// Gradient error: Gaussian first-derivative filtering (sigma, truncated at
/// 3*sigma, symmetric padding), squared difference of gradient magnitudes
/// summed over the unknown region. Reported x 1e-3.
inline real grad_error(const Tensor& pred, const Tensor& gt, const Tensor& trimap,
                       real sigma = 1.4) {
    detail::metric_check(pred, gt, trimap);
    if (!(sigma > 0.0)) throw std::invalid_argument("grad_error: sigma must be positive");
    const int h = pred.h(), w = pred.w();
    const auto mp = detail::gradient_magnitude(pred.plane(0, 0), h, w, sigma);
    const auto mg = detail::gradient_magnitude(gt.plane(0, 0), h, w, sigma);
    real sum = 0.0;
    for (int i = 0; i < h * w; ++i) {
        if (!trimap_unknown(trimap[static_cast<std::size_t>(i)])) continue;
        const real d = mp[static_cast<std::size_t>(i)] - mg[static_cast<std::size_t>(i)];
        sum += d * d;
    }
    return sum * 1e-3;
}

namespace detail {

// largest 4-connected component of `bin`; ties broken by first (row-major)
// occurrence. Returns an empty vector when bin has no set pixel.
inline std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& bin, int h,
                                                   int w) {
    std::vector<int> label(bin.size(), -1);
    int best_label = -1;
    std::size_t best_size = 0;
    int next = 0;
    for (int start = 0; start < h * w; ++start) {
        if (!bin[static_cast<std::size_t>(start)] || label[static_cast<std::size_t>(start)] >= 0)
            continue;
        std::size_t size = 0;
        std::deque<int> queue{start};
        label[static_cast<std::size_t>(start)] = next;
        while (!queue.empty()) {
            const int p = queue.front();
            queue.pop_front();
            ++size;
            const int y = p / w, x = p % w;
            const int nbr[4] = {p - w, p + w, p - 1, p + 1};
            const bool ok[4] = {y > 0, y + 1 < h, x > 0, x + 1 < w};
            for (int k = 0; k < 4; ++k) {
                if (!ok[k]) continue;
                const int q = nbr[k];
                if (bin[static_cast<std::size_t>(q)] && label[static_cast<std::size_t>(q)] < 0) {
                    label[static_cast<std::size_t>(q)] = next;
                    queue.push_back(q);
                }
            }
        }
        if (size > best_size) {
            best_size = size;
            best_label = next;
        }
        ++next;
    }
    std::vector<std::uint8_t> out(bin.size(), 0);
    if (best_label < 0) return out;
    for (std::size_t i = 0; i < bin.size(); ++i) out[i] = label[i] == best_label ? 1 : 0;
    return out;
}

}  // namespace detail

/// Connectivity error over the unknown region, reported x 1e-3.
///
/// Simplified from the classical benchmark and held fixed for within-toolkit
/// comparison: for each threshold level the source region is the largest
/// 4-connected component of (pred >= theta AND gt >= theta); a pixel's
/// connectedness level omega is the highest theta whose source contains it;
/// per-map degree of connectedness is phi = 1 - d * [d >= 0.15] with
/// d = value - omega, and the error is sum |phi_pred - phi_gt| over unknown
/// pixels. The distance-lambda exponent of the original formulation is
/// omitted. If no source region exists at the top threshold the metric
/// falls back to the SAD value.
inline real conn_error(const Tensor& pred, const Tensor& gt, const Tensor& trimap,
                       real step = 0.1) {
    detail::metric_check(pred, gt, trimap);
    const int levels = static_cast<int>(std::llround(0.9 / step));
    if (levels < 1 || std::abs(levels * step - 0.9) > 1e-9)
        throw std::invalid_argument("conn_error: step must divide 0.9");
    const int h = pred.h(), w = pred.w();
    const std::size_t hw = static_cast<std::size_t>(h) * w;

    std::vector<real> omega(hw, 0.0);
    bool top_nonempty = false;
    for (int k = 1; k <= levels; ++k) {
        const real theta = k * step;
        std::vector<std::uint8_t> bin(hw, 0);
        bool any = false;
        for (std::size_t i = 0; i < hw; ++i) {
            bin[i] = (pred[i] >= theta && gt[i] >= theta) ? 1 : 0;
            any = any || bin[i];
        }
        if (!any) continue;
        const auto comp = detail::largest_component(bin, h, w);
        bool comp_any = false;
        for (std::size_t i = 0; i < hw; ++i) {
            if (comp[i]) {
                omega[i] = theta;
                comp_any = true;
            }
        }
        if (k == levels) top_nonempty = comp_any;
    }
    if (!top_nonempty) return sad_unknown(pred, gt, trimap);  // documented fallback

    constexpr real kDistanceTolerance = 0.15;
    auto phi = [&](real v, real om) {
        const real d = v - om;
        return 1.0 - (d >= kDistanceTolerance ? d : 0.0);
    };
    real sum = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
        if (!trimap_unknown(trimap[i])) continue;
        sum += std::abs(phi(pred[i], omega[i]) - phi(gt[i], omega[i]));
    }
    return sum * 1e-3;
}

/// One evaluation row: MSE, SAD, Grad, Conn, #Param, FLOPs.
struct MetricRow {
    real mse = 0.0;
    real sad = 0.0;
    real grad = 0.0;
    real conn = 0.0;
    std::size_t params = 0;
    std::size_t flops = 0;
};

inline MetricRow eval_metrics(const Tensor& pred, const Tensor& gt, const Tensor& trimap) {
    MetricRow r;
    r.mse = mse_unknown(pred, gt, trimap);
    r.sad = sad_unknown(pred, gt, trimap);
    r.grad = grad_error(pred, gt, trimap);
    r.conn = conn_error(pred, gt, trimap);
    return r;
}

}  // namespace slimmat
