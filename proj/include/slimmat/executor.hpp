#pragma once

#include <Eigen/Dense>
#include <map>

#include "slimmat/netgraph.hpp"

namespace slimmat {

enum class ExecMode { train, eval };

/// Runs a NetworkGraph: forward with activation caching, reverse-mode
/// backward with per-parameter gradient accumulation. Owns a private copy
/// of the graph whose weights the optimizer mutates in place; snapshot()
/// exports the current state as a new NetworkGraph value.
///
/// Backward accepts extra gradient tensors injected at named layers, which
/// is how feature-distillation terms reach the encoder activations.
class Executor {
public:
    using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    explicit Executor(const NetworkGraph& g) : graph_(g) {
        validate(graph_);
        inputs_idx_.resize(graph_.layers.size());
        for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
            for (const auto& in : graph_.layers[i].inputs)
                inputs_idx_[i].push_back(graph_.index.at(in));
            if (graph_.layers[i].kind == LayerKind::output) output_idx_ = i;
        }
        state_.resize(graph_.layers.size());
        zero_grad();
    }

    const NetworkGraph& graph() const { return graph_; }
    NetworkGraph snapshot() const { return graph_; }

    const Tensor& forward(const Tensor& input, ExecMode mode) {
        mode_ = mode;
        for (std::size_t i = 0; i < graph_.layers.size(); ++i) {
            const LayerSpec& spec = graph_.layers[i];
            NodeState& st = state_[i];
            switch (spec.kind) {
                case LayerKind::input:
                    if (input.c() != spec.input_channels)
                        throw ShapeError("forward: input has " + std::to_string(input.c()) +
                                         " channels, expected " +
                                         std::to_string(spec.input_channels));
                    st.out = input;
                    break;
                case LayerKind::conv:
                    conv_forward(spec, state_[inputs_idx_[i][0]].out, st.out);
                    break;
                case LayerKind::bn:
                    bn_forward(spec, state_[inputs_idx_[i][0]].out, st);
                    break;
                case LayerKind::relu: {
                    const Tensor& x = state_[inputs_idx_[i][0]].out;
                    st.out = x;
                    for (real& v : st.out.raw()) v = v > 0.0 ? v : 0.0;
                    break;
                }
                case LayerKind::maxpool:
                    pool_forward(spec, state_[inputs_idx_[i][0]].out, st);
                    break;
                case LayerKind::upsample:
                    upsample_forward(spec, state_[inputs_idx_[i][0]].out, st.out);
                    break;
                case LayerKind::concat:
                    concat_forward(i, st.out);
                    break;
                case LayerKind::output: {
                    const Tensor& x = state_[inputs_idx_[i][0]].out;
                    st.out = x;
                    for (real& v : st.out.raw()) v = std::min(1.0, std::max(0.0, v));
                    break;
                }
            }
        }
        return state_[output_idx_].out;
    }

    const Tensor& output() const { return state_[output_idx_].out; }

    const Tensor& activation(const std::string& id) const {
        return state_[graph_.index.at(id)].out;
    }

    void zero_grad() {
        for (const auto& spec : graph_.layers) {
            if (spec.kind == LayerKind::conv) {
                const auto& w = graph_.conv(spec.id);
                conv_wgrad_[spec.id].assign(w.weight.size(), 0.0);
                conv_bgrad_[spec.id].assign(w.bias.size(), 0.0);
            } else if (spec.kind == LayerKind::bn) {
                const auto& p = graph_.bn(spec.id);
                bn_ggrad_[spec.id].assign(p.gamma.size(), 0.0);
                bn_bgrad_[spec.id].assign(p.beta.size(), 0.0);
            }
        }
    }

    /// Propagates d_output (shape of the network output) plus optional
    /// per-layer feature gradients back to all parameters. Parameter
    /// gradients accumulate until zero_grad().
    void backward(const Tensor& d_output, const std::map<std::string, Tensor>& feature_grads = {}) {
        for (std::size_t i = 0; i < state_.size(); ++i) {
            state_[i].grad = Tensor(state_[i].out.n(), state_[i].out.c(), state_[i].out.h(),
                                    state_[i].out.w());
        }
        if (!d_output.same_shape(state_[output_idx_].out))
            throw ShapeError("backward: d_output shape mismatch");
        state_[output_idx_].grad = d_output;
        for (const auto& [id, g] : feature_grads) {
            NodeState& st = state_[graph_.index.at(id)];
            if (!g.same_shape(st.out))
                throw ShapeError("backward: feature gradient shape mismatch at " + id);
            st.grad += g;
        }

        for (std::size_t ri = graph_.layers.size(); ri-- > 0;) {
            const LayerSpec& spec = graph_.layers[ri];
            NodeState& st = state_[ri];
            switch (spec.kind) {
                case LayerKind::input:
                    break;
                case LayerKind::conv:
                    conv_backward(spec, state_[inputs_idx_[ri][0]], st);
                    break;
                case LayerKind::bn:
                    bn_backward(spec, state_[inputs_idx_[ri][0]], st);
                    break;
                case LayerKind::relu: {
                    NodeState& src = state_[inputs_idx_[ri][0]];
                    const auto& y = st.out.raw();
                    for (std::size_t k = 0; k < y.size(); ++k)
                        if (y[k] > 0.0) src.grad[k] += st.grad[k];
                    break;
                }
                case LayerKind::maxpool: {
                    NodeState& src = state_[inputs_idx_[ri][0]];
                    for (std::size_t k = 0; k < st.argmax.size(); ++k)
                        src.grad[static_cast<std::size_t>(st.argmax[k])] += st.grad[k];
                    break;
                }
                case LayerKind::upsample:
                    upsample_backward(spec, state_[inputs_idx_[ri][0]], st);
                    break;
                case LayerKind::concat: {
                    const Tensor& g = st.grad;
                    int c0 = 0;
                    for (std::size_t pi : inputs_idx_[ri]) {
                        NodeState& src = state_[pi];
                        const int pc = src.out.c();
                        for (int n = 0; n < g.n(); ++n)
                            for (int c = 0; c < pc; ++c) {
                                const real* gp = g.plane(n, c0 + c);
                                real* sp = src.grad.plane(n, c);
                                const int hw = g.h() * g.w();
                                for (int k = 0; k < hw; ++k) sp[k] += gp[k];
                            }
                        c0 += pc;
                    }
                    break;
                }
                case LayerKind::output: {
                    NodeState& src = state_[inputs_idx_[ri][0]];
                    const auto& x = src.out.raw();
                    for (std::size_t k = 0; k < x.size(); ++k)
                        if (x[k] >= 0.0 && x[k] <= 1.0) src.grad[k] += st.grad[k];
                    break;
                }
            }
        }
    }

    struct ParamRef {
        std::string layer;
        std::string name;
        std::vector<real>* value;
        std::vector<real>* grad;
    };

    /// Learnable parameters in deterministic (topological, weight-major) order.
    std::vector<ParamRef> parameters() {
        std::vector<ParamRef> refs;
        for (auto& spec : graph_.layers) {
            if (spec.kind == LayerKind::conv) {
                auto& w = graph_.conv_weights.at(spec.id);
                refs.push_back({spec.id, "weight", &w.weight.raw(), &conv_wgrad_.at(spec.id)});
                if (spec.conv.has_bias)
                    refs.push_back({spec.id, "bias", &w.bias, &conv_bgrad_.at(spec.id)});
            } else if (spec.kind == LayerKind::bn) {
                auto& p = graph_.bn_weights.at(spec.id);
                refs.push_back({spec.id, "gamma", &p.gamma, &bn_ggrad_.at(spec.id)});
                refs.push_back({spec.id, "beta", &p.beta, &bn_bgrad_.at(spec.id)});
            }
        }
        return refs;
    }

    const std::vector<real>& gamma_grad(const std::string& id) const { return bn_ggrad_.at(id); }
    std::vector<real>& gamma_grad(const std::string& id) { return bn_ggrad_.at(id); }

    /// Max absolute parameter gradient, for freeze assertions in tests.
    real max_abs_param_grad() const {
        real m = 0.0;
        auto scan = [&m](const std::vector<real>& v) {
            for (real x : v) m = std::max(m, std::abs(x));
        };
        for (const auto& [id, v] : conv_wgrad_) scan(v);
        for (const auto& [id, v] : conv_bgrad_) scan(v);
        for (const auto& [id, v] : bn_ggrad_) scan(v);
        for (const auto& [id, v] : bn_bgrad_) scan(v);
        return m;
    }

private:
    struct NodeState {
        Tensor out;
        Tensor grad;
        // bn cache
        std::vector<real> invstd;
        Tensor xhat;
        // maxpool cache
        std::vector<int> argmax;
    };

    static void im2col(const real* src, int C, int H, int W, int k, int stride, int pad, int Ho,
                       int Wo, real* col) {
        for (int c = 0; c < C; ++c) {
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    real* row = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) *
                                          (static_cast<std::size_t>(Ho) * Wo);
                    for (int ho = 0; ho < Ho; ++ho) {
                        const int ih = ho * stride - pad + kh;
                        for (int wo = 0; wo < Wo; ++wo) {
                            const int iw = wo * stride - pad + kw;
                            row[ho * Wo + wo] =
                                (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                    ? src[(static_cast<std::size_t>(c) * H + ih) * W + iw]
                                    : 0.0;
                        }
                    }
                }
            }
        }
    }

    static void col2im(const real* col, int C, int H, int W, int k, int stride, int pad, int Ho,
                       int Wo, real* dst) {
        for (int c = 0; c < C; ++c) {
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const real* row = col + (static_cast<std::size_t>(c) * k * k + kh * k + kw) *
                                                (static_cast<std::size_t>(Ho) * Wo);
                    for (int ho = 0; ho < Ho; ++ho) {
                        const int ih = ho * stride - pad + kh;
                        if (ih < 0 || ih >= H) continue;
                        for (int wo = 0; wo < Wo; ++wo) {
                            const int iw = wo * stride - pad + kw;
                            if (iw < 0 || iw >= W) continue;
                            dst[(static_cast<std::size_t>(c) * H + ih) * W + iw] +=
                                row[ho * Wo + wo];
                        }
                    }
                }
            }
        }
    }

    void conv_forward(const LayerSpec& spec, const Tensor& x, Tensor& y) {
        const auto& cp = spec.conv;
        if (x.c() != cp.in_channels)
            throw ShapeError("conv " + spec.id + ": input channel mismatch");
        const int ho = (x.h() + 2 * cp.padding - cp.kernel) / cp.stride + 1;
        const int wo = (x.w() + 2 * cp.padding - cp.kernel) / cp.stride + 1;
        y = Tensor(x.n(), cp.out_channels, ho, wo);

        const ConvWeights& w = graph_.conv(spec.id);
        const int ckk = cp.in_channels * cp.kernel * cp.kernel;
        col_.resize(static_cast<std::size_t>(ckk) * ho * wo);

        Eigen::Map<const RowMat> wm(w.weight.data(), cp.out_channels, ckk);
        for (int n = 0; n < x.n(); ++n) {
            im2col(x.plane(n, 0), cp.in_channels, x.h(), x.w(), cp.kernel, cp.stride, cp.padding,
                   ho, wo, col_.data());
            Eigen::Map<const RowMat> cm(col_.data(), ckk, ho * wo);
            Eigen::Map<RowMat> ym(y.plane(n, 0), cp.out_channels, ho * wo);
            ym.noalias() = wm * cm;
            if (cp.has_bias)
                for (int c = 0; c < cp.out_channels; ++c) ym.row(c).array() += w.bias[c];
        }
    }

    void conv_backward(const LayerSpec& spec, NodeState& src, NodeState& st) {
        const auto& cp = spec.conv;
        const Tensor& x = src.out;
        const Tensor& dy = st.grad;
        const int ho = dy.h(), wo = dy.w();
        const int ckk = cp.in_channels * cp.kernel * cp.kernel;
        col_.resize(static_cast<std::size_t>(ckk) * ho * wo);
        dcol_.resize(col_.size());

        const ConvWeights& w = graph_.conv(spec.id);
        Eigen::Map<const RowMat> wm(w.weight.data(), cp.out_channels, ckk);
        Eigen::Map<RowMat> dwm(conv_wgrad_.at(spec.id).data(), cp.out_channels, ckk);
        auto& db = conv_bgrad_.at(spec.id);

        for (int n = 0; n < x.n(); ++n) {
            im2col(x.plane(n, 0), cp.in_channels, x.h(), x.w(), cp.kernel, cp.stride, cp.padding,
                   ho, wo, col_.data());
            Eigen::Map<const RowMat> cm(col_.data(), ckk, ho * wo);
            Eigen::Map<const RowMat> dym(dy.plane(n, 0), cp.out_channels, ho * wo);

            dwm.noalias() += dym * cm.transpose();
            if (cp.has_bias)
                for (int c = 0; c < cp.out_channels; ++c) db[c] += dym.row(c).sum();

            Eigen::Map<RowMat> dcm(dcol_.data(), ckk, ho * wo);
            dcm.noalias() = wm.transpose() * dym;
            col2im(dcol_.data(), cp.in_channels, x.h(), x.w(), cp.kernel, cp.stride, cp.padding,
                   ho, wo, src.grad.plane(n, 0));
        }
    }

    void bn_forward(const LayerSpec& spec, const Tensor& x, NodeState& st) {
        BatchNormParams& p = graph_.bn_weights.at(spec.id);
        if (x.c() != p.channels()) throw ShapeError("bn " + spec.id + ": channel mismatch");
        const int C = x.c();
        const std::size_t per = static_cast<std::size_t>(x.n()) * x.h() * x.w();

        st.out = Tensor(x.n(), x.c(), x.h(), x.w());
        st.xhat = Tensor(x.n(), x.c(), x.h(), x.w());
        st.invstd.assign(C, 0.0);

        const int hw = x.h() * x.w();
        for (int c = 0; c < C; ++c) {
            real mean, var;
            if (mode_ == ExecMode::train) {
                real sum = 0.0;
                for (int n = 0; n < x.n(); ++n) {
                    const real* xp = x.plane(n, c);
                    for (int k = 0; k < hw; ++k) sum += xp[k];
                }
                mean = sum / static_cast<real>(per);
                real sq = 0.0;
                for (int n = 0; n < x.n(); ++n) {
                    const real* xp = x.plane(n, c);
                    for (int k = 0; k < hw; ++k) {
                        const real d = xp[k] - mean;
                        sq += d * d;
                    }
                }
                var = sq / static_cast<real>(per);  // population variance
                p.running_mean[c] = (1.0 - kBnMomentum) * p.running_mean[c] + kBnMomentum * mean;
                p.running_var[c] = (1.0 - kBnMomentum) * p.running_var[c] + kBnMomentum * var;
            } else {
                mean = p.running_mean[c];
                var = p.running_var[c];
            }
            const real invstd = 1.0 / std::sqrt(var + p.epsilon);
            st.invstd[c] = invstd;
            const real g = p.gamma[c], b = p.beta[c];
            for (int n = 0; n < x.n(); ++n) {
                const real* xp = x.plane(n, c);
                real* hp = st.xhat.plane(n, c);
                real* yp = st.out.plane(n, c);
                for (int k = 0; k < hw; ++k) {
                    const real h = (xp[k] - mean) * invstd;
                    hp[k] = h;
                    yp[k] = g * h + b;
                }
            }
        }
    }

    void bn_backward(const LayerSpec& spec, NodeState& src, NodeState& st) {
        const BatchNormParams& p = graph_.bn(spec.id);
        const Tensor& dy = st.grad;
        auto& dg = bn_ggrad_.at(spec.id);
        auto& db = bn_bgrad_.at(spec.id);
        const int C = dy.c();
        const int hw = dy.h() * dy.w();
        const real per = static_cast<real>(dy.n()) * hw;

        for (int c = 0; c < C; ++c) {
            real sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < dy.n(); ++n) {
                const real* dp = dy.plane(n, c);
                const real* hp = st.xhat.plane(n, c);
                for (int k = 0; k < hw; ++k) {
                    sum_dy += dp[k];
                    sum_dy_xhat += dp[k] * hp[k];
                }
            }
            dg[c] += sum_dy_xhat;
            db[c] += sum_dy;

            const real g = p.gamma[c];
            const real invstd = st.invstd[c];
            if (mode_ == ExecMode::train) {
                const real a = g * invstd / per;
                for (int n = 0; n < dy.n(); ++n) {
                    const real* dp = dy.plane(n, c);
                    const real* hp = st.xhat.plane(n, c);
                    real* sp = src.grad.plane(n, c);
                    for (int k = 0; k < hw; ++k)
                        sp[k] += a * (per * dp[k] - sum_dy - hp[k] * sum_dy_xhat);
                }
            } else {
                const real a = g * invstd;
                for (int n = 0; n < dy.n(); ++n) {
                    const real* dp = dy.plane(n, c);
                    real* sp = src.grad.plane(n, c);
                    for (int k = 0; k < hw; ++k) sp[k] += a * dp[k];
                }
            }
        }
    }

    void pool_forward(const LayerSpec& spec, const Tensor& x, NodeState& st) {
        const int k = spec.pool.kernel, s = spec.pool.stride;
        if (x.h() % s != 0 || x.w() % s != 0)
            throw std::invalid_argument("maxpool " + spec.id + ": input dims not divisible by stride");
        const int ho = x.h() / s, wo = x.w() / s;
        st.out = Tensor(x.n(), x.c(), ho, wo);
        st.argmax.assign(st.out.size(), 0);

        std::size_t oi = 0;
        for (int n = 0; n < x.n(); ++n) {
            for (int c = 0; c < x.c(); ++c) {
                const real* xp = x.plane(n, c);
                const std::size_t base =
                    (static_cast<std::size_t>(n) * x.c() + c) * x.h() * x.w();
                for (int h = 0; h < ho; ++h) {
                    for (int w = 0; w < wo; ++w) {
                        real best = -std::numeric_limits<real>::infinity();
                        int best_idx = 0;
                        for (int dh = 0; dh < k; ++dh) {
                            for (int dw = 0; dw < k; ++dw) {
                                const int ih = h * s + dh, iw = w * s + dw;
                                const real v = xp[ih * x.w() + iw];
                                if (v > best) {  // first max wins ties
                                    best = v;
                                    best_idx = ih * x.w() + iw;
                                }
                            }
                        }
                        st.out[oi] = best;
                        st.argmax[oi] = static_cast<int>(base) + best_idx;
                        ++oi;
                    }
                }
            }
        }
    }

    void upsample_forward(const LayerSpec& spec, const Tensor& x, Tensor& y) {
        const int f = spec.upsample.factor;
        y = Tensor(x.n(), x.c(), x.h() * f, x.w() * f);
        for (int n = 0; n < x.n(); ++n)
            for (int c = 0; c < x.c(); ++c) {
                const real* xp = x.plane(n, c);
                real* yp = y.plane(n, c);
                for (int h = 0; h < y.h(); ++h)
                    for (int w = 0; w < y.w(); ++w)
                        yp[h * y.w() + w] = xp[(h / f) * x.w() + (w / f)];
            }
    }

    void upsample_backward(const LayerSpec& spec, NodeState& src, NodeState& st) {
        const int f = spec.upsample.factor;
        const Tensor& g = st.grad;
        for (int n = 0; n < g.n(); ++n)
            for (int c = 0; c < g.c(); ++c) {
                const real* gp = g.plane(n, c);
                real* sp = src.grad.plane(n, c);
                for (int h = 0; h < g.h(); ++h)
                    for (int w = 0; w < g.w(); ++w)
                        sp[(h / f) * src.out.w() + (w / f)] += gp[h * g.w() + w];
            }
    }

    void concat_forward(std::size_t li, Tensor& y) {
        const auto& srcs = inputs_idx_[li];
        const Tensor& first = state_[srcs[0]].out;
        int channels = 0;
        for (std::size_t pi : srcs) {
            const Tensor& t = state_[pi].out;
            if (!t.same_spatial(first))
                throw ShapeError("concat " + graph_.layers[li].id + ": spatial mismatch");
            channels += t.c();
        }
        y = Tensor(first.n(), channels, first.h(), first.w());
        const int hw = first.h() * first.w();
        for (int n = 0; n < first.n(); ++n) {
            int c0 = 0;
            for (std::size_t pi : srcs) {
                const Tensor& t = state_[pi].out;
                for (int c = 0; c < t.c(); ++c)
                    std::copy(t.plane(n, c), t.plane(n, c) + hw, y.plane(n, c0 + c));
                c0 += t.c();
            }
        }
    }

    static constexpr real kBnMomentum = 0.1;

    NetworkGraph graph_;
    std::vector<std::vector<std::size_t>> inputs_idx_;
    std::vector<NodeState> state_;
    std::size_t output_idx_ = 0;
    ExecMode mode_ = ExecMode::train;

    std::unordered_map<std::string, std::vector<real>> conv_wgrad_;
    std::unordered_map<std::string, std::vector<real>> conv_bgrad_;
    std::unordered_map<std::string, std::vector<real>> bn_ggrad_;
    std::unordered_map<std::string, std::vector<real>> bn_bgrad_;

    std::vector<real> col_, dcol_;
};

}  // namespace slimmat
