#pragma once

#include <Eigen/Dense>
#include <map>

#include "slimmat/netgraph.hpp"

namespace slimmat {

/// Rank-4 activation record exchanged between teacher and student.
struct FeatureMap {
    enum class Role { teacher, student };
    Tensor data;
    std::string layer_id;
    Role role = Role::student;
};

/// Prediction / reference / unknown-region mask pack. The mask selects the
/// pixels the alpha loss averages over; both the ground-truth and the
/// teacher-target variants use the same mask.
struct AlphaTriple {
    Tensor alpha_pred;
    Tensor alpha_ref;
    Tensor unknown_mask;  // 1.0 where unknown
};

struct KDMethod {
    enum class Name { NST, OFD, SPKD };
    Name name = Name::SPKD;
    // NST options
    int nst_degree = 2;
    real nst_bias = 0.0;
    // SPKD options; channel similarity is used only when channel counts match
    bool spkd_spatial = true;
    bool spkd_channel = true;
};

inline const char* kd_name(KDMethod::Name n) {
    switch (n) {
        case KDMethod::Name::NST: return "nst";
        case KDMethod::Name::OFD: return "ofd";
        case KDMethod::Name::SPKD: return "spkd";
    }
    return "?";
}

inline KDMethod::Name kd_from_name(const std::string& s) {
    if (s == "nst" || s == "NST") return KDMethod::Name::NST;
    if (s == "ofd" || s == "OFD") return KDMethod::Name::OFD;
    if (s == "spkd" || s == "SPKD") return KDMethod::Name::SPKD;
    throw ConfigError("unknown kd method: " + s);
}

// ---------------------------------------------------------------------------
// alpha prediction loss
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t mask_count(const Tensor& mask) {
    std::size_t n = 0;
    for (real v : mask.raw()) n += v > 0.5 ? 1 : 0;
    return n;
}

}  // namespace detail

/// Charbonnier-style alpha loss: mean over unknown pixels of
/// sqrt((pred-ref)^2 + eps_sq). Smooth everywhere, floor sqrt(eps_sq).
inline real alpha_prediction_loss(const Tensor& pred, const Tensor& ref, const Tensor& mask,
                                  real eps_sq = 1e-12) {
    if (!pred.same_shape(ref) || !pred.same_shape(mask))
        throw ShapeError("alpha_prediction_loss: shape mismatch");
    if (eps_sq <= 0.0) throw std::invalid_argument("alpha_prediction_loss: eps_sq must be > 0");
    const std::size_t m = detail::mask_count(mask);
    if (m == 0) throw EmptyRegionError("alpha_prediction_loss: empty unknown region");
    real sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask[i] > 0.5) {
            const real d = pred[i] - ref[i];
            sum += std::sqrt(d * d + eps_sq);
        }
    }
    return sum / static_cast<real>(m);
}

inline real alpha_prediction_loss(const AlphaTriple& t, real eps_sq = 1e-12) {
    return alpha_prediction_loss(t.alpha_pred, t.alpha_ref, t.unknown_mask, eps_sq);
}

/// Value plus gradient w.r.t. the prediction.
inline real alpha_prediction_loss_grad(const Tensor& pred, const Tensor& ref, const Tensor& mask,
                                       Tensor& d_pred, real eps_sq = 1e-12) {
    if (!pred.same_shape(ref) || !pred.same_shape(mask))
        throw ShapeError("alpha_prediction_loss: shape mismatch");
    const std::size_t m = detail::mask_count(mask);
    if (m == 0) throw EmptyRegionError("alpha_prediction_loss: empty unknown region");
    d_pred = Tensor(pred.n(), pred.c(), pred.h(), pred.w());
    real sum = 0.0;
    const real inv_m = 1.0 / static_cast<real>(m);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (mask[i] > 0.5) {
            const real d = pred[i] - ref[i];
            const real s = std::sqrt(d * d + eps_sq);
            sum += s;
            d_pred[i] = d / s * inv_m;
        }
    }
    return sum * inv_m;
}

// ---------------------------------------------------------------------------
// NST: squared MMD between L2-normalized per-channel activation maps under a
// polynomial kernel (x.y + bias)^degree
// ---------------------------------------------------------------------------

namespace detail {

// rows of `out` are the channels' flattened, L2-normalized activation maps;
// zero-norm channels normalize to zero rows
inline void normalized_channel_rows(const Tensor& f, int sample, Eigen::MatrixXd& out,
                                    std::vector<real>* norms = nullptr) {
    const int C = f.c();
    const int hw = f.h() * f.w();
    out.resize(C, hw);
    if (norms) norms->assign(C, 0.0);
    for (int c = 0; c < C; ++c) {
        const real* p = f.plane(sample, c);
        real sq = 0.0;
        for (int k = 0; k < hw; ++k) sq += p[k] * p[k];
        const real norm = std::sqrt(sq);
        if (norms) (*norms)[c] = norm;
        if (norm > 0.0) {
            for (int k = 0; k < hw; ++k) out(c, k) = p[k] / norm;
        } else {
            out.row(c).setZero();
        }
    }
}

}  // namespace detail

inline void nst_check_shapes(const Tensor& ft, const Tensor& fs) {
    if (ft.n() != fs.n() || ft.h() != fs.h() || ft.w() != fs.w())
        throw ShapeError("nst_loss: batch/spatial size mismatch");
}

inline real nst_loss(const Tensor& ft, const Tensor& fs, int degree = 2, real bias = 0.0) {
    nst_check_shapes(ft, fs);
    const int B = ft.n();
    real total = 0.0;
    Eigen::MatrixXd T, S;
    for (int b = 0; b < B; ++b) {
        detail::normalized_channel_rows(ft, b, T);
        detail::normalized_channel_rows(fs, b, S);
        auto kmean = [&](const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
            Eigen::MatrixXd dot = X * Y.transpose();
            real sum = 0.0;
            for (Eigen::Index i = 0; i < dot.rows(); ++i)
                for (Eigen::Index j = 0; j < dot.cols(); ++j)
                    sum += std::pow(dot(i, j) + bias, degree);
            return sum / static_cast<real>(dot.rows() * dot.cols());
        };
        total += kmean(T, T) + kmean(S, S) - 2.0 * kmean(T, S);
    }
    return total / static_cast<real>(B);
}

inline real nst_loss_grad(const Tensor& ft, const Tensor& fs, Tensor& d_fs, int degree = 2,
                          real bias = 0.0) {
    nst_check_shapes(ft, fs);
    const int B = ft.n();
    const int Cs = fs.c();
    const int hw = fs.h() * fs.w();
    d_fs = Tensor(fs.n(), fs.c(), fs.h(), fs.w());
    real total = 0.0;
    Eigen::MatrixXd T, S;
    std::vector<real> snorm;
    for (int b = 0; b < B; ++b) {
        detail::normalized_channel_rows(ft, b, T);
        detail::normalized_channel_rows(fs, b, S, &snorm);
        const int Ct = static_cast<int>(T.rows());

        Eigen::MatrixXd dot_tt = T * T.transpose();
        Eigen::MatrixXd dot_ss = S * S.transpose();
        Eigen::MatrixXd dot_ts = T * S.transpose();

        real sum = 0.0;
        for (Eigen::Index i = 0; i < Ct; ++i)
            for (Eigen::Index j = 0; j < Ct; ++j) sum += std::pow(dot_tt(i, j) + bias, degree);
        real val = sum / static_cast<real>(Ct) / static_cast<real>(Ct);
        sum = 0.0;
        for (Eigen::Index i = 0; i < Cs; ++i)
            for (Eigen::Index j = 0; j < Cs; ++j) sum += std::pow(dot_ss(i, j) + bias, degree);
        val += sum / static_cast<real>(Cs) / static_cast<real>(Cs);
        sum = 0.0;
        for (Eigen::Index i = 0; i < Ct; ++i)
            for (Eigen::Index j = 0; j < Cs; ++j) sum += std::pow(dot_ts(i, j) + bias, degree);
        val -= 2.0 * sum / static_cast<real>(Ct) / static_cast<real>(Cs);
        total += val;

        // gradient w.r.t. the normalized student rows
        Eigen::MatrixXd dS = Eigen::MatrixXd::Zero(Cs, hw);
        const real self_w = 2.0 * degree / static_cast<real>(Cs) / static_cast<real>(Cs);
        for (int j = 0; j < Cs; ++j) {
            for (int j2 = 0; j2 < Cs; ++j2) {
                const real k = std::pow(dot_ss(j, j2) + bias, degree - 1);
                dS.row(j) += self_w * k * S.row(j2);
            }
        }
        const real cross_w = -2.0 * degree / static_cast<real>(Ct) / static_cast<real>(Cs);
        for (int j = 0; j < Cs; ++j) {
            for (int i = 0; i < Ct; ++i) {
                const real k = std::pow(dot_ts(i, j) + bias, degree - 1);
                dS.row(j) += cross_w * k * T.row(i);
            }
        }

        // through the L2 normalization, averaged over the batch
        for (int j = 0; j < Cs; ++j) {
            real* out = d_fs.plane(b, j);
            if (snorm[j] <= 0.0) continue;  // zero channel: gradient defined as zero
            const real dot_g = dS.row(j).dot(S.row(j));
            for (int k = 0; k < hw; ++k)
                out[k] = (dS(j, k) - dot_g * S(j, k)) / snorm[j] / static_cast<real>(B);
        }
    }
    return total / static_cast<real>(B);
}

// ---------------------------------------------------------------------------
// OFD: margin-ReLU teacher transform, 1x1 regressor on the student side,
// partial L2 distance
// ---------------------------------------------------------------------------

/// Closed-form expected negative pre-ReLU response under the Gaussian model
/// N(beta, gamma^2) implied by the teacher's BN parameters. Clamped to <= 0.
inline std::vector<real> compute_ofd_margin(const BatchNormParams& bn) {
    std::vector<real> margin(bn.gamma.size(), 0.0);
    for (std::size_t c = 0; c < bn.gamma.size(); ++c) {
        const real sigma = std::abs(bn.gamma[c]);
        if (sigma == 0.0) continue;
        const real mu = bn.beta[c];
        const real z = mu / sigma;
        const real cdf_neg = gaussian_cdf(-z);
        if (cdf_neg <= 1e-6) continue;  // effectively no negative mass
        const real m = mu - sigma * gaussian_pdf(z) / cdf_neg;
        margin[c] = std::min(m, 0.0);
    }
    return margin;
}

/// Learnable 1x1 channel-mixing map used when the pruned student's channel
/// count no longer matches the teacher's. Trained with the stage, discarded
/// at export.
struct Regressor1x1 {
    Tensor weight;           // [ct, cs, 1, 1]
    std::vector<real> bias;  // [ct]
    Tensor wgrad;
    std::vector<real> bgrad;

    static Regressor1x1 make(int cs, int ct, std::uint64_t seed) {
        Regressor1x1 r;
        r.weight = Tensor(ct, cs, 1, 1);
        Rng rng(mix_seed(seed, 0x0FD));
        r.weight.fill_normal(rng, 0.0, std::sqrt(2.0 / cs));
        r.bias.assign(ct, 0.0);
        r.zero_grad();
        return r;
    }

    void zero_grad() {
        wgrad = Tensor(weight.n(), weight.c(), 1, 1);
        bgrad.assign(bias.size(), 0.0);
    }

    Tensor forward(const Tensor& x) const {
        const int ct = weight.n(), cs = weight.c();
        if (x.c() != cs) throw ShapeError("regressor: input channel mismatch");
        Tensor y(x.n(), ct, x.h(), x.w());
        const int hw = x.h() * x.w();
        using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const RowMat> wm(weight.data(), ct, csize());
        for (int n = 0; n < x.n(); ++n) {
            Eigen::Map<const RowMat> xm(x.plane(n, 0), cs, hw);
            Eigen::Map<RowMat> ym(y.plane(n, 0), ct, hw);
            ym.noalias() = wm * xm;
            for (int c = 0; c < ct; ++c) ym.row(c).array() += bias[c];
        }
        return y;
    }

    /// Accumulates parameter gradients, returns gradient w.r.t. the input.
    Tensor backward(const Tensor& x, const Tensor& dy) {
        const int ct = weight.n(), cs = weight.c();
        const int hw = x.h() * x.w();
        Tensor dx(x.n(), x.c(), x.h(), x.w());
        using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const RowMat> wm(weight.data(), ct, cs);
        Eigen::Map<RowMat> dwm(wgrad.data(), ct, cs);
        for (int n = 0; n < x.n(); ++n) {
            Eigen::Map<const RowMat> xm(x.plane(n, 0), cs, hw);
            Eigen::Map<const RowMat> dym(dy.plane(n, 0), ct, hw);
            dwm.noalias() += dym * xm.transpose();
            for (int c = 0; c < ct; ++c) bgrad[c] += dym.row(c).sum();
            Eigen::Map<RowMat> dxm(dx.plane(n, 0), cs, hw);
            dxm.noalias() = wm.transpose() * dym;
        }
        return dx;
    }

private:
    int csize() const { return weight.c(); }
};

/// Partial L2: elements where the regressed student already sits below a
/// non-positive target contribute nothing.
inline real ofd_loss(const Tensor& ft_pre_relu, const Tensor& fs, const std::vector<real>& margin,
                     const Regressor1x1* regressor = nullptr) {
    const Tensor s = regressor ? regressor->forward(fs) : fs;
    if (!s.same_shape(ft_pre_relu))
        throw ShapeError("ofd_loss: post-regressor shape mismatch");
    if (static_cast<int>(margin.size()) != ft_pre_relu.c())
        throw ShapeError("ofd_loss: margin length mismatch");
    const int hw = ft_pre_relu.h() * ft_pre_relu.w();
    real sum = 0.0;
    for (int n = 0; n < ft_pre_relu.n(); ++n) {
        for (int c = 0; c < ft_pre_relu.c(); ++c) {
            const real* tp = ft_pre_relu.plane(n, c);
            const real* sp = s.plane(n, c);
            const real m = margin[c];
            for (int k = 0; k < hw; ++k) {
                const real t = std::max(tp[k], m);
                if (sp[k] <= t && t <= 0.0) continue;
                const real d = t - sp[k];
                sum += d * d;
            }
        }
    }
    return sum / static_cast<real>(ft_pre_relu.size());
}

inline real ofd_loss_grad(const Tensor& ft_pre_relu, const Tensor& fs,
                          const std::vector<real>& margin, Tensor& d_fs,
                          Regressor1x1* regressor = nullptr) {
    const Tensor s = regressor ? regressor->forward(fs) : fs;
    if (!s.same_shape(ft_pre_relu))
        throw ShapeError("ofd_loss: post-regressor shape mismatch");
    if (static_cast<int>(margin.size()) != ft_pre_relu.c())
        throw ShapeError("ofd_loss: margin length mismatch");
    const int hw = ft_pre_relu.h() * ft_pre_relu.w();
    const real inv_n = 1.0 / static_cast<real>(ft_pre_relu.size());
    Tensor ds(s.n(), s.c(), s.h(), s.w());
    real sum = 0.0;
    for (int n = 0; n < ft_pre_relu.n(); ++n) {
        for (int c = 0; c < ft_pre_relu.c(); ++c) {
            const real* tp = ft_pre_relu.plane(n, c);
            const real* sp = s.plane(n, c);
            real* dp = ds.plane(n, c);
            const real m = margin[c];
            for (int k = 0; k < hw; ++k) {
                const real t = std::max(tp[k], m);
                if (sp[k] <= t && t <= 0.0) continue;
                const real d = t - sp[k];
                sum += d * d;
                dp[k] = 2.0 * (sp[k] - t) * inv_n;
            }
        }
    }
    d_fs = regressor ? regressor->backward(fs, ds) : std::move(ds);
    return sum * inv_n;
}

// ---------------------------------------------------------------------------
// SPKD: row-normalized pairwise similarity (Gram) matrices
// ---------------------------------------------------------------------------

struct SpkdKinds {
    bool spatial = true;
    bool channel = true;
};

namespace detail {

inline void row_normalize(Eigen::MatrixXd& g, std::vector<real>* norms = nullptr) {
    if (norms) norms->assign(static_cast<std::size_t>(g.rows()), 0.0);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const real norm = g.row(r).norm();
        if (norms) (*norms)[static_cast<std::size_t>(r)] = norm;
        if (norm > 0.0) g.row(r) /= norm;
        else g.row(r).setZero();  // degenerate rows normalize to zero
    }
}

inline Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
channel_matrix(const Tensor& f, int sample) {
    return {f.plane(sample, 0), f.c(), static_cast<Eigen::Index>(f.h()) * f.w()};
}

}  // namespace detail

inline void spkd_check(const Tensor& ft, const Tensor& fs, const SpkdKinds& kinds) {
    if (ft.n() != fs.n() || ft.h() != fs.h() || ft.w() != fs.w())
        throw ShapeError("spkd_loss: batch/spatial size mismatch");
    if (!kinds.spatial && !kinds.channel)
        throw ConfigError("spkd_loss: no similarity kind requested");
    if (kinds.channel && ft.c() != fs.c())
        throw ConfigError("spkd_loss: channel similarity needs equal channel counts");
}

namespace detail {

// Spatial-similarity terms without materializing the HW x HW Gram matrices.
// With A the C x HW channel matrix, row r of G = A^T A has squared norm
// a_r^T (A A^T) a_r and the teacher/student row dot products reduce through
// the C x C matrix K = At As^T, so every quantity needs only C x C
// intermediates and C x HW products.
struct SpatialSimilarity {
    Eigen::VectorXd nt2, ns2, q;  // per-row squared norms and cross dots
    Eigen::MatrixXd K, Bs, D;     // K = At*As^T, Bs = (As As^T) As, D = K^T At
    int rows = 0;

    template <class MatT, class MatS>
    void compute(const MatT& At, const MatS& As) {
        rows = static_cast<int>(At.cols());
        const Eigen::MatrixXd Mt = At * At.transpose();
        const Eigen::MatrixXd Ms = As * As.transpose();
        K = At * As.transpose();
        const Eigen::MatrixXd Bt = Mt * At;
        Bs = Ms * As;
        D = K.transpose() * At;
        nt2 = (At.cwiseProduct(Bt)).colwise().sum().cwiseMax(0.0);
        ns2 = (As.cwiseProduct(Bs)).colwise().sum().cwiseMax(0.0);
        q = (As.cwiseProduct(D)).colwise().sum();
    }

    real value() const {
        const real e = static_cast<real>(rows) * rows;
        real sum = 0.0;
        for (int r = 0; r < rows; ++r) {
            const real nt = std::sqrt(nt2[r]);
            const real ns = std::sqrt(ns2[r]);
            if (nt > 0.0) sum += 1.0;
            if (ns > 0.0) sum += 1.0;
            if (nt > 0.0 && ns > 0.0) sum -= 2.0 * q[r] / (nt * ns);
        }
        return sum / e;
    }

    template <class MatT, class MatS>
    Eigen::MatrixXd gradient(const MatT& At, const MatS& As) const {
        const real e = static_cast<real>(rows) * rows;
        Eigen::VectorXd w(rows), u(rows);
        for (int r = 0; r < rows; ++r) {
            const real nt = std::sqrt(nt2[r]);
            const real ns = std::sqrt(ns2[r]);
            if (nt > 0.0 && ns > 0.0) {
                w[r] = -2.0 / (e * nt * ns);
                u[r] = q[r] / (e * nt * ns * ns * ns);
            } else {
                w[r] = 0.0;
                u[r] = 0.0;
            }
        }
        const Eigen::MatrixXd As_w = As * w.asDiagonal();
        const Eigen::MatrixXd As_u = As * u.asDiagonal();
        Eigen::MatrixXd dA = (As_w * At.transpose()) * At;
        dA += D * w.asDiagonal();
        dA += 2.0 * (Bs * u.asDiagonal());
        dA += 2.0 * ((As_u * As.transpose()) * As);
        return dA;
    }
};

// direct path for the small C x C channel Gram
inline real channel_similarity(const Eigen::MatrixXd& gt_raw, Eigen::MatrixXd gs,
                               Eigen::MatrixXd* d_gs_raw = nullptr) {
    Eigen::MatrixXd gt = gt_raw;
    std::vector<real> norms;
    row_normalize(gt);
    const Eigen::MatrixXd gs_raw = gs;
    row_normalize(gs, &norms);
    const real inv_e = 1.0 / static_cast<real>(gs.size());
    const real value = (gt - gs).squaredNorm() * inv_e;
    if (d_gs_raw) {
        const Eigen::MatrixXd dgn = 2.0 * (gs - gt) * inv_e;
        d_gs_raw->resize(gs.rows(), gs.cols());
        for (Eigen::Index r = 0; r < gs.rows(); ++r) {
            const real norm = norms[static_cast<std::size_t>(r)];
            if (norm <= 0.0) {
                d_gs_raw->row(r).setZero();
                continue;
            }
            const real dot = dgn.row(r).dot(gs.row(r));
            d_gs_raw->row(r) = (dgn.row(r) - dot * gs.row(r)) / norm;
        }
    }
    return value;
}

}  // namespace detail

inline real spkd_loss(const Tensor& ft, const Tensor& fs, const SpkdKinds& kinds = {}) {
    spkd_check(ft, fs, kinds);
    const int B = ft.n();
    real total = 0.0;
    detail::SpatialSimilarity sim;
    for (int b = 0; b < B; ++b) {
        auto At = detail::channel_matrix(ft, b);
        auto As = detail::channel_matrix(fs, b);
        if (kinds.spatial) {
            sim.compute(At, As);
            total += sim.value();
        }
        if (kinds.channel) {
            total += detail::channel_similarity(Eigen::MatrixXd(At * At.transpose()),
                                                Eigen::MatrixXd(As * As.transpose()));
        }
    }
    return total / static_cast<real>(B);
}

inline real spkd_loss_grad(const Tensor& ft, const Tensor& fs, Tensor& d_fs,
                           const SpkdKinds& kinds = {}) {
    spkd_check(ft, fs, kinds);
    const int B = ft.n();
    d_fs = Tensor(fs.n(), fs.c(), fs.h(), fs.w());
    const int hw = fs.h() * fs.w();
    real total = 0.0;
    detail::SpatialSimilarity sim;
    for (int b = 0; b < B; ++b) {
        auto At = detail::channel_matrix(ft, b);
        auto As = detail::channel_matrix(fs, b);
        Eigen::MatrixXd dA = Eigen::MatrixXd::Zero(fs.c(), hw);
        if (kinds.spatial) {
            sim.compute(At, As);
            total += sim.value();
            dA += sim.gradient(At, As);
        }
        if (kinds.channel) {
            Eigen::MatrixXd dg;
            total += detail::channel_similarity(Eigen::MatrixXd(At * At.transpose()),
                                                Eigen::MatrixXd(As * As.transpose()), &dg);
            dA += (dg + dg.transpose()) * As;
        }
        for (int c = 0; c < fs.c(); ++c) {
            real* out = d_fs.plane(b, c);
            for (int k = 0; k < hw; ++k) out[k] = dA(c, k) / static_cast<real>(B);
        }
    }
    return total / static_cast<real>(B);
}

// ---------------------------------------------------------------------------
// sparsity penalty and composite stage losses
// ---------------------------------------------------------------------------

/// L1 norm of every BN scaling factor in the network.
inline real sparsity_penalty(const NetworkGraph& net) {
    real sum = 0.0;
    for (const auto& spec : net.layers) {
        if (spec.kind != LayerKind::bn) continue;
        for (real g : net.bn(spec.id).gamma) sum += std::abs(g);
    }
    return sum;
}

struct TermBreakdown {
    real total = 0.0;
    std::vector<std::pair<std::string, real>> terms;

    real term(const std::string& name) const {
        for (const auto& [k, v] : terms)
            if (k == name) return v;
        throw std::invalid_argument("no loss term named " + name);
    }
};

/// Per-run distillation state: method plus the OFD teacher margins and
/// student-side regressors, keyed by the tap layer id.
struct KDContext {
    KDMethod method;
    std::map<std::string, std::vector<real>> margins;
    std::map<std::string, Regressor1x1> regressors;

    Regressor1x1* regressor_for(const std::string& site) {
        auto it = regressors.find(site);
        return it == regressors.end() ? nullptr : &it->second;
    }
};

/// Resolves a distillation site (stage name such as "enc2", or an explicit
/// layer id) to the layer whose activation the KD loss taps. NST and SPKD
/// compare stage outputs; OFD compares pre-ReLU (BN) responses.
inline std::string kd_tap_layer(const NetworkGraph& g, const std::string& site,
                                KDMethod::Name method) {
    const std::string suffix = method == KDMethod::Name::OFD ? "_bn" : "_pool";
    if (g.has_layer(site + suffix)) return site + suffix;
    if (g.has_layer(site)) return site;
    throw ConfigError("distillation site not found in graph: " + site);
}

inline void check_eta_scope(const NetworkGraph& g, const std::vector<std::string>& eta,
                            KDMethod::Name method, bool allow_decoder) {
    for (const auto& site : eta) {
        const std::string id = kd_tap_layer(g, site, method);
        if (!allow_decoder && g.layer(id).stage == StageTag::decoder)
            throw ConfigError("distillation site " + site + " is not in the encoder");
    }
}

struct StageLossWeights {
    real alpha_gt = 1.0;       // lambda1 / w1
    real alpha_teacher = 0.5;  // lambda2 / w2
    real sparsity = 1e-4;      // lambda3; 0 in the training stage
    real kd = 1.0;             // lambda4 / w3; see kd_weight_auto
    bool kd_weight_auto = true;
    real eps_sq = 1e-12;
};

/// Method defaults keeping the loss terms at comparable magnitudes.
inline real default_kd_weight(KDMethod::Name m, int site_channels) {
    switch (m) {
        case KDMethod::Name::NST: return 10.0;
        case KDMethod::Name::OFD: return 1e-3 * site_channels;
        case KDMethod::Name::SPKD: return 1.0;
    }
    return 1.0;
}

namespace detail {

inline real kd_site_value(KDContext& kd, const std::string& tap, const Tensor& ft,
                          const Tensor& fs) {
    switch (kd.method.name) {
        case KDMethod::Name::NST:
            return nst_loss(ft, fs, kd.method.nst_degree, kd.method.nst_bias);
        case KDMethod::Name::OFD: {
            auto it = kd.margins.find(tap);
            if (it == kd.margins.end()) throw ConfigError("ofd: no margin for site " + tap);
            return ofd_loss(ft, fs, it->second, kd.regressor_for(tap));
        }
        case KDMethod::Name::SPKD: {
            SpkdKinds kinds{kd.method.spkd_spatial, kd.method.spkd_channel && ft.c() == fs.c()};
            return spkd_loss(ft, fs, kinds);
        }
    }
    throw InvariantViolation("unhandled kd method");
}

inline real kd_site_grad(KDContext& kd, const std::string& tap, const Tensor& ft, const Tensor& fs,
                         Tensor& d_fs) {
    switch (kd.method.name) {
        case KDMethod::Name::NST:
            return nst_loss_grad(ft, fs, d_fs, kd.method.nst_degree, kd.method.nst_bias);
        case KDMethod::Name::OFD: {
            auto it = kd.margins.find(tap);
            if (it == kd.margins.end()) throw ConfigError("ofd: no margin for site " + tap);
            return ofd_loss_grad(ft, fs, it->second, d_fs, kd.regressor_for(tap));
        }
        case KDMethod::Name::SPKD: {
            SpkdKinds kinds{kd.method.spkd_spatial, kd.method.spkd_channel && ft.c() == fs.c()};
            return spkd_loss_grad(ft, fs, d_fs, kinds);
        }
    }
    throw InvariantViolation("unhandled kd method");
}

inline const FeatureMap& find_feature(const std::vector<FeatureMap>& fm, const std::string& id) {
    for (const auto& f : fm)
        if (f.layer_id == id) return f;
    throw ConfigError("missing feature map for site " + id);
}

}  // namespace detail

/// Pruning-stage loss L_P: supervised alpha term, teacher-mimic alpha term,
/// L1 sparsity over all BN scaling factors, and the encoder distillation sum.
/// Teacher inputs are treated as constants.
inline TermBreakdown pruning_stage_loss(const Tensor& student_out, const Tensor& teacher_out,
                                        const Tensor& gt, const Tensor& unknown_mask,
                                        const std::vector<FeatureMap>& features_t,
                                        const std::vector<FeatureMap>& features_s,
                                        const NetworkGraph& net, const StageLossWeights& w,
                                        const std::vector<std::string>& eta, KDContext& kd,
                                        bool allow_decoder_eta = false) {
    check_eta_scope(net, eta, kd.method.name, allow_decoder_eta);
    TermBreakdown out;
    const real l_gt = alpha_prediction_loss(student_out, gt, unknown_mask, w.eps_sq);
    const real l_t = alpha_prediction_loss(student_out, teacher_out, unknown_mask, w.eps_sq);
    const real l_sp = sparsity_penalty(net);
    out.terms.push_back({"alpha_gt", l_gt});
    out.terms.push_back({"alpha_teacher", l_t});
    out.terms.push_back({"sparsity", l_sp});
    real kd_total = 0.0;
    for (const auto& site : eta) {
        const std::string tap = kd_tap_layer(net, site, kd.method.name);
        const Tensor& ft = detail::find_feature(features_t, tap).data;
        const Tensor& fs = detail::find_feature(features_s, tap).data;
        const real v = detail::kd_site_value(kd, tap, ft, fs);
        const real weight = w.kd_weight_auto ? default_kd_weight(kd.method.name, ft.c()) : w.kd;
        out.terms.push_back({"kd/" + site, v * weight});
        kd_total += v * weight;
    }
    out.terms.push_back({"kd_total", kd_total});
    out.total = w.alpha_gt * l_gt + w.alpha_teacher * l_t + w.sparsity * l_sp + kd_total;
    return out;
}

/// Training-stage loss L_T: same shape as L_P without the sparsity term.
inline TermBreakdown training_stage_loss(const Tensor& pruned_student_out,
                                         const Tensor& teacher_out, const Tensor& gt,
                                         const Tensor& unknown_mask,
                                         const std::vector<FeatureMap>& features_t,
                                         const std::vector<FeatureMap>& features_ps,
                                         const NetworkGraph& net, const StageLossWeights& w,
                                         const std::vector<std::string>& eta, KDContext& kd,
                                         bool allow_decoder_eta = false) {
    check_eta_scope(net, eta, kd.method.name, allow_decoder_eta);
    TermBreakdown out;
    const real l_gt = alpha_prediction_loss(pruned_student_out, gt, unknown_mask, w.eps_sq);
    const real l_t = alpha_prediction_loss(pruned_student_out, teacher_out, unknown_mask, w.eps_sq);
    out.terms.push_back({"alpha_gt", l_gt});
    out.terms.push_back({"alpha_teacher", l_t});
    real kd_total = 0.0;
    for (const auto& site : eta) {
        const std::string tap = kd_tap_layer(net, site, kd.method.name);
        const Tensor& ft = detail::find_feature(features_t, tap).data;
        const Tensor& fs = detail::find_feature(features_ps, tap).data;
        const real v = detail::kd_site_value(kd, tap, ft, fs);
        const real weight = w.kd_weight_auto ? default_kd_weight(kd.method.name, ft.c()) : w.kd;
        out.terms.push_back({"kd/" + site, v * weight});
        kd_total += v * weight;
    }
    out.terms.push_back({"kd_total", kd_total});
    out.total = w.alpha_gt * l_gt + w.alpha_teacher * l_t + kd_total;
    return out;
}

/// Gradients of a composite stage loss w.r.t. the student's output and
/// tapped features. The sparsity subgradient is applied by the caller
/// directly on the BN gamma gradients (weight = StageLossWeights::sparsity).
struct StageLossGrads {
    TermBreakdown breakdown;
    Tensor d_student_out;
    std::map<std::string, Tensor> d_features;  // keyed by tap layer id
};

inline StageLossGrads stage_loss_grad(const Tensor& student_out, const Tensor& teacher_out,
                                      const Tensor& gt, const Tensor& unknown_mask,
                                      const std::vector<FeatureMap>& features_t,
                                      const std::vector<FeatureMap>& features_s,
                                      const NetworkGraph& net, const StageLossWeights& w,
                                      const std::vector<std::string>& eta, KDContext& kd,
                                      bool include_sparsity, bool allow_decoder_eta = false) {
    check_eta_scope(net, eta, kd.method.name, allow_decoder_eta);
    StageLossGrads out;

    Tensor d_gt, d_t;
    const real l_gt = alpha_prediction_loss_grad(student_out, gt, unknown_mask, d_gt, w.eps_sq);
    const real l_t =
        alpha_prediction_loss_grad(student_out, teacher_out, unknown_mask, d_t, w.eps_sq);
    out.d_student_out = Tensor(student_out.n(), student_out.c(), student_out.h(), student_out.w());
    for (std::size_t i = 0; i < d_gt.size(); ++i)
        out.d_student_out[i] = w.alpha_gt * d_gt[i] + w.alpha_teacher * d_t[i];

    out.breakdown.terms.push_back({"alpha_gt", l_gt});
    out.breakdown.terms.push_back({"alpha_teacher", l_t});
    real total = w.alpha_gt * l_gt + w.alpha_teacher * l_t;

    if (include_sparsity) {
        const real l_sp = sparsity_penalty(net);
        out.breakdown.terms.push_back({"sparsity", l_sp});
        total += w.sparsity * l_sp;
    }

    real kd_total = 0.0;
    for (const auto& site : eta) {
        const std::string tap = kd_tap_layer(net, site, kd.method.name);
        const Tensor& ft = detail::find_feature(features_t, tap).data;
        const Tensor& fs = detail::find_feature(features_s, tap).data;
        Tensor d_fs;
        const real v = detail::kd_site_grad(kd, tap, ft, fs, d_fs);
        const real weight = w.kd_weight_auto ? default_kd_weight(kd.method.name, ft.c()) : w.kd;
        d_fs *= weight;
        kd_total += v * weight;
        out.breakdown.terms.push_back({"kd/" + site, v * weight});
        auto [it, inserted] = out.d_features.try_emplace(tap, std::move(d_fs));
        if (!inserted) it->second += d_fs;
    }
    out.breakdown.terms.push_back({"kd_total", kd_total});
    out.breakdown.total = total + kd_total;
    return out;
}

}  // namespace slimmat
