#pragma once

#include <fstream>

#include "slimmat/config.hpp"
#include "slimmat/data.hpp"
#include "slimmat/losses.hpp"
#include "slimmat/metrics.hpp"
#include "slimmat/optimizer.hpp"

namespace slimmat {

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

struct Batch {
    Tensor input;  // B x 4 (RGB + trimap)
    Tensor gt;     // B x 1
    Tensor mask;   // B x 1, unknown region
    std::vector<int> indices;
};

inline Batch assemble_batch(const std::vector<TrainingSample>& data, const std::vector<int>& idx) {
    const int B = static_cast<int>(idx.size());
    const TrainingSample& first = data[static_cast<std::size_t>(idx[0])];
    const int h = first.image.h(), w = first.image.w();
    Batch b;
    b.indices = idx;
    b.input = Tensor(B, 4, h, w);
    b.gt = Tensor(B, 1, h, w);
    b.mask = Tensor(B, 1, h, w);
    for (int n = 0; n < B; ++n) {
        const TrainingSample& s = data[static_cast<std::size_t>(idx[n])];
        if (s.image.h() != h || s.image.w() != w)
            throw ShapeError("assemble_batch: mixed sample sizes");
        const int hw = h * w;
        for (int c = 0; c < 3; ++c)
            std::copy(s.image.plane(0, c), s.image.plane(0, c) + hw, b.input.plane(n, c));
        std::copy(s.trimap.plane(0, 0), s.trimap.plane(0, 0) + hw, b.input.plane(n, 3));
        std::copy(s.alpha.plane(0, 0), s.alpha.plane(0, 0) + hw, b.gt.plane(n, 0));
        real* m = b.mask.plane(n, 0);
        const real* t = s.trimap.plane(0, 0);
        for (int k = 0; k < hw; ++k) m[k] = trimap_unknown(t[k]) ? 1.0 : 0.0;
    }
    return b;
}

inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng& rng) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    const int bs = std::min(batch_size, n);
    for (int at = 0; at + bs <= n; at += bs)
        batches.emplace_back(order.begin() + at, order.begin() + at + bs);
    return batches;  // remainder dropped; with n < batch_size one full-set batch
}

// ---------------------------------------------------------------------------
// per-step loss logging (CSV rows: step, term, value)
// ---------------------------------------------------------------------------

struct LossLog {
    struct Row {
        long step;
        std::string term;
        real value;
    };
    std::vector<Row> rows;

    bool empty() const { return rows.empty(); }

    void add(long step, const TermBreakdown& b) {
        rows.push_back({step, "total", b.total});
        for (const auto& [name, value] : b.terms) rows.push_back({step, name, value});
    }
    void add_scalar(long step, const std::string& term, real value) {
        rows.push_back({step, term, value});
    }

    real last(const std::string& term) const {
        for (auto it = rows.rbegin(); it != rows.rend(); ++it)
            if (it->term == term) return it->value;
        throw std::invalid_argument("no logged term " + term);
    }

    void write_csv(const std::filesystem::path& path) const {
        std::ofstream os(path);
        os << "step,term,value\n";
        for (const auto& r : rows) os << r.step << "," << r.term << "," << r.value << "\n";
    }
};

/// Fraction of BN scaling factors with |gamma| below the near-zero threshold.
inline real near_zero_gamma_fraction(const NetworkGraph& g, real threshold = 1e-2) {
    std::size_t total = 0, small = 0;
    for (const auto& spec : g.layers) {
        if (spec.kind != LayerKind::bn) continue;
        for (real v : g.bn(spec.id).gamma) {
            ++total;
            if (std::abs(v) < threshold) ++small;
        }
    }
    return total == 0 ? 0.0 : static_cast<real>(small) / static_cast<real>(total);
}

// ---------------------------------------------------------------------------
// frozen-teacher activation cache
// ---------------------------------------------------------------------------

/// Teacher outputs and tapped features for the whole (fixed-size) dataset,
/// computed once in eval mode. Valid as long as training consumes whole
/// images; random cropping would invalidate it.
struct TeacherCache {
    Tensor outputs;
    std::map<std::string, Tensor> features;

    Tensor gather_outputs(const std::vector<int>& idx) const { return gather(outputs, idx); }
    Tensor gather_feature(const std::string& tap, const std::vector<int>& idx) const {
        return gather(features.at(tap), idx);
    }

    static Tensor gather(const Tensor& all, const std::vector<int>& idx) {
        Tensor out(static_cast<int>(idx.size()), all.c(), all.h(), all.w());
        const std::size_t per = static_cast<std::size_t>(all.c()) * all.h() * all.w();
        for (std::size_t n = 0; n < idx.size(); ++n)
            std::copy(all.plane(static_cast<int>(idx[n]), 0),
                      all.plane(static_cast<int>(idx[n]), 0) + per,
                      out.plane(static_cast<int>(n), 0));
        return out;
    }
};

inline TeacherCache build_teacher_cache(Executor& teacher, const std::vector<TrainingSample>& data,
                                        const std::vector<std::string>& taps, int batch_size) {
    TeacherCache cache;
    const int n = static_cast<int>(data.size());
    for (int at = 0; at < n; at += batch_size) {
        std::vector<int> idx;
        for (int i = at; i < std::min(n, at + batch_size); ++i) idx.push_back(i);
        const Batch b = assemble_batch(data, idx);
        const Tensor& out = teacher.forward(b.input, ExecMode::eval);
        if (cache.outputs.empty()) cache.outputs = Tensor(n, out.c(), out.h(), out.w());
        const std::size_t per_out = static_cast<std::size_t>(out.c()) * out.h() * out.w();
        for (std::size_t k = 0; k < idx.size(); ++k)
            std::copy(out.plane(static_cast<int>(k), 0), out.plane(static_cast<int>(k), 0) + per_out,
                      cache.outputs.plane(idx[k], 0));
        for (const auto& tap : taps) {
            const Tensor& f = teacher.activation(tap);
            auto [it, fresh] = cache.features.try_emplace(tap);
            if (fresh) it->second = Tensor(n, f.c(), f.h(), f.w());
            const std::size_t per = static_cast<std::size_t>(f.c()) * f.h() * f.w();
            for (std::size_t k = 0; k < idx.size(); ++k)
                std::copy(f.plane(static_cast<int>(k), 0), f.plane(static_cast<int>(k), 0) + per,
                          it->second.plane(idx[k], 0));
        }
    }
    return cache;
}

// ---------------------------------------------------------------------------
// one optimization stage
// ---------------------------------------------------------------------------

struct StageOutcome {
    NetworkGraph net;
    LossLog log;
    real final_loss = 0.0;                     // mean total of the last epoch
    std::vector<real> gamma_near_zero;         // per epoch
    std::map<std::string, Regressor1x1> regressors;  // discarded at export
};

/// Runs one optimization stage over `data`.
///  - teacher == nullptr: plain supervised alpha training (optionally with
///    the sparsity term, which yields network-slimming behaviour).
///  - teacher != nullptr: teacher-mimic alpha term plus feature distillation
///    per cfg; the teacher is evaluated once and cached, so its parameters
///    cannot receive gradients by construction.
/// include_sparsity selects the pruning-stage loss; without it this is the
/// training-stage loss.
inline StageOutcome run_stage(const NetworkGraph& student_init, const NetworkGraph* teacher,
                              const StageConfig& cfg, bool include_sparsity,
                              const std::vector<TrainingSample>& data) {
    if (data.empty()) throw std::invalid_argument("run_stage: empty dataset");

    StageOutcome outcome;
    outcome.net = student_init;
    if (cfg.epochs == 0) return outcome;

    Executor student(student_init);
    auto params = student.parameters();

    // distillation setup
    KDContext kd;
    kd.method = cfg.kd;
    std::vector<std::string> taps;
    std::unique_ptr<Executor> teacher_exec;
    TeacherCache cache;
    const bool use_kd = teacher != nullptr;
    if (use_kd) {
        check_eta_scope(student_init, cfg.eta, cfg.kd.name, cfg.allow_decoder_eta);
        for (const auto& site : cfg.eta) {
            const std::string tap = kd_tap_layer(student_init, site, cfg.kd.name);
            if (!teacher->has_layer(tap))
                throw ConfigError("distillation site " + site + " missing from teacher");
            taps.push_back(tap);
            if (cfg.kd.name == KDMethod::Name::OFD) {
                kd.margins[tap] = compute_ofd_margin(teacher->bn(tap));
                const int ct = teacher->layer(tap).bn_channels;
                const int cs = student_init.layer(tap).bn_channels;
                if (ct != cs)
                    kd.regressors.emplace(
                        tap, Regressor1x1::make(cs, ct, mix_seed(cfg.seed, std::hash<std::string>{}(tap))));
            }
        }
        teacher_exec = std::make_unique<Executor>(*teacher);
        cache = build_teacher_cache(*teacher_exec, data, taps, cfg.batch_size);
    }

    std::vector<AdaptiveOptimizer::AuxParam> aux;
    for (const auto& tap : taps) {
        if (auto* reg = kd.regressor_for(tap)) {
            aux.push_back({&reg->weight.raw(), &reg->wgrad.raw()});
            aux.push_back({&reg->bias, &reg->bgrad});
        }
    }

    const int n = static_cast<int>(data.size());
    const long steps_per_epoch = n / std::min(cfg.batch_size, n);
    AdaptiveOptimizer opt(cfg.learning_rate, steps_per_epoch * cfg.epochs);

    const StageLossWeights weights = cfg.loss_weights(!include_sparsity);
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, 0xE70C0000ull + static_cast<std::uint64_t>(epoch)));
        real epoch_total = 0.0;
        long epoch_steps = 0;
        for (const auto& idx : epoch_batches(n, cfg.batch_size, shuffle_rng)) {
            const Batch b = assemble_batch(data, idx);
            const Tensor& out = student.forward(b.input, ExecMode::train);

            TermBreakdown breakdown;
            Tensor d_out;
            std::map<std::string, Tensor> d_features;
            if (use_kd) {
                const Tensor teacher_out = cache.gather_outputs(idx);
                std::vector<FeatureMap> ft, fs;
                for (const auto& tap : taps) {
                    ft.push_back({cache.gather_feature(tap, idx), tap, FeatureMap::Role::teacher});
                    fs.push_back({student.activation(tap), tap, FeatureMap::Role::student});
                }
                for (const auto& tap : taps)
                    if (auto* reg = kd.regressor_for(tap)) reg->zero_grad();
                auto grads = stage_loss_grad(out, teacher_out, b.gt, b.mask, ft, fs,
                                             student.graph(), weights, cfg.eta, kd,
                                             include_sparsity, cfg.allow_decoder_eta);
                breakdown = std::move(grads.breakdown);
                d_out = std::move(grads.d_student_out);
                d_features = std::move(grads.d_features);
            } else {
                const real l = alpha_prediction_loss_grad(out, b.gt, b.mask, d_out, weights.eps_sq);
                d_out *= weights.alpha_gt;
                breakdown.terms.push_back({"alpha_gt", l});
                breakdown.total = weights.alpha_gt * l;
                if (include_sparsity) {
                    const real sp = sparsity_penalty(student.graph());
                    breakdown.terms.push_back({"sparsity", sp});
                    breakdown.total += weights.sparsity * sp;
                }
            }

            if (!std::isfinite(breakdown.total)) {
                std::string diag = "stage diverged at step " + std::to_string(step) + ":";
                for (const auto& [name, value] : breakdown.terms)
                    if (!std::isfinite(value)) diag += " " + name + "=NaN";
                throw std::runtime_error(diag);
            }

            student.zero_grad();
            student.backward(d_out, d_features);

            if (include_sparsity && weights.sparsity > 0.0) {
                for (const auto& spec : student.graph().layers) {
                    if (spec.kind != LayerKind::bn) continue;
                    const auto& gamma = student.graph().bn(spec.id).gamma;
                    auto& ggrad = student.gamma_grad(spec.id);
                    for (std::size_t c = 0; c < gamma.size(); ++c)
                        ggrad[c] += weights.sparsity * (gamma[c] > 0.0 ? 1.0 : (gamma[c] < 0.0 ? -1.0 : 0.0));
                }
            }

            opt.step(params, aux);

            // the output clamp can hide exploded weights from the loss value,
            // so probe the parameters directly
            real probe = 0.0;
            for (const auto& p : params)
                for (real v : *p.value) probe += v;
            if (!std::isfinite(probe))
                throw std::runtime_error("stage diverged: non-finite parameters after step " +
                                         std::to_string(step));

            outcome.log.add(step, breakdown);
            epoch_total += breakdown.total;
            ++epoch_steps;
            ++step;
        }
        outcome.final_loss = epoch_total / static_cast<real>(epoch_steps);
        outcome.gamma_near_zero.push_back(near_zero_gamma_fraction(student.graph()));
        outcome.log.add_scalar(step - 1, "epoch_mean_total", outcome.final_loss);
        outcome.log.add_scalar(step - 1, "gamma_near_zero", outcome.gamma_near_zero.back());
    }

    outcome.net = student.snapshot();
    outcome.regressors = std::move(kd.regressors);
    return outcome;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    MetricRow aggregate;
    std::vector<MetricRow> per_image;
};

inline EvalResult evaluate_model(const NetworkGraph& net,
                                 const std::vector<TrainingSample>& test_set) {
    if (test_set.empty()) throw std::invalid_argument("evaluate_model: empty test set");
    Executor ex(net);
    EvalResult r;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
        const Batch b = assemble_batch(test_set, {static_cast<int>(i)});
        const Tensor& pred = ex.forward(b.input, ExecMode::eval);
        const TrainingSample& s = test_set[i];
        MetricRow row = eval_metrics(pred, s.alpha, s.trimap);
        r.per_image.push_back(row);
        r.aggregate.mse += row.mse;
        r.aggregate.sad += row.sad;
        r.aggregate.grad += row.grad;
        r.aggregate.conn += row.conn;
    }
    const real inv = 1.0 / static_cast<real>(test_set.size());
    r.aggregate.mse *= inv;
    r.aggregate.sad *= inv;
    r.aggregate.grad *= inv;
    r.aggregate.conn *= inv;
    r.aggregate.params = count_params(net);
    r.aggregate.flops = count_flops(net, test_set[0].image.h(), test_set[0].image.w());
    return r;
}

inline void write_eval_csv(const EvalResult& r, const std::filesystem::path& path) {
    std::ofstream os(path);
    os << "image,mse,sad,grad,conn,params,flops\n";
    for (std::size_t i = 0; i < r.per_image.size(); ++i) {
        const auto& m = r.per_image[i];
        os << i << "," << m.mse << "," << m.sad << "," << m.grad << "," << m.conn << ",,\n";
    }
    const auto& a = r.aggregate;
    os << "aggregate," << a.mse << "," << a.sad << "," << a.grad << "," << a.conn << ","
       << a.params << "," << a.flops << "\n";
}

}  // namespace slimmat
