#pragma once

#include "slimmat/executor.hpp"

namespace slimmat {

/// Momentum-free adaptive first-order step: bias-corrected second-moment
/// scaling (RMSProp family) with a cosine-decayed fixed base step size.
class AdaptiveOptimizer {
public:
    struct AuxParam {
        std::vector<real>* value;
        std::vector<real>* grad;
    };

    AdaptiveOptimizer(double base_lr, long total_steps, double beta2 = 0.99, double eps = 1e-8)
        : base_lr_(base_lr), total_steps_(std::max(1l, total_steps)), beta2_(beta2), eps_(eps) {}

    double current_lr() const {
        const double t = static_cast<double>(step_count_) / static_cast<double>(total_steps_);
        return base_lr_ * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, t)));
    }

    /// One update over the graph parameters plus any auxiliary parameters
    /// (distillation regressors). Slot order must be stable across calls.
    void step(std::vector<Executor::ParamRef>& params, const std::vector<AuxParam>& aux = {}) {
        if (v_.empty()) {
            for (const auto& p : params) v_.emplace_back(p.value->size(), 0.0);
            for (const auto& a : aux) v_aux_.emplace_back(a.value->size(), 0.0);
        }
        if (v_.size() != params.size() || v_aux_.size() != aux.size())
            throw InvariantViolation("optimizer: parameter slot count changed");

        const double lr = current_lr();
        ++step_count_;
        const double bias = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
        auto update = [&](std::vector<real>& value, const std::vector<real>& grad,
                          std::vector<real>& v) {
            if (v.size() != value.size() || grad.size() != value.size())
                throw InvariantViolation("optimizer: parameter size changed");
            for (std::size_t i = 0; i < value.size(); ++i) {
                const real g = grad[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                value[i] -= lr * g / (std::sqrt(v[i] / bias) + eps_);
            }
        };
        for (std::size_t s = 0; s < params.size(); ++s)
            update(*params[s].value, *params[s].grad, v_[s]);
        for (std::size_t s = 0; s < aux.size(); ++s)
            update(*aux[s].value, *aux[s].grad, v_aux_[s]);
    }

    long steps_taken() const { return step_count_; }

private:
    double base_lr_;
    long total_steps_;
    double beta2_;
    double eps_;
    long step_count_ = 0;
    std::vector<std::vector<real>> v_;
    std::vector<std::vector<real>> v_aux_;
};

}  // namespace slimmat
