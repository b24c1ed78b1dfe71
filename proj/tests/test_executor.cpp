#include <catch2/catch_amalgamated.hpp>

#include "slimmat/executor.hpp"

using namespace slimmat;

namespace {

// scalar probe loss: sum of fixed random weights times selected activations
struct Probe {
    std::string layer;
    Tensor weights;
};

real probe_loss(Executor& ex, const Tensor& x, const std::vector<Probe>& probes, ExecMode mode) {
    ex.forward(x, mode);
    real total = 0.0;
    for (const auto& p : probes) {
        const Tensor& a = ex.activation(p.layer);
        for (std::size_t i = 0; i < a.size(); ++i) total += a[i] * p.weights[i];
    }
    return total;
}

void probe_backward(Executor& ex, const std::vector<Probe>& probes) {
    const Tensor& out = ex.output();
    Tensor d_out(out.n(), out.c(), out.h(), out.w());
    std::map<std::string, Tensor> feature_grads;
    for (const auto& p : probes) feature_grads.emplace(p.layer, p.weights);
    ex.backward(d_out, feature_grads);
}

}  // namespace

TEST_CASE("forward: shapes, range, determinism") {
    auto g = build_mini_matting_net(0.5, 17);
    Executor ex(g);
    Rng rng(1);
    Tensor x(2, 4, 32, 32);
    x.fill_uniform(rng, 0.0, 1.0);

    const Tensor y = ex.forward(x, ExecMode::eval);
    REQUIRE(y.n() == 2);
    REQUIRE(y.c() == 1);
    REQUIRE(y.h() == 32);
    REQUIRE(y.w() == 32);
    for (real v : y.raw()) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }

    Executor ex2(g);
    const Tensor y2 = ex2.forward(x, ExecMode::eval);
    REQUIRE(y.raw() == y2.raw());  // bit-identical

    Tensor bad(2, 3, 32, 32);
    REQUIRE_THROWS_AS(ex.forward(bad, ExecMode::eval), ShapeError);

    Tensor odd(1, 4, 30, 30);
    REQUIRE_THROWS_AS(ex.forward(odd, ExecMode::eval), std::invalid_argument);
}

TEST_CASE("layer primitives behave") {
    auto g = build_mini_matting_net(0.5, 23);
    Executor ex(g);
    Rng rng(2);
    Tensor x(1, 4, 32, 32);
    x.fill_uniform(rng, 0.0, 1.0);
    ex.forward(x, ExecMode::train);

    const Tensor& relu = ex.activation("enc1_relu");
    for (real v : relu.raw()) REQUIRE(v >= 0.0);

    const Tensor& pool = ex.activation("enc1_pool");
    REQUIRE(pool.h() == 16);
    const Tensor& pre = ex.activation("enc1_relu");
    for (int c = 0; c < pool.c(); ++c)
        for (int h = 0; h < 4; ++h)
            for (int w = 0; w < 4; ++w) {
                real m = -1e30;
                for (int dh = 0; dh < 2; ++dh)
                    for (int dw = 0; dw < 2; ++dw)
                        m = std::max(m, pre.at(0, c, 2 * h + dh, 2 * w + dw));
                REQUIRE(pool.at(0, c, h, w) == m);
            }

    const Tensor& up = ex.activation("dec4_up");
    const Tensor& bottleneck = ex.activation("enc4_pool");
    REQUIRE(up.h() == 2 * bottleneck.h());
    REQUIRE(up.at(0, 0, 3, 5) == bottleneck.at(0, 0, 1, 2));

    const Tensor& cat = ex.activation("dec4_cat");
    const Tensor& skip = ex.activation("enc4_relu");
    REQUIRE(cat.c() == skip.c() + up.c());
    REQUIRE(cat.at(0, 0, 1, 1) == skip.at(0, 0, 1, 1));
    REQUIRE(cat.at(0, skip.c(), 1, 1) == up.at(0, 0, 1, 1));
}

TEST_CASE("network gradients match finite differences") {
    auto g = build_mini_matting_net(0.25, 31);
    Executor ex(g);
    Rng rng(5);
    Tensor x(2, 4, 16, 16);
    x.fill_uniform(rng, 0.0, 1.0);

    auto make_probes = [&](ExecMode mode) {
        ex.forward(x, mode);
        std::vector<Probe> probes;
        for (const char* layer : {"out_conv", "enc2_pool"}) {
            const Tensor& a = ex.activation(layer);
            Probe p{layer, Tensor(a.n(), a.c(), a.h(), a.w())};
            p.weights.fill_normal(rng, 0.0, 1.0);
            probes.push_back(std::move(p));
        }
        return probes;
    };

    // ReLU / maxpool kinks make a few finite-difference probes land on
    // non-differentiable points; allow a small outlier fraction there.
    const real h = 1e-5;
    for (ExecMode mode : {ExecMode::train, ExecMode::eval}) {
        auto probes = make_probes(mode);
        probe_loss(ex, x, probes, mode);
        ex.zero_grad();
        probe_backward(ex, probes);

        std::vector<real> errors;
        Rng pick(77);
        for (auto& p : ex.parameters()) {
            for (int trial = 0; trial < 4; ++trial) {
                const std::size_t i =
                    static_cast<std::size_t>(pick.uniform_int(0, static_cast<int>(p.value->size()) - 1));
                const real analytic = (*p.grad)[i];
                const real saved = (*p.value)[i];
                (*p.value)[i] = saved + h;
                const real lp = probe_loss(ex, x, probes, mode);
                (*p.value)[i] = saved - h;
                const real lm = probe_loss(ex, x, probes, mode);
                (*p.value)[i] = saved;
                const real numeric = (lp - lm) / (2 * h);
                const real scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
                errors.push_back(std::abs(analytic - numeric) / scale);
            }
        }
        std::sort(errors.begin(), errors.end());
        REQUIRE(errors.back() < 5e-2);
        const std::size_t q98 = static_cast<std::size_t>(0.98 * (errors.size() - 1));
        REQUIRE(errors[q98] < 1e-3);
    }
}

TEST_CASE("clamp zeroes gradients outside [0,1]") {
    auto g = build_mini_matting_net(0.25, 37);
    // push the final conv way out of range
    auto& oc = g.conv_weights.at("out_conv");
    oc.bias.assign(1, 50.0);
    Executor ex(g);
    Rng rng(6);
    Tensor x(1, 4, 16, 16);
    x.fill_uniform(rng, 0.0, 1.0);
    const Tensor& y = ex.forward(x, ExecMode::train);
    for (real v : y.raw()) REQUIRE(v == 1.0);

    Tensor d(y.n(), y.c(), y.h(), y.w(), 1.0);
    ex.zero_grad();
    ex.backward(d);
    REQUIRE(ex.max_abs_param_grad() == 0.0);
}
