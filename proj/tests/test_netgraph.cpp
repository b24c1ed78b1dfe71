#include <catch2/catch_amalgamated.hpp>

#include "slimmat/executor.hpp"
#include "slimmat/graph_io.hpp"
#include "slimmat/netgraph.hpp"

using namespace slimmat;

namespace {

// independent per-layer arithmetic for the preset architecture
struct LedgerRow {
    int k, cin, cout;
    bool bias;
    int conv_res;  // spatial resolution the conv runs at (for a 64x64 input)
};

std::vector<LedgerRow> preset_ledger(const std::array<int, 4>& c) {
    return {
        {3, 4, c[0], false, 64},               // enc1
        {3, c[0], c[1], false, 32},            // enc2
        {3, c[1], c[2], false, 16},            // enc3
        {3, c[2], c[3], false, 8},             // enc4
        {3, c[3] + c[3], c[3], false, 8},      // dec4
        {3, c[2] + c[3], c[2], false, 16},     // dec3
        {3, c[1] + c[2], c[1], false, 32},     // dec2
        {3, c[0] + c[1], c[0], false, 64},     // dec1
        {3, c[0], 1, true, 64},                // out
    };
}

std::size_t ledger_params(const std::array<int, 4>& c) {
    std::size_t p = 0;
    for (const auto& r : preset_ledger(c)) {
        p += static_cast<std::size_t>(r.k) * r.k * r.cin * r.cout;
        if (r.bias) p += static_cast<std::size_t>(r.cout);
    }
    const int bns[8] = {c[0], c[1], c[2], c[3], c[3], c[2], c[1], c[0]};
    for (int b : bns) p += 2 * static_cast<std::size_t>(b);
    return p;
}

std::size_t ledger_flops_64(const std::array<int, 4>& c) {
    std::size_t f = 0;
    const auto rows = preset_ledger(c);
    for (const auto& r : rows) {
        const std::size_t hw = static_cast<std::size_t>(r.conv_res) * r.conv_res;
        f += 2ull * r.k * r.k * r.cin * r.cout * hw;  // conv
        if (r.bias) f += static_cast<std::size_t>(r.cout) * hw;
    }
    // elementwise ops: bn + relu at conv resolution, pool outputs, upsample outputs, clamp
    const int enc_res[4] = {64, 32, 16, 8};
    for (int i = 0; i < 4; ++i) {
        const std::size_t hw = static_cast<std::size_t>(enc_res[i]) * enc_res[i];
        f += 2ull * c[i] * hw;                                       // bn + relu
        f += static_cast<std::size_t>(c[i]) * (enc_res[i] / 2) * (enc_res[i] / 2);  // pool
    }
    const int dec_res[4] = {8, 16, 32, 64};
    const int dec_width[4] = {c[3], c[2], c[1], c[0]};
    const int up_width[4] = {c[3], c[3], c[2], c[1]};
    for (int i = 0; i < 4; ++i) {
        const std::size_t hw = static_cast<std::size_t>(dec_res[i]) * dec_res[i];
        f += static_cast<std::size_t>(up_width[i]) * hw;  // upsample
        f += 2ull * dec_width[i] * hw;                    // bn + relu
    }
    f += 64ull * 64;  // output clamp
    return f;
}

// small hand-built graphs for focused cases
NetworkGraph tiny_conv_graph(int cin, int cout, bool with_bn, bool bias = false) {
    NetworkGraph g;
    LayerSpec in;
    in.id = "input";
    in.kind = LayerKind::input;
    in.input_channels = cin;
    g.add_layer(in);

    LayerSpec conv;
    conv.id = "c1";
    conv.kind = LayerKind::conv;
    conv.inputs = {"input"};
    conv.conv = {cin, cout, 3, 1, 1, bias};
    g.add_layer(conv);

    std::string last = "c1";
    if (with_bn) {
        LayerSpec bn;
        bn.id = "bn1";
        bn.kind = LayerKind::bn;
        bn.inputs = {"c1"};
        bn.bn_channels = cout;
        g.add_layer(bn);
        last = "bn1";
    }

    LayerSpec out;
    out.id = "output";
    out.kind = LayerKind::output;
    out.inputs = {last};
    g.add_layer(out);
    detail::init_weights(g, 7);
    validate(g);
    return g;
}

// brute-force mask oracle: sort all magnitudes, drop the M smallest, then
// enforce per-layer floors by re-admitting the largest dropped values
std::vector<ChannelMask> oracle_masks(const std::vector<GammaEntry>& entries, std::size_t M,
                                      const MinKeepRule& rule) {
    std::vector<std::string> order;
    std::map<std::string, int> rank;
    for (const auto& e : entries)
        if (!rank.count(e.bn_id)) {
            rank[e.bn_id] = static_cast<int>(order.size());
            order.push_back(e.bn_id);
        }
    std::vector<const GammaEntry*> sorted;
    for (const auto& e : entries) sorted.push_back(&e);
    std::stable_sort(sorted.begin(), sorted.end(), [&](const GammaEntry* a, const GammaEntry* b) {
        if (a->magnitude != b->magnitude) return a->magnitude < b->magnitude;
        if (rank[a->bn_id] != rank[b->bn_id]) return rank[a->bn_id] < rank[b->bn_id];
        return a->channel < b->channel;
    });
    std::map<std::string, std::vector<std::uint8_t>> keep;
    for (const auto& e : entries) {
        auto& v = keep[e.bn_id];
        if (static_cast<int>(v.size()) <= e.channel) v.resize(e.channel + 1, 1);
    }
    for (std::size_t i = 0; i < M; ++i) keep[sorted[i]->bn_id][sorted[i]->channel] = 0;
    for (const auto& id : order) {
        auto& v = keep[id];
        int kept = 0;
        for (auto b : v) kept += b;
        std::vector<std::pair<real, int>> dropped;
        for (const auto& e : entries)
            if (e.bn_id == id && !v[e.channel]) dropped.push_back({e.magnitude, e.channel});
        std::sort(dropped.begin(), dropped.end(), [](auto& a, auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (auto& [m, ch] : dropped) {
            if (kept >= rule.of(static_cast<int>(v.size()))) break;
            v[ch] = 1;
            ++kept;
        }
    }
    std::vector<ChannelMask> out;
    for (const auto& id : order) out.push_back({id, keep[id]});
    return out;
}

bool masks_equal(const std::vector<ChannelMask>& a, const std::vector<ChannelMask>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].bn_id != b[i].bn_id || a[i].keep != b[i].keep) return false;
    return true;
}

}  // namespace

TEST_CASE("preset net: encoder widths follow the multiplier") {
    auto g1 = build_mini_matting_net(1.0);
    std::vector<int> enc;
    for (const auto& spec : g1.layers)
        if (spec.kind == LayerKind::bn && spec.stage == StageTag::encoder)
            enc.push_back(spec.bn_channels);
    REQUIRE(enc == std::vector<int>{16, 32, 64, 128});

    auto g05 = build_mini_matting_net(0.5);
    enc.clear();
    for (const auto& spec : g05.layers)
        if (spec.kind == LayerKind::bn && spec.stage == StageTag::encoder)
            enc.push_back(spec.bn_channels);
    REQUIRE(enc == std::vector<int>{8, 16, 32, 64});

    REQUIRE_THROWS_AS(build_mini_matting_net(0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(build_mini_matting_net(-1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(build_mini_matting_net(4.5), std::invalid_argument);
}

TEST_CASE("count_params matches the per-layer ledger") {
    REQUIRE(count_params(tiny_conv_graph(3, 8, false)) == 216);
    REQUIRE(count_params(tiny_conv_graph(3, 8, true)) == 232);

    auto g1 = build_mini_matting_net(1.0);
    REQUIRE(count_params(g1) == ledger_params({16, 32, 64, 128}));
    REQUIRE(count_params(g1) == 538513);
    REQUIRE(count_running_stats(g1) == 2 * 480);

    auto g05 = build_mini_matting_net(0.5);
    REQUIRE(count_params(g05) == ledger_params({8, 16, 32, 64}));
    REQUIRE(count_params(g05) == 135049);
}

TEST_CASE("count_flops convention and preset oracle") {
    // one conv 3->8, 3x3, pad 1, stride 1 on 16x16: 9*3*8*256 MACs
    auto g = tiny_conv_graph(3, 8, false);
    const std::size_t clamp_ops = 8ull * 16 * 16;  // output layer is elementwise
    REQUIRE(count_flops(g, 16, 16) == 110592 + clamp_ops);

    // halving both channel counts quarters the conv term
    auto gh = tiny_conv_graph(2, 4, false);
    auto gf = tiny_conv_graph(4, 8, false);
    const std::size_t conv_h = count_flops(gh, 16, 16) - 4ull * 16 * 16;
    const std::size_t conv_f = count_flops(gf, 16, 16) - 8ull * 16 * 16;
    REQUIRE(conv_f == 4 * conv_h);

    auto g1 = build_mini_matting_net(1.0);
    REQUIRE(count_flops(g1, 64, 64) == ledger_flops_64({16, 32, 64, 128}));
    REQUIRE(count_flops(g1, 64, 64) == 242595840ull);

    auto g05 = build_mini_matting_net(0.5);
    REQUIRE(count_flops(g05, 64, 64) == ledger_flops_64({8, 16, 32, 64}));
    REQUIRE(count_flops(g05, 64, 64) == 62319616ull);

    REQUIRE_THROWS_AS(count_flops(g1, 60, 60), std::invalid_argument);
}

TEST_CASE("collect_bn_gammas: order, absolute value, scope") {
    auto g = tiny_conv_graph(1, 3, true);
    g.bn("bn1").gamma = {0.5, -0.01, 0.3};
    auto entries = collect_bn_gammas(g, Scope::all);
    REQUIRE(entries.size() == 3);
    REQUIRE(entries[0].bn_id == "bn1");
    REQUIRE(entries[0].channel == 0);
    REQUIRE(entries[0].magnitude == Catch::Approx(0.5));
    REQUIRE(entries[1].magnitude == Catch::Approx(0.01));
    REQUIRE(entries[2].magnitude == Catch::Approx(0.3));

    auto preset = build_mini_matting_net(1.0);
    REQUIRE(collect_bn_gammas(preset, Scope::encoder).size() == 240);
    REQUIRE(collect_bn_gammas(preset, Scope::decoder).size() == 240);
    REQUIRE(collect_bn_gammas(preset, Scope::all).size() == 480);

    for (auto& [id, bn] : preset.bn_weights)
        std::fill(bn.gamma.begin(), bn.gamma.end(), 0.0);
    for (const auto& e : collect_bn_gammas(preset, Scope::all)) REQUIRE(e.magnitude == 0.0);

    // empty scope: a graph with no decoder BN
    auto enc_only = tiny_conv_graph(1, 3, true);
    REQUIRE_THROWS_AS(collect_bn_gammas(enc_only, Scope::decoder), EmptyRegionError);
}

TEST_CASE("derive_channel_masks: examples and threshold semantics") {
    std::vector<GammaEntry> one_layer = {
        {"bn1", 0, 0.5}, {"bn1", 1, 0.01}, {"bn1", 2, 0.3}, {"bn1", 3, 0.02}};

    SECTION("two smallest dropped") {
        auto masks = derive_channel_masks(one_layer, 2, MinKeepRule{0.0, 1});
        REQUIRE(masks.size() == 1);
        REQUIRE(masks[0].keep == std::vector<std::uint8_t>{1, 0, 1, 0});
    }
    SECTION("M = 0 keeps everything") {
        auto masks = derive_channel_masks(one_layer, 0);
        REQUIRE(masks[0].keep == std::vector<std::uint8_t>{1, 1, 1, 1});
    }
    SECTION("M >= total rejected") {
        REQUIRE_THROWS_AS(derive_channel_masks(one_layer, 4), std::invalid_argument);
        REQUIRE_THROWS_AS(derive_channel_masks(one_layer, 9), std::invalid_argument);
    }
    SECTION("ties broken by layer order then channel index") {
        std::vector<GammaEntry> tied = {{"a", 0, 0.2}, {"a", 1, 0.2}, {"b", 0, 0.2}, {"b", 1, 0.2}};
        // both of layer a's channels are the M=2 tie-break victims; the floor
        // then re-admits a's channel 0
        auto masks = derive_channel_masks(tied, 2, MinKeepRule{0.0, 1});
        REQUIRE(masks[0].bn_id == "a");
        REQUIRE(masks[0].keep == std::vector<std::uint8_t>{1, 0});
        REQUIRE(masks[1].keep == std::vector<std::uint8_t>{1, 1});
        // with no floor at all, exactly the M tie-break victims stay dropped
        auto no_floor = derive_channel_masks(tied, 2, MinKeepRule{0.0, 0});
        REQUIRE(no_floor[0].keep == std::vector<std::uint8_t>{0, 0});
        REQUIRE(no_floor[1].keep == std::vector<std::uint8_t>{1, 1});
    }
    SECTION("floor re-admits the largest dropped gammas") {
        auto masks = derive_channel_masks(one_layer, 3, MinKeepRule{0.5, 1});  // floor = 2
        // M=3 drops 0.01, 0.02, 0.3; floor 2 re-admits 0.3
        REQUIRE(masks[0].keep == std::vector<std::uint8_t>{1, 0, 1, 0});
    }
    SECTION("matches brute-force oracle on random configurations with ties") {
        Rng rng(42);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<GammaEntry> entries;
            const int layers = 3;
            for (int l = 0; l < layers; ++l)
                for (int ch = 0; ch < 4; ++ch) {
                    // coarse quantization forces frequent exact ties
                    const real mag = std::floor(rng.uniform() * 5.0) / 5.0;
                    entries.push_back({"bn" + std::to_string(l), ch, mag});
                }
            const std::size_t M = static_cast<std::size_t>(rng.uniform_int(0, 11));
            MinKeepRule rule{0.1, 1};
            auto got = derive_channel_masks(entries, M, rule);
            auto want = oracle_masks(entries, M, rule);
            REQUIRE(masks_equal(got, want));
            // determinism
            REQUIRE(masks_equal(got, derive_channel_masks(entries, M, rule)));
        }
    }
    SECTION("3 layers x 4 channels, M=6 against the sort oracle") {
        Rng rng(7);
        std::vector<GammaEntry> entries;
        for (int l = 0; l < 3; ++l)
            for (int ch = 0; ch < 4; ++ch)
                entries.push_back({"bn" + std::to_string(l), ch, rng.uniform()});
        auto got = derive_channel_masks(entries, 6, MinKeepRule{0.1, 1});
        auto want = oracle_masks(entries, 6, MinKeepRule{0.1, 1});
        REQUIRE(masks_equal(got, want));
    }
}

TEST_CASE("apply_structural_prune: bookkeeping") {
    SECTION("identity masks preserve the graph") {
        auto g = build_mini_matting_net(0.5);
        std::vector<ChannelMask> masks;
        for (const auto& spec : g.layers)
            if (spec.kind == LayerKind::bn)
                masks.push_back({spec.id, std::vector<std::uint8_t>(spec.bn_channels, 1)});
        auto pruned = apply_structural_prune(g, masks);
        REQUIRE(count_params(pruned) == count_params(g));
        REQUIRE(pruned.layers.size() == g.layers.size());
        // original untouched
        REQUIRE(count_params(g) == 135049);
    }

    SECTION("conv-bn-conv chain: dropping 1 of 2 channels filters both sides") {
        NetworkGraph g;
        LayerSpec in;
        in.id = "input";
        in.kind = LayerKind::input;
        in.input_channels = 1;
        g.add_layer(in);
        LayerSpec c1;
        c1.id = "c1";
        c1.kind = LayerKind::conv;
        c1.inputs = {"input"};
        c1.conv = {1, 2, 3, 1, 1, false};
        g.add_layer(c1);
        LayerSpec bn;
        bn.id = "bn1";
        bn.kind = LayerKind::bn;
        bn.inputs = {"c1"};
        bn.bn_channels = 2;
        g.add_layer(bn);
        LayerSpec relu;
        relu.id = "r1";
        relu.kind = LayerKind::relu;
        relu.inputs = {"bn1"};
        g.add_layer(relu);
        LayerSpec c2;
        c2.id = "c2";
        c2.kind = LayerKind::conv;
        c2.inputs = {"r1"};
        c2.conv = {2, 1, 3, 1, 1, false};
        g.add_layer(c2);
        LayerSpec out;
        out.id = "output";
        out.kind = LayerKind::output;
        out.inputs = {"c2"};
        g.add_layer(out);
        detail::init_weights(g, 3);
        validate(g);

        auto pruned = apply_structural_prune(g, {{"bn1", {0, 1}}});
        REQUIRE(pruned.layer("c1").conv.out_channels == 1);
        REQUIRE(pruned.layer("c2").conv.in_channels == 1);
        REQUIRE(pruned.conv("c1").weight.n() == 1);
        REQUIRE(pruned.conv("c2").weight.c() == 1);
        // surviving filter is channel 1's
        const auto& w1 = g.conv("c1").weight;
        const auto& p1 = pruned.conv("c1").weight;
        for (int kh = 0; kh < 3; ++kh)
            for (int kw = 0; kw < 3; ++kw)
                REQUIRE(p1.at(0, 0, kh, kw) == w1.at(1, 0, kh, kw));

        REQUIRE_THROWS_AS(apply_structural_prune(g, {{"bn1", {0, 1, 1}}}), ShapeError);
        REQUIRE_THROWS_AS(apply_structural_prune(g, {{"bn1", {0, 0}}}), InvariantViolation);
    }

    SECTION("function preservation after zeroing dropped gamma/beta") {
        auto g = build_mini_matting_net(0.5, 11);
        Rng rng(99);
        for (auto& [id, bn] : g.bn_weights) {
            for (auto& v : bn.gamma) v = rng.normal(0.0, 0.6);
            for (auto& v : bn.beta) v = rng.normal(0.0, 0.2);
            for (auto& v : bn.running_mean) v = rng.normal(0.0, 0.3);
            for (auto& v : bn.running_var) v = 0.2 + rng.uniform();
        }
        auto entries = collect_bn_gammas(g, Scope::all);
        auto masks = derive_channel_masks(entries, entries.size() / 2);
        for (const auto& m : masks) {
            auto& bn = g.bn(m.bn_id);
            for (std::size_t ch = 0; ch < m.keep.size(); ++ch)
                if (!m.keep[ch]) {
                    bn.gamma[ch] = 0.0;
                    bn.beta[ch] = 0.0;
                }
        }
        auto pruned = apply_structural_prune(g, masks);
        REQUIRE(count_params(pruned) < count_params(g));

        Executor full(g), cut(pruned);
        Rng in_rng(5);
        for (int t = 0; t < 4; ++t) {
            Tensor x(1, 4, 32, 32);
            x.fill_uniform(in_rng, 0.0, 1.0);
            Tensor ya = full.forward(x, ExecMode::eval);
            Tensor yb = cut.forward(x, ExecMode::eval);
            ya -= yb;
            REQUIRE(ya.max_abs() <= 1e-5);
        }
    }

    SECTION("rewrite soundness: arbitrary valid masks keep the graph's invariants") {
        auto g = build_mini_matting_net(0.5, 77);
        Rng rng(123);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<ChannelMask> masks;
            for (const auto& spec : g.layers) {
                if (spec.kind != LayerKind::bn) continue;
                if (rng.uniform() < 0.3) continue;  // leave some layers unmasked
                ChannelMask m{spec.id, {}};
                int kept = 0;
                for (int c = 0; c < spec.bn_channels; ++c) {
                    const std::uint8_t keep = rng.uniform() < 0.5 ? 1 : 0;
                    kept += keep;
                    m.keep.push_back(keep);
                }
                if (kept == 0) m.keep[0] = 1;
                masks.push_back(std::move(m));
            }
            // apply_structural_prune validates its own output; a throw fails here
            auto pruned = apply_structural_prune(g, masks);
            REQUIRE_NOTHROW(validate(pruned));
            REQUIRE(count_params(pruned) <= count_params(g));
        }
    }

    SECTION("params and flops strictly decrease as more channels drop") {
        auto g = build_mini_matting_net(0.5, 13);
        Rng rng(3);
        for (auto& [id, bn] : g.bn_weights)
            for (auto& v : bn.gamma) v = rng.uniform(0.01, 1.0);
        auto entries = collect_bn_gammas(g, Scope::all);
        std::size_t prev_params = count_params(g);
        std::size_t prev_flops = count_flops(g, 32, 32);
        for (std::size_t m : {10u, 40u, 80u, 120u}) {
            auto pruned = apply_structural_prune(g, derive_channel_masks(entries, m));
            const std::size_t p = count_params(pruned);
            const std::size_t f = count_flops(pruned, 32, 32);
            REQUIRE(p < prev_params);
            REQUIRE(f < prev_flops);
            prev_params = p;
            prev_flops = f;
        }
    }
}

TEST_CASE("graph serialization round-trips") {
    auto g = build_mini_matting_net(0.5, 21);
    auto doc = graph_to_json(g);
    REQUIRE(doc["schema"] == "netgraph/v1");
    auto g2 = graph_from_json(doc);
    REQUIRE(g2.layers.size() == g.layers.size());
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        REQUIRE(g2.layers[i].id == g.layers[i].id);
        REQUIRE(g2.layers[i].kind == g.layers[i].kind);
        REQUIRE(g2.layers[i].inputs == g.layers[i].inputs);
    }

    const auto tmp = std::filesystem::temp_directory_path() / "slimmat_test_ckpt.bin";
    save_checkpoint(g, tmp);
    auto loaded = load_checkpoint(tmp);
    REQUIRE(count_params(loaded) == count_params(g));
    for (const auto& spec : g.layers) {
        if (spec.kind == LayerKind::conv) {
            REQUIRE(loaded.conv(spec.id).weight.raw() == g.conv(spec.id).weight.raw());
            REQUIRE(loaded.conv(spec.id).bias == g.conv(spec.id).bias);
        } else if (spec.kind == LayerKind::bn) {
            REQUIRE(loaded.bn(spec.id).gamma == g.bn(spec.id).gamma);
            REQUIRE(loaded.bn(spec.id).running_var == g.bn(spec.id).running_var);
        }
    }
    std::filesystem::remove(tmp);
}
