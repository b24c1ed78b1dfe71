#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "slimmat/tensor.hpp"

namespace slimmat {

enum class LayerKind { input, conv, bn, relu, maxpool, upsample, concat, output };
enum class StageTag { encoder, decoder };
enum class LevelTag { low, high };
enum class Scope { encoder, decoder, all };
enum class LevelScope { all, low, high };

struct ConvParams {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int padding = 1;
    bool has_bias = false;
};

struct PoolParams {
    int kernel = 2;
    int stride = 2;
};

struct UpsampleParams {
    int factor = 2;  // nearest-neighbour
};

/// One node of the layer DAG. `params` members are meaningful only for the
/// matching `kind`; the others stay default-initialized.
struct LayerSpec {
    std::string id;
    LayerKind kind = LayerKind::input;
    std::vector<std::string> inputs;
    StageTag stage = StageTag::encoder;
    LevelTag level = LevelTag::low;

    ConvParams conv;
    int bn_channels = 0;
    PoolParams pool;
    UpsampleParams upsample;
    int input_channels = 0;  // kind == input
};

/// Learnable and running parameters of one batch-norm layer. All vectors
/// share the layer's channel count.
struct BatchNormParams {
    std::vector<real> gamma;
    std::vector<real> beta;
    std::vector<real> running_mean;
    std::vector<real> running_var;
    real epsilon = 1e-5;

    int channels() const { return static_cast<int>(gamma.size()); }
};

struct ConvWeights {
    Tensor weight;           // [out, in, k, k]
    std::vector<real> bias;  // empty when has_bias == false
};

/// Declarative network description plus parameter storage. Treated as a
/// value: structural rewrites (pruning) build and return a new graph.
struct NetworkGraph {
    std::vector<LayerSpec> layers;  // topological order
    std::unordered_map<std::string, std::size_t> index;
    std::unordered_map<std::string, ConvWeights> conv_weights;
    std::unordered_map<std::string, BatchNormParams> bn_weights;
    std::unordered_map<std::string, int> channel_counts;  // live output channels

    const LayerSpec& layer(const std::string& id) const {
        auto it = index.find(id);
        if (it == index.end()) throw std::invalid_argument("unknown layer id: " + id);
        return layers[it->second];
    }
    bool has_layer(const std::string& id) const { return index.count(id) != 0; }

    const BatchNormParams& bn(const std::string& id) const {
        auto it = bn_weights.find(id);
        if (it == bn_weights.end()) throw std::invalid_argument("no bn weights for layer: " + id);
        return it->second;
    }
    BatchNormParams& bn(const std::string& id) { return bn_weights.at(id); }

    const ConvWeights& conv(const std::string& id) const {
        auto it = conv_weights.find(id);
        if (it == conv_weights.end()) throw std::invalid_argument("no conv weights for layer: " + id);
        return it->second;
    }
    ConvWeights& conv(const std::string& id) { return conv_weights.at(id); }

    void add_layer(LayerSpec spec) {
        if (index.count(spec.id)) throw std::invalid_argument("duplicate layer id: " + spec.id);
        index[spec.id] = layers.size();
        layers.push_back(std::move(spec));
    }
};

/// Keep/drop decision for one BN layer's channels.
struct ChannelMask {
    std::string bn_id;
    std::vector<std::uint8_t> keep;

    int kept() const {
        int k = 0;
        for (auto v : keep) k += v ? 1 : 0;
        return k;
    }
    int dropped() const { return static_cast<int>(keep.size()) - kept(); }
};

struct GammaEntry {
    std::string bn_id;
    int channel = 0;
    real magnitude = 0.0;  // |gamma|
};

/// Per-layer floor on kept channels. The graph must stay connected even
/// under aggressive ratios, so a masked layer never empties completely.
struct MinKeepRule {
    double fraction = 0.1;
    int at_least = 1;

    int of(int channels) const {
        const int frac = static_cast<int>(std::ceil(fraction * channels));
        return std::max(at_least, frac);
    }
};

namespace detail {

inline int effective_out_channels(const NetworkGraph& g, const std::string& id);

inline int producer_channels_sum(const NetworkGraph& g, const LayerSpec& spec) {
    int sum = 0;
    for (const auto& in : spec.inputs) sum += effective_out_channels(g, in);
    return sum;
}

inline int effective_out_channels(const NetworkGraph& g, const std::string& id) {
    const LayerSpec& spec = g.layer(id);
    switch (spec.kind) {
        case LayerKind::input: return spec.input_channels;
        case LayerKind::conv: return spec.conv.out_channels;
        case LayerKind::bn: return spec.bn_channels;
        case LayerKind::concat: return producer_channels_sum(g, spec);
        case LayerKind::relu:
        case LayerKind::maxpool:
        case LayerKind::upsample:
        case LayerKind::output:
            return effective_out_channels(g, spec.inputs.at(0));
    }
    throw InvariantViolation("unhandled layer kind");
}

}  // namespace detail

/// Checks every LayerSpec invariant plus weight-shape consistency.
/// Throws InvariantViolation / ShapeError on the first failure.
inline void validate(const NetworkGraph& g) {
    int inputs = 0, outputs = 0;
    std::set<std::string> seen;
    for (const auto& spec : g.layers) {
        if (!seen.insert(spec.id).second)
            throw InvariantViolation("duplicate layer id: " + spec.id);
        // topological order: every dependency must precede its consumer
        for (const auto& in : spec.inputs) {
            if (!seen.count(in))
                throw InvariantViolation("layer " + spec.id + " consumes " + in +
                                         " which is not an earlier layer (cycle or unknown id)");
        }
        switch (spec.kind) {
            case LayerKind::input:
                ++inputs;
                if (!spec.inputs.empty()) throw InvariantViolation("input layer has producers");
                break;
            case LayerKind::output:
                ++outputs;
                if (spec.inputs.size() != 1) throw InvariantViolation("output layer needs one producer");
                break;
            default:
                if (spec.inputs.empty())
                    throw InvariantViolation("layer " + spec.id + " has no producers");
                break;
        }
    }
    if (inputs != 1 || outputs != 1)
        throw InvariantViolation("graph must have exactly one input and one output layer");

    for (const auto& spec : g.layers) {
        if (spec.kind == LayerKind::conv) {
            const int expected_in = detail::producer_channels_sum(g, spec);
            if (spec.conv.in_channels != expected_in)
                throw InvariantViolation("conv " + spec.id + " in_channels " +
                                         std::to_string(spec.conv.in_channels) +
                                         " != producers' total " + std::to_string(expected_in));
            const auto& w = g.conv(spec.id);
            if (w.weight.n() != spec.conv.out_channels || w.weight.c() != spec.conv.in_channels ||
                w.weight.h() != spec.conv.kernel || w.weight.w() != spec.conv.kernel)
                throw ShapeError("conv " + spec.id + " weight shape mismatch");
            if (spec.conv.has_bias && static_cast<int>(w.bias.size()) != spec.conv.out_channels)
                throw ShapeError("conv " + spec.id + " bias length mismatch");
            if (!spec.conv.has_bias && !w.bias.empty())
                throw ShapeError("conv " + spec.id + " unexpected bias");
        } else if (spec.kind == LayerKind::bn) {
            if (spec.inputs.size() != 1) throw InvariantViolation("bn " + spec.id + " needs one producer");
            const LayerSpec& prod = g.layer(spec.inputs[0]);
            const int prod_out = detail::effective_out_channels(g, prod.id);
            if (spec.bn_channels != prod_out)
                throw InvariantViolation("bn " + spec.id + " channels != producer out channels");
            const auto& p = g.bn(spec.id);
            if (p.channels() != spec.bn_channels ||
                p.beta.size() != p.gamma.size() ||
                p.running_mean.size() != p.gamma.size() ||
                p.running_var.size() != p.gamma.size())
                throw ShapeError("bn " + spec.id + " parameter vectors inconsistent");
            if (p.epsilon <= 0.0) throw InvariantViolation("bn " + spec.id + " epsilon must be positive");
            for (real v : p.running_var)
                if (v < 0.0) throw InvariantViolation("bn " + spec.id + " negative running_var");
        }
    }

    for (const auto& [id, n] : g.channel_counts) {
        if (n != detail::effective_out_channels(g, id))
            throw InvariantViolation("stale channel_counts entry for " + id);
    }
}

namespace detail {

inline void refresh_channel_counts(NetworkGraph& g) {
    g.channel_counts.clear();
    for (const auto& spec : g.layers)
        g.channel_counts[spec.id] = effective_out_channels(g, spec.id);
}

// BN gamma init 0.25: small enough that the L1 sparsification pressure can
// drive task-irrelevant channels to zero within a desk-scale stage, large
// enough for healthy signal flow (BN renormalizes per layer).
constexpr real kBnGammaInit = 0.25;

/// He-style init for convs, constant-gamma BN init.
inline void init_weights(NetworkGraph& g, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xC0FFEE));
    for (const auto& spec : g.layers) {
        if (spec.kind == LayerKind::conv) {
            ConvWeights w;
            w.weight = Tensor(spec.conv.out_channels, spec.conv.in_channels,
                              spec.conv.kernel, spec.conv.kernel);
            const real stddev =
                std::sqrt(2.0 / (static_cast<real>(spec.conv.kernel) * spec.conv.kernel *
                                 spec.conv.in_channels));
            w.weight.fill_normal(rng, 0.0, stddev);
            if (spec.conv.has_bias) w.bias.assign(spec.conv.out_channels, 0.0);
            g.conv_weights[spec.id] = std::move(w);
        } else if (spec.kind == LayerKind::bn) {
            BatchNormParams p;
            p.gamma.assign(spec.bn_channels, kBnGammaInit);
            p.beta.assign(spec.bn_channels, 0.0);
            p.running_mean.assign(spec.bn_channels, 0.0);
            p.running_var.assign(spec.bn_channels, 1.0);
            g.bn_weights[spec.id] = std::move(p);
        }
    }
    refresh_channel_counts(g);
}

}  // namespace detail

/// Re-draws all learnable parameters in place (fresh random weights,
/// preserved architecture). Used when a student is trained "from scratch".
inline void reinit_weights(NetworkGraph& g, std::uint64_t seed) {
    g.conv_weights.clear();
    g.bn_weights.clear();
    detail::init_weights(g, seed);
}

/// Builds the 4-level U-shaped matting net: input RGB+trimap, encoder stages
/// of widths (16,32,64,128)*multiplier with 2x maxpool after each stage,
/// decoder stages of mirrored widths, each upsample + concat(skip) +
/// conv-BN-ReLU, then a 1-channel conv and clamp to [0,1]. Encoder/decoder
/// stages 1-2 carry the `low` tag, stages 3-4 `high`.
inline NetworkGraph build_mini_matting_net(double width_multiplier,
                                           std::uint64_t init_seed = 0x51AE5EED) {
    if (!(width_multiplier > 0.0) || width_multiplier > 4.0)
        throw std::invalid_argument("width_multiplier must be in (0, 4]");

    const int base[4] = {16, 32, 64, 128};
    int c[4];
    for (int i = 0; i < 4; ++i)
        c[i] = std::max(1, static_cast<int>(std::llround(base[i] * width_multiplier)));

    NetworkGraph g;
    auto add = [&g](LayerSpec s) { g.add_layer(std::move(s)); };

    LayerSpec in;
    in.id = "input";
    in.kind = LayerKind::input;
    in.input_channels = 4;
    add(in);

    auto level_of = [](int stage) { return stage <= 2 ? LevelTag::low : LevelTag::high; };

    std::string prev = "input";
    int prev_channels = 4;
    std::vector<std::string> skip_ids;  // encoder stage outputs (pre-pool), shallowest first
    for (int s = 1; s <= 4; ++s) {
        const std::string tag = "enc" + std::to_string(s);
        LayerSpec conv;
        conv.id = tag + "_conv";
        conv.kind = LayerKind::conv;
        conv.inputs = {prev};
        conv.stage = StageTag::encoder;
        conv.level = level_of(s);
        conv.conv = {prev_channels, c[s - 1], 3, 1, 1, false};
        add(conv);

        LayerSpec bn;
        bn.id = tag + "_bn";
        bn.kind = LayerKind::bn;
        bn.inputs = {conv.id};
        bn.stage = StageTag::encoder;
        bn.level = level_of(s);
        bn.bn_channels = c[s - 1];
        add(bn);

        LayerSpec relu;
        relu.id = tag + "_relu";
        relu.kind = LayerKind::relu;
        relu.inputs = {bn.id};
        relu.stage = StageTag::encoder;
        relu.level = level_of(s);
        add(relu);

        LayerSpec pool;
        pool.id = tag + "_pool";
        pool.kind = LayerKind::maxpool;
        pool.inputs = {relu.id};
        pool.stage = StageTag::encoder;
        pool.level = level_of(s);
        add(pool);

        skip_ids.push_back(relu.id);
        prev = pool.id;
        prev_channels = c[s - 1];
    }

    // decoder: deepest stage first (dec4 mirrors enc4's width)
    for (int s = 4; s >= 1; --s) {
        const std::string tag = "dec" + std::to_string(s);
        LayerSpec up;
        up.id = tag + "_up";
        up.kind = LayerKind::upsample;
        up.inputs = {prev};
        up.stage = StageTag::decoder;
        up.level = level_of(s);
        add(up);

        const std::string skip = skip_ids[s - 1];
        const int skip_channels = c[s - 1];

        LayerSpec cat;
        cat.id = tag + "_cat";
        cat.kind = LayerKind::concat;
        cat.inputs = {skip, up.id};
        cat.stage = StageTag::decoder;
        cat.level = level_of(s);
        add(cat);

        LayerSpec conv;
        conv.id = tag + "_conv";
        conv.kind = LayerKind::conv;
        conv.inputs = {cat.id};
        conv.stage = StageTag::decoder;
        conv.level = level_of(s);
        conv.conv = {skip_channels + prev_channels, c[s - 1], 3, 1, 1, false};
        add(conv);

        LayerSpec bn;
        bn.id = tag + "_bn";
        bn.kind = LayerKind::bn;
        bn.inputs = {conv.id};
        bn.stage = StageTag::decoder;
        bn.level = level_of(s);
        bn.bn_channels = c[s - 1];
        add(bn);

        LayerSpec relu;
        relu.id = tag + "_relu";
        relu.kind = LayerKind::relu;
        relu.inputs = {bn.id};
        relu.stage = StageTag::decoder;
        relu.level = level_of(s);
        add(relu);

        prev = relu.id;
        prev_channels = c[s - 1];
    }

    LayerSpec out_conv;
    out_conv.id = "out_conv";
    out_conv.kind = LayerKind::conv;
    out_conv.inputs = {prev};
    out_conv.stage = StageTag::decoder;
    out_conv.level = LevelTag::low;
    out_conv.conv = {prev_channels, 1, 3, 1, 1, true};
    add(out_conv);

    LayerSpec out;
    out.id = "output";
    out.kind = LayerKind::output;  // clamps to [0,1]
    out.inputs = {out_conv.id};
    out.stage = StageTag::decoder;
    out.level = LevelTag::low;
    add(out);

    detail::init_weights(g, init_seed);
    validate(g);
    return g;
}

/// Absolute BN scaling factors with provenance, in topological layer order
/// then channel index. The magnitudes are the channel-importance measure
/// the pruning threshold operates on.
inline std::vector<GammaEntry> collect_bn_gammas(const NetworkGraph& g, Scope scope) {
    std::vector<GammaEntry> out;
    for (const auto& spec : g.layers) {
        if (spec.kind != LayerKind::bn) continue;
        if (scope == Scope::encoder && spec.stage != StageTag::encoder) continue;
        if (scope == Scope::decoder && spec.stage != StageTag::decoder) continue;
        const auto& p = g.bn(spec.id);
        for (int ch = 0; ch < p.channels(); ++ch)
            out.push_back({spec.id, ch, std::abs(p.gamma[ch])});
    }
    if (out.empty()) throw EmptyRegionError("collect_bn_gammas: no BN layers in scope");
    return out;
}

/// Mask derivation with audit info: the threshold actually used, per-layer
/// pre-floor drop counts, and how many channels the floors re-admitted.
struct MaskDerivation {
    std::vector<ChannelMask> masks;
    real threshold = 0.0;  // M-th smallest |gamma|; 0 when M == 0
    std::map<std::string, int> prefloor_dropped;
    int readmitted_total = 0;

    int dropped_total() const {
        int d = 0;
        for (const auto& m : masks) d += m.dropped();
        return d;
    }
};

/// Threshold rule: drop exactly M channels, the M smallest |gamma| with ties
/// broken by (layer order, channel index); then per-layer floors re-admit the
/// largest dropped gammas of any layer that fell below its floor.
inline MaskDerivation derive_channel_masks_detailed(const std::vector<GammaEntry>& gammas,
                                                    std::size_t M,
                                                    const MinKeepRule& min_keep = {}) {
    if (M >= gammas.size() && M != 0)
        throw std::invalid_argument("derive_channel_masks: M must be < total entries");

    // layer order = order of first appearance in the (topologically ordered) input
    std::vector<std::string> layer_order;
    std::map<std::string, int> layer_rank;
    std::map<std::string, int> layer_channels;
    for (const auto& e : gammas) {
        if (!layer_rank.count(e.bn_id)) {
            layer_rank[e.bn_id] = static_cast<int>(layer_order.size());
            layer_order.push_back(e.bn_id);
        }
        layer_channels[e.bn_id] = std::max(layer_channels[e.bn_id], e.channel + 1);
    }

    std::vector<std::size_t> order(gammas.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const auto& ga = gammas[a];
        const auto& gb = gammas[b];
        if (ga.magnitude != gb.magnitude) return ga.magnitude < gb.magnitude;
        if (layer_rank[ga.bn_id] != layer_rank[gb.bn_id])
            return layer_rank[ga.bn_id] < layer_rank[gb.bn_id];
        return ga.channel < gb.channel;
    });

    MaskDerivation out;
    if (M > 0) out.threshold = gammas[order[M - 1]].magnitude;

    std::map<std::string, std::vector<std::uint8_t>> keep;
    for (const auto& [id, n] : layer_channels) keep[id].assign(n, 1);
    for (const auto& id : layer_order) out.prefloor_dropped[id] = 0;
    for (std::size_t i = 0; i < M; ++i) {
        const auto& e = gammas[order[i]];
        keep[e.bn_id][e.channel] = 0;
        ++out.prefloor_dropped[e.bn_id];
    }

    // floor re-admission: largest dropped gammas first, lower channel on ties
    for (const auto& id : layer_order) {
        auto& k = keep[id];
        int kept = 0;
        for (auto v : k) kept += v ? 1 : 0;
        const int floor = min_keep.of(static_cast<int>(k.size()));
        if (kept >= floor) continue;

        std::vector<std::pair<real, int>> dropped;  // (magnitude, channel)
        for (const auto& e : gammas)
            if (e.bn_id == id && !k[e.channel]) dropped.push_back({e.magnitude, e.channel});
        std::sort(dropped.begin(), dropped.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (const auto& [mag, ch] : dropped) {
            if (kept >= floor) break;
            k[ch] = 1;
            ++kept;
            ++out.readmitted_total;
        }
    }

    for (const auto& id : layer_order) out.masks.push_back({id, keep[id]});
    return out;
}

inline std::vector<ChannelMask> derive_channel_masks(const std::vector<GammaEntry>& gammas,
                                                     std::size_t M,
                                                     const MinKeepRule& min_keep = {}) {
    return derive_channel_masks_detailed(gammas, M, min_keep).masks;
}

/// Structural rewrite: returns a new graph with masked BN channels removed.
/// Filters the BN parameter rows, the producing conv's output filters, and
/// every consuming conv's input columns; concat consumers resolve their
/// column offsets from the per-producer masks. The input graph is untouched.
inline NetworkGraph apply_structural_prune(const NetworkGraph& g,
                                           const std::vector<ChannelMask>& masks) {
    std::unordered_map<std::string, const ChannelMask*> by_id;
    for (const auto& m : masks) {
        const LayerSpec& spec = g.layer(m.bn_id);
        if (spec.kind != LayerKind::bn)
            throw ShapeError("mask target " + m.bn_id + " is not a bn layer");
        if (static_cast<int>(m.keep.size()) != spec.bn_channels)
            throw ShapeError("mask length mismatch for " + m.bn_id);
        if (m.kept() == 0)
            throw InvariantViolation("mask empties layer " + m.bn_id);
        by_id[m.bn_id] = &m;
    }

    // per-layer output keep-mask, in topo order
    std::unordered_map<std::string, std::vector<std::uint8_t>> out_mask;
    auto ones = [](int n) { return std::vector<std::uint8_t>(n, 1); };

    // which bn consumes each conv (if any)
    std::unordered_map<std::string, std::string> bn_of_conv;
    for (const auto& spec : g.layers)
        if (spec.kind == LayerKind::bn) bn_of_conv[spec.inputs[0]] = spec.id;

    for (const auto& spec : g.layers) {
        switch (spec.kind) {
            case LayerKind::input:
                out_mask[spec.id] = ones(spec.input_channels);
                break;
            case LayerKind::conv: {
                auto it = bn_of_conv.find(spec.id);
                if (it != bn_of_conv.end() && by_id.count(it->second))
                    out_mask[spec.id] = std::vector<std::uint8_t>(by_id[it->second]->keep);
                else
                    out_mask[spec.id] = ones(spec.conv.out_channels);
                break;
            }
            case LayerKind::bn:
                out_mask[spec.id] = by_id.count(spec.id)
                                        ? std::vector<std::uint8_t>(by_id[spec.id]->keep)
                                        : ones(spec.bn_channels);
                break;
            case LayerKind::concat: {
                std::vector<std::uint8_t> m;
                for (const auto& in : spec.inputs) {
                    const auto& im = out_mask.at(in);
                    m.insert(m.end(), im.begin(), im.end());
                }
                out_mask[spec.id] = std::move(m);
                break;
            }
            case LayerKind::relu:
            case LayerKind::maxpool:
            case LayerKind::upsample:
            case LayerKind::output:
                out_mask[spec.id] = out_mask.at(spec.inputs[0]);
                break;
        }
    }

    NetworkGraph pruned;
    auto count_kept = [](const std::vector<std::uint8_t>& m) {
        int k = 0;
        for (auto v : m) k += v ? 1 : 0;
        return k;
    };

    for (const auto& spec : g.layers) {
        LayerSpec ns = spec;
        if (spec.kind == LayerKind::conv) {
            // input-column mask is the concatenation of producers' out masks
            std::vector<std::uint8_t> in_mask;
            for (const auto& in : spec.inputs) {
                const auto& im = out_mask.at(in);
                in_mask.insert(in_mask.end(), im.begin(), im.end());
            }
            const auto& om = out_mask.at(spec.id);
            if (static_cast<int>(in_mask.size()) != spec.conv.in_channels ||
                static_cast<int>(om.size()) != spec.conv.out_channels)
                throw ShapeError("mask/layer mismatch at conv " + spec.id);

            const int new_in = count_kept(in_mask);
            const int new_out = count_kept(om);
            if (new_out == 0) throw InvariantViolation("pruning empties conv " + spec.id);

            const ConvWeights& w = g.conv(spec.id);
            ConvWeights nw;
            nw.weight = Tensor(new_out, new_in, spec.conv.kernel, spec.conv.kernel);
            int ro = 0;
            for (int o = 0; o < spec.conv.out_channels; ++o) {
                if (!om[o]) continue;
                int ri = 0;
                for (int i = 0; i < spec.conv.in_channels; ++i) {
                    if (!in_mask[i]) continue;
                    for (int kh = 0; kh < spec.conv.kernel; ++kh)
                        for (int kw = 0; kw < spec.conv.kernel; ++kw)
                            nw.weight.at(ro, ri, kh, kw) = w.weight.at(o, i, kh, kw);
                    ++ri;
                }
                ++ro;
            }
            if (spec.conv.has_bias) {
                for (int o = 0; o < spec.conv.out_channels; ++o)
                    if (om[o]) nw.bias.push_back(w.bias[o]);
            }
            ns.conv.in_channels = new_in;
            ns.conv.out_channels = new_out;
            pruned.conv_weights[spec.id] = std::move(nw);
        } else if (spec.kind == LayerKind::bn) {
            const auto& om = out_mask.at(spec.id);
            const BatchNormParams& p = g.bn(spec.id);
            BatchNormParams np;
            np.epsilon = p.epsilon;
            for (int ch = 0; ch < p.channels(); ++ch) {
                if (!om[ch]) continue;
                np.gamma.push_back(p.gamma[ch]);
                np.beta.push_back(p.beta[ch]);
                np.running_mean.push_back(p.running_mean[ch]);
                np.running_var.push_back(p.running_var[ch]);
            }
            ns.bn_channels = np.channels();
            pruned.bn_weights[spec.id] = std::move(np);
        }
        pruned.add_layer(std::move(ns));
    }

    detail::refresh_channel_counts(pruned);
    validate(pruned);
    return pruned;
}

/// Learnable parameter count: conv weights and biases plus BN gamma/beta.
/// Running statistics are excluded; see count_running_stats.
inline std::size_t count_params(const NetworkGraph& g) {
    std::size_t total = 0;
    for (const auto& spec : g.layers) {
        if (spec.kind == LayerKind::conv) {
            const auto& c = spec.conv;
            total += static_cast<std::size_t>(c.kernel) * c.kernel * c.in_channels * c.out_channels;
            if (c.has_bias) total += static_cast<std::size_t>(c.out_channels);
        } else if (spec.kind == LayerKind::bn) {
            total += 2 * static_cast<std::size_t>(spec.bn_channels);  // gamma + beta
        }
    }
    return total;
}

inline std::size_t count_running_stats(const NetworkGraph& g) {
    std::size_t total = 0;
    for (const auto& spec : g.layers)
        if (spec.kind == LayerKind::bn) total += 2 * static_cast<std::size_t>(spec.bn_channels);
    return total;
}

/// FLOP convention: conv counts 2 ops per multiply-accumulate (plus one per
/// output element when biased); BN, ReLU, maxpool, upsample and the output
/// clamp count one op per output element; concat counts zero.
inline std::size_t count_flops(const NetworkGraph& g, int input_h, int input_w) {
    if (input_h <= 0 || input_w <= 0)
        throw std::invalid_argument("count_flops: non-positive input size");

    std::unordered_map<std::string, std::pair<int, int>> dims;  // id -> (h, w)
    std::size_t total = 0;
    for (const auto& spec : g.layers) {
        int h = 0, w = 0;
        if (spec.kind != LayerKind::input) {
            h = dims.at(spec.inputs[0]).first;
            w = dims.at(spec.inputs[0]).second;
        }
        const int channels = detail::effective_out_channels(g, spec.id);
        switch (spec.kind) {
            case LayerKind::input:
                dims[spec.id] = {input_h, input_w};
                continue;
            case LayerKind::conv: {
                const auto& c = spec.conv;
                const int ho = (h + 2 * c.padding - c.kernel) / c.stride + 1;
                const int wo = (w + 2 * c.padding - c.kernel) / c.stride + 1;
                const std::size_t macs = static_cast<std::size_t>(c.kernel) * c.kernel *
                                         c.in_channels * c.out_channels *
                                         static_cast<std::size_t>(ho) * wo;
                total += 2 * macs;
                if (c.has_bias) total += static_cast<std::size_t>(c.out_channels) * ho * wo;
                dims[spec.id] = {ho, wo};
                break;
            }
            case LayerKind::maxpool: {
                if (h % spec.pool.stride != 0 || w % spec.pool.stride != 0)
                    throw std::invalid_argument("count_flops: input dims not divisible by pooling");
                const int ho = h / spec.pool.stride;
                const int wo = w / spec.pool.stride;
                total += static_cast<std::size_t>(channels) * ho * wo;
                dims[spec.id] = {ho, wo};
                break;
            }
            case LayerKind::upsample: {
                const int ho = h * spec.upsample.factor;
                const int wo = w * spec.upsample.factor;
                total += static_cast<std::size_t>(channels) * ho * wo;
                dims[spec.id] = {ho, wo};
                break;
            }
            case LayerKind::bn:
            case LayerKind::relu:
            case LayerKind::output:
                total += static_cast<std::size_t>(channels) * h * w;
                dims[spec.id] = {h, w};
                break;
            case LayerKind::concat:
                dims[spec.id] = {h, w};
                break;
        }
    }
    return total;
}

}  // namespace slimmat
