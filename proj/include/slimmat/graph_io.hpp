#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "slimmat/netgraph.hpp"

namespace slimmat {

namespace detail {

inline const char* kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::input: return "input";
        case LayerKind::conv: return "conv";
        case LayerKind::bn: return "bn";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::upsample: return "upsample";
        case LayerKind::concat: return "concat";
        case LayerKind::output: return "output";
    }
    return "?";
}

inline LayerKind kind_from(const std::string& s) {
    if (s == "input") return LayerKind::input;
    if (s == "conv") return LayerKind::conv;
    if (s == "bn") return LayerKind::bn;
    if (s == "relu") return LayerKind::relu;
    if (s == "maxpool") return LayerKind::maxpool;
    if (s == "upsample") return LayerKind::upsample;
    if (s == "concat") return LayerKind::concat;
    if (s == "output") return LayerKind::output;
    throw std::invalid_argument("unknown layer kind: " + s);
}

}  // namespace detail

/// Structural description only (no weights), schema "netgraph/v1".
inline nlohmann::json graph_to_json(const NetworkGraph& g) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& spec : g.layers) {
        nlohmann::json j;
        j["id"] = spec.id;
        j["kind"] = detail::kind_name(spec.kind);
        j["inputs"] = spec.inputs;
        j["stage"] = spec.stage == StageTag::encoder ? "encoder" : "decoder";
        j["level"] = spec.level == LevelTag::low ? "low" : "high";
        switch (spec.kind) {
            case LayerKind::input:
                j["channels"] = spec.input_channels;
                break;
            case LayerKind::conv:
                j["conv"] = {{"in_channels", spec.conv.in_channels},
                             {"out_channels", spec.conv.out_channels},
                             {"kernel_size", spec.conv.kernel},
                             {"stride", spec.conv.stride},
                             {"padding", spec.conv.padding},
                             {"has_bias", spec.conv.has_bias}};
                break;
            case LayerKind::bn:
                j["bn"] = {{"channels", spec.bn_channels}};
                break;
            case LayerKind::maxpool:
                j["pool"] = {{"kernel", spec.pool.kernel}, {"stride", spec.pool.stride}};
                break;
            case LayerKind::upsample:
                j["upsample"] = {{"factor", spec.upsample.factor}};
                break;
            default:
                break;
        }
        layers.push_back(std::move(j));
    }
    return nlohmann::json{{"schema", "netgraph/v1"}, {"layers", layers}};
}

inline NetworkGraph graph_from_json(const nlohmann::json& doc) {
    if (!doc.contains("schema") || doc["schema"] != "netgraph/v1")
        throw std::invalid_argument("graph_from_json: expected schema netgraph/v1");
    NetworkGraph g;
    for (const auto& j : doc.at("layers")) {
        LayerSpec spec;
        spec.id = j.at("id").get<std::string>();
        spec.kind = detail::kind_from(j.at("kind").get<std::string>());
        spec.inputs = j.at("inputs").get<std::vector<std::string>>();
        spec.stage = j.at("stage") == "encoder" ? StageTag::encoder : StageTag::decoder;
        spec.level = j.at("level") == "low" ? LevelTag::low : LevelTag::high;
        switch (spec.kind) {
            case LayerKind::input:
                spec.input_channels = j.at("channels").get<int>();
                break;
            case LayerKind::conv: {
                const auto& c = j.at("conv");
                spec.conv.in_channels = c.at("in_channels").get<int>();
                spec.conv.out_channels = c.at("out_channels").get<int>();
                spec.conv.kernel = c.at("kernel_size").get<int>();
                spec.conv.stride = c.at("stride").get<int>();
                spec.conv.padding = c.at("padding").get<int>();
                spec.conv.has_bias = c.at("has_bias").get<bool>();
                break;
            }
            case LayerKind::bn:
                spec.bn_channels = j.at("bn").at("channels").get<int>();
                break;
            case LayerKind::maxpool:
                spec.pool.kernel = j.at("pool").at("kernel").get<int>();
                spec.pool.stride = j.at("pool").at("stride").get<int>();
                break;
            case LayerKind::upsample:
                spec.upsample.factor = j.at("upsample").at("factor").get<int>();
                break;
            default:
                break;
        }
        g.add_layer(std::move(spec));
    }
    detail::refresh_channel_counts(g);
    return g;
}

namespace detail {

constexpr char kCheckpointMagic[8] = {'S', 'L', 'I', 'M', 'C', 'K', 'P', '1'};

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

inline void write_f64_vec(std::ostream& os, const std::string& layer, const std::string& name,
                          const std::vector<real>& v) {
    write_string(os, layer);
    write_string(os, name);
    write_u32(os, static_cast<std::uint32_t>(v.size()));
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(real)));
}

}  // namespace detail

/// Single-file model checkpoint: embedded netgraph/v1 JSON followed by the
/// weight blob keyed by (layer id, tensor name). Raw little-endian doubles;
/// exact round-trip by construction.
inline void save_checkpoint(const NetworkGraph& g, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    os.write(detail::kCheckpointMagic, 8);

    const std::string graph_json = graph_to_json(g).dump(2);
    detail::write_string(os, graph_json);

    std::uint32_t entries = 0;
    for (const auto& spec : g.layers) {
        if (spec.kind == LayerKind::conv) entries += spec.conv.has_bias ? 2u : 1u;
        if (spec.kind == LayerKind::bn) entries += 5u;  // gamma/beta/mean/var/epsilon
    }
    detail::write_u32(os, entries);

    for (const auto& spec : g.layers) {
        if (spec.kind == LayerKind::conv) {
            const auto& w = g.conv(spec.id);
            detail::write_f64_vec(os, spec.id, "weight", w.weight.raw());
            if (spec.conv.has_bias) detail::write_f64_vec(os, spec.id, "bias", w.bias);
        } else if (spec.kind == LayerKind::bn) {
            const auto& p = g.bn(spec.id);
            detail::write_f64_vec(os, spec.id, "gamma", p.gamma);
            detail::write_f64_vec(os, spec.id, "beta", p.beta);
            detail::write_f64_vec(os, spec.id, "running_mean", p.running_mean);
            detail::write_f64_vec(os, spec.id, "running_var", p.running_var);
            detail::write_f64_vec(os, spec.id, "epsilon", std::vector<real>{p.epsilon});
        }
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path.string());
}

inline NetworkGraph load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("missing checkpoint: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a slimmat checkpoint: " + path.string());

    NetworkGraph g = graph_from_json(nlohmann::json::parse(detail::read_string(is)));

    const std::uint32_t entries = detail::read_u32(is);
    for (std::uint32_t e = 0; e < entries; ++e) {
        const std::string layer = detail::read_string(is);
        const std::string name = detail::read_string(is);
        const std::uint32_t count = detail::read_u32(is);
        std::vector<real> values(count);
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(count * sizeof(real)));
        if (!is) throw std::runtime_error("truncated checkpoint: " + path.string());

        const LayerSpec& spec = g.layer(layer);
        if (spec.kind == LayerKind::conv) {
            auto& w = g.conv_weights[layer];
            if (name == "weight") {
                Tensor t(spec.conv.out_channels, spec.conv.in_channels, spec.conv.kernel,
                         spec.conv.kernel);
                if (t.size() != values.size()) throw ShapeError("weight size mismatch: " + layer);
                t.raw() = std::move(values);
                w.weight = std::move(t);
            } else if (name == "bias") {
                w.bias = std::move(values);
            }
        } else if (spec.kind == LayerKind::bn) {
            auto& p = g.bn_weights[layer];
            if (name == "gamma") p.gamma = std::move(values);
            else if (name == "beta") p.beta = std::move(values);
            else if (name == "running_mean") p.running_mean = std::move(values);
            else if (name == "running_var") p.running_var = std::move(values);
            else if (name == "epsilon") p.epsilon = values.at(0);
        }
    }
    detail::refresh_channel_counts(g);
    validate(g);
    return g;
}

inline void save_graph_json(const NetworkGraph& g, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write graph json: " + path.string());
    os << graph_to_json(g).dump(2) << "\n";
}

}  // namespace slimmat
