#pragma once

#include "slimmat/training.hpp"

namespace slimmat {

/// Audit record of one prune_student call: per-layer keep/drop ledger,
/// encoder/decoder thresholds, accounting before/after, gamma histograms.
struct PruneReport {
    struct LayerRow {
        std::string bn_id;
        StageTag stage = StageTag::encoder;
        int original = 0;
        int kept = 0;
        int dropped = 0;
        int prefloor_dropped = 0;
        int readmitted = 0;
    };
    struct HistogramBin {
        std::string scope;
        real lo = 0.0, hi = 0.0;
        int count = 0;
    };

    std::vector<LayerRow> layers;
    real ratio = 0.0;
    std::size_t m_enc = 0, m_dec = 0;  // pre-floor drop targets
    real tau_enc = 0.0, tau_dec = 0.0;
    int readmitted = 0;
    std::size_t params_before = 0, params_after = 0;
    std::size_t flops_before = 0, flops_after = 0;
    std::vector<HistogramBin> gamma_histogram;

    int dropped_total() const {
        int d = 0;
        for (const auto& r : layers) d += r.dropped;
        return d;
    }
};

namespace detail {

inline void histogram_scope(const NetworkGraph& net, Scope scope, const std::string& label,
                            std::vector<PruneReport::HistogramBin>& out, int bins = 16) {
    const auto entries = collect_bn_gammas(net, scope);
    real max_mag = 0.0;
    for (const auto& e : entries) max_mag = std::max(max_mag, e.magnitude);
    const real width = max_mag > 0.0 ? max_mag / bins : 1.0 / bins;
    std::vector<int> counts(static_cast<std::size_t>(bins), 0);
    for (const auto& e : entries) {
        int b = static_cast<int>(e.magnitude / width);
        b = std::min(b, bins - 1);
        ++counts[static_cast<std::size_t>(b)];
    }
    for (int b = 0; b < bins; ++b)
        out.push_back({label, b * width, (b + 1) * width, counts[static_cast<std::size_t>(b)]});
}

}  // namespace detail

/// Threshold selection and structural rewrite. Encoder and decoder thresholds
/// are derived separately (the distillation loss only shapes the encoder, so
/// one global cutoff would conflate the two distributions).
inline std::pair<NetworkGraph, PruneReport> prune_student(const NetworkGraph& student, real ratio,
                                                          const MinKeepRule& min_keep = {},
                                                          int flop_h = 64, int flop_w = 64) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw std::invalid_argument("prune_student: ratio must be in [0, 1)");

    PruneReport report;
    report.ratio = ratio;
    report.params_before = count_params(student);
    report.flops_before = count_flops(student, flop_h, flop_w);
    detail::histogram_scope(student, Scope::encoder, "encoder", report.gamma_histogram);
    detail::histogram_scope(student, Scope::decoder, "decoder", report.gamma_histogram);

    const auto enc_entries = collect_bn_gammas(student, Scope::encoder);
    const auto dec_entries = collect_bn_gammas(student, Scope::decoder);
    report.m_enc = static_cast<std::size_t>(ratio * static_cast<real>(enc_entries.size()));
    report.m_dec = static_cast<std::size_t>(ratio * static_cast<real>(dec_entries.size()));

    auto enc = derive_channel_masks_detailed(enc_entries, report.m_enc, min_keep);
    auto dec = derive_channel_masks_detailed(dec_entries, report.m_dec, min_keep);
    report.tau_enc = enc.threshold;
    report.tau_dec = dec.threshold;
    report.readmitted = enc.readmitted_total + dec.readmitted_total;

    std::vector<ChannelMask> masks = enc.masks;
    masks.insert(masks.end(), dec.masks.begin(), dec.masks.end());

    NetworkGraph pruned = apply_structural_prune(student, masks);
    report.params_after = count_params(pruned);
    report.flops_after = count_flops(pruned, flop_h, flop_w);

    for (const auto& m : masks) {
        PruneReport::LayerRow row;
        row.bn_id = m.bn_id;
        row.stage = student.layer(m.bn_id).stage;
        row.original = static_cast<int>(m.keep.size());
        row.kept = m.kept();
        row.dropped = m.dropped();
        const auto& derivation = (row.stage == StageTag::encoder) ? enc : dec;
        row.prefloor_dropped = derivation.prefloor_dropped.at(m.bn_id);
        row.readmitted = row.prefloor_dropped - row.dropped;
        report.layers.push_back(std::move(row));
    }
    return {std::move(pruned), std::move(report)};
}

/// Uniform per-layer pruning baseline: every BN layer in scope drops the same
/// fraction of channels, lowest |gamma| first; exact ties fall to the highest
/// channel indices, so a freshly initialized network (all gammas equal) loses
/// its top channels deterministically.
inline NetworkGraph uniform_prune(const NetworkGraph& net, real ratio, LevelScope scope,
                                  const MinKeepRule& min_keep = {}) {
    if (ratio < 0.0 || ratio >= 1.0)
        throw std::invalid_argument("uniform_prune: ratio must be in [0, 1)");

    std::vector<ChannelMask> masks;
    for (const auto& spec : net.layers) {
        if (spec.kind != LayerKind::bn) continue;
        if (scope == LevelScope::low && spec.level != LevelTag::low) continue;
        if (scope == LevelScope::high && spec.level != LevelTag::high) continue;
        const auto& bn = net.bn(spec.id);
        const int channels = bn.channels();
        int drop = static_cast<int>(ratio * channels);
        drop = std::min(drop, channels - min_keep.of(channels));
        if (drop <= 0) continue;

        std::vector<int> order(static_cast<std::size_t>(channels));
        for (int c = 0; c < channels; ++c) order[static_cast<std::size_t>(c)] = c;
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            const real ma = std::abs(bn.gamma[static_cast<std::size_t>(a)]);
            const real mb = std::abs(bn.gamma[static_cast<std::size_t>(b)]);
            if (ma != mb) return ma < mb;
            return a > b;
        });
        ChannelMask m{spec.id, std::vector<std::uint8_t>(static_cast<std::size_t>(channels), 1)};
        for (int k = 0; k < drop; ++k) m.keep[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = 0;
        masks.push_back(std::move(m));
    }
    if (masks.empty()) return net;
    return apply_structural_prune(net, masks);
}

/// Pruning stage: trains a fresh student of the teacher's architecture under
/// the sparsification + distillation loss. The caller prunes the returned
/// sparsified student with prune_student.
inline StageOutcome run_prune_stage(const NetworkGraph& teacher, const StageConfig& cfg,
                                    const std::vector<TrainingSample>& data) {
    NetworkGraph student = teacher;  // same architecture
    reinit_weights(student, mix_seed(cfg.seed, 0x57D));
    return run_stage(student, &teacher, cfg, /*include_sparsity=*/true, data);
}

// --- report serialization ---------------------------------------------------

inline nlohmann::json prune_report_to_json(const PruneReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& row : r.layers)
        layers.push_back({{"bn_id", row.bn_id},
                          {"stage", row.stage == StageTag::encoder ? "encoder" : "decoder"},
                          {"original", row.original},
                          {"kept", row.kept},
                          {"dropped", row.dropped},
                          {"prefloor_dropped", row.prefloor_dropped},
                          {"readmitted", row.readmitted}});
    return nlohmann::json{{"ratio", r.ratio},
                          {"m_enc", r.m_enc},
                          {"m_dec", r.m_dec},
                          {"tau_enc", r.tau_enc},
                          {"tau_dec", r.tau_dec},
                          {"readmitted", r.readmitted},
                          {"params_before", r.params_before},
                          {"params_after", r.params_after},
                          {"flops_before", r.flops_before},
                          {"flops_after", r.flops_after},
                          {"layers", layers}};
}

inline void write_prune_report(const PruneReport& r, const std::filesystem::path& json_path,
                               const std::filesystem::path& histogram_csv_path) {
    std::ofstream os(json_path);
    os << prune_report_to_json(r).dump(2) << "\n";
    std::ofstream hs(histogram_csv_path);
    hs << "scope,bin_lo,bin_hi,count\n";
    for (const auto& b : r.gamma_histogram)
        hs << b.scope << "," << b.lo << "," << b.hi << "," << b.count << "\n";
}

}  // namespace slimmat
