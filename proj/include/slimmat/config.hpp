#pragma once

#include <json.hpp>

#include "slimmat/losses.hpp"

namespace slimmat {

/// All knobs of one optimization stage (teacher pretraining, pruning stage,
/// or training stage). A run's config file carries one section per stage.
struct StageConfig {
    // pruning-related
    double ratio = 0.5;

    // loss balance; kd < 0 means "auto" (method-dependent default)
    double lambda_alpha_gt = 1.0;
    double lambda_alpha_teacher = 0.5;
    double lambda_sparsity = 1e-4;
    double lambda_kd = -1.0;

    KDMethod kd;
    std::vector<std::string> eta = {"enc1", "enc2", "enc3", "enc4"};
    bool allow_decoder_eta = false;

    int epochs = 15;
    int batch_size = 8;
    double learning_rate = 5e-3;
    std::uint64_t seed = 7;

    MinKeepRule min_keep;

    StageLossWeights loss_weights(bool training_stage) const {
        StageLossWeights w;
        w.alpha_gt = lambda_alpha_gt;
        w.alpha_teacher = lambda_alpha_teacher;
        w.sparsity = training_stage ? 0.0 : lambda_sparsity;
        w.kd_weight_auto = lambda_kd < 0.0;
        w.kd = lambda_kd < 0.0 ? 1.0 : lambda_kd;
        return w;
    }
};

/// Whole-run configuration, schema "slimmat/v1".
struct RunConfig {
    std::uint64_t seed = 7;
    double width_multiplier = 1.0;
    int crop = 64;
    StageConfig teacher;
    StageConfig prune;
    StageConfig train;

    RunConfig() {
        teacher.epochs = 30;
        teacher.learning_rate = 2e-3;
        teacher.lambda_alpha_teacher = 0.0;
        teacher.lambda_sparsity = 0.0;
        teacher.lambda_kd = 0.0;
        teacher.eta.clear();
        prune.epochs = 15;
        train.epochs = 30;
        train.learning_rate = 2e-3;
    }
};

namespace detail {

struct ConfigIssues {
    std::vector<std::string> keys;
    void bad(const std::string& k) { keys.push_back(k); }
    void check(const nlohmann::json& j, const std::string& prefix,
               const std::vector<std::string>& allowed) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
                bad(prefix + it.key());
        }
    }
};

inline void parse_kd(const nlohmann::json& j, const std::string& prefix, KDMethod& kd,
                     ConfigIssues& issues) {
    issues.check(j, prefix, {"method", "nst_degree", "nst_bias", "spkd_spatial", "spkd_channel"});
    if (j.contains("method")) {
        try {
            kd.name = kd_from_name(j["method"].get<std::string>());
        } catch (const ConfigError&) {
            issues.bad(prefix + "method");
        }
    }
    if (j.contains("nst_degree")) kd.nst_degree = j["nst_degree"].get<int>();
    if (j.contains("nst_bias")) kd.nst_bias = j["nst_bias"].get<double>();
    if (j.contains("spkd_spatial")) kd.spkd_spatial = j["spkd_spatial"].get<bool>();
    if (j.contains("spkd_channel")) kd.spkd_channel = j["spkd_channel"].get<bool>();
}

inline void parse_stage(const nlohmann::json& j, const std::string& prefix, StageConfig& s,
                        ConfigIssues& issues) {
    issues.check(j, prefix,
                 {"ratio", "lambda", "kd", "eta", "allow_decoder_eta", "epochs", "batch_size",
                  "learning_rate", "seed", "min_keep"});
    if (j.contains("ratio")) {
        s.ratio = j["ratio"].get<double>();
        if (s.ratio < 0.0 || s.ratio >= 1.0) issues.bad(prefix + "ratio");
    }
    if (j.contains("lambda")) {
        const auto& l = j["lambda"];
        issues.check(l, prefix + "lambda.", {"alpha_gt", "alpha_teacher", "sparsity", "kd"});
        if (l.contains("alpha_gt")) s.lambda_alpha_gt = l["alpha_gt"].get<double>();
        if (l.contains("alpha_teacher")) s.lambda_alpha_teacher = l["alpha_teacher"].get<double>();
        if (l.contains("sparsity")) s.lambda_sparsity = l["sparsity"].get<double>();
        if (l.contains("kd")) {
            if (l["kd"].is_string() && l["kd"] == "auto") s.lambda_kd = -1.0;
            else s.lambda_kd = l["kd"].get<double>();
        }
        for (const char* k : {"alpha_gt", "alpha_teacher", "sparsity"})
            if (l.contains(k) && l[k].get<double>() < 0.0) issues.bad(prefix + "lambda." + k);
    }
    if (j.contains("kd")) parse_kd(j["kd"], prefix + "kd.", s.kd, issues);
    if (j.contains("eta")) s.eta = j["eta"].get<std::vector<std::string>>();
    if (j.contains("allow_decoder_eta")) s.allow_decoder_eta = j["allow_decoder_eta"].get<bool>();
    if (j.contains("epochs")) {
        s.epochs = j["epochs"].get<int>();
        if (s.epochs < 0) issues.bad(prefix + "epochs");
    }
    if (j.contains("batch_size")) {
        s.batch_size = j["batch_size"].get<int>();
        if (s.batch_size < 1) issues.bad(prefix + "batch_size");
    }
    if (j.contains("learning_rate")) {
        s.learning_rate = j["learning_rate"].get<double>();
        if (s.learning_rate <= 0.0) issues.bad(prefix + "learning_rate");
    }
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("min_keep")) {
        const auto& m = j["min_keep"];
        issues.check(m, prefix + "min_keep.", {"fraction", "at_least"});
        if (m.contains("fraction")) s.min_keep.fraction = m["fraction"].get<double>();
        if (m.contains("at_least")) s.min_keep.at_least = m["at_least"].get<int>();
    }
}

}  // namespace detail

/// Parses and validates a slimmat/v1 document. Throws ConfigError listing
/// every offending key.
inline RunConfig run_config_from_json(const nlohmann::json& doc) {
    detail::ConfigIssues issues;
    if (!doc.contains("schema") || doc["schema"] != "slimmat/v1")
        throw ConfigError("config: expected schema \"slimmat/v1\"");
    issues.check(doc, "", {"schema", "seed", "width_multiplier", "crop", "teacher", "prune", "train"});

    RunConfig cfg;
    if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
    if (doc.contains("width_multiplier")) {
        cfg.width_multiplier = doc["width_multiplier"].get<double>();
        if (!(cfg.width_multiplier > 0.0) || cfg.width_multiplier > 4.0)
            issues.bad("width_multiplier");
    }
    if (doc.contains("crop")) {
        cfg.crop = doc["crop"].get<int>();
        if (cfg.crop < 16 || cfg.crop % 16 != 0) issues.bad("crop");
    }
    // stage seeds default to derivations of the run seed
    cfg.teacher.seed = mix_seed(cfg.seed, 0x7EAC);
    cfg.prune.seed = mix_seed(cfg.seed, 0x9123);
    cfg.train.seed = mix_seed(cfg.seed, 0x7121);
    if (doc.contains("teacher")) detail::parse_stage(doc["teacher"], "teacher.", cfg.teacher, issues);
    if (doc.contains("prune")) detail::parse_stage(doc["prune"], "prune.", cfg.prune, issues);
    if (doc.contains("train")) detail::parse_stage(doc["train"], "train.", cfg.train, issues);

    if (!issues.keys.empty()) {
        std::string msg = "config: invalid or unknown keys:";
        for (const auto& k : issues.keys) msg += " " + k;
        throw ConfigError(msg);
    }
    return cfg;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    auto stage = [](const StageConfig& s) {
        nlohmann::json j;
        j["ratio"] = s.ratio;
        j["lambda"] = {{"alpha_gt", s.lambda_alpha_gt},
                       {"alpha_teacher", s.lambda_alpha_teacher},
                       {"sparsity", s.lambda_sparsity}};
        if (s.lambda_kd < 0.0) j["lambda"]["kd"] = "auto";
        else j["lambda"]["kd"] = s.lambda_kd;
        j["kd"] = {{"method", kd_name(s.kd.name)},
                   {"nst_degree", s.kd.nst_degree},
                   {"nst_bias", s.kd.nst_bias},
                   {"spkd_spatial", s.kd.spkd_spatial},
                   {"spkd_channel", s.kd.spkd_channel}};
        j["eta"] = s.eta;
        j["allow_decoder_eta"] = s.allow_decoder_eta;
        j["epochs"] = s.epochs;
        j["batch_size"] = s.batch_size;
        j["learning_rate"] = s.learning_rate;
        j["seed"] = s.seed;
        j["min_keep"] = {{"fraction", s.min_keep.fraction}, {"at_least", s.min_keep.at_least}};
        return j;
    };
    nlohmann::json doc;
    doc["schema"] = "slimmat/v1";
    doc["seed"] = cfg.seed;
    doc["width_multiplier"] = cfg.width_multiplier;
    doc["crop"] = cfg.crop;
    doc["teacher"] = stage(cfg.teacher);
    doc["prune"] = stage(cfg.prune);
    doc["train"] = stage(cfg.train);
    return doc;
}

}  // namespace slimmat
