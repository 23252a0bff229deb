#include "pretext/config.hpp"

#include <fstream>
#include <set>

#include "pretext/errors.hpp"

namespace pretext {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    const std::string& scope) {
    if (!j.is_object()) throw ConfigError(scope + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) throw ConfigError(scope + ": unknown key \"" + key + "\"");
    }
}

}  // namespace

void RunConfig::validate() const {
    if (backend != "mock" && backend != "scripted" && backend != "plugin")
        throw ConfigError("backend must be mock, scripted, or plugin");
    if (backend == "scripted" && backend_script.empty())
        throw ConfigError("scripted backend requires backend_script");
    if (backend == "plugin" && backend_command.empty())
        throw ConfigError("plugin backend requires backend_command");
    if (backend_dim < 1) throw ConfigError("backend_dim must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (generate.threshold <= 0.0 || generate.threshold >= 1.0)
        throw ConfigError("threshold must be in (0, 1)");
    if (generate.scale <= 0.0) throw ConfigError("scale must be positive");
    if (generate.synonym_rate < 0.0 || generate.synonym_rate > 1.0)
        throw ConfigError("synonym_rate must be in [0, 1]");
    if (pretrain.beta != 0 && pretrain.beta != 1) throw ConfigError("beta must be 0 or 1");
    if (finetune.gamma != 0 && finetune.gamma != 1) throw ConfigError("gamma must be 0 or 1");
    if (pretrain.tau <= 0.0) throw ConfigError("tau must be positive");
    if (finetune.alpha <= 0.0) throw ConfigError("alpha must be positive");
    if (pretrain.mask_rate < 0.0 || pretrain.mask_rate > 1.0)
        throw ConfigError("mask_rate must be in [0, 1]");
    model.validate();
}

RunConfig parse_run_config(const nlohmann::json& j) {
    reject_unknown(j, {"seed", "ontology", "templates", "backend", "backend_dim", "backend_seed",
                       "backend_script", "backend_command", "threshold", "scale", "synonym_rate",
                       "workers", "model", "pretrain", "finetune"},
                   "config");
    RunConfig cfg;
    if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
    if (j.contains("ontology")) j.at("ontology").get_to(cfg.ontology_path);
    if (j.contains("templates")) j.at("templates").get_to(cfg.templates_path);
    if (j.contains("backend")) j.at("backend").get_to(cfg.backend);
    if (j.contains("backend_dim")) j.at("backend_dim").get_to(cfg.backend_dim);
    if (j.contains("backend_seed")) j.at("backend_seed").get_to(cfg.backend_seed);
    if (j.contains("backend_script")) j.at("backend_script").get_to(cfg.backend_script);
    if (j.contains("backend_command")) j.at("backend_command").get_to(cfg.backend_command);
    if (j.contains("threshold")) j.at("threshold").get_to(cfg.generate.threshold);
    if (j.contains("scale")) j.at("scale").get_to(cfg.generate.scale);
    if (j.contains("synonym_rate")) j.at("synonym_rate").get_to(cfg.generate.synonym_rate);
    if (j.contains("workers")) j.at("workers").get_to(cfg.workers);

    if (j.contains("model")) {
        reject_unknown(j.at("model"),
                       {"visual_kind", "visual", "visual_tokens", "visual_token_dim",
                        "visual_max_tokens", "patch_size", "textual", "vocab_size", "max_len",
                        "embed_dim", "learnable_temperature", "pgu_prototypes", "pgu_dim"},
                       "config.model");
        nlohmann::json m = nlohmann::json(cfg.model);  // defaults
        m.update(j.at("model"), /*merge_objects=*/true);
        for (const char* branch : {"visual", "textual"})
            if (j.at("model").contains(branch))
                reject_unknown(j.at("model").at(branch), {"layers", "width", "heads"},
                               std::string("config.model.") + branch);
        m.get_to(cfg.model);
    }
    if (j.contains("pretrain")) {
        reject_unknown(j.at("pretrain"),
                       {"beta", "tau", "mask_rate", "epochs", "batch_size", "lr", "weight_decay",
                        "warmup_frac"},
                       "config.pretrain");
        j.at("pretrain").get_to(cfg.pretrain);
    }
    if (j.contains("finetune")) {
        reject_unknown(j.at("finetune"),
                       {"gamma", "alpha", "epochs", "batch_size", "lr_visual", "lr_text",
                        "lr_head", "weight_decay", "warmup_frac", "hflip"},
                       "config.finetune");
        j.at("finetune").get_to(cfg.finetune);
    }
    cfg.pretrain.model = cfg.model;
    cfg.pretrain.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    try {
        return parse_run_config(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json pretrain = cfg.pretrain;
    pretrain.erase("model");  // recorded once at the top level
    pretrain.erase("seed");
    nlohmann::json finetune = cfg.finetune;
    finetune.erase("seed");
    return nlohmann::json{{"seed", cfg.seed},
                          {"ontology", cfg.ontology_path},
                          {"templates", cfg.templates_path},
                          {"backend", cfg.backend},
                          {"backend_dim", cfg.backend_dim},
                          {"backend_seed", cfg.backend_seed},
                          {"backend_script", cfg.backend_script},
                          {"backend_command", cfg.backend_command},
                          {"threshold", cfg.generate.threshold},
                          {"scale", cfg.generate.scale},
                          {"synonym_rate", cfg.generate.synonym_rate},
                          {"workers", cfg.workers},
                          {"model", cfg.model},
                          {"pretrain", pretrain},
                          {"finetune", finetune}};
}

}  // namespace pretext
