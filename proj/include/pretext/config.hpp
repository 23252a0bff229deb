#pragma once
#include <json.hpp>

#include <string>
#include <vector>

#include "pretext/finetune.hpp"
#include "pretext/generator.hpp"
#include "pretext/nn.hpp"
#include "pretext/pretrain.hpp"

namespace pretext {

// Single configuration document for every subcommand. Unknown keys are
// rejected so typos cannot silently fall back to defaults.
struct RunConfig {
    uint64_t seed = 1;

    std::string ontology_path = "assets/ontology.json";
    std::string templates_path = "assets/templates.tsv";

    std::string backend = "mock";  // mock | scripted | plugin
    int backend_dim = 64;
    uint64_t backend_seed = 0;
    std::string backend_script;                 // scripted
    std::vector<std::string> backend_command;   // plugin

    GenerateConfig generate;
    int workers = 1;

    ModelConfig model;
    PretrainConfig pretrain;
    FinetuneConfig finetune;

    void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace pretext
