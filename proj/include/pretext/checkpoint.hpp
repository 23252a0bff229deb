#pragma once
#include <json.hpp>

#include <string>

#include "pretext/data.hpp"
#include "pretext/nn.hpp"
#include "pretext/tensor.hpp"

namespace pretext {

// Versioned training-state container: model config, gates, vocabulary (with
// content hash, verified on load), parameter values, Adam moments, RNG state.
struct Checkpoint {
    int version = 1;
    ModelConfig model;
    int beta = 0;
    int gamma = 0;
    double tau = 1.0;
    int num_classes = 0;  // 0 before fine-tuning
    Vocabulary vocab;
    ParamStore params;
    std::string rng_state;
    nlohmann::json train_config;  // provenance snapshot of the run options
};

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pretext
