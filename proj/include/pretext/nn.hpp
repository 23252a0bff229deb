#pragma once
#include <json.hpp>

#include <map>
#include <string>
#include <vector>

#include "pretext/data.hpp"
#include "pretext/tensor.hpp"

namespace pretext {

struct BranchConfig {
    int layers = 1;
    int width = 32;
    int heads = 2;
};

// Dual-encoder architecture: token embeddings -> pre-LN transformer blocks ->
// per-token linear projection into the shared d-dim space -> masked max-pool.
struct ModelConfig {
    std::string visual_kind = "feature-vector";  // or "patch-grid"
    BranchConfig visual;
    int visual_tokens = 1;      // feature-vector mode: rows after reshape
    int visual_token_dim = 64;  // per-token input dim (feature slice / patch pixels)
    int visual_max_tokens = 16;
    int patch_size = 4;  // patch-grid mode

    BranchConfig textual;
    int vocab_size = 0;  // filled from the corpus vocabulary
    int max_len = 100;   // L

    int embed_dim = 24;  // shared d
    bool learnable_temperature = false;

    int pgu_prototypes = 6;  // K
    int pgu_dim = 16;        // d'

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

using Bound = std::map<std::string, Tensor>;

// parameter construction (names are stable; checkpoints rely on them)
void init_encoder_params(ParamStore& params, const ModelConfig& cfg, Rng& rng);
void init_mlm_head(ParamStore& params, const ModelConfig& cfg, Rng& rng);
void init_classifier(ParamStore& params, const ModelConfig& cfg, int num_classes, Rng& rng);
void init_pgu_head(ParamStore& params, const ModelConfig& cfg, int num_classes, Rng& rng);

std::vector<char> pad_keep_mask(const std::vector<int>& ids);  // 1 where id != PAD

// single-sample forwards; token features are rows
Tensor encode_text_tokens(Tape& tape, const Bound& p, const ModelConfig& cfg,
                          const std::vector<int>& ids);
Tensor encode_visual_tokens(Tape& tape, const Bound& p, const ModelConfig& cfg,
                            const Matrix& raw_tokens);

// per-token linear map into the shared space, then elementwise max over kept rows
Tensor project_tokens(Tape& tape, const Bound& p, const std::string& prefix, const Tensor& tokens);
Tensor project_and_pool(const Tensor& projected, const std::vector<char>& keep);

struct TextForward {
    Tensor tokens;     // L×width
    Tensor projected;  // L×d
    Tensor global;     // 1×d
    std::vector<char> keep;
};
TextForward text_forward(Tape& tape, const Bound& p, const ModelConfig& cfg,
                         const std::vector<int>& ids);

struct VisualForward {
    Tensor tokens;     // Tv×width
    Tensor projected;  // Tv×d
    Tensor global;     // 1×d
    std::vector<char> keep;  // all ones
};
VisualForward visual_forward(Tape& tape, const Bound& p, const ModelConfig& cfg,
                             const Matrix& raw_tokens);

// raw visual tokens for a record per the config (feature reshape or PNM patches)
Matrix visual_input_tokens(const ModelConfig& cfg, const PersonRecord& rec, bool hflip = false);

// K prototypes cross-attend the token features; attended rows are concatenated
// and linearly mapped to d'. Same prototypes for both modalities.
Tensor pgu_features_graph(Tape& tape, const Tensor& tokens, const Tensor& protos,
                          const Tensor& map_w, const Tensor& map_b, const std::vector<char>& keep);
Matrix pgu_features(const Matrix& tokens, const Matrix& protos, const Matrix& map_w,
                    const Matrix& map_b, const std::vector<char>& keep);

// inference-mode batch embeddings (no gradient use)
Matrix embed_texts(const ParamStore& params, const ModelConfig& cfg, const Vocabulary& vocab,
                   const std::vector<std::string>& captions, bool use_pgu = false);
Matrix embed_images(const ParamStore& params, const ModelConfig& cfg,
                    const std::vector<const PersonRecord*>& records, bool use_pgu = false);

}  // namespace pretext
