#pragma once
#include <functional>
#include <string>
#include <vector>

#include "pretext/checkpoint.hpp"
#include "pretext/data.hpp"
#include "pretext/nn.hpp"
#include "pretext/tensor.hpp"

namespace pretext {

struct LossReport {
    double l_i2t = 0.0;
    double l_t2i = 0.0;
    double l_con = 0.0;  // (l_i2t + l_t2i) / 2
    double l_mlm = 0.0;
    double l_pre = 0.0;  // l_con + beta * l_mlm
    int beta = 0;
};

// Symmetric in-batch contrastive objective over the N×N cosine matrix; logits
// are tau*S (or exp(w)*S when a learnable log-scale tensor is supplied).
struct ContrastiveParts {
    Tensor l_i2t;
    Tensor l_t2i;
    Tensor l_con;
};
ContrastiveParts contrastive_loss_graph(Tape& tape, const Tensor& v, const Tensor& t, double tau,
                                        const Tensor* learnable_scale = nullptr);
LossReport contrastive_loss(const Matrix& v, const Matrix& t, double tau = 1.0);

struct MaskedText {
    std::vector<int> original;   // x
    std::vector<int> corrupted;  // the encoder input
    std::vector<int> positions;  // M (ascending)
    std::vector<int> targets;    // x at M
};
// Each non-pad, non-[CLS] position is selected independently with the given
// rate; at least one position is forced. Selected positions are corrupted
// 80% -> [MASK], 10% -> random content token, 10% -> unchanged.
MaskedText mask_tokens(const std::vector<int>& ids, const Vocabulary& vocab, double rate, Rng& rng);

// mean over masked positions of -log p(target | context)
Tensor mlm_loss_graph(Tape& tape, const Tensor& logits, const std::vector<int>& targets);
double mlm_loss(const Matrix& logits, const std::vector<int>& targets);

struct PretrainOptions {
    int beta = 1;
    double tau = 1.0;
    double mask_rate = 0.15;
    OptimConfig optim;
};

LossReport pretrain_step(ParamStore& params, const ModelConfig& cfg, const Vocabulary& vocab,
                         const std::vector<const PersonRecord*>& batch,
                         const PretrainOptions& opt, double lr_now, Rng& mask_rng,
                         const std::string& batch_tag);

struct PretrainConfig {
    ModelConfig model;
    int beta = 1;
    double tau = 1.0;
    double mask_rate = 0.15;
    int epochs = 15;
    size_t batch_size = 512;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double warmup_frac = 0.1;  // linear warmup over this fraction of steps, then constant
    uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

using EpochCallback = std::function<void(int epoch, const LossReport& mean)>;

Checkpoint pretrain_loop(const DatasetManifest& train, const PretrainConfig& cfg,
                         std::vector<LossReport>* epoch_logs = nullptr,
                         const EpochCallback& on_epoch = nullptr);

}  // namespace pretext
