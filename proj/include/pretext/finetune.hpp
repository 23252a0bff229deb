#pragma once
#include <functional>
#include <string>
#include <vector>

#include "pretext/checkpoint.hpp"
#include "pretext/data.hpp"
#include "pretext/nn.hpp"
#include "pretext/scorer.hpp"
#include "pretext/tensor.hpp"

namespace pretext {

struct FinetuneLossReport {
    double l_id = 0.0;
    double l_rk = 0.0;
    double l_pgu = 0.0;
    double l_ft = 0.0;  // l_id + l_rk + gamma * l_pgu
    int gamma = 0;
    double alpha = 0.2;
};

// Cross-entropy on identity logits from one classifier shared by both
// modalities: per pair -(log p_v[y] + log p_t[y]), averaged over the batch.
Tensor id_loss_graph(Tape& tape, const Tensor& v, const Tensor& t, const std::vector<int>& labels,
                     const Tensor& classifier);
double id_loss(const Matrix& v, const Matrix& t, const std::vector<int>& labels,
               const Matrix& classifier);

// Among candidates of a different identity with sim(anchor, cand) strictly
// below sim(anchor, positive), return the most similar; if none qualify,
// return the hardest negative overall. Ties go to the lower index. The margin
// parameter is part of the mining call signature but does not enter the rule.
int mine_semi_hard(const EmbeddingVector& anchor, const Matrix& candidates,
                   const std::vector<int>& labels, int anchor_label, int positive_index,
                   double alpha = 0.2);

struct MinedNegatives {
    std::vector<int> for_image;  // t-negative index per image anchor
    std::vector<int> for_text;   // v-negative index per text anchor
};
MinedNegatives mine_batch(const Matrix& v, const Matrix& t, const std::vector<int>& labels,
                          double alpha = 0.2);

// Bidirectional hinge of the mined triplets: per pair
// max(a - s(v,t+) + s(v,t-), 0) + max(a - s(t,v+) + s(t,v-), 0), batch mean.
Tensor ranking_loss_graph(Tape& tape, const Tensor& v, const Tensor& t,
                          const MinedNegatives& mined, double alpha);
double ranking_loss(const Matrix& v, const Matrix& t, const MinedNegatives& mined,
                    double alpha = 0.2);

// id + ranking on the granularity-unified features with the head's own shared
// classifier; mining is redone on the unified features.
Tensor pgu_loss_graph(Tape& tape, const Tensor& v_u, const Tensor& t_u,
                      const std::vector<int>& labels, const Tensor& classifier, double alpha);
double pgu_loss(const Matrix& v_u, const Matrix& t_u, const std::vector<int>& labels,
                const Matrix& classifier, double alpha = 0.2);

struct FinetuneOptions {
    int gamma = 1;
    double alpha = 0.2;
    OptimConfig optim;         // optim.lr is the visual-branch rate
    double lr_text_mult = 1.0; // applied to "txt.*"
    double lr_head_mult = 1.0; // applied to "cls.*" and "pgu.*"
    bool hflip = false;        // file-path image mode only
};

FinetuneLossReport finetune_step(ParamStore& params, const ModelConfig& cfg,
                                 const Vocabulary& vocab,
                                 const std::vector<const PersonRecord*>& batch,
                                 const std::vector<int>& labels, const FinetuneOptions& opt,
                                 double lr_now, Rng& aug_rng, const std::string& batch_tag);

struct FinetuneConfig {
    int gamma = 1;
    double alpha = 0.2;
    int epochs = 10;
    size_t batch_size = 64;
    double lr_visual = 1e-4;
    double lr_text = 1e-5;
    double lr_head = 1e-4;
    double weight_decay = 0.0;
    double warmup_frac = 0.1;
    uint64_t seed = 1;
    bool hflip = true;
};

void to_json(nlohmann::json& j, const FinetuneConfig& c);
void from_json(const nlohmann::json& j, FinetuneConfig& c);

using FinetuneEpochCallback = std::function<void(int epoch, const FinetuneLossReport& mean)>;

Checkpoint finetune_loop(const DatasetManifest& train, const Checkpoint& init,
                         const FinetuneConfig& cfg,
                         std::vector<FinetuneLossReport>* epoch_logs = nullptr,
                         const FinetuneEpochCallback& on_epoch = nullptr);

}  // namespace pretext
