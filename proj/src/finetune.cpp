#include "pretext/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "pretext/errors.hpp"
#include "pretext/scorer.hpp"

namespace pretext {

Tensor id_loss_graph(Tape& tape, const Tensor& v, const Tensor& t, const std::vector<int>& labels,
                     const Tensor& classifier) {
    (void)tape;
    const Index n = v.rows();
    if (t.rows() != n || static_cast<Index>(labels.size()) != n)
        throw ContractError("id_loss: batch size mismatch");
    const Index classes = classifier.cols();
    std::vector<std::pair<Index, Index>> coords;
    coords.reserve(labels.size());
    for (Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= classes)
            throw ContractError("id_loss: label " + std::to_string(y) + " outside [0, " +
                                std::to_string(classes) + ")");
        coords.emplace_back(i, y);
    }
    Tensor nll_v = neg(mean_all(gather_entries(rowwise_log_softmax(matmul(v, classifier)), coords)));
    Tensor nll_t = neg(mean_all(gather_entries(rowwise_log_softmax(matmul(t, classifier)), coords)));
    return add(nll_v, nll_t);
}

double id_loss(const Matrix& v, const Matrix& t, const std::vector<int>& labels,
               const Matrix& classifier) {
    Tape tape;
    return id_loss_graph(tape, tape.constant(v), tape.constant(t), labels,
                         tape.constant(classifier))
        .item();
}

int mine_semi_hard(const EmbeddingVector& anchor, const Matrix& candidates,
                   const std::vector<int>& labels, int anchor_label, int positive_index,
                   double alpha) {
    (void)alpha;
    const Index n = candidates.rows();
    if (static_cast<Index>(labels.size()) != n)
        throw ContractError("mine_semi_hard: labels size mismatch");
    if (positive_index < 0 || positive_index >= n)
        throw ContractError("mine_semi_hard: positive index out of range");
    const double sim_pos =
        cosine_similarity(anchor, candidates.row(positive_index).transpose());
    int best_semi = -1, best_any = -1;
    double best_semi_sim = 0.0, best_any_sim = 0.0;
    for (Index j = 0; j < n; ++j) {
        if (labels[static_cast<size_t>(j)] == anchor_label) continue;
        const double sim = cosine_similarity(anchor, candidates.row(j).transpose());
        if (best_any < 0 || sim > best_any_sim) {
            best_any = static_cast<int>(j);
            best_any_sim = sim;
        }
        if (sim < sim_pos && (best_semi < 0 || sim > best_semi_sim)) {
            best_semi = static_cast<int>(j);
            best_semi_sim = sim;
        }
    }
    if (best_any < 0) throw MiningError("no negative candidates for anchor");
    return best_semi >= 0 ? best_semi : best_any;
}

MinedNegatives mine_batch(const Matrix& v, const Matrix& t, const std::vector<int>& labels,
                          double alpha) {
    const Index n = v.rows();
    if (t.rows() != n || static_cast<Index>(labels.size()) != n)
        throw ContractError("mine_batch: batch size mismatch");
    MinedNegatives mined;
    mined.for_image.reserve(static_cast<size_t>(n));
    mined.for_text.reserve(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        mined.for_image.push_back(
            mine_semi_hard(v.row(i).transpose(), t, labels, y, static_cast<int>(i), alpha));
        mined.for_text.push_back(
            mine_semi_hard(t.row(i).transpose(), v, labels, y, static_cast<int>(i), alpha));
    }
    return mined;
}

Tensor ranking_loss_graph(Tape& tape, const Tensor& v, const Tensor& t,
                          const MinedNegatives& mined, double alpha) {
    (void)tape;
    if (alpha <= 0.0) throw ConfigError("ranking_loss: alpha must be positive");
    const Index n = v.rows();
    if (static_cast<Index>(mined.for_image.size()) != n ||
        static_cast<Index>(mined.for_text.size()) != n)
        throw ContractError("ranking_loss: mined index count mismatch");
    Tensor s = matmul(l2_normalize_rows(v), transpose(l2_normalize_rows(t)));
    std::vector<std::pair<Index, Index>> diag, img_neg, txt_neg;
    for (Index i = 0; i < n; ++i) {
        diag.emplace_back(i, i);
        img_neg.emplace_back(i, mined.for_image[static_cast<size_t>(i)]);
        txt_neg.emplace_back(mined.for_text[static_cast<size_t>(i)], i);  // sim(t_i, v_j) = s(j, i)
    }
    Tensor pos = gather_entries(s, diag);
    Tensor h_img = relu(add_scalar(sub(gather_entries(s, img_neg), pos), alpha));
    Tensor h_txt = relu(add_scalar(sub(gather_entries(s, txt_neg), pos), alpha));
    return add(mean_all(h_img), mean_all(h_txt));
}

double ranking_loss(const Matrix& v, const Matrix& t, const MinedNegatives& mined, double alpha) {
    Tape tape;
    return ranking_loss_graph(tape, tape.constant(v), tape.constant(t), mined, alpha).item();
}

Tensor pgu_loss_graph(Tape& tape, const Tensor& v_u, const Tensor& t_u,
                      const std::vector<int>& labels, const Tensor& classifier, double alpha) {
    Tensor id = id_loss_graph(tape, v_u, t_u, labels, classifier);
    const MinedNegatives mined = mine_batch(v_u.value(), t_u.value(), labels, alpha);
    return add(id, ranking_loss_graph(tape, v_u, t_u, mined, alpha));
}

double pgu_loss(const Matrix& v_u, const Matrix& t_u, const std::vector<int>& labels,
                const Matrix& classifier, double alpha) {
    Tape tape;
    return pgu_loss_graph(tape, tape.constant(v_u), tape.constant(t_u), labels,
                          tape.constant(classifier), alpha)
        .item();
}

FinetuneLossReport finetune_step(ParamStore& params, const ModelConfig& cfg,
                                 const Vocabulary& vocab,
                                 const std::vector<const PersonRecord*>& batch,
                                 const std::vector<int>& labels, const FinetuneOptions& opt,
                                 double lr_now, Rng& aug_rng, const std::string& batch_tag) {
    if (batch.size() < 2) throw ContractError("finetune_step: batch must have N >= 2");
    if (batch.size() != labels.size()) throw ContractError("finetune_step: labels size mismatch");
    if (opt.gamma != 0 && opt.gamma != 1) throw ConfigError("gamma must be 0 or 1");
    {
        std::set<int> distinct(labels.begin(), labels.end());
        if (distinct.size() < 2)
            throw MiningError("batch has a single identity at " + batch_tag);
    }

    Tape tape;
    Bound p = params.bind(tape);

    std::vector<Tensor> v_rows, t_rows, vu_rows, tu_rows;
    for (const PersonRecord* rec : batch) {
        const bool flip = opt.hflip && cfg.visual_kind == "patch-grid" && aug_rng.bernoulli(0.5);
        VisualForward vf = visual_forward(tape, p, cfg, visual_input_tokens(cfg, *rec, flip));
        TextForward tf = text_forward(tape, p, cfg, tokenize(rec->caption, vocab, cfg.max_len).ids);
        v_rows.push_back(vf.global);
        t_rows.push_back(tf.global);
        if (opt.gamma == 1) {
            vu_rows.push_back(pgu_features_graph(tape, vf.projected, p.at("pgu.protos"),
                                                 p.at("pgu.map.w"), p.at("pgu.map.b"), vf.keep));
            tu_rows.push_back(pgu_features_graph(tape, tf.projected, p.at("pgu.protos"),
                                                 p.at("pgu.map.w"), p.at("pgu.map.b"), tf.keep));
        }
    }
    Tensor v = concat_rows(v_rows);
    Tensor t = concat_rows(t_rows);

    Tensor l_id = id_loss_graph(tape, v, t, labels, p.at("cls.w"));
    const MinedNegatives mined = mine_batch(v.value(), t.value(), labels, opt.alpha);
    Tensor l_rk = ranking_loss_graph(tape, v, t, mined, opt.alpha);
    Tensor total = add(l_id, l_rk);

    FinetuneLossReport report;
    report.gamma = opt.gamma;
    report.alpha = opt.alpha;
    report.l_id = l_id.item();
    report.l_rk = l_rk.item();

    if (opt.gamma == 1) {
        Tensor l_pgu = pgu_loss_graph(tape, concat_rows(vu_rows), concat_rows(tu_rows), labels,
                                      p.at("pgu.cls.w"), opt.alpha);
        report.l_pgu = l_pgu.item();
        total = add(total, l_pgu);
    }
    report.l_ft = total.item();
    if (!std::isfinite(report.l_ft))
        throw NumericError("non-finite fine-tuning loss at " + batch_tag +
                           " (l_id=" + std::to_string(report.l_id) +
                           ", l_rk=" + std::to_string(report.l_rk) +
                           ", l_pgu=" + std::to_string(report.l_pgu) + ")");

    tape.backward(total);
    OptimConfig step_cfg = opt.optim;
    step_cfg.lr = lr_now;
    const double text_mult = opt.lr_text_mult, head_mult = opt.lr_head_mult;
    params.adam_step(p, step_cfg, [text_mult, head_mult](const std::string& name) {
        if (name.rfind("txt.", 0) == 0 || name.rfind("mlm.", 0) == 0) return text_mult;
        if (name.rfind("cls.", 0) == 0 || name.rfind("pgu.", 0) == 0) return head_mult;
        return 1.0;
    });
    return report;
}

void to_json(nlohmann::json& j, const FinetuneConfig& c) {
    j = nlohmann::json{{"gamma", c.gamma},
                       {"alpha", c.alpha},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr_visual", c.lr_visual},
                       {"lr_text", c.lr_text},
                       {"lr_head", c.lr_head},
                       {"weight_decay", c.weight_decay},
                       {"warmup_frac", c.warmup_frac},
                       {"seed", c.seed},
                       {"hflip", c.hflip}};
}

void from_json(const nlohmann::json& j, FinetuneConfig& c) {
    if (j.contains("gamma")) j.at("gamma").get_to(c.gamma);
    if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
    if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("lr_visual")) j.at("lr_visual").get_to(c.lr_visual);
    if (j.contains("lr_text")) j.at("lr_text").get_to(c.lr_text);
    if (j.contains("lr_head")) j.at("lr_head").get_to(c.lr_head);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("warmup_frac")) j.at("warmup_frac").get_to(c.warmup_frac);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("hflip")) j.at("hflip").get_to(c.hflip);
}

namespace {

std::vector<const PersonRecord*> labeled_training_records(const DatasetManifest& manifest) {
    std::vector<const PersonRecord*> out;
    bool any_split = false;
    for (const auto& rec : manifest.records) any_split = any_split || !rec.split.empty();
    for (const auto& rec : manifest.records) {
        if (any_split && rec.split != "train") continue;
        if (!rec.identity)
            throw ValidationError("record '" + rec.image_id + "' lacks an identity label");
        out.push_back(&rec);
    }
    return out;
}

}  // namespace

Checkpoint finetune_loop(const DatasetManifest& train, const Checkpoint& init,
                         const FinetuneConfig& cfg, std::vector<FinetuneLossReport>* epoch_logs,
                         const FinetuneEpochCallback& on_epoch) {
    if (cfg.gamma != 0 && cfg.gamma != 1) throw ConfigError("gamma must be 0 or 1");
    if (cfg.alpha <= 0.0) throw ConfigError("alpha must be positive");
    if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg.batch_size < 2) throw ConfigError("fine-tuning needs batch_size >= 2");

    const auto records = labeled_training_records(train);
    if (records.size() < 2) throw ValidationError("fine-tuning needs at least 2 records");
    if (cfg.batch_size > records.size())
        throw ConfigError("batch_size exceeds the number of training records");

    // contiguous class ids in sorted identity order
    std::set<int> identities;
    for (const auto* rec : records) identities.insert(*rec->identity);
    if (identities.size() < 2) throw ValidationError("fine-tuning needs at least 2 identities");
    std::map<int, int> class_of;
    for (int id : identities) class_of.emplace(id, static_cast<int>(class_of.size()));
    std::vector<int> labels;
    labels.reserve(records.size());
    for (const auto* rec : records) labels.push_back(class_of.at(*rec->identity));

    Checkpoint ckpt;
    ckpt.model = init.model;
    ckpt.beta = init.beta;
    ckpt.tau = init.tau;
    ckpt.gamma = cfg.gamma;
    ckpt.num_classes = static_cast<int>(identities.size());
    ckpt.vocab = init.vocab;
    ckpt.params = init.params;

    Rng init_rng(mix_seed(cfg.seed, fnv1a("finetune-init")));
    init_classifier(ckpt.params, ckpt.model, ckpt.num_classes, init_rng);
    if (cfg.gamma == 1) init_pgu_head(ckpt.params, ckpt.model, ckpt.num_classes, init_rng);

    FinetuneOptions opt;
    opt.gamma = cfg.gamma;
    opt.alpha = cfg.alpha;
    opt.optim.lr = cfg.lr_visual;
    opt.optim.weight_decay = cfg.weight_decay;
    opt.lr_text_mult = cfg.lr_text / cfg.lr_visual;
    opt.lr_head_mult = cfg.lr_head / cfg.lr_visual;
    opt.hflip = cfg.hflip;

    const size_t steps_per_epoch = records.size() / cfg.batch_size;
    const size_t total_steps = steps_per_epoch * static_cast<size_t>(cfg.epochs);
    const size_t warmup_steps =
        std::max<size_t>(1, static_cast<size_t>(std::llround(cfg.warmup_frac *
                                                             static_cast<double>(total_steps))));

    Rng aug_rng(mix_seed(cfg.seed, fnv1a("finetune-aug")));
    Rng resample_rng(mix_seed(cfg.seed, fnv1a("finetune-resample")));
    size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = epoch_batches(records.size(), cfg.batch_size, cfg.seed,
                                           static_cast<size_t>(epoch), true);
        FinetuneLossReport mean;
        mean.gamma = cfg.gamma;
        mean.alpha = cfg.alpha;
        for (const auto& batch_idx : batches) {
            auto gather = [&](const std::vector<size_t>& idx) {
                std::pair<std::vector<const PersonRecord*>, std::vector<int>> out;
                for (size_t i : idx) {
                    out.first.push_back(records[i]);
                    out.second.push_back(labels[i]);
                }
                return out;
            };
            const double lr_now =
                cfg.lr_visual * std::min(1.0, static_cast<double>(step + 1) /
                                                  static_cast<double>(warmup_steps));
            const std::string tag =
                "epoch " + std::to_string(epoch) + " step " + std::to_string(step);
            auto [batch, batch_labels] = gather(batch_idx);
            FinetuneLossReport r;
            try {
                r = finetune_step(ckpt.params, ckpt.model, ckpt.vocab, batch, batch_labels, opt,
                                  lr_now, aug_rng, tag);
            } catch (const MiningError&) {
                // resample once from a fresh shuffle, then give up
                std::vector<size_t> all(records.size());
                for (size_t i = 0; i < all.size(); ++i) all[i] = i;
                for (size_t i = all.size(); i > 1; --i)
                    std::swap(all[i - 1], all[resample_rng.uniform_int(i)]);
                all.resize(cfg.batch_size);
                auto [retry_batch, retry_labels] = gather(all);
                r = finetune_step(ckpt.params, ckpt.model, ckpt.vocab, retry_batch, retry_labels,
                                  opt, lr_now, aug_rng, tag + " (resampled)");
            }
            mean.l_id += r.l_id;
            mean.l_rk += r.l_rk;
            mean.l_pgu += r.l_pgu;
            mean.l_ft += r.l_ft;
            ++step;
        }
        const double nb = static_cast<double>(batches.size());
        mean.l_id /= nb;
        mean.l_rk /= nb;
        mean.l_pgu /= nb;
        mean.l_ft /= nb;
        if (epoch_logs) epoch_logs->push_back(mean);
        if (on_epoch) on_epoch(epoch, mean);
    }

    ckpt.rng_state = aug_rng.state_string();
    ckpt.train_config = nlohmann::json{{"finetune", cfg}, {"pretrain", init.train_config}};
    return ckpt;
}

}  // namespace pretext
