#include "pretext/pretrain.hpp"

#include <algorithm>
#include <cmath>

#include "pretext/errors.hpp"

namespace pretext {

ContrastiveParts contrastive_loss_graph(Tape& tape, const Tensor& v, const Tensor& t, double tau,
                                        const Tensor* learnable_scale) {
    if (v.rows() != t.rows() || v.cols() != t.cols())
        throw ContractError("contrastive_loss: V and T shapes differ");
    if (tau <= 0.0) throw ConfigError("contrastive_loss: tau must be positive");
    const Index n = v.rows();
    Tensor vn = l2_normalize_rows(v);
    Tensor tn = l2_normalize_rows(t);
    Tensor s = matmul(vn, transpose(tn));  // s(i,j) = sim(v_i, t_j)
    Tensor logits = learnable_scale ? scale_by(s, exp_elem(*learnable_scale)) : scale(s, tau);
    std::vector<std::pair<Index, Index>> diag;
    diag.reserve(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) diag.emplace_back(i, i);
    ContrastiveParts parts;
    parts.l_i2t = neg(mean_all(gather_entries(rowwise_log_softmax(logits), diag)));
    parts.l_t2i = neg(mean_all(gather_entries(rowwise_log_softmax(transpose(logits)), diag)));
    parts.l_con = scale(add(parts.l_i2t, parts.l_t2i), 0.5);
    return parts;
}

LossReport contrastive_loss(const Matrix& v, const Matrix& t, double tau) {
    if (!v.allFinite() || !t.allFinite())
        throw NumericError("contrastive_loss: non-finite embedding");
    Tape tape;
    ContrastiveParts parts =
        contrastive_loss_graph(tape, tape.constant(v), tape.constant(t), tau);
    LossReport r;
    r.l_i2t = parts.l_i2t.item();
    r.l_t2i = parts.l_t2i.item();
    r.l_con = parts.l_con.item();
    r.l_pre = r.l_con;
    return r;
}

MaskedText mask_tokens(const std::vector<int>& ids, const Vocabulary& vocab, double rate,
                       Rng& rng) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("mask rate must be in [0, 1]");
    std::vector<size_t> eligible;
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] != Vocabulary::kPad && ids[i] != Vocabulary::kCls) eligible.push_back(i);
    if (eligible.empty()) throw ContractError("mask_tokens: no maskable positions");

    MaskedText out;
    out.original = ids;
    out.corrupted = ids;
    std::vector<size_t> selected;
    for (size_t i : eligible)
        if (rng.bernoulli(rate)) selected.push_back(i);
    if (selected.empty()) selected.push_back(eligible[rng.uniform_int(eligible.size())]);

    const int content_tokens = vocab.size() - 4;  // ids 0..3 are specials
    for (size_t pos : selected) {
        out.positions.push_back(static_cast<int>(pos));
        out.targets.push_back(ids[pos]);
        const double u = rng.uniform();
        if (u < 0.8) {
            out.corrupted[pos] = Vocabulary::kMask;
        } else if (u < 0.9 && content_tokens > 0) {
            out.corrupted[pos] = 4 + static_cast<int>(rng.uniform_int(
                                         static_cast<size_t>(content_tokens)));
        }  // else: keep the original token
    }
    return out;
}

Tensor mlm_loss_graph(Tape& tape, const Tensor& logits, const std::vector<int>& targets) {
    (void)tape;
    if (targets.empty()) throw ContractError("mlm_loss: empty masked set");
    if (logits.rows() != static_cast<Index>(targets.size()))
        throw ContractError("mlm_loss: logit rows != number of targets");
    std::vector<std::pair<Index, Index>> coords;
    coords.reserve(targets.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0 || targets[i] >= logits.cols())
            throw ContractError("mlm_loss: target id outside vocabulary");
        coords.emplace_back(static_cast<Index>(i), targets[i]);
    }
    return neg(mean_all(gather_entries(rowwise_log_softmax(logits), coords)));
}

double mlm_loss(const Matrix& logits, const std::vector<int>& targets) {
    Tape tape;
    return mlm_loss_graph(tape, tape.constant(logits), targets).item();
}

LossReport pretrain_step(ParamStore& params, const ModelConfig& cfg, const Vocabulary& vocab,
                         const std::vector<const PersonRecord*>& batch,
                         const PretrainOptions& opt, double lr_now, Rng& mask_rng,
                         const std::string& batch_tag) {
    if (batch.size() < 2) throw ContractError("pretrain_step: batch must have N >= 2");
    if (opt.beta != 0 && opt.beta != 1) throw ConfigError("beta must be 0 or 1");

    Tape tape;
    Bound p = params.bind(tape);

    std::vector<Tensor> v_rows, t_rows, sample_mlm;
    v_rows.reserve(batch.size());
    t_rows.reserve(batch.size());
    for (const PersonRecord* rec : batch) {
        const std::vector<int> ids = tokenize(rec->caption, vocab, cfg.max_len).ids;
        t_rows.push_back(text_forward(tape, p, cfg, ids).global);
        v_rows.push_back(visual_forward(tape, p, cfg, visual_input_tokens(cfg, *rec)).global);
        if (opt.beta == 1) {
            const MaskedText masked = mask_tokens(ids, vocab, opt.mask_rate, mask_rng);
            Tensor tokens = encode_text_tokens(tape, p, cfg, masked.corrupted);
            std::vector<Index> rows(masked.positions.begin(), masked.positions.end());
            Tensor logits = linear(gather_rows(tokens, rows), p.at("mlm.w"), p.at("mlm.b"));
            sample_mlm.push_back(mlm_loss_graph(tape, logits, masked.targets));
        }
    }
    Tensor v = concat_rows(v_rows);
    Tensor t = concat_rows(t_rows);

    const Tensor* temp = nullptr;
    Tensor temp_tensor;
    if (cfg.learnable_temperature) {
        temp_tensor = p.at("temp.logit_scale");
        temp = &temp_tensor;
    }
    ContrastiveParts parts = contrastive_loss_graph(tape, v, t, opt.tau, temp);

    LossReport report;
    report.beta = opt.beta;
    report.l_i2t = parts.l_i2t.item();
    report.l_t2i = parts.l_t2i.item();
    report.l_con = parts.l_con.item();

    Tensor total = parts.l_con;
    if (opt.beta == 1) {
        Tensor l_mlm = mean_all(concat_rows(sample_mlm));
        report.l_mlm = l_mlm.item();
        total = add(total, l_mlm);
    }
    report.l_pre = total.item();

    if (!std::isfinite(report.l_pre))
        throw NumericError("non-finite pre-training loss at " + batch_tag +
                           " (l_con=" + std::to_string(report.l_con) +
                           ", l_mlm=" + std::to_string(report.l_mlm) + ")");

    tape.backward(total);
    OptimConfig step_cfg = opt.optim;
    step_cfg.lr = lr_now;
    params.adam_step(p, step_cfg);
    return report;
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = nlohmann::json{{"model", c.model},
                       {"beta", c.beta},
                       {"tau", c.tau},
                       {"mask_rate", c.mask_rate},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"warmup_frac", c.warmup_frac},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
    if (j.contains("model")) j.at("model").get_to(c.model);
    if (j.contains("beta")) j.at("beta").get_to(c.beta);
    if (j.contains("tau")) j.at("tau").get_to(c.tau);
    if (j.contains("mask_rate")) j.at("mask_rate").get_to(c.mask_rate);
    if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("lr")) j.at("lr").get_to(c.lr);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("warmup_frac")) j.at("warmup_frac").get_to(c.warmup_frac);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

namespace {

std::vector<const PersonRecord*> training_records(const DatasetManifest& manifest) {
    std::vector<const PersonRecord*> out;
    bool any_split = false;
    for (const auto& rec : manifest.records) any_split = any_split || !rec.split.empty();
    for (const auto& rec : manifest.records)
        if (!any_split || rec.split == "train") out.push_back(&rec);
    return out;
}

}  // namespace

Checkpoint pretrain_loop(const DatasetManifest& train, const PretrainConfig& cfg,
                         std::vector<LossReport>* epoch_logs, const EpochCallback& on_epoch) {
    if (cfg.beta != 0 && cfg.beta != 1) throw ConfigError("beta must be 0 or 1");
    if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg.batch_size < 2) throw ConfigError("contrastive training needs batch_size >= 2");

    const auto records = training_records(train);
    if (records.size() < 2) throw ValidationError("pre-training needs at least 2 records");
    std::vector<std::string> captions;
    captions.reserve(records.size());
    for (const auto* rec : records) {
        if (rec->caption.empty())
            throw ValidationError("record '" + rec->image_id + "' has an empty caption");
        captions.push_back(rec->caption);
    }
    if (cfg.batch_size > records.size())
        throw ConfigError("batch_size exceeds the number of training records");

    Vocabulary vocab = Vocabulary::build(captions);
    ModelConfig model = cfg.model;
    model.vocab_size = vocab.size();

    ParamStore params;
    Rng init_rng(mix_seed(cfg.seed, fnv1a("pretrain-init")));
    init_encoder_params(params, model, init_rng);
    if (cfg.beta == 1) init_mlm_head(params, model, init_rng);

    PretrainOptions opt;
    opt.beta = cfg.beta;
    opt.tau = cfg.tau;
    opt.mask_rate = cfg.mask_rate;
    opt.optim.lr = cfg.lr;
    opt.optim.weight_decay = cfg.weight_decay;

    const size_t steps_per_epoch = records.size() / cfg.batch_size;
    const size_t total_steps = steps_per_epoch * static_cast<size_t>(cfg.epochs);
    const size_t warmup_steps =
        std::max<size_t>(1, static_cast<size_t>(std::llround(cfg.warmup_frac *
                                                             static_cast<double>(total_steps))));

    Rng mask_rng(mix_seed(cfg.seed, fnv1a("pretrain-mask")));
    size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = epoch_batches(records.size(), cfg.batch_size, cfg.seed,
                                           static_cast<size_t>(epoch), true);
        LossReport mean;
        mean.beta = cfg.beta;
        for (const auto& batch_idx : batches) {
            std::vector<const PersonRecord*> batch;
            batch.reserve(batch_idx.size());
            for (size_t i : batch_idx) batch.push_back(records[i]);
            const double lr_now =
                cfg.lr * std::min(1.0, static_cast<double>(step + 1) /
                                           static_cast<double>(warmup_steps));
            const std::string tag =
                "epoch " + std::to_string(epoch) + " step " + std::to_string(step);
            const LossReport r = pretrain_step(params, model, vocab, batch, opt, lr_now,
                                               mask_rng, tag);
            mean.l_i2t += r.l_i2t;
            mean.l_t2i += r.l_t2i;
            mean.l_con += r.l_con;
            mean.l_mlm += r.l_mlm;
            mean.l_pre += r.l_pre;
            ++step;
        }
        const double nb = static_cast<double>(batches.size());
        mean.l_i2t /= nb;
        mean.l_t2i /= nb;
        mean.l_con /= nb;
        mean.l_mlm /= nb;
        mean.l_pre /= nb;
        if (epoch_logs) epoch_logs->push_back(mean);
        if (on_epoch) on_epoch(epoch, mean);
    }

    Checkpoint ckpt;
    ckpt.model = model;
    ckpt.beta = cfg.beta;
    ckpt.tau = cfg.tau;
    ckpt.vocab = std::move(vocab);
    ckpt.params = std::move(params);
    ckpt.rng_state = mask_rng.state_string();
    ckpt.train_config = nlohmann::json{{"pretrain", cfg}};
    return ckpt;
}

}  // namespace pretext
