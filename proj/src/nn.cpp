#include "pretext/nn.hpp"

#include <cmath>

#include "pretext/errors.hpp"

namespace pretext {

void ModelConfig::validate() const {
    auto branch = [](const char* name, const BranchConfig& b) {
        if (b.layers < 1 || b.width < 1 || b.heads < 1)
            throw ConfigError(std::string(name) + " branch sizes must be >= 1");
        if (b.width % b.heads != 0)
            throw ConfigError(std::string(name) + " width must be divisible by heads");
    };
    branch("visual", visual);
    branch("textual", textual);
    if (visual_kind != "feature-vector" && visual_kind != "patch-grid")
        throw ConfigError("visual kind must be feature-vector or patch-grid");
    if (visual_tokens < 1 || visual_token_dim < 1 || visual_max_tokens < visual_tokens)
        throw ConfigError("visual token layout invalid");
    if (patch_size < 1) throw ConfigError("patch_size must be >= 1");
    if (max_len < 2) throw ConfigError("max_len must be >= 2");
    if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
    if (pgu_prototypes < 1) throw ConfigError("pgu_prototypes must be >= 1");
    if (pgu_dim < 1) throw ConfigError("pgu_dim must be >= 1");
}

void to_json(nlohmann::json& j, const BranchConfig& c) {
    j = nlohmann::json{{"layers", c.layers}, {"width", c.width}, {"heads", c.heads}};
}
void from_json(const nlohmann::json& j, BranchConfig& c) {
    j.at("layers").get_to(c.layers);
    j.at("width").get_to(c.width);
    j.at("heads").get_to(c.heads);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"visual_kind", c.visual_kind},
                       {"visual", c.visual},
                       {"visual_tokens", c.visual_tokens},
                       {"visual_token_dim", c.visual_token_dim},
                       {"visual_max_tokens", c.visual_max_tokens},
                       {"patch_size", c.patch_size},
                       {"textual", c.textual},
                       {"vocab_size", c.vocab_size},
                       {"max_len", c.max_len},
                       {"embed_dim", c.embed_dim},
                       {"learnable_temperature", c.learnable_temperature},
                       {"pgu_prototypes", c.pgu_prototypes},
                       {"pgu_dim", c.pgu_dim}};
}
void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("visual_kind").get_to(c.visual_kind);
    j.at("visual").get_to(c.visual);
    j.at("visual_tokens").get_to(c.visual_tokens);
    j.at("visual_token_dim").get_to(c.visual_token_dim);
    j.at("visual_max_tokens").get_to(c.visual_max_tokens);
    j.at("patch_size").get_to(c.patch_size);
    j.at("textual").get_to(c.textual);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_len").get_to(c.max_len);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("learnable_temperature").get_to(c.learnable_temperature);
    j.at("pgu_prototypes").get_to(c.pgu_prototypes);
    j.at("pgu_dim").get_to(c.pgu_dim);
}

// --- parameter construction --------------------------------------------------

namespace {

void init_branch(ParamStore& p, const std::string& prefix, const BranchConfig& b, Rng& rng) {
    const Index w = b.width;
    for (int l = 0; l < b.layers; ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l) + ".";
        p.create(lp + "ln1.g", 1, w).setOnes();
        p.create(lp + "ln1.b", 1, w);
        for (const char* n : {"wq", "wk", "wv", "wo"})
            p.create_xavier(lp + "attn." + n, w, w, rng);
        for (const char* n : {"bq", "bk", "bv", "bo"}) p.create(lp + "attn." + std::string(n), 1, w);
        p.create(lp + "ln2.g", 1, w).setOnes();
        p.create(lp + "ln2.b", 1, w);
        p.create_xavier(lp + "ff.w1", w, 4 * w, rng);
        p.create(lp + "ff.b1", 1, 4 * w);
        p.create_xavier(lp + "ff.w2", 4 * w, w, rng);
        p.create(lp + "ff.b2", 1, w);
    }
    p.create(prefix + ".final_ln.g", 1, w).setOnes();
    p.create(prefix + ".final_ln.b", 1, w);
}

Matrix pad_attention_mask(const std::vector<char>& keep) {
    const Index n = static_cast<Index>(keep.size());
    Matrix m = Matrix::Zero(n, n);
    for (Index j = 0; j < n; ++j)
        if (!keep[static_cast<size_t>(j)]) m.col(j).setConstant(-1e9);
    return m;
}

Tensor transformer_block(Tape& tape, const Bound& p, const std::string& lp, const BranchConfig& b,
                         Tensor x, const Matrix* mask) {
    // pre-LN attention
    Tensor h = layer_norm(x, p.at(lp + "ln1.g"), p.at(lp + "ln1.b"));
    Tensor q = linear(h, p.at(lp + "attn.wq"), p.at(lp + "attn.bq"));
    Tensor k = linear(h, p.at(lp + "attn.wk"), p.at(lp + "attn.bk"));
    Tensor v = linear(h, p.at(lp + "attn.wv"), p.at(lp + "attn.bv"));
    const Index dh = b.width / b.heads;
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(b.heads));
    for (int hd = 0; hd < b.heads; ++hd) {
        Tensor qh = slice_cols(q, hd * dh, dh);
        Tensor kh = slice_cols(k, hd * dh, dh);
        Tensor vh = slice_cols(v, hd * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (mask) scores = add(scores, tape.constant(*mask));
        heads.push_back(matmul(rowwise_softmax(scores), vh));
    }
    Tensor attn = linear(concat_cols(heads), p.at(lp + "attn.wo"), p.at(lp + "attn.bo"));
    x = add(x, attn);
    // pre-LN feed-forward
    Tensor h2 = layer_norm(x, p.at(lp + "ln2.g"), p.at(lp + "ln2.b"));
    Tensor ff = linear(gelu(linear(h2, p.at(lp + "ff.w1"), p.at(lp + "ff.b1"))),
                       p.at(lp + "ff.w2"), p.at(lp + "ff.b2"));
    return add(x, ff);
}

Tensor run_branch(Tape& tape, const Bound& p, const std::string& prefix, const BranchConfig& b,
                  Tensor x, const std::vector<char>* keep) {
    Matrix mask;
    bool any_masked = false;
    if (keep) {
        for (char c : *keep) any_masked = any_masked || !c;
        if (any_masked) mask = pad_attention_mask(*keep);
    }
    for (int l = 0; l < b.layers; ++l)
        x = transformer_block(tape, p, prefix + ".l" + std::to_string(l) + ".", b, x,
                              any_masked ? &mask : nullptr);
    return layer_norm(x, p.at(prefix + ".final_ln.g"), p.at(prefix + ".final_ln.b"));
}

}  // namespace

void init_encoder_params(ParamStore& p, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    if (cfg.vocab_size < 5) throw ConfigError("vocab_size must cover the special tokens");
    p.create_gaussian("vis.patch.w", cfg.visual_token_dim, cfg.visual.width, rng,
                      std::sqrt(2.0 / (cfg.visual_token_dim + cfg.visual.width)));
    p.create("vis.patch.b", 1, cfg.visual.width);
    p.create_gaussian("vis.pos", cfg.visual_max_tokens, cfg.visual.width, rng, 0.02);
    init_branch(p, "vis", cfg.visual, rng);
    p.create_xavier("vis.proj.w", cfg.visual.width, cfg.embed_dim, rng);
    p.create("vis.proj.b", 1, cfg.embed_dim);

    p.create_gaussian("txt.embed", cfg.vocab_size, cfg.textual.width, rng, 0.02);
    p.create_gaussian("txt.pos", cfg.max_len, cfg.textual.width, rng, 0.02);
    init_branch(p, "txt", cfg.textual, rng);
    p.create_xavier("txt.proj.w", cfg.textual.width, cfg.embed_dim, rng);
    p.create("txt.proj.b", 1, cfg.embed_dim);

    if (cfg.learnable_temperature) p.create("temp.logit_scale", 1, 1);  // exp(0) = 1
}

void init_mlm_head(ParamStore& p, const ModelConfig& cfg, Rng& rng) {
    p.create_xavier("mlm.w", cfg.textual.width, cfg.vocab_size, rng);
    p.create("mlm.b", 1, cfg.vocab_size);
}

void init_classifier(ParamStore& p, const ModelConfig& cfg, int num_classes, Rng& rng) {
    if (num_classes < 2) throw ConfigError("classifier needs at least 2 identities");
    p.create_xavier("cls.w", cfg.embed_dim, num_classes, rng);
}

void init_pgu_head(ParamStore& p, const ModelConfig& cfg, int num_classes, Rng& rng) {
    if (num_classes < 2) throw ConfigError("pgu classifier needs at least 2 identities");
    p.create_gaussian("pgu.protos", cfg.pgu_prototypes, cfg.embed_dim, rng, 0.02);
    p.create_xavier("pgu.map.w", cfg.pgu_prototypes * cfg.embed_dim, cfg.pgu_dim, rng);
    p.create("pgu.map.b", 1, cfg.pgu_dim);
    p.create_xavier("pgu.cls.w", cfg.pgu_dim, num_classes, rng);
}

std::vector<char> pad_keep_mask(const std::vector<int>& ids) {
    std::vector<char> keep(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) keep[i] = ids[i] != Vocabulary::kPad ? 1 : 0;
    return keep;
}

Tensor encode_text_tokens(Tape& tape, const Bound& p, const ModelConfig& cfg,
                          const std::vector<int>& ids) {
    if (static_cast<int>(ids.size()) != cfg.max_len)
        throw ContractError("encode_text_tokens: sequence length != max_len");
    std::vector<Index> rows;
    rows.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= cfg.vocab_size)
            throw ContractError("encode_text_tokens: token id out of vocabulary");
        rows.push_back(id);
    }
    Tensor x = gather_rows(p.at("txt.embed"), rows);
    x = add(x, slice_rows(p.at("txt.pos"), 0, static_cast<Index>(ids.size())));
    const std::vector<char> keep = pad_keep_mask(ids);
    return run_branch(tape, p, "txt", cfg.textual, x, &keep);
}

Tensor encode_visual_tokens(Tape& tape, const Bound& p, const ModelConfig& cfg,
                            const Matrix& raw_tokens) {
    if (raw_tokens.cols() != cfg.visual_token_dim)
        throw ContractError("encode_visual_tokens: token dim " + std::to_string(raw_tokens.cols()) +
                            " != configured " + std::to_string(cfg.visual_token_dim));
    if (raw_tokens.rows() < 1 || raw_tokens.rows() > cfg.visual_max_tokens)
        throw ContractError("encode_visual_tokens: token count outside [1, visual_max_tokens]");
    Tensor x = linear(tape.constant(raw_tokens), p.at("vis.patch.w"), p.at("vis.patch.b"));
    x = add(x, slice_rows(p.at("vis.pos"), 0, raw_tokens.rows()));
    return run_branch(tape, p, "vis", cfg.visual, x, nullptr);
}

Tensor project_tokens(Tape& tape, const Bound& p, const std::string& prefix, const Tensor& tokens) {
    (void)tape;
    return linear(tokens, p.at(prefix + ".proj.w"), p.at(prefix + ".proj.b"));
}

Tensor project_and_pool(const Tensor& projected, const std::vector<char>& keep) {
    return masked_colmax(projected, keep);
}

TextForward text_forward(Tape& tape, const Bound& p, const ModelConfig& cfg,
                         const std::vector<int>& ids) {
    TextForward f;
    f.tokens = encode_text_tokens(tape, p, cfg, ids);
    f.projected = project_tokens(tape, p, "txt", f.tokens);
    f.keep = pad_keep_mask(ids);
    f.global = project_and_pool(f.projected, f.keep);
    return f;
}

VisualForward visual_forward(Tape& tape, const Bound& p, const ModelConfig& cfg,
                             const Matrix& raw_tokens) {
    VisualForward f;
    f.tokens = encode_visual_tokens(tape, p, cfg, raw_tokens);
    f.projected = project_tokens(tape, p, "vis", f.tokens);
    f.keep.assign(static_cast<size_t>(raw_tokens.rows()), 1);
    f.global = project_and_pool(f.projected, f.keep);
    return f;
}

Matrix visual_input_tokens(const ModelConfig& cfg, const PersonRecord& rec, bool hflip) {
    if (cfg.visual_kind == "feature-vector") {
        if (rec.features.empty())
            throw InputError("record '" + rec.image_id + "' has no inline features");
        return record_tokens(rec, cfg.visual_tokens, cfg.patch_size, false);
    }
    return record_tokens(rec, cfg.visual_tokens, cfg.patch_size, hflip);
}

// --- PGU ---------------------------------------------------------------------

Tensor pgu_features_graph(Tape& tape, const Tensor& tokens, const Tensor& protos,
                          const Tensor& map_w, const Tensor& map_b,
                          const std::vector<char>& keep) {
    if (tokens.rows() < 1) throw ContractError("pgu_features: empty token sequence");
    if (static_cast<Index>(keep.size()) != tokens.rows())
        throw ContractError("pgu_features: mask length != token count");
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(tokens.cols()));
    Tensor scores = scale(matmul(protos, transpose(tokens)), inv_sqrt);
    bool any_masked = false;
    for (char c : keep) any_masked = any_masked || !c;
    if (any_masked) {
        Matrix m = Matrix::Zero(protos.rows(), tokens.rows());
        for (Index j = 0; j < tokens.rows(); ++j)
            if (!keep[static_cast<size_t>(j)]) m.col(j).setConstant(-1e9);
        scores = add(scores, tape.constant(m));
    }
    Tensor attended = matmul(rowwise_softmax(scores), tokens);  // K×w
    return linear(flatten_to_row(attended), map_w, map_b);     // 1×d'
}

Matrix pgu_features(const Matrix& tokens, const Matrix& protos, const Matrix& map_w,
                    const Matrix& map_b, const std::vector<char>& keep) {
    Tape tape;
    Tensor out = pgu_features_graph(tape, tape.constant(tokens), tape.constant(protos),
                                    tape.constant(map_w), tape.constant(map_b), keep);
    return out.value();
}

// --- inference-mode embedding extraction -----------------------------------------

namespace {

Matrix pgu_from_forward(Tape& tape, const Bound& p, const Tensor& projected,
                        const std::vector<char>& keep) {
    return pgu_features_graph(tape, projected, p.at("pgu.protos"), p.at("pgu.map.w"),
                              p.at("pgu.map.b"), keep)
        .value();
}

}  // namespace

Matrix embed_texts(const ParamStore& params, const ModelConfig& cfg, const Vocabulary& vocab,
                   const std::vector<std::string>& captions, bool use_pgu) {
    const Index d = use_pgu ? cfg.pgu_dim : cfg.embed_dim;
    Matrix out(static_cast<Index>(captions.size()), d);
    for (size_t i = 0; i < captions.size(); ++i) {
        Tape tape;
        Bound p = params.bind(tape);
        TextForward f = text_forward(tape, p, cfg, tokenize(captions[i], vocab, cfg.max_len).ids);
        out.row(static_cast<Index>(i)) =
            use_pgu ? pgu_from_forward(tape, p, f.projected, f.keep) : f.global.value();
    }
    return out;
}

Matrix embed_images(const ParamStore& params, const ModelConfig& cfg,
                    const std::vector<const PersonRecord*>& records, bool use_pgu) {
    const Index d = use_pgu ? cfg.pgu_dim : cfg.embed_dim;
    Matrix out(static_cast<Index>(records.size()), d);
    for (size_t i = 0; i < records.size(); ++i) {
        Tape tape;
        Bound p = params.bind(tape);
        VisualForward f = visual_forward(tape, p, cfg, visual_input_tokens(cfg, *records[i]));
        out.row(static_cast<Index>(i)) =
            use_pgu ? pgu_from_forward(tape, p, f.projected, f.keep) : f.global.value();
    }
    return out;
}

}  // namespace pretext
