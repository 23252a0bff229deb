// Acceptance gate: seven end-to-end checks, one [PASS]/[FAIL] line each.
// Exit code is the number of failed checks.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "pretext/checkpoint.hpp"
#include "pretext/data.hpp"
#include "pretext/errors.hpp"
#include "pretext/eval.hpp"
#include "pretext/finetune.hpp"
#include "pretext/generator.hpp"
#include "pretext/nn.hpp"
#include "pretext/ontology.hpp"
#include "pretext/pretrain.hpp"
#include "pretext/rng.hpp"
#include "pretext/scorer.hpp"
#include "pretext/tensor.hpp"

using namespace pretext;
using Clock = std::chrono::steady_clock;

namespace {

// pinned tolerances and budgets
constexpr double kLossOracleTol = 1e-6;   // check 1: absolute loss agreement
constexpr double kLossBudgetSec = 30.0;   // check 1 runtime
constexpr double kGradRelTol = 1e-4;      // check 2: max relative gradient error
constexpr double kGradBudgetSec = 120.0;  // check 2 runtime
constexpr double kGateBudgetSec = 30.0;   // check 3 runtime
constexpr double kMaskLow = 0.14;         // check 4: masking-rate window
constexpr double kMaskHigh = 0.16;
constexpr double kToyRank1Min = 0.90;     // check 5: held-out Rank-1 floor
constexpr double kToyBudgetSec = 300.0;   // check 5 runtime (headline run)
constexpr double kRescaleTol = 1e-9;      // check 7: rescale invariance
constexpr double kSwapTol = 1e-12;        // check 7: direction swap

int g_failures = 0;

double secs_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void report(int index, const char* title, bool pass, const std::string& detail) {
    std::printf("[%s] %d. %s: %s\n", pass ? "PASS" : "FAIL", index, title, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof(buf), pattern, args);
    va_end(args);
    return buf;
}

Matrix random_matrix(Index rows, Index cols, Rng& rng) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) m(i, j) = rng.gaussian();
    return m;
}

// ---- independent long-double reference implementations ----------------------

using LMatrix = std::vector<std::vector<long double>>;

LMatrix normalized_similarity(const Matrix& v, const Matrix& t) {
    const Index n = v.rows();
    LMatrix s(n, std::vector<long double>(n));
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
            long double dot = 0, nv = 0, nt = 0;
            for (Index k = 0; k < v.cols(); ++k) {
                dot += static_cast<long double>(v(i, k)) * t(j, k);
                nv += static_cast<long double>(v(i, k)) * v(i, k);
                nt += static_cast<long double>(t(j, k)) * t(j, k);
            }
            s[i][j] = dot / (sqrtl(nv) * sqrtl(nt));
        }
    return s;
}

long double row_nll(const std::vector<long double>& logits, size_t target) {
    long double mx = logits[0];
    for (long double x : logits) mx = std::max(mx, x);
    long double den = 0;
    for (long double x : logits) den += expl(x - mx);
    return -(logits[target] - mx - logl(den));
}

long double oracle_contrastive(const Matrix& v, const Matrix& t, double tau) {
    const LMatrix s = normalized_similarity(v, t);
    const size_t n = s.size();
    long double i2t = 0, t2i = 0;
    for (size_t i = 0; i < n; ++i) {
        std::vector<long double> row(n), col(n);
        for (size_t j = 0; j < n; ++j) {
            row[j] = tau * s[i][j];
            col[j] = tau * s[j][i];
        }
        i2t += row_nll(row, i);
        t2i += row_nll(col, i);
    }
    return (i2t / n + t2i / n) / 2.0L;
}

long double oracle_mlm(const Matrix& logits, const std::vector<int>& targets) {
    long double total = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
        std::vector<long double> row(static_cast<size_t>(logits.cols()));
        for (Index j = 0; j < logits.cols(); ++j) row[static_cast<size_t>(j)] = logits(i, j);
        total += row_nll(row, static_cast<size_t>(targets[static_cast<size_t>(i)]));
    }
    return total / logits.rows();
}

long double oracle_id(const Matrix& v, const Matrix& t, const std::vector<int>& labels,
                      const Matrix& cls) {
    auto branch = [&](const Matrix& x) {
        long double total = 0;
        for (Index i = 0; i < x.rows(); ++i) {
            std::vector<long double> row(static_cast<size_t>(cls.cols()), 0.0L);
            for (Index c = 0; c < cls.cols(); ++c)
                for (Index k = 0; k < x.cols(); ++k)
                    row[static_cast<size_t>(c)] += static_cast<long double>(x(i, k)) * cls(k, c);
            total += row_nll(row, static_cast<size_t>(labels[static_cast<size_t>(i)]));
        }
        return total / x.rows();
    };
    return branch(v) + branch(t);
}

// semi-hard rule: hardest different-identity candidate strictly below the
// positive similarity, else hardest overall; ties to the lower index
int oracle_mine(const std::vector<long double>& sims, const std::vector<int>& labels,
                int anchor_label, int positive_index) {
    const long double pos = sims[static_cast<size_t>(positive_index)];
    int best = -1, hardest = -1;
    for (size_t j = 0; j < sims.size(); ++j) {
        if (labels[j] == anchor_label) continue;
        if (hardest < 0 || sims[j] > sims[static_cast<size_t>(hardest)])
            hardest = static_cast<int>(j);
        if (sims[j] < pos && (best < 0 || sims[j] > sims[static_cast<size_t>(best)]))
            best = static_cast<int>(j);
    }
    return best >= 0 ? best : hardest;
}

MinedNegatives oracle_mine_batch(const Matrix& v, const Matrix& t,
                                 const std::vector<int>& labels) {
    const LMatrix s = normalized_similarity(v, t);
    const size_t n = s.size();
    MinedNegatives mined;
    for (size_t i = 0; i < n; ++i) {
        std::vector<long double> row(n), col(n);
        for (size_t j = 0; j < n; ++j) {
            row[j] = s[i][j];
            col[j] = s[j][i];
        }
        mined.for_image.push_back(oracle_mine(row, labels, labels[i], static_cast<int>(i)));
        mined.for_text.push_back(oracle_mine(col, labels, labels[i], static_cast<int>(i)));
    }
    return mined;
}

long double oracle_ranking(const Matrix& v, const Matrix& t, const MinedNegatives& mined,
                           double alpha) {
    const LMatrix s = normalized_similarity(v, t);
    const size_t n = s.size();
    long double img = 0, txt = 0;
    for (size_t i = 0; i < n; ++i) {
        img += std::max<long double>(0.0L,
                                     alpha - s[i][i] + s[i][static_cast<size_t>(mined.for_image[i])]);
        txt += std::max<long double>(0.0L,
                                     alpha - s[i][i] + s[static_cast<size_t>(mined.for_text[i])][i]);
    }
    return img / n + txt / n;
}

std::vector<int> random_labels(Index n, int classes, Rng& rng) {
    std::vector<int> labels;
    for (Index i = 0; i < n; ++i)
        labels.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(classes))));
    labels[0] = 0;                       // guarantee at least two identities
    labels[static_cast<size_t>(n - 1)] = 1;
    return labels;
}

// ---- shared tiny-model fixtures ---------------------------------------------

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.visual.layers = 1;
    cfg.visual.width = 8;
    cfg.visual.heads = 2;
    cfg.visual_tokens = 2;
    cfg.visual_token_dim = 4;
    cfg.visual_max_tokens = 4;
    cfg.textual.layers = 1;
    cfg.textual.width = 8;
    cfg.textual.heads = 2;
    cfg.max_len = 8;
    cfg.embed_dim = 4;
    cfg.pgu_prototypes = 2;
    cfg.pgu_dim = 3;
    return cfg;
}

struct GradWorld {
    ModelConfig cfg = tiny_model();
    Vocabulary vocab;
    ParamStore params;
    std::vector<PersonRecord> records;
    std::vector<const PersonRecord*> batch;
    std::vector<int> labels;

    GradWorld(uint64_t seed, bool mlm_head, bool heads) {
        Rng data_rng(seed);
        std::vector<std::string> captions;
        for (int i = 0; i < 4; ++i) {
            PersonRecord r;
            r.image_id = "g" + std::to_string(i);
            const int cls = i % 2;
            for (int k = 0; k < 8; ++k)
                r.features.push_back((k == cls ? 3.0 : 0.0) + 0.1 * data_rng.gaussian());
            r.caption = "person kind " + std::string(1, static_cast<char>('a' + cls)) + " here";
            captions.push_back(r.caption);
            records.push_back(std::move(r));
            labels.push_back(cls);
        }
        vocab = Vocabulary::build(captions);
        cfg.vocab_size = vocab.size();
        Rng init(seed + 1);
        init_encoder_params(params, cfg, init);
        if (mlm_head) init_mlm_head(params, cfg, init);
        if (heads) {
            init_classifier(params, cfg, 2, init);
            init_pgu_head(params, cfg, 2, init);
        }
        for (const auto& r : records) batch.push_back(&r);
    }
};

// ---- check 1: loss-oracle equivalence ---------------------------------------

void check_loss_oracles() {
    const auto t0 = Clock::now();
    Rng rng(1001);
    double worst = 0.0;
    const char* worst_name = "none";
    auto track = [&](const char* name, double got, long double want) {
        const double diff = std::abs(got - static_cast<double>(want));
        if (diff > worst) {
            worst = diff;
            worst_name = name;
        }
    };

    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 2 + static_cast<Index>(rng.uniform_int(15));   // N <= 16
        const Index d = 2 + static_cast<Index>(rng.uniform_int(31));   // d <= 32
        Matrix v = random_matrix(n, d, rng);
        Matrix t = random_matrix(n, d, rng);
        const double tau = 0.05 + rng.uniform() * 1.95;
        track("contrastive", contrastive_loss(v, t, tau).l_con, oracle_contrastive(v, t, tau));

        const Index vocab = 5 + static_cast<Index>(rng.uniform_int(28));
        Matrix logits = random_matrix(n, vocab, rng);
        std::vector<int> targets;
        for (Index i = 0; i < n; ++i)
            targets.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(vocab))));
        track("mlm", mlm_loss(logits, targets), oracle_mlm(logits, targets));

        const int classes = 2 + static_cast<int>(rng.uniform_int(6));
        Matrix cls = random_matrix(d, classes, rng);
        std::vector<int> labels = random_labels(n, classes, rng);
        track("id", id_loss(v, t, labels, cls), oracle_id(v, t, labels, cls));

        const double alpha = 0.05 + rng.uniform() * 0.55;
        const MinedNegatives mined = oracle_mine_batch(v, t, labels);
        track("ranking", ranking_loss(v, t, mined, alpha), oracle_ranking(v, t, mined, alpha));

        track("unified", pgu_loss(v, t, labels, cls, alpha),
              oracle_id(v, t, labels, cls) + oracle_ranking(v, t, mined, alpha));
    }

    const double elapsed = secs_since(t0);
    const bool pass = worst < kLossOracleTol && elapsed < kLossBudgetSec;
    report(1, "loss oracles", pass,
           fmt("5 losses x 100 random batches, max |diff| %.2e (tol %.0e, worst: %s), %.1fs",
               worst, kLossOracleTol, worst_name, elapsed));
}

// ---- check 2: finite-difference gradients -----------------------------------

double pretrain_grad_error(int beta, uint64_t seed) {
    GradWorld w(seed, beta == 1, false);

    std::vector<std::vector<int>> clean_ids, corrupted, mask_targets;
    std::vector<std::vector<Index>> mask_rows;
    Rng mask_rng(seed + 7);
    for (const auto* rec : w.batch) {
        const auto ids = tokenize(rec->caption, w.vocab, w.cfg.max_len).ids;
        clean_ids.push_back(ids);
        if (beta == 1) {
            const MaskedText m = mask_tokens(ids, w.vocab, 0.15, mask_rng);
            corrupted.push_back(m.corrupted);
            mask_rows.push_back(std::vector<Index>(m.positions.begin(), m.positions.end()));
            mask_targets.push_back(m.targets);
        }
    }

    auto loss_fn = [&](Tape& tape, std::map<std::string, Tensor>& p) {
        std::vector<Tensor> v_rows, t_rows, mlm_terms;
        for (size_t i = 0; i < w.batch.size(); ++i) {
            t_rows.push_back(text_forward(tape, p, w.cfg, clean_ids[i]).global);
            v_rows.push_back(
                visual_forward(tape, p, w.cfg, visual_input_tokens(w.cfg, *w.batch[i])).global);
            if (beta == 1) {
                Tensor tokens = encode_text_tokens(tape, p, w.cfg, corrupted[i]);
                Tensor logits =
                    linear(gather_rows(tokens, mask_rows[i]), p.at("mlm.w"), p.at("mlm.b"));
                mlm_terms.push_back(mlm_loss_graph(tape, logits, mask_targets[i]));
            }
        }
        ContrastiveParts parts =
            contrastive_loss_graph(tape, concat_rows(v_rows), concat_rows(t_rows), 1.0);
        if (beta == 0) return parts.l_con;
        return add(parts.l_con, mean_all(concat_rows(mlm_terms)));
    };

    Rng rng(seed + 13);
    return gradient_check(w.params, loss_fn, 30, rng).max_rel_error;
}

double finetune_grad_error(int gamma, uint64_t seed) {
    GradWorld w(seed, false, true);
    const double alpha = 0.2;

    auto forwards = [&](Tape& tape, std::map<std::string, Tensor>& p, std::vector<Tensor>& v_rows,
                        std::vector<Tensor>& t_rows, std::vector<Tensor>& vu_rows,
                        std::vector<Tensor>& tu_rows) {
        for (const auto* rec : w.batch) {
            VisualForward vf = visual_forward(tape, p, w.cfg, visual_input_tokens(w.cfg, *rec));
            TextForward tf =
                text_forward(tape, p, w.cfg, tokenize(rec->caption, w.vocab, w.cfg.max_len).ids);
            v_rows.push_back(vf.global);
            t_rows.push_back(tf.global);
            if (gamma == 1) {
                vu_rows.push_back(pgu_features_graph(tape, vf.projected, p.at("pgu.protos"),
                                                     p.at("pgu.map.w"), p.at("pgu.map.b"),
                                                     vf.keep));
                tu_rows.push_back(pgu_features_graph(tape, tf.projected, p.at("pgu.protos"),
                                                     p.at("pgu.map.w"), p.at("pgu.map.b"),
                                                     tf.keep));
            }
        }
    };

    // freeze both mining decisions at the evaluation point
    MinedNegatives mined_base, mined_pgu;
    {
        Tape tape;
        Bound p = w.params.bind(tape);
        std::vector<Tensor> v_rows, t_rows, vu_rows, tu_rows;
        forwards(tape, p, v_rows, t_rows, vu_rows, tu_rows);
        mined_base = mine_batch(concat_rows(v_rows).value(), concat_rows(t_rows).value(),
                                w.labels, alpha);
        if (gamma == 1)
            mined_pgu = mine_batch(concat_rows(vu_rows).value(), concat_rows(tu_rows).value(),
                                   w.labels, alpha);
    }

    auto loss_fn = [&](Tape& tape, std::map<std::string, Tensor>& p) {
        std::vector<Tensor> v_rows, t_rows, vu_rows, tu_rows;
        forwards(tape, p, v_rows, t_rows, vu_rows, tu_rows);
        Tensor v = concat_rows(v_rows), t = concat_rows(t_rows);
        Tensor total = add(id_loss_graph(tape, v, t, w.labels, p.at("cls.w")),
                           ranking_loss_graph(tape, v, t, mined_base, alpha));
        if (gamma == 1) {
            Tensor vu = concat_rows(vu_rows), tu = concat_rows(tu_rows);
            total = add(total, add(id_loss_graph(tape, vu, tu, w.labels, p.at("pgu.cls.w")),
                                   ranking_loss_graph(tape, vu, tu, mined_pgu, alpha)));
        }
        return total;
    };

    Rng rng(seed + 17);
    return gradient_check(w.params, loss_fn, 30, rng).max_rel_error;
}

void check_gradients() {
    const auto t0 = Clock::now();
    const double pre0 = pretrain_grad_error(0, 2100);
    const double pre1 = pretrain_grad_error(1, 2200);
    const double ft0 = finetune_grad_error(0, 2300);
    const double ft1 = finetune_grad_error(1, 2400);
    const double worst = std::max({pre0, pre1, ft0, ft1});
    const double elapsed = secs_since(t0);
    const bool pass = worst < kGradRelTol && elapsed < kGradBudgetSec;
    report(2, "gradient checks", pass,
           fmt("30 params each, max rel err: pretrain beta0 %.1e beta1 %.1e, "
               "finetune gamma0 %.1e gamma1 %.1e (tol %.0e), %.1fs",
               pre0, pre1, ft0, ft1, kGradRelTol, elapsed));
}

// ---- check 3: phrase-selection correctness on scripted ground truth ---------

void check_phrase_selection() {
    const auto t0 = Clock::now();
    AttributeOntology ontology =
        load_ontology(std::string(PRETEXT_SOURCE_DIR) + "/assets/ontology.json");

    ScriptedBackend::GroundTruth truth;
    std::vector<ImageRecord> images;
    Rng rng(3001);
    for (int i = 0; i < 200; ++i) {
        ImageRecord img;
        img.id = "synthetic_" + std::to_string(i);
        std::map<std::string, std::string> attrs;
        for (const auto* cat : ontology.required())
            attrs[cat->name] =
                cat->phrases[rng.uniform_int(cat->phrases.size())].surface;
        for (const auto* cat : ontology.optionals())
            if (rng.uniform() < 0.5)
                attrs[cat->name] =
                    cat->phrases[rng.uniform_int(cat->phrases.size())].surface;
        truth[img.id] = attrs;
        images.push_back(std::move(img));
    }
    // image vectors average up to 14 phrase embeddings; the dimension keeps the
    // per-phrase signal (~1/sqrt(14)) well above hash-embedding cross-talk
    ScriptedBackend backend(ontology, truth, 1024, 5);

    size_t required_total = 0, required_hits = 0;
    size_t gate_total = 0, gate_hits = 0;
    const double threshold = 0.9, scale = 100.0;
    for (const auto& img : images) {
        const EmbeddingVector image_vec = backend.embed_image(img);
        for (const auto* cat : ontology.required()) {
            ++required_total;
            const AttributePhrase got = select_required(image_vec, *cat, ontology, backend);
            if (got.surface == truth[img.id][cat->name]) ++required_hits;
        }
        for (const auto* cat : ontology.optionals()) {
            ++gate_total;
            // brute-force gate: softmax over candidate cosines, null last
            std::vector<long double> probs;
            {
                std::vector<long double> sims;
                for (const auto& phrase : cat->phrases)
                    sims.push_back(
                        cosine_similarity(image_vec, backend.embed_text(to_prompt(*cat, phrase))));
                sims.push_back(cosine_similarity(
                    image_vec, backend.embed_text(to_prompt(*cat, cat->null_phrase()))));
                long double mx = sims[0];
                for (long double s : sims) mx = std::max(mx, s);
                long double den = 0;
                for (long double s : sims) den += expl(scale * (s - mx));
                for (long double s : sims) probs.push_back(expl(scale * (s - mx)) / den);
            }
            size_t argmax = 0;
            for (size_t j = 1; j < probs.size(); ++j)
                if (probs[j] > probs[argmax]) argmax = j;
            const bool include =
                argmax + 1 < probs.size() && static_cast<double>(probs[argmax]) > threshold;

            const auto got = select_optional(image_vec, *cat, ontology, backend, threshold, scale);
            const bool agree = include == got.has_value() &&
                               (!include || got->surface == cat->phrases[argmax].surface);
            if (agree) ++gate_hits;
        }
    }

    const double elapsed = secs_since(t0);
    const bool pass = required_hits == required_total && gate_hits == gate_total &&
                      elapsed < kGateBudgetSec;
    report(3, "scripted phrase selection", pass,
           fmt("required recovery %zu/%zu, optional gate agreement %zu/%zu, %.1fs",
               required_hits, required_total, gate_hits, gate_total, elapsed));
}

// ---- check 4: generation determinism, statistics, masking rate --------------

void check_generation_determinism() {
    const auto t0 = Clock::now();
    AttributeOntology ontology =
        load_ontology(std::string(PRETEXT_SOURCE_DIR) + "/assets/ontology.json");
    const auto templates =
        load_templates(std::string(PRETEXT_SOURCE_DIR) + "/assets/templates.tsv");

    std::vector<ImageRecord> images;
    Rng rng(4001);
    for (int i = 0; i < 1000; ++i) {
        ImageRecord img;
        img.id = "bulk_" + std::to_string(i);
        for (int k = 0; k < 8; ++k) img.features.push_back(rng.gaussian());
        images.push_back(std::move(img));
    }
    MockBackend backend(32, 9);
    GenerateConfig gen;

    auto snapshot = [](const DatasetManifest& m) {
        std::string all;
        for (const auto& rec : m.records) all += serialize_record(rec) + "\n";
        return all;
    };
    const DatasetManifest base = generate_manifest(images, ontology, templates, backend, gen, 77, 1);
    const std::string want = snapshot(base);
    bool reproducible = true;
    for (int workers : {1, 2, 5, 8})
        if (snapshot(generate_manifest(images, ontology, templates, backend, gen, 77, workers)) !=
            want)
            reproducible = false;

    // independent tally of the fill metadata
    const CorpusStats stats = corpus_stats(base);
    std::map<std::string, size_t> tally;
    size_t with_fills = 0;
    for (const auto& rec : base.records) {
        if (!rec.fills) continue;
        ++with_fills;
        for (const auto& [category, surface] : *rec.fills) {
            (void)surface;
            ++tally[category];
        }
    }
    bool stats_ok = stats.caption_count == base.records.size() &&
                    stats.rows_with_fills == with_fills && stats.unknown_fills == 0 &&
                    stats.category_counts == tally;
    for (const auto& [category, count] : tally)
        if (stats.category_frequencies.at(category) !=
            static_cast<double>(count) / static_cast<double>(with_fills))
            stats_ok = false;

    // empirical masking rate over the generated corpus
    std::vector<std::string> captions;
    for (const auto& rec : base.records) captions.push_back(rec.caption);
    const Vocabulary vocab = Vocabulary::build(captions);
    size_t eligible = 0, selected = 0;
    Rng mask_rng(4002);
    for (const auto& caption : captions) {
        const auto ids = tokenize(caption, vocab, 48).ids;
        const MaskedText m = mask_tokens(ids, vocab, 0.15, mask_rng);
        for (int id : ids)
            if (id != Vocabulary::kPad && id != Vocabulary::kCls) ++eligible;
        selected += m.positions.size();
    }
    const double fraction = static_cast<double>(selected) / static_cast<double>(eligible);
    const bool mask_ok = eligible >= 10000 && fraction >= kMaskLow && fraction <= kMaskHigh;

    const double elapsed = secs_since(t0);
    const bool pass = reproducible && stats_ok && mask_ok;
    report(4, "generation determinism and statistics", pass,
           fmt("1000 images bitwise-stable over reruns and workers {1,2,5,8}: %s; "
               "stats tally: %s; mask rate %.4f over %zu tokens in [%.2f, %.2f]: %s; %.1fs",
               reproducible ? "yes" : "NO", stats_ok ? "exact" : "MISMATCH", fraction, eligible,
               kMaskLow, kMaskHigh, mask_ok ? "yes" : "NO", elapsed));
}

// ---- check 5: toy end-to-end pipeline ----------------------------------------

DatasetManifest make_toy_dataset(const AttributeOntology& ontology,
                                 const std::vector<CaptionTemplate>& templates, uint64_t seed) {
    ScriptedBackend::GroundTruth truth;
    std::vector<ImageRecord> images;
    Rng feat_rng(mix_seed(seed, fnv1a("toy-features")));

    const auto required = ontology.required();
    const auto optionals = ontology.optionals();
    std::vector<std::vector<double>> centroids;
    for (int ident = 0; ident < 32; ++ident) {
        std::vector<double> c(16);
        for (auto& x : c) x = feat_rng.gaussian();
        centroids.push_back(std::move(c));
    }
    for (int ident = 0; ident < 32; ++ident) {
        // distinct required-attribute combination per identity
        std::map<std::string, std::string> attrs;
        const int picks[6] = {ident % 4,       (ident / 4) % 4, (ident / 16) % 6,
                              ident % 5,       (ident + 1) % 5, (ident + 2) % 4};
        for (size_t c = 0; c < required.size(); ++c)
            attrs[required[c]->name] =
                required[c]->phrases[picks[c] % required[c]->phrases.size()].surface;
        const uint64_t bits = static_cast<uint64_t>(ident) * 2654435761ULL;
        for (size_t j = 0; j < optionals.size(); ++j)
            if ((bits >> j) & 1)
                attrs[optionals[j]->name] =
                    optionals[j]->phrases[(ident + j) % optionals[j]->phrases.size()].surface;
        for (int rep = 0; rep < 8; ++rep) {
            ImageRecord img;
            img.id = "toy_" + std::to_string(ident) + "_" + std::to_string(rep);
            for (int k = 0; k < 16; ++k)
                img.features.push_back(3.0 * centroids[ident][k] + 0.15 * feat_rng.gaussian());
            truth[img.id] = attrs;
            images.push_back(std::move(img));
        }
    }

    ScriptedBackend backend(ontology, truth, 48, seed);
    GenerateConfig gen;
    gen.synonym_rate = 0.7;  // heavier paraphrase augmentation for the tiny corpus
    DatasetManifest manifest = generate_manifest(images, ontology, templates, backend, gen, seed, 1);
    for (auto& rec : manifest.records) {
        const size_t us = rec.image_id.rfind('_');
        rec.identity = std::stoi(rec.image_id.substr(4, us - 4));
        const int rep = std::stoi(rec.image_id.substr(us + 1));
        rec.split = rep < 6 ? "train" : (rep == 6 ? "query" : "gallery");
    }
    return manifest;
}

ModelConfig toy_model() {
    ModelConfig cfg;
    cfg.visual.layers = 1;
    cfg.visual.width = 16;
    cfg.visual.heads = 2;
    cfg.visual_tokens = 2;
    cfg.visual_token_dim = 8;
    cfg.visual_max_tokens = 4;
    cfg.textual.layers = 1;
    cfg.textual.width = 16;
    cfg.textual.heads = 2;
    cfg.max_len = 40;
    cfg.embed_dim = 16;
    cfg.pgu_prototypes = 2;
    cfg.pgu_dim = 12;
    return cfg;
}

struct ToyOutcome {
    double with_unified = 0.0;     // fine-tuned with the unified-feature loss on
    double without_unified = 0.0;  // same pretraining, unified-feature loss off
};

ToyOutcome toy_pipeline(const AttributeOntology& ontology,
                        const std::vector<CaptionTemplate>& templates, int beta, int pre_epochs,
                        int ft_epochs, double alpha, uint64_t seed, bool both_gates) {
    const DatasetManifest data = make_toy_dataset(ontology, templates, seed);

    PretrainConfig pre;
    pre.model = toy_model();
    pre.beta = beta;
    pre.tau = 10.0;
    pre.epochs = pre_epochs;
    pre.batch_size = 32;
    pre.lr = 1e-2;
    pre.seed = seed;
    const Checkpoint pretrained = pretrain_loop(data, pre);

    FinetuneConfig ft;
    ft.gamma = 1;
    ft.alpha = alpha;
    ft.epochs = ft_epochs;
    ft.batch_size = 32;
    ft.lr_visual = 3e-3;
    ft.lr_text = 3e-3;
    ft.lr_head = 3e-3;
    ft.hflip = false;
    ft.seed = seed;

    ToyOutcome out;
    out.with_unified = evaluate(finetune_loop(data, pretrained, ft), data).rank1;
    if (both_gates) {
        ft.gamma = 0;
        out.without_unified = evaluate(finetune_loop(data, pretrained, ft), data).rank1;
    }
    return out;
}

void check_toy_end_to_end() {
    AttributeOntology ontology =
        load_ontology(std::string(PRETEXT_SOURCE_DIR) + "/assets/ontology.json");
    const auto templates =
        load_templates(std::string(PRETEXT_SOURCE_DIR) + "/assets/templates.tsv");

    // headline run: full pipeline must clear the Rank-1 floor
    const auto t0 = Clock::now();
    const double headline =
        toy_pipeline(ontology, templates, 1, 60, 40, 0.5, 1, false).with_unified;
    const double headline_secs = secs_since(t0);
    const bool headline_ok = headline >= kToyRank1Min && headline_secs < kToyBudgetSec;

    // ablation direction, mean over 3 seeds at a non-saturating budget
    double with_mlm = 0, without_mlm = 0, with_pgu = 0, without_pgu = 0;
    for (uint64_t seed : {1, 2, 3}) {
        const ToyOutcome b1 = toy_pipeline(ontology, templates, 1, 50, 25, 0.2, seed, true);
        const ToyOutcome b0 = toy_pipeline(ontology, templates, 0, 50, 25, 0.2, seed, true);
        with_mlm += b1.with_unified + b1.without_unified;
        without_mlm += b0.with_unified + b0.without_unified;
        with_pgu += b1.with_unified;
        without_pgu += b1.without_unified;
    }
    with_mlm /= 6;
    without_mlm /= 6;
    with_pgu /= 3;
    without_pgu /= 3;
    const bool ablation_ok = with_mlm >= without_mlm && with_pgu >= without_pgu;
    report(5, "toy end-to-end", headline_ok && ablation_ok,
           fmt("32 identities x 8 images: held-out Rank-1 %.4f (floor %.2f, chance 0.031) in "
               "%.1fs; ablation means over 3 seeds: masked-text on/off %.4f >= %.4f %s, "
               "unified-feature on/off %.4f >= %.4f %s",
               headline, kToyRank1Min, headline_secs, with_mlm, without_mlm,
               with_mlm >= without_mlm ? "yes" : "NO", with_pgu, without_pgu,
               with_pgu >= without_pgu ? "yes" : "NO"));
}

// ---- check 6: rank-k metric against brute force ------------------------------

void check_rank_metric() {
    const auto t0 = Clock::now();
    Rng rng(6001);
    bool all_equal = true, monotonic = true;
    for (int run = 0; run < 1000; ++run) {
        const Index ng = 2 + static_cast<Index>(rng.uniform_int(49));  // gallery <= 50
        const Index nq = 1 + static_cast<Index>(rng.uniform_int(10));
        const Index d = 2 + static_cast<Index>(rng.uniform_int(6));
        const int idents = 1 + static_cast<int>(rng.uniform_int(std::min<uint64_t>(ng, 8)));
        Matrix gallery = random_matrix(ng, d, rng);
        Matrix queries = random_matrix(nq, d, rng);
        std::vector<int> gid, qid;
        for (Index j = 0; j < ng; ++j)
            gid.push_back(j < idents ? static_cast<int>(j)
                                     : static_cast<int>(rng.uniform_int(idents)));
        for (Index i = 0; i < nq; ++i) qid.push_back(static_cast<int>(rng.uniform_int(idents)));

        const RetrievalRun run_data = make_retrieval_run(queries, gallery, qid, gid);
        double got[3] = {rank_k(run_data, 1), rank_k(run_data, 5), rank_k(run_data, 10)};

        // brute force: count queries with a same-identity row among the top k
        double want[3];
        for (int ki = 0; ki < 3; ++ki) {
            const int k = ki == 0 ? 1 : (ki == 1 ? 5 : 10);
            size_t hits = 0;
            for (Index i = 0; i < nq; ++i) {
                std::vector<std::pair<double, int>> scored;
                for (Index j = 0; j < ng; ++j) {
                    long double dot = 0, nq2 = 0, ng2 = 0;
                    for (Index c = 0; c < d; ++c) {
                        dot += static_cast<long double>(queries(i, c)) * gallery(j, c);
                        nq2 += static_cast<long double>(queries(i, c)) * queries(i, c);
                        ng2 += static_cast<long double>(gallery(j, c)) * gallery(j, c);
                    }
                    scored.push_back({static_cast<double>(dot / (sqrtl(nq2) * sqrtl(ng2))),
                                      static_cast<int>(j)});
                }
                std::stable_sort(scored.begin(), scored.end(),
                                 [](const auto& a, const auto& b) { return a.first > b.first; });
                for (int r = 0; r < std::min<int>(k, static_cast<int>(scored.size())); ++r)
                    if (gid[static_cast<size_t>(scored[static_cast<size_t>(r)].second)] ==
                        qid[static_cast<size_t>(i)]) {
                        ++hits;
                        break;
                    }
            }
            want[ki] = static_cast<double>(hits) / static_cast<double>(nq);
        }
        for (int ki = 0; ki < 3; ++ki)
            if (got[ki] != want[ki]) all_equal = false;
        if (got[0] > got[1] || got[1] > got[2]) monotonic = false;
    }
    const double elapsed = secs_since(t0);
    report(6, "rank-k metric", all_equal && monotonic,
           fmt("1000 random runs (gallery <= 50): brute-force agreement %s, "
               "Rank-1 <= Rank-5 <= Rank-10 %s, %.1fs",
               all_equal ? "exact" : "MISMATCH", monotonic ? "holds" : "VIOLATED", elapsed));
}

// ---- check 7: invariances -----------------------------------------------------

void check_invariances() {
    Rng rng(7001);
    double worst_rescale = 0, worst_swap = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const Index n = 2 + static_cast<Index>(rng.uniform_int(10));
        const Index d = 2 + static_cast<Index>(rng.uniform_int(14));
        Matrix v = random_matrix(n, d, rng);
        Matrix t = random_matrix(n, d, rng);
        const double tau = 0.1 + rng.uniform();
        const LossReport base = contrastive_loss(v, t, tau);

        Matrix vs = v, ts = t;
        for (Index i = 0; i < n; ++i) {
            vs.row(i) *= 0.1 + 10.0 * rng.uniform();
            ts.row(i) *= 0.1 + 10.0 * rng.uniform();
        }
        worst_rescale = std::max({worst_rescale,
                                  std::abs(contrastive_loss(vs, t, tau).l_con - base.l_con),
                                  std::abs(contrastive_loss(v, ts, tau).l_con - base.l_con)});

        const LossReport swapped = contrastive_loss(t, v, tau);
        worst_swap = std::max({worst_swap, std::abs(swapped.l_i2t - base.l_t2i),
                               std::abs(swapped.l_t2i - base.l_i2t),
                               std::abs(swapped.l_con - base.l_con)});
    }

    // perfectly separated pairs: every hinge term clamps to zero
    const Index n = 6;
    Matrix v = Matrix::Zero(n, n), t = Matrix::Zero(n, n);
    for (Index i = 0; i < n; ++i) v(i, i) = t(i, i) = 1.0;
    std::vector<int> labels;
    for (Index i = 0; i < n; ++i) labels.push_back(static_cast<int>(i));
    const double hinge = ranking_loss(v, t, mine_batch(v, t, labels, 0.2), 0.2);

    const bool pass = worst_rescale < kRescaleTol && worst_swap < kSwapTol && hinge == 0.0;
    report(7, "invariances", pass,
           fmt("row-rescale drift %.1e (tol %.0e); direction-swap drift %.1e (tol %.0e); "
               "separated-case hinge %.1e (expected 0)",
               worst_rescale, kRescaleTol, worst_swap, kSwapTol, hinge));
}

}  // namespace

int main() {
    const auto t0 = Clock::now();
    check_loss_oracles();
    check_gradients();
    check_phrase_selection();
    check_generation_determinism();
    check_toy_end_to_end();
    check_rank_metric();
    check_invariances();
    std::printf("%s: %d failure(s), %.1fs total\n", g_failures == 0 ? "ACCEPTED" : "REJECTED",
                g_failures, secs_since(t0));
    return g_failures;
}
