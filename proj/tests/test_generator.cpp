#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pretext/errors.hpp"
#include "pretext/generator.hpp"
#include "pretext/ontology.hpp"
#include "pretext/rng.hpp"
#include "pretext/scorer.hpp"

using namespace pretext;

namespace {
const std::string kOntologyPath = std::string(PRETEXT_SOURCE_DIR) + "/assets/ontology.json";
const std::string kTemplatesPath = std::string(PRETEXT_SOURCE_DIR) + "/assets/templates.tsv";

AttributeOntology shipped() { return load_ontology(kOntologyPath); }

// Backend with hand-assigned embeddings per prompt/image, for exact-similarity
// scenarios (ties, forced gates) that hash backends cannot produce.
class TableBackend : public ScorerBackend {
public:
    TableBackend(int dim, EmbeddingVector fallback) : dim_(dim), fallback_(std::move(fallback)) {}
    const std::string& name() const override { return name_; }
    int dimension() const override { return dim_; }
    EmbeddingVector embed_image(const ImageRecord& image) const override {
        auto it = images_.find(image.id);
        if (it == images_.end()) throw InputError("no image " + image.id);
        return it->second;
    }
    EmbeddingVector embed_text(const PromptText& prompt) const override {
        auto it = texts_.find(prompt.text);
        return it == texts_.end() ? fallback_ : it->second;
    }
    std::map<std::string, EmbeddingVector> images_;
    std::map<std::string, EmbeddingVector> texts_;

private:
    std::string name_ = "table";
    int dim_;
    EmbeddingVector fallback_;
};

EmbeddingVector axis(int dim, int i) {
    EmbeddingVector v = EmbeddingVector::Zero(dim);
    v[i] = 1.0;
    return v;
}

AttributeSelection full_selection(const AttributeOntology& o,
                                  const std::map<std::string, std::string>& surfaces) {
    AttributeSelection sel;
    for (const auto& [cat, surface] : surfaces) {
        const AttributeCategory& c = o.category(cat);
        AttributePhrase found;
        bool ok = false;
        for (const auto& p : c.phrases)
            if (p.surface == surface) {
                found = p;
                ok = true;
            }
        REQUIRE(ok);
        if (c.kind == CategoryKind::required)
            sel.required[cat] = found;
        else
            sel.optional[cat] = found;
    }
    return sel;
}
}  // namespace

TEST_CASE("softmax: symmetry, golden pair, invariances") {
    auto uniform = softmax({0.4, 0.4, 0.4}, 17.0);
    for (double p : uniform) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-12));

    auto pair = softmax({2.0, 0.0}, 1.0);
    CHECK(pair[0] == doctest::Approx(0.8808).epsilon(1e-4));
    CHECK(pair[1] == doctest::Approx(0.1192).epsilon(1e-4));

    auto shifted = softmax({2.0 + 123.0, 0.0 + 123.0}, 1.0);
    CHECK(shifted[0] == doctest::Approx(pair[0]).epsilon(1e-12));

    auto any = softmax({0.31, -0.2, 0.05, 0.9}, 100.0);
    double sum = 0.0;
    for (double p : any) {
        CHECK(p > 0.0);
        sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    // monotone: larger score, larger probability
    CHECK(any[3] > any[0]);
    CHECK(any[0] > any[2]);
    CHECK(any[2] > any[1]);

    CHECK_THROWS_AS(softmax({}, 1.0), ContractError);
}

TEST_CASE("optional gate: uniform candidates, null wins, golden inclusion") {
    // five equal candidates -> max probability 0.2, below 0.9
    GateDecision uniform = optional_gate({0.2, 0.2, 0.2, 0.2, 0.2}, 100.0, 0.9);
    CHECK_FALSE(uniform.included);
    CHECK(uniform.argmax == 0);  // ties break low

    // null candidate (last) winning -> excluded no matter how confident
    GateDecision null_wins = optional_gate({0.1, 0.05, 0.8}, 100.0, 0.9);
    CHECK_FALSE(null_wins.included);
    CHECK(null_wins.argmax == 2);

    // direct evaluation: sims {backpack 0.30, other 0.05, null 0.10}, scale 100
    GateDecision golden = optional_gate({0.30, 0.05, 0.10}, 100.0, 0.9);
    const double e30 = std::exp(100 * 0.30), e05 = std::exp(100 * 0.05), e10 = std::exp(100 * 0.10);
    const double p = e30 / (e30 + e05 + e10);
    CHECK(golden.probabilities[0] == doctest::Approx(p).epsilon(1e-12));
    CHECK(golden.argmax == 0);
    CHECK(golden.included == (p > 0.9));
    CHECK(golden.included);

    CHECK_THROWS_AS(optional_gate({0.5}, 100.0, 0.9), ContractError);
}

TEST_CASE("select_required recovers scripted ground truth and breaks ties low") {
    AttributeOntology o = shipped();
    ScriptedBackend::GroundTruth truth;
    truth["img"] = {{"hair_length", "long hair"}};
    ScriptedBackend scripted(o, truth, 64, 0);
    EmbeddingVector img = scripted.embed_image({"img", "", {}});

    CategoryScore score;
    AttributePhrase got =
        select_required(img, o.category("hair_length"), o, scripted, &score);
    CHECK(got.surface == "long hair");
    CHECK(score.candidates[static_cast<size_t>(score.chosen)] == "long hair");
    CHECK(score.similarities.size() == o.category("hair_length").phrases.size());

    // exact tie: two phrases share an embedding; the earlier one wins
    TableBackend table(4, axis(4, 3));
    const AttributeCategory& gender = o.category("gender");
    for (const auto& p : gender.phrases) table.texts_[to_prompt(gender, p).text] = axis(4, 1);
    table.images_["tie"] = axis(4, 1);
    AttributePhrase tied = select_required(table.embed_image({"tie", "", {}}), gender, o, table);
    CHECK(tied.surface == gender.phrases[0].surface);

    CHECK_THROWS_AS(select_required(img, o.category("bag"), o, scripted), ContractError);
}

TEST_CASE("select_required matches a brute-force argmax oracle") {
    AttributeOntology o = shipped();
    MockBackend mock(64, 11);
    for (int trial = 0; trial < 100; ++trial) {
        ImageRecord img{"oracle_" + std::to_string(trial), "", {}};
        EmbeddingVector v = mock.embed_image(img);
        for (const auto* cat : o.required()) {
            AttributePhrase got = select_required(v, *cat, o, mock);
            int best = 0;
            double best_sim = -2.0;
            for (size_t i = 0; i < cat->phrases.size(); ++i) {
                double s = cosine_similarity(v, mock.embed_text(to_prompt(*cat, cat->phrases[i])));
                if (s > best_sim) {
                    best_sim = s;
                    best = static_cast<int>(i);
                }
            }
            CHECK(got.surface == cat->phrases[static_cast<size_t>(best)].surface);
        }
    }
}

TEST_CASE("select_optional gates exactly like the direct softmax") {
    AttributeOntology o = shipped();
    MockBackend mock(64, 5);
    int included_seen = 0, excluded_seen = 0;
    for (int trial = 0; trial < 200; ++trial) {
        ImageRecord img{"gate_" + std::to_string(trial), "", {}};
        EmbeddingVector v = mock.embed_image(img);
        for (const auto* cat : o.optionals()) {
            CategoryScore score;
            auto picked = select_optional(v, *cat, o, mock, 0.9, 100.0, &score);
            std::vector<double> sims;
            for (const auto& p : cat->phrases)
                sims.push_back(cosine_similarity(v, mock.embed_text(to_prompt(*cat, p))));
            sims.push_back(
                cosine_similarity(v, mock.embed_text(to_prompt(*cat, cat->null_phrase()))));
            GateDecision gate = optional_gate(sims, 100.0, 0.9);
            CHECK(picked.has_value() == gate.included);
            if (picked) {
                CHECK(picked->surface == cat->phrases[static_cast<size_t>(gate.argmax)].surface);
                CHECK(score.probabilities[static_cast<size_t>(gate.argmax)] > 0.9);
                ++included_seen;
            } else {
                ++excluded_seen;
            }
        }
    }
    // the mock distribution must exercise both branches for this to mean anything
    CHECK(included_seen > 0);
    CHECK(excluded_seen > 0);

    EmbeddingVector v = mock.embed_image({"x", "", {}});
    CHECK_THROWS_AS(select_optional(v, o.category("bag"), o, mock, 1.5, 100.0), ConfigError);
    CHECK_THROWS_AS(select_optional(v, o.category("age"), o, mock, 0.9, 100.0), ContractError);
}

TEST_CASE("parse_template extracts slots in first-appearance order") {
    CaptionTemplate t = parse_template(9, "The {age} {gender} with {hair_length}; {gender} again.");
    CHECK(t.id == 9);
    CHECK(t.slots == std::vector<std::string>{"age", "gender", "hair_length"});
    CHECK(t.pattern == "The {age} {gender} with {hair_length}; {gender} again.");
    CHECK_THROWS_AS(parse_template(1, "unterminated {age"), ParseError);
    CHECK_THROWS_AS(parse_template(1, "no slots at all"), ParseError);
    CHECK_THROWS_AS(parse_template(1, "empty {} slot"), ParseError);
}

TEST_CASE("shipped template pack loads with unique ids and full required coverage") {
    auto templates = load_templates(kTemplatesPath);
    CHECK(templates.size() >= 20);
    std::set<int> ids;
    for (const auto& t : templates) {
        CHECK(ids.insert(t.id).second);
        for (const auto& name : required_category_names())
            CHECK(std::find(t.slots.begin(), t.slots.end(), name) != t.slots.end());
    }
}

TEST_CASE("template file errors carry path and line") {
    const std::string path = std::string(PRETEXT_SOURCE_DIR) + "/build/bad_templates.tsv";
    {
        std::ofstream out(path, std::ios::trunc);
        out << "1\tThe {age} {gender} is {action}, {upper_clothes}, {lower_clothes}, "
               "{hair_length}.\n";
        out << "no-tab-line\n";
    }
    try {
        load_templates(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
    {
        std::ofstream out(path, std::ios::trunc);
        out << "1\tA {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length}.\n";
        out << "1\tB {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length}.\n";
    }
    CHECK_THROWS_AS(load_templates(path), ParseError);
    {
        std::ofstream out(path, std::ios::trunc);
        out << "1\tA {gender} is {action}.\n";  // missing required slots
    }
    CHECK_THROWS_AS(load_templates(path), ValidationError);
    {
        std::ofstream out(path, std::ios::trunc);
        out << "1\tA {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length} "
               "{spaceship}.\n";
    }
    CHECK_THROWS_AS(load_templates(path), ValidationError);
    std::remove(path.c_str());
}

TEST_CASE("fill_template renders the reference sentence") {
    AttributeOntology o = shipped();
    auto templates = load_templates(kTemplatesPath);
    AttributeSelection sel = full_selection(o, {{"age", "young"},
                                                {"gender", "woman"},
                                                {"action", "walking"},
                                                {"upper_clothes", "a white pure color t-shirt"},
                                                {"lower_clothes", "blue jeans"},
                                                {"hair_length", "long hair"},
                                                {"glasses", "glasses"},
                                                {"bag", "a backpack"}});
    PseudoCaption cap = fill_template(templates[0], sel);
    CHECK(cap.text ==
          "The young woman is walking, wearing a white pure color t-shirt and blue jeans. "
          "The woman wears glasses and carries a backpack. woman has long hair.");
    CHECK(cap.template_id == templates[0].id);
    CHECK(cap.fills.at("age") == "young");
    CHECK(cap.fills.at("bag") == "a backpack");
    CHECK(cap.text.find('{') == std::string::npos);

    // slot re-extraction recovers fills exactly
    for (const auto& [slot, surface] : cap.fills)
        CHECK(cap.text.find(surface) != std::string::npos);

    // required-only template succeeds without optionals
    AttributeSelection required_only = sel;
    required_only.optional.clear();
    CaptionTemplate basic = parse_template(
        50, "A {age} {gender} with {hair_length}, {action}, in {upper_clothes} and "
            "{lower_clothes}.");
    PseudoCaption plain = fill_template(basic, required_only);
    CHECK(plain.text ==
          "A young woman with long hair, walking, in a white pure color t-shirt and blue jeans.");
    CHECK(plain.fills.size() == 6);

    // template demanding an unselected optional is a contract violation
    CaptionTemplate umbrella = parse_template(
        99, "A {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length} {umbrella}.");
    CHECK_THROWS_AS(fill_template(umbrella, required_only), GenerationError);
}

TEST_CASE("choose_template: coverage filter and uniformity") {
    AttributeOntology o = shipped();
    auto templates = load_templates(kTemplatesPath);
    AttributeSelection sel = full_selection(o, {{"age", "young"},
                                                {"gender", "woman"},
                                                {"action", "walking"},
                                                {"upper_clothes", "a white pure color t-shirt"},
                                                {"lower_clothes", "blue jeans"},
                                                {"hair_length", "long hair"}});

    // no optionals selected -> only required-only templates are eligible
    Rng rng(1);
    std::set<int> chosen_ids;
    for (int i = 0; i < 2000; ++i) chosen_ids.insert(choose_template(templates, sel, rng).id);
    for (int id : chosen_ids) {
        const CaptionTemplate* t = nullptr;
        for (const auto& c : templates)
            if (c.id == id) t = &c;
        REQUIRE(t != nullptr);
        for (const auto& slot : t->slots) CHECK(sel.covers(slot));
    }

    // single covering template -> always that one
    std::vector<CaptionTemplate> one = {parse_template(
        42, "A {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length}")};
    for (int i = 0; i < 50; ++i) CHECK(choose_template(one, sel, rng).id == 42);

    // three covering templates -> empirical uniformity over 10k draws
    std::vector<CaptionTemplate> three = {
        parse_template(1, "A {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length}"),
        parse_template(2, "B {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length}"),
        parse_template(3, "C {age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length}")};
    std::map<int, int> counts;
    Rng rng2(7);
    for (int i = 0; i < 10000; ++i) ++counts[choose_template(three, sel, rng2).id];
    for (const auto& [id, n] : counts)
        CHECK(n / 10000.0 == doctest::Approx(1.0 / 3).epsilon(0.06));
    CHECK(counts.size() == 3);

    // nothing covered -> generation error
    std::vector<CaptionTemplate> needy = {parse_template(
        5, "{age} {gender} {action} {upper_clothes} {lower_clothes} {hair_length} {umbrella}")};
    CHECK_THROWS_AS(choose_template(needy, sel, rng), GenerationError);
}

TEST_CASE("substitute_synonyms: degenerate rates and frequency") {
    AttributeOntology o = shipped();
    CaptionTemplate tmpl = parse_template(
        60, "A {age} {gender} with {hair_length} is {action} in {upper_clothes} and "
            "{lower_clothes}.");
    AttributeSelection sel = full_selection(o, {{"age", "young"},
                                                {"gender", "woman"},
                                                {"action", "walking"},
                                                {"upper_clothes", "a white pure color t-shirt"},
                                                {"lower_clothes", "blue jeans"},
                                                {"hair_length", "long hair"}});
    PseudoCaption cap = fill_template(tmpl, sel);

    Rng rng(3);
    PseudoCaption same = substitute_synonyms(cap, tmpl, o, rng, 0.0);
    CHECK(same.text == cap.text);
    CHECK(same.fills == cap.fills);

    // rate 1: every slot flips to some synonym (every shipped phrase has one)
    PseudoCaption flipped = substitute_synonyms(cap, tmpl, o, rng, 1.0);
    for (const auto& [slot, surface] : flipped.fills) {
        CHECK(surface != cap.fills.at(slot));
        CHECK(flipped.text.find(surface) != std::string::npos);
    }
    CHECK(flipped.template_id == cap.template_id);

    // rate 0.5: per-slot substitution frequency over 10k runs
    std::map<std::string, int> flips;
    const int runs = 10000;
    Rng rng2(9);
    for (int i = 0; i < runs; ++i) {
        PseudoCaption s = substitute_synonyms(cap, tmpl, o, rng2, 0.5);
        for (const auto& [slot, surface] : s.fills)
            if (surface != cap.fills.at(slot)) ++flips[slot];
    }
    for (const auto& [slot, n] : flips)
        CHECK(n / static_cast<double>(runs) == doctest::Approx(0.5).epsilon(0.04));
    CHECK(flips.size() == 6);
}

TEST_CASE("generate_caption: golden sentence, determinism, gating") {
    AttributeOntology o = shipped();
    ScriptedBackend::GroundTruth truth;
    truth["img_7"] = {{"age", "young"},
                      {"gender", "woman"},
                      {"action", "walking"},
                      {"upper_clothes", "a white pure color t-shirt"},
                      {"lower_clothes", "blue jeans"},
                      {"hair_length", "long hair"}};
    ScriptedBackend scripted(o, truth, 64, 0);

    // single required-only template + rate 0: output is fully determined
    std::vector<CaptionTemplate> one = {parse_template(
        2, "A {age} {gender} with {hair_length} is {action}, dressed in {upper_clothes} and "
           "{lower_clothes}.")};
    GenerateConfig cfg;
    cfg.synonym_rate = 0.0;
    Rng rng(1);
    AttributeSelection sel;
    PseudoCaption cap = generate_caption({"img_7", "", {}}, o, one, scripted, cfg, rng, &sel);
    CHECK(cap.text ==
          "A young woman with long hair is walking, dressed in a white pure color t-shirt and "
          "blue jeans.");
    CHECK(cap.image_id == "img_7");
    for (const auto& name : required_category_names()) CHECK(sel.required.count(name) == 1);

    // determinism: same image, same seed
    Rng rng_a(42), rng_b(42);
    GenerateConfig half;
    auto t = load_templates(kTemplatesPath);
    PseudoCaption a = generate_caption({"img_7", "", {}}, o, t, scripted, half, rng_a);
    PseudoCaption b = generate_caption({"img_7", "", {}}, o, t, scripted, half, rng_b);
    CHECK(a.text == b.text);
    CHECK(a.template_id == b.template_id);
    CHECK(a.fills == b.fills);

    // backend where the null prompt always matches the image -> no optionals
    TableBackend table(8, axis(8, 1));
    table.images_["plain"] = axis(8, 0);
    for (const auto* cat : o.optionals())
        table.texts_[to_prompt(*cat, cat->null_phrase()).text] = axis(8, 0);
    for (const auto* cat : o.required())
        for (size_t i = 0; i < cat->phrases.size(); ++i)
            table.texts_[to_prompt(*cat, cat->phrases[i]).text] =
                axis(8, 2 + static_cast<int>(i % 6));
    Rng rng_c(5);
    AttributeSelection gated;
    PseudoCaption plain = generate_caption({"plain", "", {}}, o, t, table, GenerateConfig{}, rng_c,
                                           &gated);
    CHECK(gated.optional.empty());
    for (const auto& [slot, surface] : plain.fills) {
        bool is_required = false;
        for (const auto& name : required_category_names()) is_required |= name == slot;
        CHECK(is_required);
    }

    // errors are tagged with the image id and stage
    try {
        generate_caption({"mystery", "", {}}, o, t, scripted, cfg, rng);
        FAIL("expected GenerationError");
    } catch (const GenerationError& e) {
        CHECK(std::string(e.what()).find("mystery") != std::string::npos);
    }
}

TEST_CASE("generate_manifest: worker independence, order stability, id checks") {
    AttributeOntology o = shipped();
    auto templates = load_templates(kTemplatesPath);
    MockBackend mock(64, 2);
    std::vector<ImageRecord> images;
    for (int i = 0; i < 40; ++i)
        images.push_back({"img_" + std::to_string(i), "", {0.1 * i, 1.0, -0.5 * i, 2.0}});

    GenerateConfig cfg;
    DatasetManifest m1 = generate_manifest(images, o, templates, mock, cfg, 9, 1);
    DatasetManifest m4 = generate_manifest(images, o, templates, mock, cfg, 9, 4);
    DatasetManifest m7 = generate_manifest(images, o, templates, mock, cfg, 9, 7);
    REQUIRE(m1.size() == images.size());
    for (size_t i = 0; i < m1.size(); ++i) {
        CHECK(m1.records[i].image_id == images[i].id);
        CHECK(serialize_record(m1.records[i]) == serialize_record(m4.records[i]));
        CHECK(serialize_record(m1.records[i]) == serialize_record(m7.records[i]));
        CHECK_FALSE(m1.records[i].caption.empty());
        REQUIRE(m1.records[i].fills.has_value());
        for (const auto& name : required_category_names())
            CHECK(m1.records[i].fills->count(name) == 1);
    }

    // per-image seeds: captions survive reordering of the input set
    std::vector<ImageRecord> reversed(images.rbegin(), images.rend());
    DatasetManifest mr = generate_manifest(reversed, o, templates, mock, cfg, 9, 2);
    std::map<std::string, std::string> by_id;
    for (const auto& r : mr.records) by_id[r.image_id] = r.caption;
    for (const auto& r : m1.records) CHECK(by_id.at(r.image_id) == r.caption);

    // different global seed changes at least one caption
    DatasetManifest other = generate_manifest(images, o, templates, mock, cfg, 10, 1);
    bool any_diff = false;
    for (size_t i = 0; i < m1.size(); ++i)
        any_diff = any_diff || other.records[i].caption != m1.records[i].caption;
    CHECK(any_diff);

    std::vector<ImageRecord> dup = {images[0], images[0]};
    CHECK_THROWS_AS(generate_manifest(dup, o, templates, mock, cfg, 9, 1), ValidationError);
    CHECK_THROWS_AS(generate_manifest(images, o, templates, mock, cfg, 9, 0), ConfigError);
}

TEST_CASE("corpus_stats tallies fills") {
    DatasetManifest m;
    for (int i = 0; i < 100; ++i) {
        PersonRecord r;
        r.image_id = "img_" + std::to_string(i);
        r.caption = "text";
        std::map<std::string, std::string> fills{{"age", "young"}, {"gender", "woman"}};
        if (i < 38) fills["bag"] = "a backpack";
        r.fills = fills;
        m.records.push_back(r);
    }
    for (int i = 0; i < 5; ++i) {
        PersonRecord r;
        r.image_id = "nofills_" + std::to_string(i);
        r.caption = "text";
        m.records.push_back(r);
    }

    CorpusStats stats = corpus_stats(m);
    CHECK(stats.caption_count == 105);
    CHECK(stats.rows_with_fills == 100);
    CHECK(stats.unknown_fills == 5);
    CHECK(stats.category_counts.at("bag") == 38);
    CHECK(stats.category_frequencies.at("bag") == doctest::Approx(0.38).epsilon(1e-12));
    CHECK(stats.category_counts.at("age") == 100);
    CHECK(stats.category_frequencies.at("age") == doctest::Approx(1.0).epsilon(1e-12));

    CorpusStats empty = corpus_stats(DatasetManifest{});
    CHECK(empty.caption_count == 0);
    CHECK(empty.rows_with_fills == 0);
    CHECK(empty.unknown_fills == 0);
    CHECK(empty.category_counts.empty());
}
