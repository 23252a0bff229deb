#include "pretext/generator.hpp"

#include <set>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <sstream>

#include "pretext/errors.hpp"

namespace pretext {

std::vector<double> softmax(const std::vector<double>& scores, double scale) {
    if (scores.empty()) throw ContractError("softmax: empty input");
    std::vector<double> out(scores.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (double s : scores) mx = std::max(mx, scale * s);
    double denom = 0.0;
    for (size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scale * scores[i] - mx);
        denom += out[i];
    }
    for (double& p : out) p /= denom;
    return out;
}

GateDecision optional_gate(const std::vector<double>& similarities, double scale,
                           double threshold) {
    if (similarities.size() < 2)
        throw ContractError("optional_gate: need at least one phrase plus the null candidate");
    GateDecision d;
    d.probabilities = softmax(similarities, scale);
    d.argmax = 0;
    for (size_t i = 1; i < d.probabilities.size(); ++i)
        if (d.probabilities[i] > d.probabilities[d.argmax]) d.argmax = static_cast<int>(i);
    const bool is_null = d.argmax == static_cast<int>(similarities.size()) - 1;
    d.included = !is_null && d.probabilities[d.argmax] > threshold;
    return d;
}

namespace {

std::vector<double> phrase_similarities(const EmbeddingVector& image_vec,
                                        const AttributeCategory& category,
                                        const AttributeOntology& ontology,
                                        const ScorerBackend& backend, bool with_null) {
    std::vector<double> sims;
    sims.reserve(category.phrases.size() + (with_null ? 1 : 0));
    for (const auto& phrase : category.phrases) {
        const PromptText prompt = to_prompt(category, phrase);
        sims.push_back(cosine_similarity(image_vec, backend.embed_text(prompt)));
    }
    if (with_null) {
        const PromptText prompt = to_prompt(category, category.null_phrase());
        sims.push_back(cosine_similarity(image_vec, backend.embed_text(prompt)));
    }
    return sims;
}

}  // namespace

AttributePhrase select_required(const EmbeddingVector& image_vec, const AttributeCategory& category,
                                const AttributeOntology& ontology, const ScorerBackend& backend,
                                CategoryScore* score) {
    if (category.kind != CategoryKind::required)
        throw ContractError("select_required: category '" + category.name + "' is not required");
    const auto sims = phrase_similarities(image_vec, category, ontology, backend, false);
    int best = 0;
    for (size_t i = 1; i < sims.size(); ++i)
        if (sims[i] > sims[best]) best = static_cast<int>(i);
    if (score) {
        score->category = category.name;
        score->candidates.clear();
        for (const auto& p : category.phrases) score->candidates.push_back(p.surface);
        score->similarities = sims;
        score->probabilities.clear();
        score->chosen = best;
        score->included = true;
    }
    return category.phrases[static_cast<size_t>(best)];
}

std::optional<AttributePhrase> select_optional(const EmbeddingVector& image_vec,
                                               const AttributeCategory& category,
                                               const AttributeOntology& ontology,
                                               const ScorerBackend& backend, double threshold,
                                               double scale, CategoryScore* score) {
    if (category.kind != CategoryKind::optional)
        throw ContractError("select_optional: category '" + category.name + "' is not optional");
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ConfigError("select_optional: threshold must be in (0, 1)");
    if (!(scale > 0.0)) throw ConfigError("select_optional: scale must be > 0");
    const auto sims = phrase_similarities(image_vec, category, ontology, backend, true);
    const GateDecision gate = optional_gate(sims, scale, threshold);
    if (score) {
        score->category = category.name;
        score->candidates.clear();
        for (const auto& p : category.phrases) score->candidates.push_back(p.surface);
        score->candidates.push_back(category.null_phrase().surface);
        score->similarities = sims;
        score->probabilities = gate.probabilities;
        score->chosen = gate.included ? gate.argmax : -1;
        score->included = gate.included;
    }
    if (!gate.included) return std::nullopt;
    return category.phrases[static_cast<size_t>(gate.argmax)];
}

// --- templates ---------------------------------------------------------

CaptionTemplate parse_template(int id, const std::string& pattern) {
    CaptionTemplate t;
    t.id = id;
    t.pattern = pattern;
    size_t pos = 0;
    while (pos < pattern.size()) {
        const size_t open = pattern.find('{', pos);
        if (open == std::string::npos) break;
        const size_t close = pattern.find('}', open + 1);
        if (close == std::string::npos)
            throw ParseError("template " + std::to_string(id) + ": unbalanced '{'");
        const std::string slot = pattern.substr(open + 1, close - open - 1);
        if (slot.empty())
            throw ParseError("template " + std::to_string(id) + ": empty slot name");
        if (std::find(t.slots.begin(), t.slots.end(), slot) == t.slots.end())
            t.slots.push_back(slot);
        pos = close + 1;
    }
    if (t.slots.empty())
        throw ParseError("template " + std::to_string(id) + ": no slots");
    return t;
}

std::vector<CaptionTemplate> load_templates(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open templates file: " + path);
    std::vector<CaptionTemplate> out;
    std::string line;
    int line_no = 0;
    std::set<int> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected id<TAB>pattern");
        int id = 0;
        try {
            size_t used = 0;
            id = std::stoi(line.substr(0, tab), &used);
            if (used != tab) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": bad template id '" +
                             line.substr(0, tab) + "'");
        }
        if (!seen.insert(id).second)
            throw ParseError(path + ":" + std::to_string(line_no) + ": duplicate template id " +
                             std::to_string(id));
        out.push_back(parse_template(id, line.substr(tab + 1)));
        // Every pack template must mention every required category (so fills
        // always cover the full required set) and nothing but known categories.
        const auto& slots = out.back().slots;
        for (const auto& name : required_category_names()) {
            if (std::find(slots.begin(), slots.end(), name) == slots.end())
                throw ValidationError(path + ":" + std::to_string(line_no) + ": template " +
                                      std::to_string(id) + " lacks required slot '" + name + "'");
        }
        const auto& req = required_category_names();
        const auto& opt = optional_category_names();
        for (const auto& slot : slots) {
            if (std::find(req.begin(), req.end(), slot) == req.end() &&
                std::find(opt.begin(), opt.end(), slot) == opt.end())
                throw ValidationError(path + ":" + std::to_string(line_no) + ": template " +
                                      std::to_string(id) + " has unknown slot '" + slot + "'");
        }
    }
    if (out.empty()) throw ParseError(path + ": no templates");
    return out;
}

void save_templates(const std::vector<CaptionTemplate>& templates, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write templates file: " + path);
    for (const auto& t : templates) out << t.id << '\t' << t.pattern << '\n';
}

PseudoCaption fill_template(const CaptionTemplate& tmpl, const AttributeSelection& selection) {
    PseudoCaption cap;
    cap.template_id = tmpl.id;
    std::string text;
    text.reserve(tmpl.pattern.size() * 2);
    size_t pos = 0;
    while (pos < tmpl.pattern.size()) {
        const size_t open = tmpl.pattern.find('{', pos);
        if (open == std::string::npos) {
            text.append(tmpl.pattern, pos, std::string::npos);
            break;
        }
        text.append(tmpl.pattern, pos, open - pos);
        const size_t close = tmpl.pattern.find('}', open + 1);
        const std::string slot = tmpl.pattern.substr(open + 1, close - open - 1);
        const AttributePhrase* phrase = nullptr;
        if (auto it = selection.required.find(slot); it != selection.required.end())
            phrase = &it->second;
        else if (auto jt = selection.optional.find(slot); jt != selection.optional.end())
            phrase = &jt->second;
        if (!phrase)
            throw GenerationError("template " + std::to_string(tmpl.id) + ": slot '" + slot +
                                  "' has no selected attribute");
        text += phrase->surface;
        cap.fills[slot] = phrase->surface;
        pos = close + 1;
    }
    cap.text = std::move(text);
    return cap;
}

const CaptionTemplate& choose_template(const std::vector<CaptionTemplate>& templates,
                                       const AttributeSelection& selection, Rng& rng) {
    std::vector<const CaptionTemplate*> usable;
    for (const auto& t : templates) {
        bool ok = true;
        for (const auto& slot : t.slots)
            if (!selection.covers(slot)) { ok = false; break; }
        if (ok) usable.push_back(&t);
    }
    if (usable.empty())
        throw GenerationError("no template covered by the selected attributes");
    return *usable[rng.uniform_int(usable.size())];
}

PseudoCaption substitute_synonyms(const PseudoCaption& caption, const CaptionTemplate& tmpl,
                                  const AttributeOntology& ontology, Rng& rng, double rate) {
    // Re-render from the pattern so replacements cannot collide with literal
    // text. One Bernoulli(rate) draw per slot, in pattern slot order.
    PseudoCaption out;
    out.template_id = caption.template_id;
    out.image_id = caption.image_id;
    std::map<std::string, std::string> surfaces = caption.fills;
    for (const auto& slot : tmpl.slots) {
        auto it = surfaces.find(slot);
        if (it == surfaces.end())
            throw ContractError("substitute_synonyms: caption lacks fill for slot '" + slot + "'");
        const AttributeCategory& cat = ontology.category(slot);
        const AttributePhrase* phrase = nullptr;
        for (const auto& p : cat.phrases)
            if (p.surface == it->second) { phrase = &p; break; }
        if (!phrase)
            throw ContractError("substitute_synonyms: fill '" + it->second +
                                "' not in category '" + slot + "'");
        if (!phrase->synonyms.empty() && rng.bernoulli(rate))
            it->second = phrase->synonyms[rng.uniform_int(phrase->synonyms.size())];
    }
    std::string text;
    size_t pos = 0;
    while (pos < tmpl.pattern.size()) {
        const size_t open = tmpl.pattern.find('{', pos);
        if (open == std::string::npos) {
            text.append(tmpl.pattern, pos, std::string::npos);
            break;
        }
        text.append(tmpl.pattern, pos, open - pos);
        const size_t close = tmpl.pattern.find('}', open + 1);
        const std::string slot = tmpl.pattern.substr(open + 1, close - open - 1);
        text += surfaces.at(slot);
        pos = close + 1;
    }
    out.text = std::move(text);
    out.fills = std::move(surfaces);
    return out;
}

PseudoCaption generate_caption(const ImageRecord& image, const AttributeOntology& ontology,
                               const std::vector<CaptionTemplate>& templates,
                               const ScorerBackend& backend, const GenerateConfig& config, Rng& rng,
                               AttributeSelection* selection_out) {
    auto stage = [&](const char* name, const std::exception& e) {
        return GenerationError(std::string("image '") + image.id + "' " + name + ": " + e.what());
    };
    EmbeddingVector image_vec;
    try {
        image_vec = backend.embed_image(image);
    } catch (const std::exception& e) { throw stage("embed", e); }

    AttributeSelection sel;
    try {
        for (const auto& name : required_category_names()) {
            CategoryScore score;
            sel.required[name] =
                select_required(image_vec, ontology.category(name), ontology, backend, &score);
            sel.scores[name] = std::move(score);
        }
        for (const auto& name : optional_category_names()) {
            CategoryScore score;
            auto picked = select_optional(image_vec, ontology.category(name), ontology, backend,
                                          config.threshold, config.scale, &score);
            if (picked) sel.optional[name] = *picked;
            sel.scores[name] = std::move(score);
        }
    } catch (const std::exception& e) { throw stage("select", e); }

    PseudoCaption cap;
    try {
        const CaptionTemplate& tmpl = choose_template(templates, sel, rng);
        cap = fill_template(tmpl, sel);
        cap = substitute_synonyms(cap, tmpl, ontology, rng, config.synonym_rate);
    } catch (const std::exception& e) { throw stage("combine", e); }
    cap.image_id = image.id;
    if (selection_out) *selection_out = std::move(sel);
    return cap;
}

DatasetManifest generate_manifest(const std::vector<ImageRecord>& images,
                                  const AttributeOntology& ontology,
                                  const std::vector<CaptionTemplate>& templates,
                                  const ScorerBackend& backend, const GenerateConfig& config,
                                  uint64_t seed, int workers) {
    if (workers < 1) throw ConfigError("workers must be >= 1");
    {
        std::set<std::string> ids;
        for (const auto& img : images)
            if (!ids.insert(img.id).second)
                throw ValidationError("duplicate image id '" + img.id + "'");
    }

    std::vector<PersonRecord> records(images.size());
    auto run_one = [&](size_t i) {
        const ImageRecord& img = images[i];
        Rng rng(derive_seed(seed, img.id));
        const PseudoCaption cap =
            generate_caption(img, ontology, templates, backend, config, rng);
        PersonRecord rec;
        rec.image_id = img.id;
        if (!img.features.empty()) rec.features = img.features;
        else rec.image_ref = img.id;
        rec.caption = cap.text;
        rec.fills = cap.fills;
        records[i] = std::move(rec);
    };

    if (workers == 1 || images.size() < 2) {
        for (size_t i = 0; i < images.size(); ++i) run_one(i);
    } else {
        // Strided shards; each image's result depends only on its own seed,
        // so the stitched output is identical for any worker count.
        const size_t n_workers = std::min<size_t>(static_cast<size_t>(workers), images.size());
        std::vector<std::future<void>> futs;
        futs.reserve(n_workers);
        for (size_t w = 0; w < n_workers; ++w) {
            futs.push_back(std::async(std::launch::async, [&, w]() {
                for (size_t i = w; i < images.size(); i += n_workers) run_one(i);
            }));
        }
        for (auto& f : futs) f.get();
    }

    DatasetManifest manifest;
    manifest.records = std::move(records);
    return manifest;
}

CorpusStats corpus_stats(const DatasetManifest& manifest) {
    CorpusStats stats;
    stats.caption_count = manifest.records.size();
    for (const auto& rec : manifest.records) {
        if (!rec.fills) {
            ++stats.unknown_fills;
            continue;
        }
        ++stats.rows_with_fills;
        for (const auto& [slot, surface] : *rec.fills) {
            (void)surface;
            ++stats.category_counts[slot];
        }
    }
    if (stats.rows_with_fills > 0)
        for (const auto& [slot, count] : stats.category_counts)
            stats.category_frequencies[slot] =
                static_cast<double>(count) / static_cast<double>(stats.rows_with_fills);
    return stats;
}

}  // namespace pretext
