#pragma once
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pretext/data.hpp"
#include "pretext/ontology.hpp"
#include "pretext/rng.hpp"
#include "pretext/scorer.hpp"

namespace pretext {

// Audit record of one category's selection. For optional categories the last
// candidate is the fixed null phrase.
struct CategoryScore {
    std::string category;
    std::vector<std::string> candidates;
    std::vector<double> similarities;
    std::vector<double> probabilities;  // optional categories only
    int chosen = -1;                    // index into candidates, -1 = absent
    bool included = false;
};

struct AttributeSelection {
    std::map<std::string, AttributePhrase> required;  // all 6 categories
    std::map<std::string, AttributePhrase> optional;  // gated subset of the 8
    std::map<std::string, CategoryScore> scores;

    bool covers(const std::string& category) const {
        return required.count(category) > 0 || optional.count(category) > 0;
    }
};

struct CaptionTemplate {
    int id = 0;
    std::string pattern;
    std::vector<std::string> slots;  // order of first appearance, unique
};

struct PseudoCaption {
    std::string text;
    int template_id = 0;
    std::map<std::string, std::string> fills;  // slot -> surface actually used
    std::string image_id;
};

struct CorpusStats {
    size_t caption_count = 0;
    size_t rows_with_fills = 0;
    size_t unknown_fills = 0;  // rows lacking fills metadata
    std::map<std::string, size_t> category_counts;       // captions containing each slot
    std::map<std::string, double> category_frequencies;  // counts / rows_with_fills
};

struct GenerateConfig {
    double threshold = 0.9;  // optional-attribute gate on softmax probability
    double scale = 100.0;    // logit scale applied to cosine similarities
    double synonym_rate = 0.5;
};

std::vector<double> softmax(const std::vector<double>& scores, double scale);

// Gate shared by select_optional and its oracle tests: softmax over the
// candidate similarities (null last), argmax with low-index tie-break.
struct GateDecision {
    std::vector<double> probabilities;
    int argmax = -1;
    bool included = false;  // argmax is non-null and its probability > threshold
};
GateDecision optional_gate(const std::vector<double>& similarities, double scale,
                           double threshold);

AttributePhrase select_required(const EmbeddingVector& image_vec, const AttributeCategory& category,
                                const AttributeOntology& ontology, const ScorerBackend& backend,
                                CategoryScore* score = nullptr);

std::optional<AttributePhrase> select_optional(const EmbeddingVector& image_vec,
                                               const AttributeCategory& category,
                                               const AttributeOntology& ontology,
                                               const ScorerBackend& backend,
                                               double threshold = 0.9, double scale = 100.0,
                                               CategoryScore* score = nullptr);

CaptionTemplate parse_template(int id, const std::string& pattern);
std::vector<CaptionTemplate> load_templates(const std::string& path);
void save_templates(const std::vector<CaptionTemplate>& templates, const std::string& path);

PseudoCaption fill_template(const CaptionTemplate& tmpl, const AttributeSelection& selection);

const CaptionTemplate& choose_template(const std::vector<CaptionTemplate>& templates,
                                       const AttributeSelection& selection, Rng& rng);

PseudoCaption substitute_synonyms(const PseudoCaption& caption, const CaptionTemplate& tmpl,
                                  const AttributeOntology& ontology, Rng& rng, double rate = 0.5);

// divide -> conquer -> combine for one image; pure function of (image, seed).
PseudoCaption generate_caption(const ImageRecord& image, const AttributeOntology& ontology,
                               const std::vector<CaptionTemplate>& templates,
                               const ScorerBackend& backend, const GenerateConfig& config, Rng& rng,
                               AttributeSelection* selection_out = nullptr);

// Batch driver. Per-image seeds derive from (seed, image_id); output order and
// content are independent of worker count.
DatasetManifest generate_manifest(const std::vector<ImageRecord>& images,
                                  const AttributeOntology& ontology,
                                  const std::vector<CaptionTemplate>& templates,
                                  const ScorerBackend& backend, const GenerateConfig& config,
                                  uint64_t seed, int workers = 1);

CorpusStats corpus_stats(const DatasetManifest& manifest);

}  // namespace pretext
