#pragma once
#include <Eigen/Dense>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pretext/ontology.hpp"

namespace pretext {

using EmbeddingVector = Eigen::VectorXd;

struct ImageRecord {
    std::string id;
    std::string bytes;             // raw file contents (file mode)
    std::vector<double> features;  // inline feature vector (toy mode)
};

// Embedding oracle behind the phrase-selection stage. Backends are pure:
// identical input, identical vector. No mutable state after construction.
class ScorerBackend {
public:
    virtual ~ScorerBackend() = default;
    virtual const std::string& name() const = 0;
    virtual int dimension() const = 0;
    virtual EmbeddingVector embed_image(const ImageRecord& image) const = 0;
    virtual EmbeddingVector embed_text(const PromptText& prompt) const = 0;
};

// Unit-normalized vector from a seeded keyed hash of the input. Reproducible
// across processes for a given (dimension, seed).
class MockBackend : public ScorerBackend {
public:
    explicit MockBackend(int dimension = 64, uint64_t seed = 0);
    const std::string& name() const override { return name_; }
    int dimension() const override { return dimension_; }
    EmbeddingVector embed_image(const ImageRecord& image) const override;
    EmbeddingVector embed_text(const PromptText& prompt) const override;

private:
    EmbeddingVector hash_embed(const std::string& key) const;
    std::string name_ = "mock";
    int dimension_;
    uint64_t seed_;
};

// Ground-truth mapping image_id -> {category -> phrase surface}. embed_image
// returns the renormalized mean of the ground-truth phrases' prompt
// embeddings, which makes phrase selection exactly checkable.
class ScriptedBackend : public ScorerBackend {
public:
    using GroundTruth = std::map<std::string, std::map<std::string, std::string>>;

    ScriptedBackend(AttributeOntology ontology, GroundTruth truth, int dimension = 64,
                    uint64_t seed = 0);
    const std::string& name() const override { return name_; }
    int dimension() const override { return mock_.dimension(); }
    EmbeddingVector embed_image(const ImageRecord& image) const override;
    EmbeddingVector embed_text(const PromptText& prompt) const override;

    const GroundTruth& truth() const { return truth_; }

    static GroundTruth load_script(const std::string& path);

private:
    std::string name_ = "scripted";
    AttributeOntology ontology_;
    GroundTruth truth_;
    MockBackend mock_;
};

// Out-of-process backend speaking newline-delimited JSON over stdin/stdout:
//   request  {"kind": "image"|"text", "id": "...", "payload": "..."}
//   response {"id": "...", "vector": [d floats]} or {"id": "...", "error": "..."}
// Image payload is base64 of the record bytes (or of the little-endian IEEE-754
// doubles of the inline features when no bytes are present); text payload is
// the prompt string.
class PluginBackend : public ScorerBackend {
public:
    PluginBackend(std::vector<std::string> command, int dimension);
    ~PluginBackend() override;
    PluginBackend(const PluginBackend&) = delete;
    PluginBackend& operator=(const PluginBackend&) = delete;

    const std::string& name() const override { return name_; }
    int dimension() const override { return dimension_; }
    EmbeddingVector embed_image(const ImageRecord& image) const override;
    EmbeddingVector embed_text(const PromptText& prompt) const override;

private:
    EmbeddingVector roundtrip(const std::string& kind, const std::string& id,
                              const std::string& payload) const;
    struct Process;
    std::string name_ = "plugin";
    int dimension_;
    std::unique_ptr<Process> proc_;
};

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b);

std::string base64_encode(std::string_view bytes);

}  // namespace pretext
