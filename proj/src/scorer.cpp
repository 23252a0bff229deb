#include "pretext/scorer.hpp"

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "pretext/errors.hpp"
#include "pretext/rng.hpp"

namespace pretext {

using nlohmann::json;

namespace {

std::string features_bytes(const std::vector<double>& features) {
    std::string out(features.size() * sizeof(double), '\0');
    std::memcpy(out.data(), features.data(), out.size());
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// MockBackend

MockBackend::MockBackend(int dimension, uint64_t seed) : dimension_(dimension), seed_(seed) {
    if (dimension < 1) throw ConfigError("mock backend: dimension must be >= 1");
}

EmbeddingVector MockBackend::hash_embed(const std::string& key) const {
    uint64_t state = mix_seed(seed_, fnv1a(key));
    EmbeddingVector v(dimension_);
    for (int i = 0; i < dimension_; ++i) {
        uint64_t bits = splitmix64(state);
        v[i] = 2.0 * (static_cast<double>(bits >> 11) * 0x1.0p-53) - 1.0;
    }
    double n = v.norm();
    if (n == 0.0) {
        v.setZero();
        v[0] = 1.0;
        return v;
    }
    return v / n;
}

EmbeddingVector MockBackend::embed_image(const ImageRecord& image) const {
    if (!image.bytes.empty()) return hash_embed("img:" + image.bytes);
    if (!image.features.empty()) return hash_embed("img:" + features_bytes(image.features));
    if (!image.id.empty()) return hash_embed("imgid:" + image.id);
    throw InputError("mock backend: image '" + image.id + "' has no content to embed");
}

EmbeddingVector MockBackend::embed_text(const PromptText& prompt) const {
    if (prompt.text.empty()) throw InputError("mock backend: empty prompt");
    return hash_embed("txt:" + prompt.text);
}

// ---------------------------------------------------------------------------
// ScriptedBackend

ScriptedBackend::ScriptedBackend(AttributeOntology ontology, GroundTruth truth, int dimension,
                                 uint64_t seed)
    : ontology_(std::move(ontology)), truth_(std::move(truth)), mock_(dimension, seed) {
    for (const auto& [image_id, attrs] : truth_) {
        for (const auto& [cat_name, surface] : attrs) {
            const auto& cat = ontology_.category(cat_name);
            bool found = false;
            for (const auto& p : cat.phrases) found = found || p.surface == surface;
            if (!found)
                throw ConfigError("scripted backend: image '" + image_id + "' references phrase '" +
                                  surface + "' not present in category '" + cat_name + "'");
        }
    }
}

EmbeddingVector ScriptedBackend::embed_image(const ImageRecord& image) const {
    auto it = truth_.find(image.id);
    if (it == truth_.end())
        throw InputError("scripted backend: no ground truth for image '" + image.id + "'");
    if (it->second.empty())
        throw InputError("scripted backend: empty ground truth for image '" + image.id + "'");
    EmbeddingVector sum = EmbeddingVector::Zero(mock_.dimension());
    for (const auto& [cat_name, surface] : it->second) {
        const auto& cat = ontology_.category(cat_name);
        sum += mock_.embed_text(to_prompt(cat, AttributePhrase{surface, {}}));
    }
    sum /= static_cast<double>(it->second.size());
    double n = sum.norm();
    if (n == 0.0) throw NumericError("scripted backend: degenerate embedding for '" + image.id + "'");
    return sum / n;
}

EmbeddingVector ScriptedBackend::embed_text(const PromptText& prompt) const {
    return mock_.embed_text(prompt);
}

ScriptedBackend::GroundTruth ScriptedBackend::load_script(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("scripted backend: cannot open script '" + path + "'");
    json doc;
    try {
        in >> doc;
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("scripted backend: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("scripted backend: script must be a JSON object");
    GroundTruth truth;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (!it.value().is_object())
            throw ParseError("scripted backend: entry '" + it.key() + "' must map categories to phrases");
        std::map<std::string, std::string> attrs;
        for (auto jt = it.value().begin(); jt != it.value().end(); ++jt)
            attrs[jt.key()] = jt.value().get<std::string>();
        truth[it.key()] = std::move(attrs);
    }
    return truth;
}

// ---------------------------------------------------------------------------
// PluginBackend

struct PluginBackend::Process {
    pid_t pid = -1;
    int to_child = -1;
    int from_child = -1;
    FILE* reader = nullptr;
    mutable std::mutex mutex;

    ~Process() {
        if (to_child >= 0) close(to_child);
        if (reader) fclose(reader);
        if (pid > 0) {
            int status = 0;
            waitpid(pid, &status, 0);
        }
    }
};

PluginBackend::PluginBackend(std::vector<std::string> command, int dimension)
    : dimension_(dimension), proc_(std::make_unique<Process>()) {
    if (command.empty()) throw ConfigError("plugin backend: empty command");
    if (dimension < 1) throw ConfigError("plugin backend: dimension must be >= 1");
    int in_pipe[2];   // parent -> child stdin
    int out_pipe[2];  // child stdout -> parent
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0)
        throw InputError("plugin backend: pipe() failed");
    pid_t pid = fork();
    if (pid < 0) throw InputError("plugin backend: fork() failed");
    if (pid == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        std::vector<char*> argv;
        for (auto& c : command) argv.push_back(c.data());
        argv.push_back(nullptr);
        execvp(argv[0], argv.data());
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    proc_->pid = pid;
    proc_->to_child = in_pipe[1];
    proc_->from_child = out_pipe[0];
    proc_->reader = fdopen(out_pipe[0], "r");
    if (!proc_->reader) throw InputError("plugin backend: fdopen() failed");
}

PluginBackend::~PluginBackend() = default;

EmbeddingVector PluginBackend::roundtrip(const std::string& kind, const std::string& id,
                                         const std::string& payload) const {
    json req;
    req["kind"] = kind;
    req["id"] = id;
    req["payload"] = payload;
    std::string line = req.dump() + "\n";

    std::lock_guard<std::mutex> lock(proc_->mutex);
    if (write(proc_->to_child, line.data(), line.size()) != static_cast<ssize_t>(line.size()))
        throw InputError("plugin backend: write to plugin failed for '" + id + "'");

    std::string resp_line;
    char buf[4096];
    while (fgets(buf, sizeof(buf), proc_->reader)) {
        resp_line += buf;
        if (!resp_line.empty() && resp_line.back() == '\n') break;
    }
    if (resp_line.empty()) throw InputError("plugin backend: plugin closed the stream");

    json resp;
    try {
        resp = json::parse(resp_line);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("plugin backend: bad response: ") + e.what());
    }
    if (resp.contains("error"))
        throw InputError("plugin backend: '" + id + "': " + resp["error"].get<std::string>());
    if (resp.value("id", "") != id)
        throw InputError("plugin backend: response id mismatch for '" + id + "'");
    auto vec = resp.at("vector").get<std::vector<double>>();
    if (static_cast<int>(vec.size()) != dimension_)
        throw InputError("plugin backend: expected " + std::to_string(dimension_) +
                         " floats, got " + std::to_string(vec.size()));
    EmbeddingVector v = Eigen::Map<EmbeddingVector>(vec.data(), vec.size());
    double n = v.norm();
    if (!(n > 0.0) || !v.allFinite())
        throw NumericError("plugin backend: non-finite or zero vector for '" + id + "'");
    return v / n;
}

EmbeddingVector PluginBackend::embed_image(const ImageRecord& image) const {
    std::string payload =
        !image.bytes.empty() ? base64_encode(image.bytes) : base64_encode(features_bytes(image.features));
    return roundtrip("image", image.id, payload);
}

EmbeddingVector PluginBackend::embed_text(const PromptText& prompt) const {
    if (prompt.text.empty()) throw InputError("plugin backend: empty prompt");
    return roundtrip("text", "text:" + prompt.text, prompt.text);
}

// ---------------------------------------------------------------------------

double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.size() != b.size())
        throw ContractError("cosine_similarity: dimension mismatch (" + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()) + ")");
    double na = a.norm();
    double nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw ContractError("cosine_similarity: zero vector");
    double s = a.dot(b) / (na * nb);
    // Clamp tiny numeric overshoot so results stay in [-1, 1].
    if (s > 1.0) s = 1.0;
    if (s < -1.0) s = -1.0;
    return s;
}

std::string base64_encode(std::string_view bytes) {
    static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    while (i + 3 <= bytes.size()) {
        uint32_t n = (static_cast<unsigned char>(bytes[i]) << 16) |
                     (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                     static_cast<unsigned char>(bytes[i + 2]);
        out.push_back(table[(n >> 18) & 63]);
        out.push_back(table[(n >> 12) & 63]);
        out.push_back(table[(n >> 6) & 63]);
        out.push_back(table[n & 63]);
        i += 3;
    }
    size_t rem = bytes.size() - i;
    if (rem == 1) {
        uint32_t n = static_cast<unsigned char>(bytes[i]) << 16;
        out.push_back(table[(n >> 18) & 63]);
        out.push_back(table[(n >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        uint32_t n = (static_cast<unsigned char>(bytes[i]) << 16) |
                     (static_cast<unsigned char>(bytes[i + 1]) << 8);
        out.push_back(table[(n >> 18) & 63]);
        out.push_back(table[(n >> 12) & 63]);
        out.push_back(table[(n >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

}  // namespace pretext
