#include "pretext/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pretext/errors.hpp"
#include "pretext/rng.hpp"

namespace pretext {

using nlohmann::json;

DatasetManifest DatasetManifest::filter_split(const std::string& split) const {
    DatasetManifest out;
    for (const auto& r : records)
        if (r.split == split) out.records.push_back(r);
    return out;
}

std::string serialize_record(const PersonRecord& record) {
    json row;
    row["image_id"] = record.image_id;
    if (!record.image_ref.empty()) row["image_ref"] = record.image_ref;
    if (!record.features.empty()) row["features"] = record.features;
    row["caption"] = record.caption;
    if (record.identity) row["identity"] = *record.identity;
    if (record.fills) row["fills"] = *record.fills;
    if (!record.split.empty()) row["split"] = record.split;
    return row.dump();
}

PersonRecord parse_record(const std::string& line, size_t line_number) {
    json row;
    try {
        row = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError("manifest line " + std::to_string(line_number) + ": " + e.what());
    }
    if (!row.is_object())
        throw ParseError("manifest line " + std::to_string(line_number) + ": expected an object");
    if (!row.contains("image_id") || !row["image_id"].is_string())
        throw ParseError("manifest line " + std::to_string(line_number) + ": missing image_id");
    PersonRecord r;
    r.image_id = row["image_id"].get<std::string>();
    if (row.contains("image_ref")) r.image_ref = row["image_ref"].get<std::string>();
    if (row.contains("features")) r.features = row["features"].get<std::vector<double>>();
    if (!row.contains("caption") || !row["caption"].is_string())
        throw ParseError("manifest line " + std::to_string(line_number) + ": missing caption");
    r.caption = row["caption"].get<std::string>();
    if (row.contains("identity")) {
        int64_t y = row["identity"].get<int64_t>();
        if (y < 0)
            throw ParseError("manifest line " + std::to_string(line_number) +
                             ": identity must be >= 0");
        r.identity = y;
    }
    if (row.contains("fills")) r.fills = row["fills"].get<std::map<std::string, std::string>>();
    if (row.contains("split")) r.split = row["split"].get<std::string>();
    return r;
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("manifest: cannot open '" + path + "'");
    DatasetManifest manifest;
    std::set<std::string> seen;
    std::string line;
    size_t line_number = 0;
    while (std::getline(in, line)) {
        ++line_number;
        if (line.empty()) continue;
        PersonRecord r = parse_record(line, line_number);
        if (!seen.insert(r.image_id).second)
            throw ParseError("manifest line " + std::to_string(line_number) +
                             ": duplicate image_id '" + r.image_id + "'");
        manifest.records.push_back(std::move(r));
    }
    return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("manifest: cannot write '" + path + "'");
    for (const auto& r : manifest.records) out << serialize_record(r) << "\n";
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
    tokens_ = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};
    for (size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    for (auto& t : tokens) {
        if (v.index_.count(t)) continue;
        v.index_[t] = static_cast<int>(v.tokens_.size());
        v.tokens_.push_back(std::move(t));
    }
    return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& captions) {
    std::set<std::string> words;
    for (const auto& c : captions)
        for (auto& w : split_words(c)) words.insert(std::move(w));
    return from_tokens(std::vector<std::string>(words.begin(), words.end()));
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("vocabulary: cannot open '" + path + "'");
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    if (tokens.size() < 4 || tokens[0] != "[PAD]" || tokens[1] != "[UNK]" || tokens[2] != "[CLS]" ||
        tokens[3] != "[MASK]")
        throw ParseError("vocabulary: file must start with [PAD], [UNK], [CLS], [MASK]");
    return from_tokens({tokens.begin() + 4, tokens.end()});
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("vocabulary: cannot write '" + path + "'");
    for (const auto& t : tokens_) out << t << "\n";
}

int Vocabulary::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw ContractError("vocabulary: id out of range");
    return tokens_[static_cast<size_t>(id)];
}

uint64_t Vocabulary::content_hash() const {
    uint64_t h = 14695981039346656037ULL;
    for (const auto& t : tokens_) {
        h = fnv1a(t, h);
        h = fnv1a("\n", h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (char raw : text) {
        unsigned char c = static_cast<unsigned char>(raw);
        char lc = static_cast<char>(std::tolower(c));
        if (std::isalnum(c)) {
            word.push_back(lc);
        } else if (std::isspace(c)) {
            flush();
        } else {
            flush();
            out.push_back(std::string(1, lc));
        }
    }
    flush();
    return out;
}

TokenizedText tokenize(const std::string& text, const Vocabulary& vocab, int length) {
    if (length < 1) throw ContractError("tokenize: length must be >= 1");
    TokenizedText t;
    t.ids.reserve(static_cast<size_t>(length));
    t.ids.push_back(Vocabulary::kCls);
    for (const auto& w : split_words(text)) {
        if (static_cast<int>(t.ids.size()) >= length) break;
        t.ids.push_back(vocab.id(w));
    }
    while (static_cast<int>(t.ids.size()) < length) t.ids.push_back(Vocabulary::kPad);
    return t;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::vector<size_t>> epoch_batches(size_t n_records, size_t batch_size, uint64_t seed,
                                               size_t epoch, bool drop_last) {
    if (batch_size == 0) throw ConfigError("batch_iter: batch_size must be positive");
    if (batch_size > n_records)
        throw ConfigError("batch_iter: batch_size " + std::to_string(batch_size) +
                          " exceeds dataset size " + std::to_string(n_records));
    std::vector<size_t> order(n_records);
    for (size_t i = 0; i < n_records; ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x9e3779b9ULL + epoch));
    for (size_t i = n_records; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(i));
        std::swap(order[i - 1], order[j]);
    }
    std::vector<std::vector<size_t>> batches;
    for (size_t start = 0; start < n_records; start += batch_size) {
        size_t end = std::min(n_records, start + batch_size);
        if (drop_last && end - start < batch_size) break;
        batches.emplace_back(order.begin() + static_cast<long>(start),
                             order.begin() + static_cast<long>(end));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// Images

namespace {

int read_pnm_int(std::istream& in) {
    // Skips whitespace and '#' comments, per the PNM header grammar.
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value = -1;
    in >> value;
    if (!in || value < 0) throw ParseError("pnm: malformed header integer");
    return value;
}

}  // namespace

RawImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("pnm: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    int channels = 0;
    if (magic == "P5") channels = 1;
    else if (magic == "P6") channels = 3;
    else throw ParseError("pnm: '" + path + "' is not a binary P5/P6 file");
    RawImage img;
    img.channels = channels;
    img.width = read_pnm_int(in);
    img.height = read_pnm_int(in);
    int maxval = read_pnm_int(in);
    if (maxval <= 0 || maxval > 255) throw ParseError("pnm: unsupported maxval");
    in.get();  // single whitespace after header
    size_t count = static_cast<size_t>(img.width) * img.height * channels;
    std::string raw(count, '\0');
    in.read(raw.data(), static_cast<std::streamsize>(count));
    if (in.gcount() != static_cast<std::streamsize>(count))
        throw ParseError("pnm: truncated pixel data in '" + path + "'");
    img.pixels.resize(count);
    for (size_t i = 0; i < count; ++i)
        img.pixels[i] = static_cast<unsigned char>(raw[i]) / static_cast<double>(maxval);
    return img;
}

Eigen::MatrixXd patch_tokens(const RawImage& image, int patch, bool hflip) {
    if (patch < 1) throw ContractError("patch_tokens: patch must be >= 1");
    if (image.width < patch || image.height < patch)
        throw InputError("patch_tokens: image smaller than one patch");
    int gx = image.width / patch;
    int gy = image.height / patch;
    int dim = patch * patch * image.channels;
    Eigen::MatrixXd tokens(gy * gx, dim);
    for (int py = 0; py < gy; ++py) {
        for (int px = 0; px < gx; ++px) {
            int col = 0;
            for (int y = 0; y < patch; ++y) {
                for (int x = 0; x < patch; ++x) {
                    int ix = px * patch + x;
                    if (hflip) ix = image.width - 1 - ix;
                    int iy = py * patch + y;
                    size_t base = (static_cast<size_t>(iy) * image.width + ix) * image.channels;
                    for (int c = 0; c < image.channels; ++c)
                        tokens(py * gx + px, col++) = image.pixels[base + c];
                }
            }
        }
    }
    return tokens;
}

Eigen::MatrixXd record_tokens(const PersonRecord& record, int grid_rows, int patch, bool hflip) {
    if (!record.features.empty()) {
        int k = static_cast<int>(record.features.size());
        if (grid_rows < 1 || k % grid_rows != 0)
            throw ContractError("record_tokens: grid_rows must divide the feature length");
        int cols = k / grid_rows;
        Eigen::MatrixXd tokens(grid_rows, cols);
        for (int r = 0; r < grid_rows; ++r)
            for (int c = 0; c < cols; ++c) tokens(r, c) = record.features[static_cast<size_t>(r) * cols + c];
        return tokens;
    }
    if (!record.image_ref.empty()) return patch_tokens(read_pnm(record.image_ref), patch, hflip);
    throw InputError("record '" + record.image_id + "' has neither features nor image_ref");
}

}  // namespace pretext
