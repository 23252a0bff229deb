#pragma once
#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pretext {

struct PersonRecord {
    std::string image_id;
    std::string image_ref;                                    // path (file mode), may be empty
    std::vector<double> features;                             // inline features (toy mode)
    std::string caption;
    std::optional<int64_t> identity;
    std::optional<std::map<std::string, std::string>> fills;  // slot -> surface metadata
    std::string split;                                        // "", "train", "query", "gallery"
};

struct DatasetManifest {
    std::vector<PersonRecord> records;

    size_t size() const { return records.size(); }
    DatasetManifest filter_split(const std::string& split) const;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);
std::string serialize_record(const PersonRecord& record);
PersonRecord parse_record(const std::string& line, size_t line_number);

// Word-level vocabulary with fixed special tokens. [MASK]'s id is stable for
// a given caption corpus because corpus tokens are added in sorted order.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kMask = 3;

    Vocabulary();
    static Vocabulary build(const std::vector<std::string>& captions);
    static Vocabulary from_tokens(std::vector<std::string> tokens);
    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    int id(const std::string& token) const;  // kUnk when absent
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    uint64_t content_hash() const;

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

struct TokenizedText {
    std::vector<int> ids;  // length exactly L
};

// Lowercased; runs of [a-z0-9] are words, any other non-space byte is its own
// token. Output is [CLS] + tokens, padded/truncated to length L.
std::vector<std::string> split_words(const std::string& text);
TokenizedText tokenize(const std::string& text, const Vocabulary& vocab, int length = 100);

// Seeded per-epoch shuffle into batches of exactly batch_size when drop_last
// is set (in-batch contrastive losses need full batches of negatives).
std::vector<std::vector<size_t>> epoch_batches(size_t n_records, size_t batch_size, uint64_t seed,
                                               size_t epoch, bool drop_last);

// Minimal binary PNM reader (P5 grayscale / P6 RGB) for file-path image mode.
struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> pixels;  // row-major, interleaved, scaled to [0, 1]
};

RawImage read_pnm(const std::string& path);

// Non-overlapping patch grid; each row is one flattened patch token.
Eigen::MatrixXd patch_tokens(const RawImage& image, int patch, bool hflip);

// Token rows for a record: inline features reshaped to grid_rows x (k/grid_rows)
// in toy mode, or PNM patches in file mode.
Eigen::MatrixXd record_tokens(const PersonRecord& record, int grid_rows, int patch, bool hflip);

}  // namespace pretext
